#include "bevkit/robustness.hpp"

#include <cstdio>
#include <fstream>

#include "bevkit/common.hpp"

namespace bevkit {

namespace {

struct Sweep {
    DegradationKind kind;
    const std::vector<double>* magnitudes;
};

void append_mode_rows(RobustnessReport& report, const Pipeline& pipe,
                      const std::vector<Scene>& eval_scenes,
                      const RobustnessConfig& rcfg, const std::string& run_id) {
    const std::string mode = mode_name(pipe.config().mode);
    const Sweep sweeps[] = {
        {DegradationKind::OneHotNoise, &rcfg.one_hot_magnitudes},
        {DegradationKind::RandomNoise, &rcfg.random_magnitudes},
        {DegradationKind::SpatialMisalignment, &rcfg.misalignment_magnitudes},
    };
    const Metrics clean = pipe.evaluate(eval_scenes);
    report.metrics.push_back(
        {run_id, mode, degradation_name(DegradationKind::None), 0.0,
         clean.mask_iou, clean.center_mae_m});
    for (const auto& sweep : sweeps) {
        for (double mag : *sweep.magnitudes) {
            const Degradation degr{sweep.kind, mag, rcfg.degradation_seed};
            const Metrics m = pipe.evaluate(eval_scenes, degr);
            report.metrics.push_back({run_id, mode, degradation_name(sweep.kind),
                                      mag, m.mask_iou, m.center_mae_m});
            if (mag != 0.0) {
                const double denom = std::max(clean.mask_iou, 1e-12);
                report.drops.push_back({run_id, mode, degradation_name(sweep.kind),
                                        mag, clean.mask_iou, m.mask_iou,
                                        (clean.mask_iou - m.mask_iou) / denom});
            }
        }
    }
}

}  // namespace

RobustnessReport robustness_experiment(const PipelineConfig& lidar_centric_cfg,
                                       const PipelineConfig& naive_cfg,
                                       const SceneGenConfig& scene_cfg,
                                       const RobustnessConfig& rcfg,
                                       const std::string& run_id) {
    require(lidar_centric_cfg.mode == PipelineMode::LidarCentric,
            "robustness_experiment: first config must be lidar_centric");
    require(naive_cfg.mode == PipelineMode::NaiveConcat,
            "robustness_experiment: second config must be naive_concat");
    require(rcfg.train_scenes >= 1 && rcfg.eval_scenes >= 1,
            "robustness_experiment: scene counts must be positive");

    const auto train_scenes =
        generate_scenes(rcfg.data_seed, rcfg.train_scenes, scene_cfg);
    const auto eval_scenes = generate_scenes(
        rcfg.data_seed + 0x100000ULL, rcfg.eval_scenes, scene_cfg);

    RobustnessReport report;
    Pipeline lc(lidar_centric_cfg);
    lc.train(train_scenes);
    append_mode_rows(report, lc, eval_scenes, rcfg, run_id);

    Pipeline naive(naive_cfg);
    naive.train(train_scenes);
    append_mode_rows(report, naive, eval_scenes, rcfg, run_id);
    return report;
}

std::string csv_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricsRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "write_metrics_csv: cannot open " + path.string());
    out << "run_id,mode,degradation,magnitude,mask_iou,center_mae_m\n";
    for (const auto& r : rows) {
        out << r.run_id << ',' << r.mode << ',' << r.degradation << ','
            << csv_number(r.magnitude) << ',' << csv_number(r.mask_iou) << ','
            << csv_number(r.center_mae_m) << '\n';
    }
    require(out.good(), "write_metrics_csv: write failed for " + path.string());
}

void write_drops_csv(const std::filesystem::path& path,
                     const std::vector<DropRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "write_drops_csv: cannot open " + path.string());
    out << "run_id,mode,degradation,magnitude,clean_mask_iou,"
           "degraded_mask_iou,rel_drop_mask_iou\n";
    for (const auto& r : rows) {
        out << r.run_id << ',' << r.mode << ',' << r.degradation << ','
            << csv_number(r.magnitude) << ',' << csv_number(r.clean_mask_iou)
            << ',' << csv_number(r.degraded_mask_iou) << ','
            << csv_number(r.rel_drop_mask_iou) << '\n';
    }
    require(out.good(), "write_drops_csv: write failed for " + path.string());
}

}  // namespace bevkit
