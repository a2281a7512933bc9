#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bevkit/common.hpp"
#include "bevkit/pipeline.hpp"
#include "bevkit/robustness.hpp"
#include "bevkit/selftest.hpp"

namespace fs = std::filesystem;
using namespace bevkit;

namespace {

struct RunOpts {
    std::string mode = "lidar_centric";
    bool use_svdb = true;
    bool use_sbdb = true;
    std::int64_t stages = 2;
    std::int64_t blocks_per_stage = 2;
    double tau = 0.4;
    std::int64_t groups = 4;
    std::int64_t train_steps = 200;
    std::int64_t batch_size = 4;
    double lr = 5e-3;
    std::uint64_t seed = 1;
    std::uint64_t data_seed = 7;
    std::int64_t train_scenes = 32;
    std::int64_t eval_scenes = 16;
    std::int64_t count = 4;
    std::int64_t min_boxes = 2;
    std::int64_t max_boxes = 4;
    std::string out_dir = "out";
    std::string checkpoint;
    std::string degradation = "none";
    double magnitude = 0.0;
    std::uint64_t degradation_seed = 99;
    double mod_threshold = 0.0;
    std::int64_t cell_x = -1;
    std::int64_t cell_y = -1;
    int threads = 1;
};

struct SubCmd {
    CLI::App* app = nullptr;
    CLI::Option* svdb_opt = nullptr;
    CLI::Option* sbdb_opt = nullptr;
};

SubCmd add_common(CLI::App& parent, const std::string& name,
                  const std::string& desc, RunOpts& o) {
    SubCmd sc;
    CLI::App* s = parent.add_subcommand(name, desc);
    s->set_config("--config", "", "structured-text config file (key=value)");
    s->allow_config_extras(CLI::config_extras_mode::error);
    s->add_option("--mode", o.mode, "lidar_centric or naive_concat")
        ->check(CLI::IsMember({"lidar_centric", "naive_concat"}));
    sc.svdb_opt = s->add_option("--use-svdb", o.use_svdb,
                                "enable the sparse dilation module");
    sc.sbdb_opt = s->add_option("--use-sbdb", o.use_sbdb,
                                "enable the deformable fusion blocks");
    s->add_option("--stages", o.stages, "trunk stages");
    s->add_option("--blocks-per-stage", o.blocks_per_stage, "blocks per stage");
    s->add_option("--tau", o.tau, "foreground mask threshold");
    s->add_option("--groups", o.groups, "deformable conv groups");
    s->add_option("--train-steps", o.train_steps, "optimizer steps");
    s->add_option("--batch-size", o.batch_size, "scenes per step");
    s->add_option("--lr", o.lr, "AdamW learning rate");
    s->add_option("--seed", o.seed, "parameter init seed")->envname("RUN_SEED");
    s->add_option("--data-seed", o.data_seed, "scene generation seed");
    s->add_option("--train-scenes", o.train_scenes, "training scene count");
    s->add_option("--eval-scenes", o.eval_scenes, "held-out scene count");
    s->add_option("--count", o.count, "scene file count (gen-scenes)");
    s->add_option("--min-boxes", o.min_boxes, "minimum boxes per scene");
    s->add_option("--max-boxes", o.max_boxes, "maximum boxes per scene");
    s->add_option("--out-dir", o.out_dir, "output directory");
    s->add_option("--checkpoint", o.checkpoint, "checkpoint to load");
    s->add_option("--degradation", o.degradation,
                  "none|one_hot_noise|random_noise|spatial_misalignment");
    s->add_option("--magnitude", o.magnitude, "degradation magnitude");
    s->add_option("--degradation-seed", o.degradation_seed, "degradation rng seed");
    s->add_option("--mod-threshold", o.mod_threshold,
                  "minimum modulation for exported sampling points");
    s->add_option("--cell-x", o.cell_x, "query cell x (default grid center)");
    s->add_option("--cell-y", o.cell_y, "query cell y (default grid center)");
    s->add_option("--threads", o.threads, "worker threads (1 = reproducible)");
    sc.app = s;
    return sc;
}

PipelineConfig pipeline_cfg(const RunOpts& o, const SubCmd& sc) {
    PipelineConfig c;
    c.mode = parse_mode(o.mode);
    const bool lc = c.mode == PipelineMode::LidarCentric;
    c.use_svdb = sc.svdb_opt->count() > 0 ? o.use_svdb : lc;
    c.use_sbdb = sc.sbdb_opt->count() > 0 ? o.use_sbdb : lc;
    c.stages = o.stages;
    c.blocks_per_stage = o.blocks_per_stage;
    c.tau = o.tau;
    c.groups = o.groups;
    c.train_steps = o.train_steps;
    c.batch_size = o.batch_size;
    c.opt.lr = o.lr;
    c.seed = o.seed;
    c.validate();
    return c;
}

SceneGenConfig scene_cfg(const RunOpts& o) {
    SceneGenConfig c;
    c.min_boxes = o.min_boxes;
    c.max_boxes = o.max_boxes;
    return c;
}

std::string num(double v) { return csv_number(v); }

fs::path prepare_out_dir(const RunOpts& o, const SubCmd& sc) {
    fs::path dir(o.out_dir);
    fs::create_directories(dir);
    std::ofstream cfg(dir / "resolved_config.toml", std::ios::binary);
    require(cfg.good(), "cannot write resolved config under " + o.out_dir);
    const bool lc = parse_mode(o.mode) == PipelineMode::LidarCentric;
    const bool svdb = sc.svdb_opt->count() > 0 ? o.use_svdb : lc;
    const bool sbdb = sc.sbdb_opt->count() > 0 ? o.use_sbdb : lc;
    cfg << "command = \"" << sc.app->get_name() << "\"\n"
        << "mode = \"" << o.mode << "\"\n"
        << "use_svdb = " << (svdb ? "true" : "false") << "\n"
        << "use_sbdb = " << (sbdb ? "true" : "false") << "\n"
        << "stages = " << o.stages << "\n"
        << "blocks_per_stage = " << o.blocks_per_stage << "\n"
        << "tau = " << num(o.tau) << "\n"
        << "groups = " << o.groups << "\n"
        << "train_steps = " << o.train_steps << "\n"
        << "batch_size = " << o.batch_size << "\n"
        << "lr = " << num(o.lr) << "\n"
        << "seed = " << o.seed << "\n"
        << "data_seed = " << o.data_seed << "\n"
        << "train_scenes = " << o.train_scenes << "\n"
        << "eval_scenes = " << o.eval_scenes << "\n"
        << "count = " << o.count << "\n"
        << "min_boxes = " << o.min_boxes << "\n"
        << "max_boxes = " << o.max_boxes << "\n"
        << "checkpoint = \"" << o.checkpoint << "\"\n"
        << "degradation = \"" << o.degradation << "\"\n"
        << "magnitude = " << num(o.magnitude) << "\n"
        << "degradation_seed = " << o.degradation_seed << "\n"
        << "mod_threshold = " << num(o.mod_threshold) << "\n"
        << "threads = " << o.threads << "\n";
    return dir;
}

struct SvgPoint {
    double x = 0.0;
    double y = 0.0;
    double radius = 3.0;
    std::string color = "#444444";
    double opacity = 1.0;
};

/// Minimal scatter plot; data y grows upward, SVG y grows downward.
void write_svg_scatter(const fs::path& path, const std::vector<SvgPoint>& points,
                       double min_x, double min_y, double max_x, double max_y) {
    const double side = 640.0, margin = 20.0;
    const double spanx = std::max(max_x - min_x, 1e-9);
    const double spany = std::max(max_y - min_y, 1e-9);
    auto px = [&](double x) {
        return margin + (x - min_x) / spanx * (side - 2 * margin);
    };
    auto py = [&](double y) {
        return side - margin - (y - min_y) / spany * (side - 2 * margin);
    };
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "cannot write " + path.string());
    char buf[256];
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"640\" "
           "viewBox=\"0 0 640 640\">\n";
    out << "<rect width=\"640\" height=\"640\" fill=\"white\" stroke=\"#999999\"/>\n";
    for (const auto& p : points) {
        std::snprintf(buf, sizeof(buf),
                      "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"%.2f\" fill=\"%s\" "
                      "fill-opacity=\"%.3f\"/>\n",
                      px(p.x), py(p.y), p.radius, p.color.c_str(), p.opacity);
        out << buf;
    }
    out << "</svg>\n";
    require(out.good(), "write failed for " + path.string());
}

void run_gen_scenes(const RunOpts& o, const SubCmd& sc) {
    const auto dir = prepare_out_dir(o, sc);
    const auto cfg = scene_cfg(o);
    for (std::int64_t i = 0; i < o.count; ++i) {
        const Scene scene = generate_scene(o.seed + std::uint64_t(i), cfg);
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%04lld.json",
                      static_cast<long long>(i));
        save_scene_json(scene, dir / name);
    }
    std::cout << "wrote " << o.count << " scenes under " << o.out_dir << "\n";
}

void run_train(const RunOpts& o, const SubCmd& sc) {
    const auto dir = prepare_out_dir(o, sc);
    const auto pcfg = pipeline_cfg(o, sc);
    const auto scenes = generate_scenes(o.data_seed, o.train_scenes, scene_cfg(o));
    Pipeline pipe(pcfg);
    if (!o.checkpoint.empty()) pipe.params().load_checkpoint(o.checkpoint);
    const TrainResult res = pipe.train(scenes);

    pipe.params().save_checkpoint(dir / "checkpoint.bin");
    {
        std::ofstream curve(dir / "loss_curve.csv", std::ios::binary);
        require(curve.good(), "cannot write loss curve");
        curve << "step,loss\n";
        for (std::size_t i = 0; i < res.loss_curve.size(); ++i) {
            curve << i << ',' << num(res.loss_curve[i]) << '\n';
        }
    }
    const Metrics m = pipe.evaluate(scenes);
    write_metrics_csv(dir / "metrics.csv",
                      {{"train", mode_name(pcfg.mode), "none", 0.0, m.mask_iou,
                        m.center_mae_m}});
    std::cout << "trained " << mode_name(pcfg.mode) << " for " << pcfg.train_steps
              << " steps on " << scenes.size() << " scenes\n";
    std::cout << "mask focal " << num(res.initial_mask_focal) << " -> "
              << num(res.final_mask_focal) << "\n";
    std::cout << "train mask_iou " << num(m.mask_iou) << " center_mae_m "
              << num(m.center_mae_m) << "\n";
    std::cout << "wrote " << (dir / "checkpoint.bin").string() << "\n";
}

void run_eval(const RunOpts& o, const SubCmd& sc) {
    const auto dir = prepare_out_dir(o, sc);
    const auto pcfg = pipeline_cfg(o, sc);
    const auto scenes = generate_scenes(o.data_seed + 0x100000ULL, o.eval_scenes,
                                        scene_cfg(o));
    Pipeline pipe(pcfg);
    if (!o.checkpoint.empty()) pipe.params().load_checkpoint(o.checkpoint);
    const Degradation degr{parse_degradation(o.degradation), o.magnitude,
                           o.degradation_seed};
    const Metrics m = pipe.evaluate(scenes, degr);
    write_metrics_csv(dir / "metrics.csv",
                      {{"eval", mode_name(pcfg.mode), o.degradation, o.magnitude,
                        m.mask_iou, m.center_mae_m}});
    std::cout << "eval " << mode_name(pcfg.mode) << " degradation " << o.degradation
              << " magnitude " << num(o.magnitude) << "\n";
    std::cout << "mask_iou " << num(m.mask_iou) << " center_mae_m "
              << num(m.center_mae_m) << "\n";
}

void run_robustness(const RunOpts& o, const SubCmd& sc) {
    const auto dir = prepare_out_dir(o, sc);
    PipelineConfig lc = pipeline_cfg(o, sc);
    require(lc.mode == PipelineMode::LidarCentric,
            "robustness compares against lidar_centric; set --mode lidar_centric");
    PipelineConfig naive = lc;
    naive.mode = PipelineMode::NaiveConcat;
    naive.use_svdb = false;
    naive.use_sbdb = false;

    RobustnessConfig rcfg;
    rcfg.train_scenes = o.train_scenes;
    rcfg.eval_scenes = o.eval_scenes;
    rcfg.data_seed = o.data_seed;
    rcfg.degradation_seed = o.degradation_seed;
    const auto report =
        robustness_experiment(lc, naive, scene_cfg(o), rcfg, "robustness");
    write_metrics_csv(dir / "metrics.csv", report.metrics);
    write_drops_csv(dir / "drops.csv", report.drops);

    const std::pair<std::string, double> defaults[] = {
        {"one_hot_noise", 0.5}, {"random_noise", 1.0}, {"spatial_misalignment", 2.0}};
    for (const auto& [kind, mag] : defaults) {
        double lc_drop = 0.0, naive_drop = 0.0;
        for (const auto& r : report.drops) {
            if (r.degradation == kind && r.magnitude == mag) {
                (r.mode == "lidar_centric" ? lc_drop : naive_drop) =
                    r.rel_drop_mask_iou;
            }
        }
        std::cout << kind << " rel drop: lidar_centric " << num(lc_drop)
                  << " naive_concat " << num(naive_drop) << "\n";
    }
    std::cout << "wrote " << (dir / "metrics.csv").string() << " and "
              << (dir / "drops.csv").string() << "\n";
}

void run_viz_sampling(const RunOpts& o, const SubCmd& sc) {
    const auto dir = prepare_out_dir(o, sc);
    const auto pcfg = pipeline_cfg(o, sc);
    require(pcfg.mode == PipelineMode::LidarCentric && pcfg.use_sbdb,
            "viz-sampling needs the deformable fusion blocks "
            "(lidar_centric with use_sbdb)");
    Pipeline pipe(pcfg);
    if (!o.checkpoint.empty()) pipe.params().load_checkpoint(o.checkpoint);
    const Scene scene = generate_scene(o.data_seed, scene_cfg(o));
    const auto out = pipe.forward(scene);

    const auto bins = pcfg.grid.bins();
    const std::int64_t qx = o.cell_x >= 0 ? o.cell_x : bins[0] / 2;
    const std::int64_t qy = o.cell_y >= 0 ? o.cell_y : bins[1] / 2;

    std::ofstream csv(dir / "sampling_locations.csv", std::ios::binary);
    require(csv.good(), "cannot write sampling_locations.csv");
    csv << "stage,block,group,k,x,y,modulation\n";
    std::vector<SvgPoint> pts;
    const char* palette[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a",
                             "#66a61e", "#e6ab02", "#a6761d", "#666666"};
    for (std::size_t i = 0; i < out.fields.size(); ++i) {
        const auto stage = std::int64_t(i) / pcfg.blocks_per_stage;
        const auto block = std::int64_t(i) % pcfg.blocks_per_stage;
        const auto locs =
            export_sampling_locations(out.fields[i], pipe.sbdb_blocks()[i].dcn,
                                      {qx, qy}, o.mod_threshold);
        for (const auto& l : locs) {
            csv << stage << ',' << block << ',' << l.group << ',' << l.k << ','
                << num(l.x) << ',' << num(l.y) << ',' << num(l.modulation) << '\n';
            pts.push_back({l.x, l.y, 4.0, palette[std::size_t(l.group) % 8],
                           std::clamp(0.25 + l.modulation, 0.0, 1.0)});
        }
    }
    pts.push_back({double(qx), double(qy), 6.0, "#000000", 1.0});
    write_svg_scatter(dir / "sampling_locations.svg", pts, double(qx) - 8.0,
                      double(qy) - 8.0, double(qx) + 8.0, double(qy) + 8.0);
    std::cout << "exported " << pts.size() - 1 << " sampling points at cell ("
              << qx << "," << qy << ") under " << o.out_dir << "\n";
}

void run_viz_occupancy(const RunOpts& o, const SubCmd& sc) {
    const auto dir = prepare_out_dir(o, sc);
    const auto pcfg = pipeline_cfg(o, sc);
    require(pcfg.mode == PipelineMode::LidarCentric && pcfg.use_svdb,
            "viz-occupancy needs the dilation module "
            "(lidar_centric with use_svdb)");
    Pipeline pipe(pcfg);
    if (!o.checkpoint.empty()) pipe.params().load_checkpoint(o.checkpoint);
    const Scene scene = generate_scene(o.data_seed, scene_cfg(o));
    const auto out = pipe.forward(scene);
    require(out.svdb.has_value(), "forward produced no dilation output");

    std::ofstream csv(dir / "occupancy.csv", std::ios::binary);
    require(csv.good(), "cannot write occupancy.csv");
    csv << "ix,iy,state\n";
    std::vector<SvgPoint> pts;
    const auto& set = out.svdb->dilation.dilated;
    for (std::size_t i = 0; i < set.coords.size(); ++i) {
        const bool fresh = out.svdb->dilation.is_new[i] != 0;
        csv << set.coords[i][0] << ',' << set.coords[i][1] << ','
            << (fresh ? "dilated" : "original") << '\n';
        pts.push_back({double(set.coords[i][0]), double(set.coords[i][1]), 3.0,
                       fresh ? "#2ca02c" : "#555555", 1.0});
    }
    const auto bins = pcfg.grid.bins();
    write_svg_scatter(dir / "occupancy.svg", pts, 0.0, 0.0, double(bins[0]),
                      double(bins[1]));
    std::cout << "exported " << pts.size() << " occupied cells ("
              << out.svdb->dilation.dilated.coords.size() -
                     std::size_t(std::count(out.svdb->dilation.is_new.begin(),
                                            out.svdb->dilation.is_new.end(), 1))
              << " original) under " << o.out_dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LiDAR-centric BEV fusion toolkit"};
    app.require_subcommand(1);

    RunOpts o;
    SubCmd gen = add_common(app, "gen-scenes", "write synthetic scene JSON files", o);
    SubCmd train = add_common(app, "train", "train a pipeline and checkpoint it", o);
    SubCmd eval = add_common(app, "eval", "evaluate a pipeline on held-out scenes", o);
    SubCmd robust = add_common(
        app, "robustness", "train both modes and sweep image degradations", o);
    SubCmd vsamp = add_common(
        app, "viz-sampling", "export deformable sampling locations (CSV + SVG)", o);
    SubCmd vocc = add_common(
        app, "viz-occupancy", "export original vs dilated occupancy (CSV + SVG)", o);
    CLI::App* selftest =
        app.add_subcommand("selftest", "run the oracle and gradient smoke battery");
    int selftest_threads = 1;
    selftest->add_option("--threads", selftest_threads,
                         "worker threads (1 = reproducible)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help() << std::flush;
        return 2;
    }

    try {
        if (*selftest) {
            set_max_threads(selftest_threads);
            const SelfTestResult res = run_selftest();
            for (const auto& line : res.lines) std::cout << line << "\n";
            std::cout << res.passed << " passed, " << res.failed << " failed\n";
            return res.ok() ? 0 : 1;
        }
        set_max_threads(o.threads);
        if (*gen.app) run_gen_scenes(o, gen);
        if (*train.app) run_train(o, train);
        if (*eval.app) run_eval(o, eval);
        if (*robust.app) run_robustness(o, robust);
        if (*vsamp.app) run_viz_sampling(o, vsamp);
        if (*vocc.app) run_viz_occupancy(o, vocc);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
