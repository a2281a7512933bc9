#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "bevkit/pipeline.hpp"

namespace bevkit {

/// One evaluated (mode, degradation, magnitude) point.
struct MetricsRow {
    std::string run_id;
    std::string mode;
    std::string degradation;
    double magnitude = 0.0;
    double mask_iou = 0.0;
    double center_mae_m = 0.0;
};

/// Degraded point paired with the clean reference of the same mode.
struct DropRow {
    std::string run_id;
    std::string mode;
    std::string degradation;
    double magnitude = 0.0;
    double clean_mask_iou = 0.0;
    double degraded_mask_iou = 0.0;
    double rel_drop_mask_iou = 0.0;  // (clean - degraded) / max(clean, 1e-12)
};

struct RobustnessConfig {
    std::int64_t train_scenes = 24;
    std::int64_t eval_scenes = 12;
    std::uint64_t data_seed = 7;
    std::uint64_t degradation_seed = 99;
    std::vector<double> one_hot_magnitudes{0.0, 0.25, 0.5, 1.0};
    std::vector<double> random_magnitudes{0.0, 0.5, 1.0, 2.0};
    std::vector<double> misalignment_magnitudes{0.0, 1.0, 2.0, 4.0};
};

struct RobustnessReport {
    std::vector<MetricsRow> metrics;  // includes magnitude-0 sweep points
    std::vector<DropRow> drops;       // nonzero magnitudes only
};

/// Trains the fusion pipeline and the plain-concatenation baseline on the
/// same generated scenes, then evaluates both across the degradation sweep
/// on held-out scenes. Both configs must agree on grid and image geometry.
RobustnessReport robustness_experiment(const PipelineConfig& lidar_centric_cfg,
                                       const PipelineConfig& naive_cfg,
                                       const SceneGenConfig& scene_cfg,
                                       const RobustnessConfig& rcfg,
                                       const std::string& run_id);

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricsRow>& rows);
void write_drops_csv(const std::filesystem::path& path,
                     const std::vector<DropRow>& rows);

/// Fixed-precision CSV float so files are byte-stable across runs.
std::string csv_number(double v);

}  // namespace bevkit
