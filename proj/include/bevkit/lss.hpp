#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>

#include "bevkit/geometry.hpp"
#include "bevkit/serialize.hpp"
#include "bevkit/tensor.hpp"

namespace bevkit {

/// Pinhole camera with a rigid camera-to-ego transform. Row-major 3x3
/// intrinsics; 4x4 extrinsics whose rotation block must be orthonormal.
struct CameraModel {
    std::array<double, 9> intrinsics{};
    std::array<double, 16> cam_to_ego{};
    std::int64_t height = 0;
    std::int64_t width = 0;

    void validate() const;
    /// Ego-frame position at continuous pixel coordinate (u,v), depth d along
    /// the camera ray. Callers pass u+0.5, v+0.5 for pixel centers.
    std::array<double, 3> unproject(double u, double v, double d) const;
};

struct DepthBins {
    double d_min = 1.0;
    double d_max = 40.0;
    std::int64_t num_bins = 32;

    void validate() const;
    double center(std::int64_t i) const;
};

struct DepthHead {
    Tensor k;  // [D, C_i, 1, 1]
    Tensor b;  // [D]
};
DepthHead make_depth_head(std::int64_t cin, std::int64_t num_bins,
                          std::mt19937_64& rng);

/// Initial read of a metric depth channel: logits start as a gaussian
/// posterior over bins, exp(-sharpness * (depth - center)^2), which a 1x1
/// conv expresses exactly because the depth-squared term is shared by every
/// bin. `input_scale` converts the channel value back to metric depth.
/// Training refines the head from there.
struct DepthPrior {
    std::int64_t channel = -1;  // input channel holding scaled metric depth
    double input_scale = 1.0;
    double sharpness = 0.5;  // inverse variance, metric units
};
DepthHead make_depth_head(std::int64_t cin, const DepthBins& bins,
                          const DepthPrior& prior, std::mt19937_64& rng);
void register_depth_head(ParamRegistry& reg, const std::string& prefix,
                         const DepthHead& h);

/// image_feat [C_i,H,W] -> raw depth logits [D,H,W].
Tensor predict_depth_logits(const DepthHead& head, const Tensor& image_feat);

/// logits [D,H,W] -> per-pixel softmax over the depth axis.
Tensor softmax_depth(const Tensor& logits);

/// image_feat [C_i,H,W] -> [D,H,W]; softmax over depth per pixel.
Tensor predict_depth_distribution(const DepthHead& head, const Tensor& image_feat);

/// Table mapping each (bin, pixel) to its BEV cell (y*xbins+x), -1 outside.
/// Depends only on geometry, so callers can build it once per camera.
std::vector<std::int32_t> splat_cell_table(const CameraModel& cam,
                                           const DepthBins& bins,
                                           const VoxelizationConfig& grid);

/// Outer-product splat: every (pixel, bin) adds feature*prob into its cell.
Tensor lift_splat(const Tensor& image_feat, const Tensor& depth_dist,
                  const std::vector<std::int32_t>& cell_table,
                  const VoxelizationConfig& grid);

}  // namespace bevkit
