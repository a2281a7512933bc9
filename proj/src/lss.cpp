#include "bevkit/lss.hpp"

#include <cmath>

#include "bevkit/ops.hpp"

namespace bevkit {

namespace {

// Inverse of a row-major 3x3 matrix by cofactors.
std::array<double, 9> invert3x3(const std::array<double, 9>& m) {
    const double a = m[0], b = m[1], c = m[2];
    const double d = m[3], e = m[4], f = m[5];
    const double g = m[6], h = m[7], i = m[8];
    const double det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
    require(std::abs(det) > 1e-12, "camera intrinsics are singular");
    const double s = 1.0 / det;
    return {(e * i - f * h) * s, (c * h - b * i) * s, (b * f - c * e) * s,
            (f * g - d * i) * s, (a * i - c * g) * s, (c * d - a * f) * s,
            (d * h - e * g) * s, (b * g - a * h) * s, (a * e - b * d) * s};
}

}  // namespace

void CameraModel::validate() const {
    require(height >= 1 && width >= 1, "camera image extents must be positive");
    (void)invert3x3(intrinsics);
    // Rotation block orthonormality: R R^T = I within 1e-9.
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) {
            double dot = 0.0;
            for (int k = 0; k < 3; ++k) {
                dot += cam_to_ego[static_cast<std::size_t>(r * 4 + k)] *
                       cam_to_ego[static_cast<std::size_t>(c * 4 + k)];
            }
            const double expect = r == c ? 1.0 : 0.0;
            require(std::abs(dot - expect) < 1e-9,
                    "camera extrinsic rotation is not orthonormal");
        }
    }
    require(cam_to_ego[12] == 0.0 && cam_to_ego[13] == 0.0 &&
                cam_to_ego[14] == 0.0 && cam_to_ego[15] == 1.0,
            "camera extrinsics must be a rigid transform");
}

std::array<double, 3> CameraModel::unproject(double u, double v, double d) const {
    const auto kinv = invert3x3(intrinsics);
    const double rx = kinv[0] * u + kinv[1] * v + kinv[2];
    const double ry = kinv[3] * u + kinv[4] * v + kinv[5];
    const double rz = kinv[6] * u + kinv[7] * v + kinv[8];
    const double cx = rx * d, cy = ry * d, cz = rz * d;
    std::array<double, 3> ego{};
    for (int r = 0; r < 3; ++r) {
        ego[static_cast<std::size_t>(r)] =
            cam_to_ego[static_cast<std::size_t>(r * 4 + 0)] * cx +
            cam_to_ego[static_cast<std::size_t>(r * 4 + 1)] * cy +
            cam_to_ego[static_cast<std::size_t>(r * 4 + 2)] * cz +
            cam_to_ego[static_cast<std::size_t>(r * 4 + 3)];
    }
    return ego;
}

void DepthBins::validate() const {
    require(d_min > 0.0, "depth range must start in front of the camera");
    require(d_max > d_min, "depth range is empty");
    require(num_bins >= 1, "need at least one depth bin");
}

double DepthBins::center(std::int64_t i) const {
    require(i >= 0 && i < num_bins, "depth bin index out of range");
    const double step = (d_max - d_min) / static_cast<double>(num_bins);
    return d_min + (static_cast<double>(i) + 0.5) * step;
}

DepthHead make_depth_head(std::int64_t cin, std::int64_t num_bins,
                          std::mt19937_64& rng) {
    require(cin >= 1 && num_bins >= 1, "make_depth_head: invalid widths");
    const double stddev = 1.0 / std::sqrt(static_cast<double>(cin));
    Tensor t = Tensor::randn({num_bins, cin, 1, 1}, rng, stddev);
    DepthHead h;
    h.k = Tensor::param(t.shape(), {t.data().begin(), t.data().end()});
    h.b = Tensor::param({num_bins},
                        std::vector<double>(static_cast<std::size_t>(num_bins), 0.0));
    return h;
}

DepthHead make_depth_head(std::int64_t cin, const DepthBins& bins,
                          const DepthPrior& prior, std::mt19937_64& rng) {
    bins.validate();
    require(cin >= 1, "make_depth_head: invalid widths");
    require(prior.channel >= 0 && prior.channel < cin,
            "make_depth_head: depth prior channel out of range");
    require(prior.input_scale > 0.0 && prior.sharpness > 0.0,
            "make_depth_head: depth prior needs positive scale and sharpness");
    // Non-depth channels start near zero so the gaussian read dominates the
    // initial posterior.
    Tensor t = Tensor::randn({bins.num_bins, cin, 1, 1}, rng, 0.01);
    std::vector<double> k(t.data().begin(), t.data().end());
    std::vector<double> b(static_cast<std::size_t>(bins.num_bins), 0.0);
    for (std::int64_t i = 0; i < bins.num_bins; ++i) {
        const double c = bins.center(i);
        k[static_cast<std::size_t>(i * cin + prior.channel)] =
            2.0 * prior.sharpness * c * prior.input_scale;
        b[static_cast<std::size_t>(i)] = -prior.sharpness * c * c;
    }
    DepthHead h;
    h.k = Tensor::param(t.shape(), std::move(k));
    h.b = Tensor::param({bins.num_bins}, std::move(b));
    return h;
}

void register_depth_head(ParamRegistry& reg, const std::string& prefix,
                         const DepthHead& h) {
    reg.add(prefix + ".k", h.k);
    reg.add(prefix + ".b", h.b);
}

Tensor predict_depth_logits(const DepthHead& head, const Tensor& image_feat) {
    require(image_feat.rank() == 3, "predict_depth_logits: expects [C,H,W]");
    return add_bias_channels(conv2d(image_feat, head.k, 1, 0), head.b);
}

Tensor softmax_depth(const Tensor& logits) {
    require(logits.rank() == 3, "softmax_depth: expects [D,H,W]");
    const auto d = logits.extent(0), h = logits.extent(1), w = logits.extent(2);
    Tensor rows = reshape(permute3(logits, {1, 2, 0}), {h * w, d});
    Tensor dist = softmax_rows(rows);
    return permute3(reshape(dist, {h, w, d}), {2, 0, 1});
}

Tensor predict_depth_distribution(const DepthHead& head, const Tensor& image_feat) {
    return softmax_depth(predict_depth_logits(head, image_feat));
}

std::vector<std::int32_t> splat_cell_table(const CameraModel& cam,
                                           const DepthBins& bins,
                                           const VoxelizationConfig& grid) {
    cam.validate();
    bins.validate();
    const auto gbins = grid.bins();
    const auto xbins = gbins[0], ybins = gbins[1];
    const auto hw = cam.height * cam.width;

    std::vector<std::int32_t> table(static_cast<std::size_t>(bins.num_bins * hw), -1);
    for (std::int64_t di = 0; di < bins.num_bins; ++di) {
        const double depth = bins.center(di);
        for (std::int64_t v = 0; v < cam.height; ++v) {
            for (std::int64_t u = 0; u < cam.width; ++u) {
                const auto ego = cam.unproject(static_cast<double>(u) + 0.5,
                                               static_cast<double>(v) + 0.5, depth);
                const auto ix = static_cast<std::int64_t>(
                    std::floor((ego[0] - grid.min_corner[0]) / grid.voxel_size[0]));
                const auto iy = static_cast<std::int64_t>(
                    std::floor((ego[1] - grid.min_corner[1]) / grid.voxel_size[1]));
                if (ix < 0 || ix >= xbins || iy < 0 || iy >= ybins) {
                    continue;
                }
                table[static_cast<std::size_t>(di * hw + v * cam.width + u)] =
                    static_cast<std::int32_t>(iy * xbins + ix);
            }
        }
    }
    return table;
}

Tensor lift_splat(const Tensor& image_feat, const Tensor& depth_dist,
                  const std::vector<std::int32_t>& cell_table,
                  const VoxelizationConfig& grid) {
    const auto gbins = grid.bins();
    return lift_splat_op(image_feat, depth_dist, cell_table, gbins[1], gbins[0]);
}

}  // namespace bevkit
