#include "bevkit/sbdb.hpp"

#include <cmath>

#include "bevkit/ops.hpp"

namespace bevkit {

namespace {

Tensor conv_param(Shape shape, std::mt19937_64& rng) {
    const auto fan_in = shape[1] * shape[2] * shape[3];
    const double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t = Tensor::randn(shape, rng, stddev);
    return Tensor::param(t.shape(), {t.data().begin(), t.data().end()});
}

Tensor zeros_param(Shape shape) {
    return Tensor::param(shape,
                         std::vector<double>(static_cast<std::size_t>(product(shape)), 0.0));
}

Tensor ones_param(Shape shape) {
    return Tensor::param(shape,
                         std::vector<double>(static_cast<std::size_t>(product(shape)), 1.0));
}

}  // namespace

std::vector<std::array<double, 2>> DeformableConvParams::base_offsets() const {
    std::vector<std::array<double, 2>> out;
    const auto half = kernel / 2;
    for (std::int64_t ky = 0; ky < kernel; ++ky) {
        for (std::int64_t kx = 0; kx < kernel; ++kx) {
            out.push_back({static_cast<double>(kx - half), static_cast<double>(ky - half)});
        }
    }
    return out;
}

DeformableConvParams make_deformable_conv(std::int64_t cin, std::int64_t cout,
                                          std::int64_t cin_pred,
                                          std::int64_t groups, std::int64_t kernel,
                                          std::mt19937_64& rng) {
    require(groups >= 1 && cin % groups == 0 && cout % groups == 0,
            "make_deformable_conv: groups must divide both channel counts");
    require(kernel >= 1 && kernel % 2 == 1, "make_deformable_conv: kernel must be odd");
    DeformableConvParams p;
    p.groups = groups;
    p.kernel = kernel;
    const auto m = p.num_points();
    {
        const auto fan_in = (cin / groups) * m;
        const double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
        Tensor t = Tensor::randn({cout, cin / groups, m}, rng, stddev);
        p.weight = Tensor::param(t.shape(), {t.data().begin(), t.data().end()});
    }
    const std::int64_t stem = 8;
    p.k_stem = conv_param({stem, cin_pred, 1, 1}, rng);
    p.b_stem = zeros_param({stem});
    // Zero-initialized predictor outputs: the block starts as a regular conv
    // with half-strength modulation, the stable DCN initialization.
    p.k_off = zeros_param({2 * m * groups, stem, 1, 1});
    p.b_off = zeros_param({2 * m * groups});
    p.k_mod = zeros_param({m * groups, stem, 1, 1});
    p.b_mod = zeros_param({m * groups});
    return p;
}

void register_deformable_conv(ParamRegistry& reg, const std::string& prefix,
                              const DeformableConvParams& p) {
    reg.add(prefix + ".weight", p.weight);
    reg.add(prefix + ".k_stem", p.k_stem);
    reg.add(prefix + ".b_stem", p.b_stem);
    reg.add(prefix + ".k_off", p.k_off);
    reg.add(prefix + ".b_off", p.b_off);
    reg.add(prefix + ".k_mod", p.k_mod);
    reg.add(prefix + ".b_mod", p.b_mod);
}

DownsampleEncoder make_downsample_encoder(std::int64_t channels, std::int64_t factor,
                                          std::mt19937_64& rng) {
    require(factor >= 1, "make_downsample_encoder: factor must be >= 1");
    DownsampleEncoder e;
    e.factor = factor;
    std::int64_t stages = 0;
    for (std::int64_t f = factor; f > 1; f /= 2) {
        require(f % 2 == 0, "make_downsample_encoder: factor must be a power of two");
        ++stages;
    }
    const auto n = std::max<std::int64_t>(stages, 1);
    for (std::int64_t i = 0; i < n; ++i) {
        e.kernels.push_back(conv_param({channels, channels, 3, 3}, rng));
        e.biases.push_back(zeros_param({channels}));
    }
    return e;
}

void register_downsample_encoder(ParamRegistry& reg, const std::string& prefix,
                                 const DownsampleEncoder& e) {
    for (std::size_t i = 0; i < e.kernels.size(); ++i) {
        const auto tag = prefix + ".conv" + std::to_string(i);
        reg.add(tag + ".k", e.kernels[i]);
        reg.add(tag + ".b", e.biases[i]);
    }
}

Tensor downsample_image_bev(const DownsampleEncoder& e, const Tensor& image_bev) {
    require(image_bev.rank() == 3, "downsample_image_bev: expects [C,Y,X]");
    require(image_bev.extent(1) % e.factor == 0 &&
                image_bev.extent(2) % e.factor == 0,
            "downsample_image_bev: factor does not divide the grid extents");
    Tensor out = image_bev;
    if (e.factor == 1) {
        out = silu(add_bias_channels(conv2d(out, e.kernels[0], 1, 1), e.biases[0]));
        return out;
    }
    for (std::size_t i = 0; i < e.kernels.size(); ++i) {
        out = silu(add_bias_channels(conv2d(out, e.kernels[i], 1, 1), e.biases[i]));
        out = avg_pool2(out);
    }
    return out;
}

DeformationField predict_deformation(const Tensor& lidar_bev,
                                     const Tensor& image_bev,
                                     const DeformableConvParams& params) {
    require(lidar_bev.rank() == 3 && image_bev.rank() == 3,
            "predict_deformation: expects [C,Y,X] grids");
    require(lidar_bev.extent(1) == image_bev.extent(1) &&
                lidar_bev.extent(2) == image_bev.extent(2),
            "predict_deformation: grid extents differ");
    Tensor both = concat0(lidar_bev, image_bev);
    Tensor stem = silu(
        add_bias_channels(conv2d(both, params.k_stem, 1, 0), params.b_stem));
    DeformationField f;
    f.offsets = add_bias_channels(conv2d(stem, params.k_off, 1, 0), params.b_off);
    f.modulation =
        sigmoid(add_bias_channels(conv2d(stem, params.k_mod, 1, 0), params.b_mod));
    return f;
}

Tensor mm_dcn(const Tensor& lidar_bev, const DeformationField& field,
              const DeformableConvParams& params) {
    return deform_conv2d(lidar_bev, params.weight, field.offsets, field.modulation,
                         params.groups, params.kernel, params.kernel);
}

SBDBBlockParams make_sbdb_block(std::int64_t channels, std::int64_t image_channels,
                                std::int64_t groups, std::mt19937_64& rng) {
    SBDBBlockParams p;
    p.dcn = make_deformable_conv(channels, channels, channels + image_channels,
                                 groups, 3, rng);
    p.ln1_gamma = ones_param({channels});
    p.ln1_beta = zeros_param({channels});
    const auto hidden = 2 * channels;
    p.ffn_k1 = conv_param({hidden, channels, 1, 1}, rng);
    p.ffn_b1 = zeros_param({hidden});
    p.ffn_k2 = conv_param({channels, hidden, 1, 1}, rng);
    p.ffn_b2 = zeros_param({channels});
    p.ln2_gamma = ones_param({channels});
    p.ln2_beta = zeros_param({channels});
    return p;
}

void register_sbdb_block(ParamRegistry& reg, const std::string& prefix,
                         const SBDBBlockParams& p) {
    register_deformable_conv(reg, prefix + ".dcn", p.dcn);
    reg.add(prefix + ".ln1_gamma", p.ln1_gamma);
    reg.add(prefix + ".ln1_beta", p.ln1_beta);
    reg.add(prefix + ".ffn_k1", p.ffn_k1);
    reg.add(prefix + ".ffn_b1", p.ffn_b1);
    reg.add(prefix + ".ffn_k2", p.ffn_k2);
    reg.add(prefix + ".ffn_b2", p.ffn_b2);
    reg.add(prefix + ".ln2_gamma", p.ln2_gamma);
    reg.add(prefix + ".ln2_beta", p.ln2_beta);
}

namespace {

// LN over the channel axis of [C,Y,X]: move channels last, normalize rows,
// move back.
Tensor channel_layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    const auto c = x.extent(0), y = x.extent(1), w = x.extent(2);
    Tensor rows = reshape(permute3(x, {1, 2, 0}), {y * w, c});
    Tensor normed = layer_norm(rows, gamma, beta, 1e-5);
    return permute3(reshape(normed, {y, w, c}), {2, 0, 1});
}

}  // namespace

Tensor sbdb_block(const Tensor& lidar_bev, const Tensor& image_bev,
                  const SBDBBlockParams& p, DeformationField* field_out) {
    DeformationField field = predict_deformation(lidar_bev, image_bev, p.dcn);
    Tensor mixed = mm_dcn(lidar_bev, field, p.dcn);
    Tensor ft = add(channel_layer_norm(mixed, p.ln1_gamma, p.ln1_beta), lidar_bev);

    Tensor hidden = silu(add_bias_channels(conv2d(ft, p.ffn_k1, 1, 0), p.ffn_b1));
    Tensor ffn = add_bias_channels(conv2d(hidden, p.ffn_k2, 1, 0), p.ffn_b2);
    Tensor out = add(channel_layer_norm(ffn, p.ln2_gamma, p.ln2_beta), ft);

    if (field_out != nullptr) {
        *field_out = field;
    }
    return out;
}

std::vector<SampleLocation> export_sampling_locations(
    const DeformationField& field, const DeformableConvParams& params,
    std::array<std::int64_t, 2> query_cell, double threshold) {
    require(field.offsets.rank() == 3 && field.modulation.rank() == 3,
            "export_sampling_locations: field tensors must be [C,Y,X]");
    const auto ybins = field.offsets.extent(1);
    const auto xbins = field.offsets.extent(2);
    const auto [qx, qy] = query_cell;
    require(qx >= 0 && qx < xbins && qy >= 0 && qy < ybins,
            "export_sampling_locations: query cell outside the grid");

    const auto m = params.num_points();
    const auto plane = ybins * xbins;
    const auto p0 = qy * xbins + qx;
    const auto base = params.base_offsets();
    const auto* off = field.offsets.data().data();
    const auto* mod = field.modulation.data().data();

    std::vector<SampleLocation> out;
    for (std::int64_t g = 0; g < params.groups; ++g) {
        for (std::int64_t k = 0; k < m; ++k) {
            const double mval = mod[(g * m + k) * plane + p0];
            if (mval < threshold) {
                continue;
            }
            const double dx = off[((g * m + k) * 2 + 0) * plane + p0];
            const double dy = off[((g * m + k) * 2 + 1) * plane + p0];
            SampleLocation s;
            s.group = g;
            s.k = k;
            s.x = static_cast<double>(qx) + base[static_cast<std::size_t>(k)][0] + dx;
            s.y = static_cast<double>(qy) + base[static_cast<std::size_t>(k)][1] + dy;
            s.modulation = mval;
            out.push_back(s);
        }
    }
    return out;
}

}  // namespace bevkit
