#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bevkit/serialize.hpp"
#include "bevkit/tensor.hpp"

namespace bevkit {

/// Grouped modulated deformable convolution over BEV features. Offsets and
/// modulation come from a predictor conv over the channel-concatenated
/// lidar and image features; sampling reads lidar features only.
struct DeformableConvParams {
    std::int64_t groups = 4;
    std::int64_t kernel = 3;  // num_points = kernel*kernel per group
    Tensor weight;            // [cout, cin/groups, kernel*kernel]
    Tensor k_stem;            // [stem, cin_pred, 1, 1] shared predictor trunk
    Tensor b_stem;            // [stem]
    Tensor k_off;             // [2*M*groups, stem, 1, 1]
    Tensor b_off;             // [2*M*groups]
    Tensor k_mod;             // [M*groups, stem, 1, 1]
    Tensor b_mod;             // [M*groups]

    std::int64_t num_points() const { return kernel * kernel; }
    /// Regular sampling positions p_k relative to the output cell.
    std::vector<std::array<double, 2>> base_offsets() const;
};

DeformableConvParams make_deformable_conv(std::int64_t cin, std::int64_t cout,
                                          std::int64_t cin_pred,
                                          std::int64_t groups, std::int64_t kernel,
                                          std::mt19937_64& rng);
void register_deformable_conv(ParamRegistry& reg, const std::string& prefix,
                              const DeformableConvParams& p);

struct DeformationField {
    Tensor offsets;     // [2*M*groups, Y, X], unbounded
    Tensor modulation;  // [M*groups, Y, X], sigmoid-bounded
};

/// Conv-plus-pool stack halving the grid once per factor of two; factor 1 is
/// a resolution-preserving conv. The result is shared by every block that
/// runs at that resolution.
struct DownsampleEncoder {
    std::int64_t factor = 1;
    std::vector<Tensor> kernels;  // 3x3, one per stage
    std::vector<Tensor> biases;
};
DownsampleEncoder make_downsample_encoder(std::int64_t channels, std::int64_t factor,
                                          std::mt19937_64& rng);
void register_downsample_encoder(ParamRegistry& reg, const std::string& prefix,
                                 const DownsampleEncoder& e);
Tensor downsample_image_bev(const DownsampleEncoder& e, const Tensor& image_bev);

/// Offsets and modulation conditioned on both modalities (matching extents).
DeformationField predict_deformation(const Tensor& lidar_bev,
                                     const Tensor& image_bev,
                                     const DeformableConvParams& params);

/// out(p0) = sum_k w_k * m_k(p0) * F(p0 + p_k + dp_k(p0)) per group, with
/// bilinear reads from the lidar features only, zero outside the grid.
Tensor mm_dcn(const Tensor& lidar_bev, const DeformationField& field,
              const DeformableConvParams& params);

/// Residual block: F~ = LN(MM-DCN(F_P, F_I)) + F_P; out = LN(FFN(F~)) + F~.
/// LN normalizes over channels at each cell.
struct SBDBBlockParams {
    DeformableConvParams dcn;
    Tensor ln1_gamma, ln1_beta;  // [C]
    Tensor ffn_k1, ffn_b1;       // 1x1 conv C -> hidden
    Tensor ffn_k2, ffn_b2;       // 1x1 conv hidden -> C
    Tensor ln2_gamma, ln2_beta;  // [C]
};
SBDBBlockParams make_sbdb_block(std::int64_t channels, std::int64_t image_channels,
                                std::int64_t groups, std::mt19937_64& rng);
void register_sbdb_block(ParamRegistry& reg, const std::string& prefix,
                         const SBDBBlockParams& p);

Tensor sbdb_block(const Tensor& lidar_bev, const Tensor& image_bev,
                  const SBDBBlockParams& p, DeformationField* field_out = nullptr);

struct SampleLocation {
    std::int64_t group = 0;
    std::int64_t k = 0;
    double x = 0.0;
    double y = 0.0;
    double modulation = 0.0;
};

/// Absolute sampling positions p0+p_k+dp_k at one cell, all groups, keeping
/// points with modulation >= threshold.
std::vector<SampleLocation> export_sampling_locations(
    const DeformationField& field, const DeformableConvParams& params,
    std::array<std::int64_t, 2> query_cell, double threshold);

}  // namespace bevkit
