#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bevkit/geometry.hpp"
#include "bevkit/scan.hpp"
#include "bevkit/serialize.hpp"
#include "bevkit/tensor.hpp"

namespace bevkit {

/// Pointwise mixer plus a 3x3 conv predicting a per-cell foreground
/// probability from the channel-concatenated image and lidar BEV features.
struct ForegroundHead {
    Tensor k1;  // [hidden, cin, 1, 1]
    Tensor b1;  // [hidden]
    Tensor k2;  // [1, hidden, 3, 3]
    Tensor b2;  // [1]
};

ForegroundHead make_foreground_head(std::int64_t cin, std::int64_t hidden,
                                    std::mt19937_64& rng);
void register_foreground_head(ParamRegistry& reg, const std::string& prefix,
                              const ForegroundHead& h);

/// bev [cin,Y,X] -> probabilities [1,Y,X].
Tensor predict_foreground(const ForegroundHead& h, const Tensor& bev);

/// Strictly-above-threshold test, row-major [Y*X]. Cells exactly at the
/// threshold stay off.
std::vector<std::uint8_t> threshold_mask(const Tensor& prob, double tau);

/// Axis-aligned-in-body-frame ground rectangle, rotated by yaw about (cx,cy).
struct FootprintRect {
    double cx = 0.0;
    double cy = 0.0;
    double half_x = 0.0;
    double half_y = 0.0;
    double yaw = 0.0;
};

/// Binary target [1,Y,X]: 1 where the cell center falls inside any rectangle.
Tensor foreground_target(const std::vector<FootprintRect>& rects,
                         const VoxelizationConfig& config);

/// Occupied set grown by the mask: every mask-positive cell that is not
/// already occupied receives a copy of the shared embedding row. Rows stay
/// in canonical cell order; original rows pass through bit for bit.
struct DilationResult {
    SparseBEVSet dilated;
    std::vector<std::uint8_t> is_new;  // per output row
};
DilationResult dilate(const SparseBEVSet& occupied,
                      const std::vector<std::uint8_t>& mask,
                      const Tensor& embedding);

/// Serializes the set along the Hilbert curve, runs the scan block over the
/// sequence, and restores canonical cell order.
SparseBEVSet refine(const MambaParams& mamba, const SparseBEVSet& set);

struct SVDBParams {
    ForegroundHead head;
    Tensor embedding;  // [C]
    MambaParams mamba;
    double tau = 0.4;
};

SVDBParams make_svdb(std::int64_t cin_head, std::int64_t hidden,
                     std::int64_t channels, std::mt19937_64& rng);
void register_svdb(ParamRegistry& reg, const std::string& prefix,
                   const SVDBParams& p);

struct SVDBOutput {
    Tensor prob;                      // [1,Y,X]
    std::vector<std::uint8_t> mask;   // [Y*X]
    DilationResult dilation;
    SparseBEVSet refined;
};

/// Full pass: probability from concat(image,lidar) BEV, threshold, dilate,
/// refine. `lidar_bev` must be the dense scatter of `occupied`.
SVDBOutput dilate_and_refine(const SVDBParams& p, const SparseBEVSet& occupied,
                             const Tensor& image_bev, const Tensor& lidar_bev);

}  // namespace bevkit
