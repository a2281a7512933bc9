#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "bevkit/tensor.hpp"

namespace bevkit {

enum class DegradationKind { None, OneHotNoise, RandomNoise, SpatialMisalignment };

DegradationKind parse_degradation(const std::string& name);
std::string degradation_name(DegradationKind kind);

/// Inference-time corruption of the image branch. `magnitude` means: the
/// replaced-pixel fraction for one-hot noise, the logit noise sigma for
/// random noise, and the shift in whole cells for misalignment.
struct Degradation {
    DegradationKind kind = DegradationKind::None;
    double magnitude = 0.0;
    std::uint64_t seed = 0;
};

/// Replaces the depth distribution of a `fraction` of pixels with a random
/// one-hot bin. fraction 0 returns the input unchanged.
Tensor apply_one_hot_noise(const Tensor& depth_dist, double fraction,
                           std::mt19937_64& rng);

/// Adds gaussian noise to depth logits. sigma 0 returns the input unchanged.
Tensor apply_logit_noise(const Tensor& logits, double sigma, std::mt19937_64& rng);

/// Translates [C,Y,X] by whole cells along x (zero fill); 0 returns the
/// input unchanged.
Tensor shift_bev(const Tensor& bev, std::int64_t dx_cells);

}  // namespace bevkit
