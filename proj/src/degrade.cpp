#include "bevkit/degrade.hpp"

#include <cstring>

namespace bevkit {

DegradationKind parse_degradation(const std::string& name) {
    if (name == "none") {
        return DegradationKind::None;
    }
    if (name == "one_hot_noise") {
        return DegradationKind::OneHotNoise;
    }
    if (name == "random_noise") {
        return DegradationKind::RandomNoise;
    }
    if (name == "spatial_misalignment") {
        return DegradationKind::SpatialMisalignment;
    }
    fail("unknown degradation kind: " + name);
}

std::string degradation_name(DegradationKind kind) {
    switch (kind) {
        case DegradationKind::None:
            return "none";
        case DegradationKind::OneHotNoise:
            return "one_hot_noise";
        case DegradationKind::RandomNoise:
            return "random_noise";
        case DegradationKind::SpatialMisalignment:
            return "spatial_misalignment";
    }
    fail("unknown degradation kind");
}

Tensor apply_one_hot_noise(const Tensor& depth_dist, double fraction,
                           std::mt19937_64& rng) {
    require(depth_dist.rank() == 3, "apply_one_hot_noise: expects [D,H,W]");
    require(fraction >= 0.0 && fraction <= 1.0,
            "apply_one_hot_noise: fraction must be in [0,1]");
    if (fraction == 0.0) {
        return depth_dist;
    }
    const auto d = depth_dist.extent(0);
    const auto hw = depth_dist.extent(1) * depth_dist.extent(2);
    std::vector<double> out(depth_dist.data().begin(), depth_dist.data().end());
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    std::uniform_int_distribution<std::int64_t> bin(0, d - 1);
    for (std::int64_t p = 0; p < hw; ++p) {
        const double u = ud(rng);
        const auto hot = bin(rng);  // drawn always, keeps the stream aligned
        if (u >= fraction) {
            continue;
        }
        for (std::int64_t i = 0; i < d; ++i) {
            out[static_cast<std::size_t>(i * hw + p)] = i == hot ? 1.0 : 0.0;
        }
    }
    return Tensor::from(depth_dist.shape(), std::move(out));
}

Tensor apply_logit_noise(const Tensor& logits, double sigma, std::mt19937_64& rng) {
    require(sigma >= 0.0, "apply_logit_noise: sigma must be nonnegative");
    if (sigma == 0.0) {
        return logits;
    }
    std::vector<double> out(logits.data().begin(), logits.data().end());
    std::normal_distribution<double> noise(0.0, sigma);
    for (auto& v : out) {
        v += noise(rng);
    }
    return Tensor::from(logits.shape(), std::move(out));
}

Tensor shift_bev(const Tensor& bev, std::int64_t dx_cells) {
    require(bev.rank() == 3, "shift_bev: expects [C,Y,X]");
    if (dx_cells == 0) {
        return bev;
    }
    const auto c = bev.extent(0), y = bev.extent(1), x = bev.extent(2);
    std::vector<double> out(static_cast<std::size_t>(c * y * x), 0.0);
    const auto* src = bev.data().data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t row = 0; row < y; ++row) {
            for (std::int64_t col = 0; col < x; ++col) {
                const auto from = col - dx_cells;
                if (from < 0 || from >= x) {
                    continue;
                }
                out[static_cast<std::size_t>((ch * y + row) * x + col)] =
                    src[(ch * y + row) * x + from];
            }
        }
    }
    return Tensor::from(bev.shape(), std::move(out));
}

}  // namespace bevkit
