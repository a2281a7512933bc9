#include "bevkit/svdb.hpp"

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

}  // namespace

ForegroundHead make_foreground_head(std::int64_t cin, std::int64_t hidden,
                                    std::mt19937_64& rng) {
    require(cin >= 1 && hidden >= 1, "make_foreground_head: invalid widths");
    ForegroundHead h;
    h.k1 = conv_param({hidden, cin, 1, 1}, rng);
    h.b1 = Tensor::param({hidden},
                         std::vector<double>(static_cast<std::size_t>(hidden), 0.0));
    h.k2 = conv_param({1, hidden, 3, 3}, rng);
    h.b2 = Tensor::param({1}, {0.0});
    return h;
}

void register_foreground_head(ParamRegistry& reg, const std::string& prefix,
                              const ForegroundHead& h) {
    reg.add(prefix + ".k1", h.k1);
    reg.add(prefix + ".b1", h.b1);
    reg.add(prefix + ".k2", h.k2);
    reg.add(prefix + ".b2", h.b2);
}

Tensor predict_foreground(const ForegroundHead& h, const Tensor& bev) {
    const auto pad1 = (h.k1.extent(3) - 1) / 2;
    Tensor hid = relu(add_bias_channels(conv2d(bev, h.k1, 1, pad1), h.b1));
    Tensor logit = add_bias_channels(conv2d(hid, h.k2, 1, 1), h.b2);
    return sigmoid(logit);
}

std::vector<std::uint8_t> threshold_mask(const Tensor& prob, double tau) {
    require(prob.rank() == 3 && prob.extent(0) == 1,
            "threshold_mask: expects [1,Y,X]");
    std::vector<std::uint8_t> mask(prob.data().size());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = prob.data()[i] > tau ? 1 : 0;
    }
    return mask;
}

Tensor foreground_target(const std::vector<FootprintRect>& rects,
                         const VoxelizationConfig& config) {
    const auto bins = config.bins();
    const auto xbins = bins[0], ybins = bins[1];
    std::vector<double> target(static_cast<std::size_t>(ybins * xbins), 0.0);
    for (std::int64_t iy = 0; iy < ybins; ++iy) {
        const double py =
            config.min_corner[1] + (static_cast<double>(iy) + 0.5) * config.voxel_size[1];
        for (std::int64_t ix = 0; ix < xbins; ++ix) {
            const double px = config.min_corner[0] +
                              (static_cast<double>(ix) + 0.5) * config.voxel_size[0];
            for (const auto& r : rects) {
                const double dx = px - r.cx;
                const double dy = py - r.cy;
                const double c = std::cos(r.yaw), s = std::sin(r.yaw);
                const double bx = c * dx + s * dy;   // into body frame
                const double by = -s * dx + c * dy;
                if (std::abs(bx) <= r.half_x && std::abs(by) <= r.half_y) {
                    target[static_cast<std::size_t>(iy * xbins + ix)] = 1.0;
                    break;
                }
            }
        }
    }
    return Tensor::from({1, ybins, xbins}, std::move(target));
}

DilationResult dilate(const SparseBEVSet& occupied,
                      const std::vector<std::uint8_t>& mask,
                      const Tensor& embedding) {
    require(embedding.rank() == 1 &&
                embedding.extent(0) == occupied.features.extent(1),
            "dilate: embedding width does not match the feature rows");
    require(static_cast<std::int64_t>(mask.size()) ==
                occupied.xbins * occupied.ybins,
            "dilate: mask size does not match the grid");

    const auto xbins = occupied.xbins;
    std::vector<std::uint8_t> occ_bitmap(mask.size(), 0);
    for (const auto& [ix, iy] : occupied.coords) {
        occ_bitmap[static_cast<std::size_t>(iy * xbins + ix)] = 1;
    }

    std::vector<std::array<std::int64_t, 2>> new_cells;
    for (std::size_t cell = 0; cell < mask.size(); ++cell) {
        if (mask[cell] && !occ_bitmap[cell]) {
            const auto c = static_cast<std::int64_t>(cell);
            new_cells.push_back({c % xbins, c / xbins});
        }
    }

    const auto n_old = static_cast<std::int64_t>(occupied.coords.size());
    const auto n_new = static_cast<std::int64_t>(new_cells.size());

    DilationResult result;
    result.dilated.xbins = occupied.xbins;
    result.dilated.ybins = occupied.ybins;
    if (n_new == 0) {
        result.dilated = occupied;
        result.is_new.assign(static_cast<std::size_t>(n_old), 0);
        return result;
    }

    // Merge the two cell-sorted lists; rows come from the concatenation of
    // the original features and the broadcast embedding.
    Tensor stacked = concat0(occupied.features, broadcast_row(embedding, n_new));
    std::vector<std::int64_t> perm;
    perm.reserve(static_cast<std::size_t>(n_old + n_new));
    std::int64_t io = 0, in = 0;
    while (io < n_old || in < n_new) {
        const auto old_cell =
            io < n_old ? occupied.coords[static_cast<std::size_t>(io)][1] * xbins +
                             occupied.coords[static_cast<std::size_t>(io)][0]
                       : std::int64_t{-1};
        const auto new_cell =
            in < n_new ? new_cells[static_cast<std::size_t>(in)][1] * xbins +
                             new_cells[static_cast<std::size_t>(in)][0]
                       : std::int64_t{-1};
        const bool take_old = in >= n_new || (io < n_old && old_cell < new_cell);
        if (take_old) {
            result.dilated.coords.push_back(occupied.coords[static_cast<std::size_t>(io)]);
            result.is_new.push_back(0);
            perm.push_back(io);
            ++io;
        } else {
            result.dilated.coords.push_back(new_cells[static_cast<std::size_t>(in)]);
            result.is_new.push_back(1);
            perm.push_back(n_old + in);
            ++in;
        }
    }
    result.dilated.features = permute_rows(stacked, perm);
    return result;
}

SparseBEVSet refine(const MambaParams& mamba, const SparseBEVSet& set) {
    const auto perm = hilbert_order(set.coords, set.xbins, set.ybins);
    Tensor seq = permute_rows(set.features, perm);
    Tensor refined = mamba_layer(mamba, seq);

    SparseBEVSet out;
    out.coords = set.coords;
    out.xbins = set.xbins;
    out.ybins = set.ybins;
    out.features = permute_rows(refined, invert_permutation(perm));
    return out;
}

SVDBParams make_svdb(std::int64_t cin_head, std::int64_t hidden,
                     std::int64_t channels, std::mt19937_64& rng) {
    SVDBParams p;
    p.head = make_foreground_head(cin_head, hidden, rng);
    Tensor e = Tensor::randn({channels}, rng, 0.02);
    p.embedding = Tensor::param(e.shape(), {e.data().begin(), e.data().end()});
    MambaConfig mc;
    mc.dim = channels;
    p.mamba = make_mamba(mc, rng);
    return p;
}

void register_svdb(ParamRegistry& reg, const std::string& prefix,
                   const SVDBParams& p) {
    register_foreground_head(reg, prefix + ".head", p.head);
    reg.add(prefix + ".embedding", p.embedding);
    register_mamba(reg, prefix + ".mamba", p.mamba);
}

SVDBOutput dilate_and_refine(const SVDBParams& p, const SparseBEVSet& occupied,
                             const Tensor& image_bev, const Tensor& lidar_bev) {
    SVDBOutput out;
    out.prob = predict_foreground(p.head, concat0(image_bev, lidar_bev));
    out.mask = threshold_mask(out.prob, p.tau);
    out.dilation = dilate(occupied, out.mask, p.embedding);
    out.refined = refine(p.mamba, out.dilation.dilated);
    return out;
}

}  // namespace bevkit
