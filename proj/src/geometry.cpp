#include "bevkit/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "bevkit/hilbert.hpp"
#include "bevkit/ops.hpp"

namespace bevkit {

namespace {

std::int64_t exact_bin_count(double lo, double hi, double size) {
    require(size > 0.0, "voxel size must be positive");
    require(hi > lo, "voxelization region is empty");
    const double r = (hi - lo) / size;
    const double rounded = std::round(r);
    require(std::abs(r - rounded) < 1e-6, "region extent is not a voxel multiple");
    require(rounded >= 1.0 && rounded <= 1e7, "bin count out of range");
    return static_cast<std::int64_t>(rounded);
}

}  // namespace

void VoxelizationConfig::validate() const {
    (void)bins();
}

std::array<std::int64_t, 3> VoxelizationConfig::bins() const {
    return {exact_bin_count(min_corner[0], max_corner[0], voxel_size[0]),
            exact_bin_count(min_corner[1], max_corner[1], voxel_size[1]),
            exact_bin_count(min_corner[2], max_corner[2], voxel_size[2])};
}

SparseVoxelSet voxelize(std::span<const PointXYZI> points,
                        const VoxelizationConfig& config) {
    const auto bins = config.bins();
    const auto [xbins, ybins, zbins] = bins;

    struct Binned {
        std::int64_t key;  // ((iy*xbins + ix) * zbins) + iz
        PointXYZI p;
    };
    std::vector<Binned> kept;
    kept.reserve(points.size());
    for (const auto& p : points) {
        require(std::isfinite(p.x) && std::isfinite(p.y) && std::isfinite(p.z) &&
                    std::isfinite(p.intensity),
                "voxelize: non-finite point");
        const auto ix = static_cast<std::int64_t>(
            std::floor((p.x - config.min_corner[0]) / config.voxel_size[0]));
        const auto iy = static_cast<std::int64_t>(
            std::floor((p.y - config.min_corner[1]) / config.voxel_size[1]));
        const auto iz = static_cast<std::int64_t>(
            std::floor((p.z - config.min_corner[2]) / config.voxel_size[2]));
        if (ix < 0 || ix >= xbins || iy < 0 || iy >= ybins || iz < 0 || iz >= zbins) {
            continue;
        }
        kept.push_back({((iy * xbins + ix) * zbins) + iz, p});
    }

    // Canonical order makes the reduction independent of input order: equal
    // keys are further ordered by the full point tuple before accumulating.
    std::sort(kept.begin(), kept.end(), [](const Binned& a, const Binned& b) {
        if (a.key != b.key) {
            return a.key < b.key;
        }
        const auto ta = std::array{a.p.x, a.p.y, a.p.z, a.p.intensity};
        const auto tb = std::array{b.p.x, b.p.y, b.p.z, b.p.intensity};
        return ta < tb;
    });

    SparseVoxelSet out;
    out.bins = bins;
    std::vector<double> feats;
    std::size_t i = 0;
    while (i < kept.size()) {
        std::size_t j = i;
        double sx = 0.0, sy = 0.0, sz = 0.0, si = 0.0;
        while (j < kept.size() && kept[j].key == kept[i].key) {
            sx += kept[j].p.x;
            sy += kept[j].p.y;
            sz += kept[j].p.z;
            si += kept[j].p.intensity;
            ++j;
        }
        const double n = static_cast<double>(j - i);
        const auto key = kept[i].key;
        const auto iz = key % zbins;
        const auto cell = key / zbins;
        const auto ix = cell % xbins;
        const auto iy = cell / xbins;
        const double cx =
            config.min_corner[0] + (static_cast<double>(ix) + 0.5) * config.voxel_size[0];
        const double cy =
            config.min_corner[1] + (static_cast<double>(iy) + 0.5) * config.voxel_size[1];
        const double cz =
            config.min_corner[2] + (static_cast<double>(iz) + 0.5) * config.voxel_size[2];
        out.coords.push_back({ix, iy, iz});
        feats.push_back(sx / n - cx);
        feats.push_back(sy / n - cy);
        feats.push_back(sz / n - cz);
        feats.push_back(si / n);
        i = j;
    }
    const auto rows = static_cast<std::int64_t>(out.coords.size());
    require(rows >= 1, "voxelize: no points fell inside the region");
    out.features = Tensor::from({rows, 4}, std::move(feats));
    return out;
}

BEVGrouping group_by_bev_cell(const SparseVoxelSet& voxels) {
    BEVGrouping g;
    g.seg_of_voxel.resize(voxels.coords.size());
    std::int64_t prev_cell = -1;
    for (std::size_t i = 0; i < voxels.coords.size(); ++i) {
        const auto [ix, iy, iz] = voxels.coords[i];
        const auto cell = iy * voxels.bins[0] + ix;
        require(cell >= prev_cell, "group_by_bev_cell: voxels not in canonical order");
        if (cell != prev_cell) {
            g.cell_coords.push_back({ix, iy});
            prev_cell = cell;
        }
        g.seg_of_voxel[i] = static_cast<std::int64_t>(g.cell_coords.size()) - 1;
    }
    return g;
}

Tensor scatter_to_bev(const SparseBEVSet& set) {
    require(set.xbins >= 1 && set.ybins >= 1, "scatter_to_bev: empty grid");
    return scatter_rows_to_grid(set.features, set.coords, set.ybins, set.xbins);
}

std::vector<std::int64_t> hilbert_order(
    const std::vector<std::array<std::int64_t, 2>>& coords, std::int64_t xbins,
    std::int64_t ybins) {
    const int bits = std::max(1, ceil_log2(std::max(xbins, ybins)));
    std::vector<std::pair<std::uint64_t, std::int64_t>> keyed(coords.size());
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const auto [x, y] = coords[i];
        require(x >= 0 && x < xbins && y >= 0 && y < ybins,
                "hilbert_order: coordinate outside the grid");
        keyed[i] = {hilbert_index_2d(static_cast<std::uint32_t>(x),
                                     static_cast<std::uint32_t>(y), bits),
                    static_cast<std::int64_t>(i)};
    }
    std::stable_sort(keyed.begin(), keyed.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::int64_t> perm(coords.size());
    for (std::size_t i = 0; i < keyed.size(); ++i) {
        perm[i] = keyed[i].second;
    }
    return perm;
}

std::vector<std::int64_t> invert_permutation(const std::vector<std::int64_t>& perm) {
    std::vector<std::int64_t> inv(perm.size(), -1);
    for (std::size_t i = 0; i < perm.size(); ++i) {
        const auto j = perm[i];
        require(j >= 0 && j < static_cast<std::int64_t>(perm.size()) &&
                    inv[static_cast<std::size_t>(j)] == -1,
                "invert_permutation: input is not a permutation");
        inv[static_cast<std::size_t>(j)] = static_cast<std::int64_t>(i);
    }
    return inv;
}

}  // namespace bevkit
