#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "bevkit/tensor.hpp"

namespace bevkit {

struct PointXYZI {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;
    double intensity = 0.0;
};

/// Axis-aligned voxelization region. Extents must be exact multiples of the
/// voxel size (checked to 1e-6 voxels).
struct VoxelizationConfig {
    std::array<double, 3> min_corner{-54.0, -54.0, -5.0};
    std::array<double, 3> max_corner{54.0, 54.0, 3.0};
    std::array<double, 3> voxel_size{0.075, 0.075, 0.2};

    void validate() const;
    std::array<std::int64_t, 3> bins() const;  // (xbins, ybins, zbins)
};

/// Occupied voxels in canonical order: ascending BEV cell (y-major), then
/// ascending z. Feature rows are [dx, dy, dz, mean point features...] where
/// (dx,dy,dz) is the mean offset from the voxel center.
struct SparseVoxelSet {
    std::vector<std::array<std::int64_t, 3>> coords;  // (ix, iy, iz)
    Tensor features;                                   // [N, 3 + F]
    std::array<std::int64_t, 3> bins{};
};

/// Occupied BEV cells in canonical order (ascending y-major cell index).
struct SparseBEVSet {
    std::vector<std::array<std::int64_t, 2>> coords;  // (ix, iy)
    Tensor features;                                   // [M, C]
    std::int64_t xbins = 0;
    std::int64_t ybins = 0;
};

/// Bins points into voxels, dropping points outside the region. The result
/// is invariant, bit for bit, under any permutation of the input points.
SparseVoxelSet voxelize(std::span<const PointXYZI> points,
                        const VoxelizationConfig& config);

/// Grouping of 3D voxels into BEV columns. Voxels sharing (ix,iy) map to one
/// segment; segment order matches the canonical voxel order.
struct BEVGrouping {
    std::vector<std::int64_t> seg_of_voxel;
    std::vector<std::array<std::int64_t, 2>> cell_coords;  // per segment
};
BEVGrouping group_by_bev_cell(const SparseVoxelSet& voxels);

/// Dense [C,Y,X] grid with sparse rows written at their cells, zero elsewhere.
Tensor scatter_to_bev(const SparseBEVSet& set);

/// Row order of `coords` along the Hilbert curve over the power-of-two grid
/// enclosing [0,xbins) x [0,ybins). Stable for equal keys. Returns `perm`
/// with out[i] = in[perm[i]].
std::vector<std::int64_t> hilbert_order(
    const std::vector<std::array<std::int64_t, 2>>& coords, std::int64_t xbins,
    std::int64_t ybins);

/// Inverse permutation: inv[perm[i]] = i.
std::vector<std::int64_t> invert_permutation(const std::vector<std::int64_t>& perm);

}  // namespace bevkit
