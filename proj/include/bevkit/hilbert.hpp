#pragma once

#include <cstdint>

namespace bevkit {

/// Index of (x,y) along the Hilbert curve filling the 2^bits x 2^bits grid.
/// Coordinates must lie inside the grid; 1 <= bits <= 31.
std::uint64_t hilbert_index_2d(std::uint32_t x, std::uint32_t y, int bits);

/// Index of (x,y,z) along the Hilbert curve filling the cube of side 2^bits.
/// 1 <= bits <= 21.
std::uint64_t hilbert_index_3d(std::uint32_t x, std::uint32_t y, std::uint32_t z,
                               int bits);

/// Smallest k with 2^k >= n (n >= 1).
int ceil_log2(std::int64_t n);

}  // namespace bevkit
