#include "bevkit/hilbert.hpp"

#include "bevkit/common.hpp"

namespace bevkit {

namespace {

// Skilling's in-place conversion from axis coordinates to the transposed
// Hilbert index (one bit of the index per axis word per level).
template <int N>
void axes_to_transpose(std::uint32_t (&x)[N], int bits) {
    const std::uint32_t m = 1u << (bits - 1);
    // Inverse undo
    for (std::uint32_t q = m; q > 1; q >>= 1) {
        const std::uint32_t p = q - 1;
        for (int i = 0; i < N; ++i) {
            if (x[i] & q) {
                x[0] ^= p;
            } else {
                const std::uint32_t t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
    }
    // Gray encode
    for (int i = 1; i < N; ++i) {
        x[i] ^= x[i - 1];
    }
    std::uint32_t t = 0;
    for (std::uint32_t q = m; q > 1; q >>= 1) {
        if (x[N - 1] & q) {
            t ^= q - 1;
        }
    }
    for (int i = 0; i < N; ++i) {
        x[i] ^= t;
    }
}

// Interleave the transposed words, most significant level first, axis 0
// contributing the higher bit within each level.
template <int N>
std::uint64_t interleave(const std::uint32_t (&x)[N], int bits) {
    std::uint64_t h = 0;
    for (int level = bits - 1; level >= 0; --level) {
        for (int i = 0; i < N; ++i) {
            h = (h << 1) | ((x[i] >> level) & 1u);
        }
    }
    return h;
}

}  // namespace

std::uint64_t hilbert_index_2d(std::uint32_t x, std::uint32_t y, int bits) {
    require(bits >= 1 && bits <= 31, "hilbert_index_2d: bits out of range");
    const std::uint32_t lim = 1u << bits;
    require(x < lim && y < lim, "hilbert_index_2d: coordinate outside the grid");
    std::uint32_t axes[2] = {x, y};
    axes_to_transpose(axes, bits);
    return interleave(axes, bits);
}

std::uint64_t hilbert_index_3d(std::uint32_t x, std::uint32_t y, std::uint32_t z,
                               int bits) {
    require(bits >= 1 && bits <= 21, "hilbert_index_3d: bits out of range");
    const std::uint32_t lim = 1u << bits;
    require(x < lim && y < lim && z < lim,
            "hilbert_index_3d: coordinate outside the grid");
    std::uint32_t axes[3] = {x, y, z};
    axes_to_transpose(axes, bits);
    return interleave(axes, bits);
}

int ceil_log2(std::int64_t n) {
    require(n >= 1, "ceil_log2: n must be positive");
    int k = 0;
    while ((std::int64_t{1} << k) < n) {
        ++k;
    }
    return k;
}

}  // namespace bevkit
