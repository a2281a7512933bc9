#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <vector>

#include "bevkit/common.hpp"
#include "bevkit/geometry.hpp"
#include "bevkit/hilbert.hpp"

using namespace bevkit;

namespace {

struct OracleVoxel {
    std::array<std::int64_t, 3> coord;
    std::array<double, 4> feat;
};

// Independent re-derivation: bin, canonicalize by (cell-major key, point
// tuple), reduce to means, subtract voxel centers.
std::vector<OracleVoxel> voxelize_oracle(const std::vector<PointXYZI>& points,
                                         const VoxelizationConfig& cfg) {
    const auto [xb, yb, zb] = cfg.bins();
    std::map<std::int64_t, std::vector<PointXYZI>> cells;
    for (const auto& p : points) {
        const auto ix = static_cast<std::int64_t>(
            std::floor((p.x - cfg.min_corner[0]) / cfg.voxel_size[0]));
        const auto iy = static_cast<std::int64_t>(
            std::floor((p.y - cfg.min_corner[1]) / cfg.voxel_size[1]));
        const auto iz = static_cast<std::int64_t>(
            std::floor((p.z - cfg.min_corner[2]) / cfg.voxel_size[2]));
        if (ix < 0 || ix >= xb || iy < 0 || iy >= yb || iz < 0 || iz >= zb) continue;
        cells[(iy * xb + ix) * zb + iz].push_back(p);
    }
    std::vector<OracleVoxel> out;
    for (auto& [key, pts] : cells) {
        std::sort(pts.begin(), pts.end(), [](const PointXYZI& a, const PointXYZI& b) {
            return std::array{a.x, a.y, a.z, a.intensity} <
                   std::array{b.x, b.y, b.z, b.intensity};
        });
        double sx = 0, sy = 0, sz = 0, si = 0;
        for (const auto& p : pts) {
            sx += p.x;
            sy += p.y;
            sz += p.z;
            si += p.intensity;
        }
        const double n = static_cast<double>(pts.size());
        const auto iz = key % zb;
        const auto ix = (key / zb) % xb;
        const auto iy = key / zb / xb;
        const double cx = cfg.min_corner[0] + (ix + 0.5) * cfg.voxel_size[0];
        const double cy = cfg.min_corner[1] + (iy + 0.5) * cfg.voxel_size[1];
        const double cz = cfg.min_corner[2] + (iz + 0.5) * cfg.voxel_size[2];
        out.push_back({{ix, iy, iz}, {sx / n - cx, sy / n - cy, sz / n - cz, si / n}});
    }
    return out;
}

std::vector<PointXYZI> random_points(std::mt19937_64& rng, std::size_t n,
                                     double span) {
    std::uniform_real_distribution<double> d(-span, span);
    std::uniform_real_distribution<double> zd(-2.0, 4.0);
    std::vector<PointXYZI> pts(n);
    for (auto& p : pts) p = {d(rng), d(rng), zd(rng), std::abs(d(rng))};
    return pts;
}

}  // namespace

TEST_CASE("voxelize matches the hash-map oracle bit for bit") {
    VoxelizationConfig cfg;
    cfg.min_corner = {-4.0, -4.0, -1.0};
    cfg.max_corner = {4.0, 4.0, 3.0};
    cfg.voxel_size = {0.5, 0.5, 1.0};
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 5; ++trial) {
        // span > region so some points fall outside and must be dropped
        const auto pts = random_points(rng, 400, 5.0);
        const auto got = voxelize(pts, cfg);
        const auto want = voxelize_oracle(pts, cfg);
        REQUIRE(got.coords.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i) {
            CHECK(got.coords[i] == want[i].coord);
            for (int f = 0; f < 4; ++f) {
                CHECK(got.features.at({std::int64_t(i), f}) == want[i].feat[f]);
            }
        }
    }
}

TEST_CASE("voxel index arithmetic on the fine production grid") {
    VoxelizationConfig cfg;
    cfg.min_corner = {-54.0, -54.0, -5.0};
    cfg.max_corner = {54.0, 54.0, 3.0};
    cfg.voxel_size = {0.075, 0.075, 0.2};
    const auto bins = cfg.bins();
    CHECK(bins[0] == 1440);
    CHECK(bins[1] == 1440);
    CHECK(bins[2] == 40);
    const std::vector<PointXYZI> pts{{0.0375, 0.0, 0.0, 1.0}};
    const auto set = voxelize(pts, cfg);
    REQUIRE(set.coords.size() == 1);
    CHECK(set.coords[0][0] == 720);
    CHECK(set.coords[0][1] == 720);
    CHECK(set.coords[0][2] == 25);
}

TEST_CASE("voxelize is invariant under point permutations") {
    VoxelizationConfig cfg;
    cfg.min_corner = {-4.0, -4.0, -1.0};
    cfg.max_corner = {4.0, 4.0, 3.0};
    cfg.voxel_size = {0.25, 0.25, 0.5};
    std::mt19937_64 rng(23);
    auto pts = random_points(rng, 300, 4.5);
    const auto a = voxelize(pts, cfg);
    std::shuffle(pts.begin(), pts.end(), rng);
    const auto b = voxelize(pts, cfg);
    REQUIRE(a.coords == b.coords);
    REQUIRE(a.features.numel() == b.features.numel());
    for (std::int64_t i = 0; i < a.features.numel(); ++i) {
        CHECK(a.features.data()[i] == b.features.data()[i]);
    }
}

TEST_CASE("voxelize mean features on a hand-built voxel") {
    VoxelizationConfig cfg;
    cfg.min_corner = {0.0, 0.0, 0.0};
    cfg.max_corner = {2.0, 2.0, 2.0};
    cfg.voxel_size = {1.0, 1.0, 1.0};
    const std::vector<PointXYZI> pts{{0.25, 0.5, 0.5, 1.0}, {0.75, 0.5, 0.5, 3.0}};
    const auto set = voxelize(pts, cfg);
    REQUIRE(set.coords.size() == 1);
    CHECK(set.coords[0] == std::array<std::int64_t, 3>{0, 0, 0});
    CHECK(set.features.at({0, 0}) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(set.features.at({0, 1}) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(set.features.at({0, 2}) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(set.features.at({0, 3}) == 2.0);
}

TEST_CASE("voxelize with nothing inside the region fails") {
    VoxelizationConfig cfg;
    cfg.min_corner = {0.0, 0.0, 0.0};
    cfg.max_corner = {1.0, 1.0, 1.0};
    cfg.voxel_size = {0.5, 0.5, 0.5};
    const std::vector<PointXYZI> pts{{5.0, 5.0, 5.0, 1.0}};
    CHECK_THROWS_AS((void)voxelize(pts, cfg), Error);
}

TEST_CASE("region extents must be voxel multiples") {
    VoxelizationConfig cfg;
    cfg.min_corner = {0.0, 0.0, 0.0};
    cfg.max_corner = {1.05, 1.0, 1.0};
    cfg.voxel_size = {0.5, 0.5, 0.5};
    CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("bev grouping segments voxels by column in canonical order") {
    VoxelizationConfig cfg;
    cfg.min_corner = {0.0, 0.0, 0.0};
    cfg.max_corner = {2.0, 2.0, 2.0};
    cfg.voxel_size = {1.0, 1.0, 1.0};
    // Two voxels stacked in one column plus one lone voxel.
    const std::vector<PointXYZI> pts{
        {0.5, 0.5, 0.5, 1.0}, {0.5, 0.5, 1.5, 2.0}, {1.5, 1.5, 0.5, 3.0}};
    const auto set = voxelize(pts, cfg);
    REQUIRE(set.coords.size() == 3);
    const auto g = group_by_bev_cell(set);
    REQUIRE(g.cell_coords.size() == 2);
    CHECK(g.cell_coords[0] == std::array<std::int64_t, 2>{0, 0});
    CHECK(g.cell_coords[1] == std::array<std::int64_t, 2>{1, 1});
    CHECK(g.seg_of_voxel == std::vector<std::int64_t>{0, 0, 1});
}

TEST_CASE("scatter_to_bev places rows at their cells and zero elsewhere") {
    SparseBEVSet set;
    set.xbins = 4;
    set.ybins = 3;
    set.coords = {{1, 0}, {3, 2}};
    set.features = Tensor::from({2, 2}, {1.0, 2.0, 3.0, 4.0});
    const Tensor grid = scatter_to_bev(set);
    REQUIRE(grid.shape() == Shape{2, 3, 4});
    CHECK(grid.at({0, 0, 1}) == 1.0);
    CHECK(grid.at({1, 0, 1}) == 2.0);
    CHECK(grid.at({0, 2, 3}) == 3.0);
    CHECK(grid.at({1, 2, 3}) == 4.0);
    double total = 0.0;
    for (auto v : grid.data()) total += std::abs(v);
    CHECK(total == 10.0);
}

TEST_CASE("2d hilbert indices are bijective with unit steps") {
    for (int bits = 1; bits <= 6; ++bits) {
        const std::uint32_t n = 1u << bits;
        std::vector<std::array<std::uint32_t, 2>> pos_of(std::size_t(n) * n,
                                                         {~0u, ~0u});
        for (std::uint32_t y = 0; y < n; ++y) {
            for (std::uint32_t x = 0; x < n; ++x) {
                const auto h = hilbert_index_2d(x, y, bits);
                REQUIRE(h < std::uint64_t(n) * n);
                REQUIRE(pos_of[std::size_t(h)][0] == ~0u);
                pos_of[std::size_t(h)] = {x, y};
            }
        }
        for (std::size_t i = 1; i < pos_of.size(); ++i) {
            const auto dx = std::abs(int(pos_of[i][0]) - int(pos_of[i - 1][0]));
            const auto dy = std::abs(int(pos_of[i][1]) - int(pos_of[i - 1][1]));
            CHECK(dx + dy == 1);
        }
    }
}

TEST_CASE("3d hilbert indices are bijective with unit steps") {
    for (int bits = 1; bits <= 4; ++bits) {
        const std::uint32_t n = 1u << bits;
        const std::size_t total = std::size_t(n) * n * n;
        std::vector<std::array<std::uint32_t, 3>> pos_of(total, {~0u, ~0u, ~0u});
        for (std::uint32_t z = 0; z < n; ++z) {
            for (std::uint32_t y = 0; y < n; ++y) {
                for (std::uint32_t x = 0; x < n; ++x) {
                    const auto h = hilbert_index_3d(x, y, z, bits);
                    REQUIRE(h < total);
                    REQUIRE(pos_of[std::size_t(h)][0] == ~0u);
                    pos_of[std::size_t(h)] = {x, y, z};
                }
            }
        }
        for (std::size_t i = 1; i < total; ++i) {
            int d = 0;
            for (int a = 0; a < 3; ++a) {
                d += std::abs(int(pos_of[i][a]) - int(pos_of[i - 1][a]));
            }
            CHECK(d == 1);
        }
    }
}

TEST_CASE("ceil_log2 on boundary values") {
    CHECK(ceil_log2(1) == 0);
    CHECK(ceil_log2(2) == 1);
    CHECK(ceil_log2(3) == 2);
    CHECK(ceil_log2(4) == 2);
    CHECK(ceil_log2(5) == 3);
    CHECK(ceil_log2(64) == 6);
    CHECK(ceil_log2(65) == 7);
}

TEST_CASE("hilbert_order sorts coordinates along the curve") {
    std::mt19937_64 rng(31);
    std::uniform_int_distribution<std::int64_t> d(0, 15);
    std::vector<std::array<std::int64_t, 2>> coords(40);
    for (auto& c : coords) c = {d(rng), d(rng)};
    const auto perm = hilbert_order(coords, 16, 16);
    REQUIRE(perm.size() == coords.size());

    std::vector<std::uint64_t> keys;
    for (const auto idx : perm) {
        keys.push_back(hilbert_index_2d(std::uint32_t(coords[std::size_t(idx)][0]),
                                        std::uint32_t(coords[std::size_t(idx)][1]),
                                        4));
    }
    CHECK(std::is_sorted(keys.begin(), keys.end()));

    // Stability: duplicate coordinates keep their input order.
    std::vector<std::array<std::int64_t, 2>> dup{{3, 3}, {5, 1}, {3, 3}, {3, 3}};
    const auto dperm = hilbert_order(dup, 8, 8);
    std::vector<std::int64_t> dup_positions;
    for (const auto idx : dperm) {
        if (dup[std::size_t(idx)] == std::array<std::int64_t, 2>{3, 3}) {
            dup_positions.push_back(idx);
        }
    }
    CHECK(dup_positions == std::vector<std::int64_t>{0, 2, 3});
}

TEST_CASE("invert_permutation composes to the identity") {
    std::mt19937_64 rng(37);
    std::vector<std::int64_t> perm(25);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto inv = invert_permutation(perm);
    for (std::size_t i = 0; i < perm.size(); ++i) {
        CHECK(inv[std::size_t(perm[i])] == std::int64_t(i));
    }
}
