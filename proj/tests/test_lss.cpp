#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "bevkit/common.hpp"
#include "bevkit/lss.hpp"
#include "bevkit/ops.hpp"
#include "bevkit/scene.hpp"

using namespace bevkit;

namespace {

VoxelizationConfig toy_grid() {
    VoxelizationConfig g;
    g.min_corner = {0.0, -8.0, -1.0};
    g.max_corner = {16.0, 8.0, 3.0};
    g.voxel_size = {0.5, 0.5, 1.0};
    return g;
}

Tensor randn(Shape s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return Tensor::randn(s, rng);
}

}  // namespace

TEST_CASE("camera validation rejects a sheared rotation block") {
    CameraModel cam = make_toy_camera(8, 8);
    CHECK_NOTHROW(cam.validate());
    cam.cam_to_ego[1] = 0.3;
    CHECK_THROWS_AS(cam.validate(), Error);
}

TEST_CASE("unprojecting the optical axis walks straight down +x at lens height") {
    const CameraModel cam = make_toy_camera(4, 4);
    for (const double d : {1.0, 2.5, 7.0}) {
        const auto p = cam.unproject(2.0, 2.0, d);
        CHECK(p[0] == doctest::Approx(d).epsilon(1e-12));
        CHECK(p[1] == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(p[2] == doctest::Approx(1.2).epsilon(1e-12));
    }
    // One focal length off-axis in u maps to 45 degrees left (+y in ego).
    const auto q = cam.unproject(0.0, 2.0, 3.0);
    CHECK(q[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(q[1] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("depth bin centers are uniform in the metric range") {
    DepthBins bins{2.0, 10.0, 4};
    bins.validate();
    CHECK(bins.center(0) == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(bins.center(1) == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(bins.center(3) == doctest::Approx(9.0).epsilon(1e-12));
    CHECK_THROWS_AS((DepthBins{5.0, 2.0, 4}.validate()), Error);
    CHECK_THROWS_AS((DepthBins{1.0, 2.0, 0}.validate()), Error);
}

TEST_CASE("softmax_depth sums to one per pixel and is uniform on zero logits") {
    const std::int64_t d = 5, h = 3, w = 4;
    const Tensor dist = softmax_depth(randn({d, h, w}, 41));
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            double s = 0.0;
            for (std::int64_t i = 0; i < d; ++i) s += dist.at({i, y, x});
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
    }
    const Tensor flat = softmax_depth(Tensor::zeros({d, h, w}));
    for (auto v : flat.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("splat_cell_table sends each ray sample to its analytic cell") {
    const CameraModel cam = make_toy_camera(4, 4);
    const DepthBins bins{1.0, 5.0, 4};
    const auto grid = toy_grid();
    const auto table = splat_cell_table(cam, bins, grid);
    const auto gbins = grid.bins();
    REQUIRE(table.size() == std::size_t(bins.num_bins * 16));

    for (std::int64_t di = 0; di < bins.num_bins; ++di) {
        for (std::int64_t v = 0; v < 4; ++v) {
            for (std::int64_t u = 0; u < 4; ++u) {
                const auto ego = cam.unproject(u + 0.5, v + 0.5, bins.center(di));
                const auto ix = static_cast<std::int64_t>(
                    std::floor((ego[0] - grid.min_corner[0]) / 0.5));
                const auto iy = static_cast<std::int64_t>(
                    std::floor((ego[1] - grid.min_corner[1]) / 0.5));
                const std::int32_t want =
                    (ix >= 0 && ix < gbins[0] && iy >= 0 && iy < gbins[1])
                        ? static_cast<std::int32_t>(iy * gbins[0] + ix)
                        : -1;
                CHECK(table[std::size_t((di * 4 + v) * 4 + u)] == want);
            }
        }
    }
}

TEST_CASE("rays behind the grid edge are marked outside") {
    const CameraModel cam = make_toy_camera(4, 4);
    VoxelizationConfig tiny = toy_grid();
    tiny.max_corner[0] = 2.0;  // grid ends at x=2, bins reach far beyond
    const DepthBins bins{1.0, 9.0, 4};
    const auto table = splat_cell_table(cam, bins, tiny);
    // Deepest bin center is 8m, past the 2m grid: every entry is outside.
    bool any_outside = false;
    for (std::int64_t i = 3 * 16; i < 4 * 16; ++i) {
        CHECK(table[std::size_t(i)] == -1);
        any_outside = true;
    }
    CHECK(any_outside);
}

TEST_CASE("lift_splat conserves feature mass for in-grid rays") {
    const CameraModel cam = make_toy_camera(6, 6);
    const DepthBins bins{1.0, 4.0, 6};
    const auto grid = toy_grid();
    const auto table = splat_cell_table(cam, bins, grid);
    // All bins land inside this grid (x in [1.25,3.75], |y| <= depth < 8).
    for (auto t : table) REQUIRE(t >= 0);

    const std::int64_t c = 5;
    const Tensor feat = randn({c, 6, 6}, 43);
    std::mt19937_64 hrng(47);
    const DepthHead head = make_depth_head(c, bins.num_bins, hrng);
    const Tensor dist = predict_depth_distribution(head, feat);
    const Tensor bev = lift_splat(feat, dist, table, grid);
    REQUIRE(bev.shape() == Shape{c, grid.bins()[1], grid.bins()[0]});

    for (std::int64_t ch = 0; ch < c; ++ch) {
        double feat_mass = 0.0;
        for (std::int64_t p = 0; p < 36; ++p) feat_mass += feat.data()[ch * 36 + p];
        double bev_mass = 0.0;
        const auto plane = grid.bins()[0] * grid.bins()[1];
        for (std::int64_t i = 0; i < plane; ++i) {
            bev_mass += bev.data()[ch * plane + i];
        }
        // Depth mass per pixel is exactly 1, so the splat moves each pixel's
        // feature into the grid unchanged.
        CHECK(std::abs(bev_mass - feat_mass) <=
              1e-9 * std::max(1.0, std::abs(feat_mass)));
    }
}

TEST_CASE("a single active pixel with a one-hot depth fills exactly one cell") {
    const CameraModel cam = make_toy_camera(4, 4);
    const DepthBins bins{1.0, 5.0, 4};
    const auto grid = toy_grid();
    const auto table = splat_cell_table(cam, bins, grid);

    Tensor feat = Tensor::zeros({2, 4, 4});
    std::vector<double> fv(feat.data().begin(), feat.data().end());
    fv[std::size_t(1 * 16 + 2 * 4 + 3)] = 2.0;  // channel 1, pixel (v=2,u=3)
    feat = Tensor::from({2, 4, 4}, fv);

    std::vector<double> dv(std::size_t(4 * 16), 0.0);
    dv[std::size_t((2 * 4 + 2) * 4 + 3)] = 1.0;  // bin 2 at that pixel
    const Tensor dist = Tensor::from({4, 4, 4}, dv);

    const Tensor bev = lift_splat(feat, dist, table, grid);
    const auto cell = table[std::size_t((2 * 4 + 2) * 4 + 3)];
    REQUIRE(cell >= 0);
    const auto plane = grid.bins()[0] * grid.bins()[1];
    for (std::int64_t ch = 0; ch < 2; ++ch) {
        for (std::int64_t i = 0; i < plane; ++i) {
            const double want = (ch == 1 && i == cell) ? 2.0 : 0.0;
            CHECK(bev.data()[ch * plane + i] == want);
        }
    }
}

TEST_CASE("lift_splat is linear in the image features") {
    const CameraModel cam = make_toy_camera(4, 4);
    const DepthBins bins{1.0, 5.0, 4};
    const auto grid = toy_grid();
    const auto table = splat_cell_table(cam, bins, grid);
    const Tensor feat = randn({3, 4, 4}, 53);
    const Tensor dist = softmax_depth(randn({4, 4, 4}, 59));
    const Tensor a = lift_splat(feat, dist, table, grid);
    const Tensor b = lift_splat(scale(feat, 2.0), dist, table, grid);
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        CHECK(b.data()[i] == 2.0 * a.data()[i]);
    }
}

TEST_CASE("shifting the camera by one cell shifts the splat by one cell") {
    CameraModel cam = make_toy_camera(4, 4);
    const DepthBins bins{1.0, 4.0, 4};
    const auto grid = toy_grid();
    const auto gb = grid.bins();

    CameraModel moved = cam;
    moved.cam_to_ego[7] += grid.voxel_size[1];  // one voxel along +y

    const auto ta = splat_cell_table(cam, bins, grid);
    const auto tb = splat_cell_table(moved, bins, grid);
    const Tensor feat = randn({2, 4, 4}, 61);
    const Tensor dist = softmax_depth(randn({4, 4, 4}, 67));
    const Tensor a = lift_splat(feat, dist, ta, grid);
    const Tensor b = lift_splat(feat, dist, tb, grid);

    // Rays stay interior for both camera placements, so the whole BEV plane
    // shifts by exactly one row of cells.
    for (auto t : ta) REQUIRE(t >= 0);
    for (auto t : tb) REQUIRE(t >= 0);
    for (std::int64_t ch = 0; ch < 2; ++ch) {
        for (std::int64_t y = 0; y + 1 < gb[1]; ++y) {
            for (std::int64_t x = 0; x < gb[0]; ++x) {
                CHECK(b.at({ch, y + 1, x}) == a.at({ch, y, x}));
            }
        }
    }
}
