#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <vector>

#include "bevkit/common.hpp"
#include "bevkit/degrade.hpp"
#include "bevkit/pipeline.hpp"
#include "bevkit/robustness.hpp"
#include "bevkit/scene.hpp"

using namespace bevkit;

namespace {

SceneGenConfig small_scene_cfg() {
    SceneGenConfig cfg;
    cfg.points_per_box = 160;
    return cfg;
}

PipelineConfig tiny_pipeline_cfg() {
    PipelineConfig cfg;
    cfg.stages = 1;
    cfg.blocks_per_stage = 1;
    cfg.bev_channels = 8;
    cfg.encoder_hidden = 8;
    cfg.head_hidden = 4;
    cfg.groups = 2;
    cfg.depth_bins.num_bins = 8;
    cfg.train_steps = 2;
    cfg.batch_size = 1;
    return cfg;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        if (a.data()[i] != b.data()[i]) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("scene generation is deterministic in the seed") {
    const auto cfg = small_scene_cfg();
    const Scene a = generate_scene(42, cfg);
    const Scene b = generate_scene(42, cfg);
    REQUIRE(a.points.size() == b.points.size());
    for (std::size_t i = 0; i < a.points.size(); ++i) {
        CHECK(a.points[i].x == b.points[i].x);
        CHECK(a.points[i].y == b.points[i].y);
        CHECK(a.points[i].z == b.points[i].z);
        CHECK(a.points[i].intensity == b.points[i].intensity);
    }
    REQUIRE(a.boxes.size() == b.boxes.size());
    CHECK(tensors_equal(a.image_feat, b.image_feat));

    const Scene c = generate_scene(43, cfg);
    CHECK(!tensors_equal(a.image_feat, c.image_feat));
}

TEST_CASE("box lidar returns lie on the box surface") {
    auto cfg = small_scene_cfg();
    cfg.lidar_absorb_prob = 0.0;  // keep every box visible
    const Scene scene = generate_scene(7, cfg);
    REQUIRE(!scene.boxes.empty());
    std::int64_t box_points = 0;
    for (const auto& p : scene.points) {
        if (p.intensity <= 0.2) continue;  // ground returns
        double best = std::numeric_limits<double>::infinity();
        for (const auto& box : scene.boxes) {
            best = std::min(best, box_surface_distance(box, p));
        }
        CHECK(best <= 1e-6);
        ++box_points;
    }
    CHECK(box_points > 0);
}

TEST_CASE("an occluder removes most of the returns behind it") {
    auto cfg = small_scene_cfg();
    cfg.lidar_absorb_prob = 0.0;
    cfg.ground_keep = 0.0;
    Box hidden;
    hidden.cx = 6.0;
    hidden.cy = 0.0;
    hidden.cz = 0.5;
    hidden.w = 1.6;
    hidden.l = 1.6;
    hidden.h = 1.0;
    hidden.cls = 1;
    Box blocker = hidden;
    blocker.cx = 3.0;
    blocker.w = 2.4;
    blocker.l = 2.4;
    blocker.h = 1.8;
    blocker.cls = 2;

    auto count_far_points = [&](const std::vector<Box>& boxes) {
        auto c = cfg;
        c.fixed_boxes = boxes;
        const Scene s = generate_scene(11, c);
        std::int64_t n = 0;
        for (const auto& p : s.points) {
            if (p.x > 4.5) ++n;
        }
        return n;
    };

    const auto alone = count_far_points({hidden});
    const auto shadowed = count_far_points({hidden, blocker});
    REQUIRE(alone > 20);
    CHECK(shadowed <= alone / 5);
}

TEST_CASE("noise-free images have exact class hits, depth, and ramps") {
    auto cfg = small_scene_cfg();
    cfg.image_noise = 0.0;
    Box box;
    box.cx = 4.0;
    box.cy = 0.0;
    box.cz = 0.75;
    box.w = 2.0;
    box.l = 2.0;
    box.h = 1.5;
    box.cls = 2;
    cfg.fixed_boxes = {box};
    const Scene s = generate_scene(5, cfg);
    const auto& cam = s.camera;
    const auto& feat = s.image_feat;

    const std::int64_t cd = cfg.image_channels - 3;
    const std::int64_t cu = cfg.image_channels - 2;
    const std::int64_t cv = cfg.image_channels - 1;
    std::int64_t hits = 0;
    for (std::int64_t v = 0; v < cam.height; ++v) {
        for (std::int64_t u = 0; u < cam.width; ++u) {
            for (std::int64_t c = 0; c < cfg.num_classes; ++c) {
                const double val = feat.at({c, v, u});
                CHECK((val == 0.0 || val == 1.0));
                if (val == 1.0) {
                    CHECK(c == box.cls);
                    ++hits;
                }
            }
            CHECK(feat.at({cu, v, u}) == (u + 0.5) / double(cam.width));
            CHECK(feat.at({cv, v, u}) == (v + 0.5) / double(cam.height));
        }
    }
    CHECK(hits > 0);

    // The center pixel looks straight at the box face x=3: depth 3m.
    const std::int64_t mu = cam.width / 2, mv = cam.height / 2;
    const double center_depth =
        0.5 * (feat.at({cd, mv - 1, mu - 1}) + feat.at({cd, mv, mu})) *
        cfg.depth_scale;
    CHECK(center_depth == doctest::Approx(3.0).epsilon(1e-9));

    // Top rows look above the horizon and hit nothing: depth 0.
    CHECK(feat.at({cd, 0, 0}) == 0.0);
    // Bottom rows hit the ground plane at z=0.
    const auto ray = cam.unproject(0.5, cam.height - 0.5, 1.0);
    const double want_ground = (-1.2 / (ray[2] - 1.2)) / cfg.depth_scale;
    CHECK(feat.at({cd, cam.height - 1, 0}) ==
          doctest::Approx(want_ground).epsilon(1e-9));
}

TEST_CASE("scene JSON round-trips exactly") {
    const auto cfg = small_scene_cfg();
    const Scene a = generate_scene(19, cfg);
    const auto path = std::filesystem::temp_directory_path() / "scene_rt.json";
    save_scene_json(a, path);
    const Scene b = load_scene_json(path);
    std::filesystem::remove(path);

    CHECK(a.seed == b.seed);
    REQUIRE(a.points.size() == b.points.size());
    for (std::size_t i = 0; i < a.points.size(); ++i) {
        CHECK(a.points[i].x == b.points[i].x);
        CHECK(a.points[i].intensity == b.points[i].intensity);
    }
    REQUIRE(a.boxes.size() == b.boxes.size());
    for (std::size_t i = 0; i < a.boxes.size(); ++i) {
        CHECK(a.boxes[i].cx == b.boxes[i].cx);
        CHECK(a.boxes[i].yaw == b.boxes[i].yaw);
        CHECK(a.boxes[i].cls == b.boxes[i].cls);
    }
    CHECK(tensors_equal(a.image_feat, b.image_feat));
    CHECK(a.camera.intrinsics == b.camera.intrinsics);
    CHECK(a.camera.cam_to_ego == b.camera.cam_to_ego);
}

TEST_CASE("degradations at magnitude zero are the identity") {
    std::mt19937_64 rng(71);
    const Tensor dist = softmax_depth(Tensor::randn({6, 4, 4}, rng));
    CHECK(tensors_equal(apply_one_hot_noise(dist, 0.0, rng), dist));
    const Tensor logits = Tensor::randn({6, 4, 4}, rng);
    CHECK(tensors_equal(apply_logit_noise(logits, 0.0, rng), logits));
    const Tensor bev = Tensor::randn({3, 5, 5}, rng);
    CHECK(tensors_equal(shift_bev(bev, 0), bev));
}

TEST_CASE("one-hot noise at fraction one leaves one bin per pixel") {
    std::mt19937_64 rng(73);
    const Tensor dist = softmax_depth(Tensor::randn({5, 3, 4}, rng));
    const Tensor noisy = apply_one_hot_noise(dist, 1.0, rng);
    for (std::int64_t p = 0; p < 12; ++p) {
        double sum = 0.0;
        std::int64_t ones = 0;
        for (std::int64_t d = 0; d < 5; ++d) {
            const double v = noisy.data()[d * 12 + p];
            CHECK((v == 0.0 || v == 1.0));
            sum += v;
            ones += v == 1.0;
        }
        CHECK(sum == 1.0);
        CHECK(ones == 1);
    }
}

TEST_CASE("shift_bev translates content with zero fill") {
    const Tensor bev = Tensor::from({1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    const Tensor right = shift_bev(bev, 2);
    CHECK(right.at({0, 0, 0}) == 0.0);
    CHECK(right.at({0, 0, 1}) == 0.0);
    CHECK(right.at({0, 0, 2}) == 1.0);
    CHECK(right.at({0, 0, 3}) == 2.0);
    CHECK(right.at({0, 1, 2}) == 5.0);
    const Tensor left = shift_bev(bev, -1);
    CHECK(left.at({0, 0, 0}) == 2.0);
    CHECK(left.at({0, 0, 3}) == 0.0);
    // Shifting one way then back loses only the border columns.
    const Tensor back = shift_bev(right, -2);
    CHECK(back.at({0, 0, 0}) == 1.0);
    CHECK(back.at({0, 0, 1}) == 2.0);
    CHECK(back.at({0, 0, 2}) == 0.0);
}

TEST_CASE("misaligning by two cells moves the image evidence two cells") {
    std::mt19937_64 rng(79);
    Tensor bev = Tensor::zeros({1, 8, 8});
    std::vector<double> bv(bev.data().begin(), bev.data().end());
    bv[std::size_t(3 * 8 + 2)] = 1.0;
    bev = Tensor::from({1, 8, 8}, bv);
    const Tensor moved = shift_bev(bev, 2);
    std::int64_t best_lag = -99;
    double best = -1.0;
    for (std::int64_t lag = -3; lag <= 3; ++lag) {
        double corr = 0.0;
        for (std::int64_t y = 0; y < 8; ++y) {
            for (std::int64_t x = 0; x < 8; ++x) {
                const std::int64_t sx = x - lag;
                if (sx < 0 || sx >= 8) continue;
                corr += moved.at({0, y, x}) * bev.at({0, y, sx});
            }
        }
        if (corr > best) {
            best = corr;
            best_lag = lag;
        }
    }
    CHECK(best_lag == 2);
}

TEST_CASE("pipeline forward on an empty scene is finite and quiet") {
    auto scfg = small_scene_cfg();
    scfg.min_boxes = 0;
    scfg.max_boxes = 0;
    const Scene scene = generate_scene(3, scfg);
    REQUIRE(scene.boxes.empty());

    const Pipeline pipe(tiny_pipeline_cfg());
    const auto out = pipe.forward(scene);
    for (auto v : out.mask_prob.data()) {
        CHECK(std::isfinite(v));
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    const auto tgt = pipe.targets(scene);
    for (auto v : tgt.mask.data()) CHECK(v == 0.0);
    for (auto v : tgt.center.data()) CHECK(v == 0.0);
}

TEST_CASE("naive mode refuses the dilation modules") {
    PipelineConfig cfg = tiny_pipeline_cfg();
    cfg.mode = PipelineMode::NaiveConcat;
    cfg.use_svdb = true;
    cfg.use_sbdb = false;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg.use_svdb = false;
    cfg.use_sbdb = true;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg.use_sbdb = false;
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("mode and degradation names round-trip") {
    CHECK(parse_mode(mode_name(PipelineMode::LidarCentric)) ==
          PipelineMode::LidarCentric);
    CHECK(parse_mode(mode_name(PipelineMode::NaiveConcat)) ==
          PipelineMode::NaiveConcat);
    CHECK_THROWS_AS(parse_mode("hybrid"), Error);
    for (auto kind :
         {DegradationKind::None, DegradationKind::OneHotNoise,
          DegradationKind::RandomNoise, DegradationKind::SpatialMisalignment}) {
        CHECK(parse_degradation(degradation_name(kind)) == kind);
    }
    CHECK_THROWS_AS(parse_degradation("fog"), Error);
}

TEST_CASE("the fusion pipeline has more parameters than the plain baseline") {
    PipelineConfig full = tiny_pipeline_cfg();
    PipelineConfig base = tiny_pipeline_cfg();
    base.use_svdb = false;
    base.use_sbdb = false;
    const Pipeline a(full), b(base);
    CHECK(a.params().total_params() > b.params().total_params());
}

TEST_CASE("gradients from a full training step are finite") {
    const auto scfg = small_scene_cfg();
    const Scene scene = generate_scene(13, scfg);
    const Pipeline pipe(tiny_pipeline_cfg());

    Tape tape;
    TapeScope scope(tape);
    const auto out = pipe.forward(scene);
    const auto tgt = pipe.targets(scene);
    const Tensor loss = pipe.loss(out, tgt);
    REQUIRE(loss.numel() == 1);
    CHECK(std::isfinite(loss.item()));
    tape.backward(loss);

    std::int64_t with_grad = 0;
    for (const auto& [name, t] : pipe.params().entries()) {
        if (!t.has_grad()) continue;
        ++with_grad;
        for (auto g : t.grad()) {
            CAPTURE(name);
            CHECK(std::isfinite(g));
        }
    }
    CHECK(with_grad > 0);
}

TEST_CASE("training is deterministic from config and data") {
    auto cfg = tiny_pipeline_cfg();
    cfg.train_steps = 4;
    const auto scenes = generate_scenes(23, 2, small_scene_cfg());
    Pipeline a(cfg), b(cfg);
    const auto ra = a.train(scenes);
    const auto rb = b.train(scenes);
    REQUIRE(ra.loss_curve.size() == 4);
    REQUIRE(rb.loss_curve.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(ra.loss_curve[i] == rb.loss_curve[i]);
    }
    CHECK(ra.initial_mask_focal == rb.initial_mask_focal);
    CHECK(ra.final_mask_focal == rb.final_mask_focal);
    CHECK(tensors_equal(a.forward(scenes[0]).mask_prob,
                        b.forward(scenes[0]).mask_prob));
}

TEST_CASE("checkpoint restore reproduces the forward pass bit for bit") {
    auto cfg = tiny_pipeline_cfg();
    cfg.train_steps = 3;
    Pipeline trained(cfg);
    const auto scenes = generate_scenes(29, 2, small_scene_cfg());
    trained.train(scenes);

    const auto path = std::filesystem::temp_directory_path() / "pipe_ckpt.bin";
    trained.params().save_checkpoint(path);

    Pipeline restored(cfg);
    REQUIRE(!tensors_equal(restored.forward(scenes[0]).mask_prob,
                           trained.forward(scenes[0]).mask_prob));
    restored.params().load_checkpoint(path);
    std::filesystem::remove(path);

    const auto a = trained.forward(scenes[0]);
    const auto b = restored.forward(scenes[0]);
    CHECK(tensors_equal(a.mask_prob, b.mask_prob));
    CHECK(tensors_equal(a.center_prob, b.center_prob));
}

TEST_CASE("mask_iou against a direct set computation") {
    std::mt19937_64 rng(83);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 10; ++trial) {
        const std::int64_t n = 40;
        std::vector<double> pv(static_cast<std::size_t>(n));
        std::vector<double> tv(static_cast<std::size_t>(n));
        for (auto& v : pv) v = u(rng);
        for (auto& v : tv) v = u(rng) < 0.3 ? 1.0 : 0.0;
        const Tensor prob = Tensor::from({1, 5, 8}, pv);
        const Tensor tgt = Tensor::from({1, 5, 8}, tv);
        const double tau = 0.35;

        std::int64_t inter = 0, uni = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            const bool p = pv[std::size_t(i)] > tau;
            const bool t = tv[std::size_t(i)] > 0.5;
            inter += p && t;
            uni += p || t;
        }
        const double want = uni == 0 ? 1.0 : double(inter) / double(uni);
        CHECK(mask_iou(prob, tgt, tau) == doctest::Approx(want).epsilon(1e-12));
    }
    // Empty prediction and target count as perfect agreement.
    CHECK(mask_iou(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 2, 2}), 0.5) ==
          1.0);
}

TEST_CASE("center_mae hand cases") {
    VoxelizationConfig grid;
    grid.min_corner = {0.0, 0.0, 0.0};
    grid.max_corner = {8.0, 8.0, 1.0};
    grid.voxel_size = {1.0, 1.0, 1.0};

    auto prob_with_peak = [&](std::int64_t px, std::int64_t py, double v) {
        std::vector<double> pv(64, 0.0);
        pv[std::size_t(py * 8 + px)] = v;
        return Tensor::from({1, 8, 8}, pv);
    };

    Box box;
    box.cx = 3.5;
    box.cy = 4.5;

    SUBCASE("peak on the box center scores zero") {
        CHECK(center_mae(prob_with_peak(3, 4, 0.9), {box}, grid, 0.3) == 0.0);
    }
    SUBCASE("no peak pays the full penalty per box") {
        CHECK(center_mae(Tensor::zeros({1, 8, 8}), {box}, grid, 0.3) == 2.0);
        CHECK(center_mae(prob_with_peak(3, 4, 0.2), {box}, grid, 0.3) == 2.0);
    }
    SUBCASE("a one-cell offset scores the metric distance") {
        CHECK(center_mae(prob_with_peak(4, 4, 0.9), {box}, grid, 0.3) ==
              doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("far peaks never match") {
        CHECK(center_mae(prob_with_peak(7, 0, 0.9), {box}, grid, 0.3) == 2.0);
    }
    SUBCASE("no boxes scores zero") {
        CHECK(center_mae(prob_with_peak(3, 4, 0.9), {}, grid, 0.3) == 0.0);
    }
}

TEST_CASE("evaluate recomputes from per-scene forwards") {
    auto cfg = tiny_pipeline_cfg();
    Pipeline pipe(cfg);
    const auto scenes = generate_scenes(31, 3, small_scene_cfg());

    const Metrics metrics = pipe.evaluate(scenes);
    double iou_sum = 0.0, mae_sum = 0.0;
    for (const auto& scene : scenes) {
        const auto out = pipe.forward(scene);
        const auto tgt = pipe.targets(scene);
        iou_sum += mask_iou(out.mask_prob, tgt.mask, cfg.tau);
        mae_sum += center_mae(out.center_prob, scene.boxes, cfg.grid,
                              cfg.peak_threshold);
    }
    CHECK(metrics.mask_iou == doctest::Approx(iou_sum / 3.0).epsilon(1e-12));
    CHECK(metrics.center_mae_m == doctest::Approx(mae_sum / 3.0).epsilon(1e-12));
}

TEST_CASE("degraded evaluation is deterministic across calls") {
    auto cfg = tiny_pipeline_cfg();
    Pipeline pipe(cfg);
    const auto scenes = generate_scenes(37, 2, small_scene_cfg());
    const Degradation degr{DegradationKind::OneHotNoise, 0.5, 17};
    const Metrics a = pipe.evaluate(scenes, degr);
    const Metrics b = pipe.evaluate(scenes, degr);
    CHECK(a.mask_iou == b.mask_iou);
    CHECK(a.center_mae_m == b.center_mae_m);
}

TEST_CASE("csv writers emit stable headers and fixed precision") {
    CHECK(csv_number(1.0) == "1.000000");
    CHECK(csv_number(-0.25) == "-0.250000");
    CHECK(csv_number(0.123456789) == "0.123457");

    const auto dir = std::filesystem::temp_directory_path();
    const auto mpath = dir / "metrics_schema.csv";
    const auto dpath = dir / "drops_schema.csv";
    write_metrics_csv(mpath, {{"r1", "lidar_centric", "one_hot_noise", 0.5,
                               0.61, 0.42}});
    write_drops_csv(dpath, {{"r1", "naive_concat", "random_noise", 1.0, 0.6,
                             0.5, 0.1666}});

    std::ifstream mf(mpath);
    std::string line;
    std::getline(mf, line);
    CHECK(line == "run_id,mode,degradation,magnitude,mask_iou,center_mae_m");
    std::getline(mf, line);
    CHECK(line == "r1,lidar_centric,one_hot_noise,0.500000,0.610000,0.420000");

    std::ifstream df(dpath);
    std::getline(df, line);
    CHECK(line ==
          "run_id,mode,degradation,magnitude,clean_mask_iou,degraded_mask_iou,"
          "rel_drop_mask_iou");
    std::getline(df, line);
    CHECK(line == "r1,naive_concat,random_noise,1.000000,0.600000,0.500000,"
                  "0.166600");
    std::filesystem::remove(mpath);
    std::filesystem::remove(dpath);
}
