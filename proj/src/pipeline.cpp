#include "bevkit/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "bevkit/common.hpp"
#include "bevkit/ops.hpp"

namespace bevkit {

namespace {

Tensor weight_param(Shape shape, std::int64_t fan_in, std::mt19937_64& rng) {
    Tensor t = Tensor::randn(shape, rng, 1.0 / std::sqrt(double(fan_in)));
    return Tensor::param(t.shape(), {t.data().begin(), t.data().end()});
}

Tensor zeros_param(Shape shape) {
    Tensor t = Tensor::zeros(shape);
    return Tensor::param(t.shape(), {t.data().begin(), t.data().end()});
}

/// Start heads at a low foreground prior so untrained probabilities sit
/// well below the mask threshold.
void bias_towards_background(ForegroundHead& h) {
    h.b2.data()[0] = -2.0;
}

}  // namespace

PipelineMode parse_mode(const std::string& name) {
    if (name == "lidar_centric") return PipelineMode::LidarCentric;
    if (name == "naive_concat") return PipelineMode::NaiveConcat;
    fail("parse_mode: unknown mode '" + name +
         "' (expected lidar_centric or naive_concat)");
}

std::string mode_name(PipelineMode mode) {
    return mode == PipelineMode::LidarCentric ? "lidar_centric" : "naive_concat";
}

void PipelineConfig::validate() const {
    grid.validate();
    depth_bins.validate();
    if (mode == PipelineMode::NaiveConcat && (use_svdb || use_sbdb)) {
        fail("PipelineConfig: naive_concat is the plain-concatenation baseline; "
             "it cannot enable the dilation modules. Set use_svdb=false and "
             "use_sbdb=false, or switch mode to lidar_centric.");
    }
    require(stages >= 1 && blocks_per_stage >= 1,
            "PipelineConfig: need at least one stage and one block");
    require(bev_channels >= 1 && encoder_hidden >= 1 && head_hidden >= 1,
            "PipelineConfig: channel widths must be positive");
    require(groups >= 1 && bev_channels % groups == 0,
            "PipelineConfig: groups must divide bev_channels");
    require(tau > 0.0 && tau < 1.0, "PipelineConfig: tau must be in (0,1)");
    require(train_steps >= 1 && batch_size >= 1,
            "PipelineConfig: train_steps and batch_size must be positive");
    require(focal_gamma >= 0.0, "PipelineConfig: focal_gamma must be >= 0");
    require(focal_alpha > 0.0 && focal_alpha < 1.0,
            "PipelineConfig: focal_alpha must be in (0,1)");
    require(depth_prior_sharpness >= 0.0,
            "PipelineConfig: depth_prior_sharpness must be >= 0");
    if (depth_prior_sharpness > 0.0) {
        require(image_channels >= 4,
                "PipelineConfig: the depth prior reads the third-from-last "
                "image channel, which needs image_channels >= 4");
        require(depth_prior_scale > 0.0,
                "PipelineConfig: depth_prior_scale must be positive");
    }
}

Pipeline::Pipeline(const PipelineConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const std::int64_t ci = cfg_.image_channels;
    const std::int64_t cb = cfg_.bev_channels;

    enc_w1_ = weight_param({4, cfg_.encoder_hidden}, 4, rng);
    enc_b1_ = zeros_param({cfg_.encoder_hidden});
    enc_w2_ = weight_param({cfg_.encoder_hidden, cb}, cfg_.encoder_hidden, rng);
    enc_b2_ = zeros_param({cb});
    registry_.add("encoder.w1", enc_w1_);
    registry_.add("encoder.b1", enc_b1_);
    registry_.add("encoder.w2", enc_w2_);
    registry_.add("encoder.b2", enc_b2_);

    if (cfg_.depth_prior_sharpness > 0.0) {
        depth_head_ = make_depth_head(
            ci, cfg_.depth_bins,
            DepthPrior{ci - 3, cfg_.depth_prior_scale, cfg_.depth_prior_sharpness},
            rng);
    } else {
        depth_head_ = make_depth_head(ci, cfg_.depth_bins.num_bins, rng);
    }
    register_depth_head(registry_, "depth", depth_head_);

    image_encoder_ = make_downsample_encoder(ci, 1, rng);
    register_downsample_encoder(registry_, "image_enc", image_encoder_);

    const bool lc = cfg_.mode == PipelineMode::LidarCentric;
    if (lc && cfg_.use_svdb) {
        svdb_ = make_svdb(ci + cb, cfg_.head_hidden, cb, rng);
        svdb_.tau = cfg_.tau;
        bias_towards_background(svdb_.head);
        register_svdb(registry_, "svdb", svdb_);
    }

    const std::int64_t trunk_c = lc ? cb : cb + ci;
    const std::int64_t blocks = cfg_.stages * cfg_.blocks_per_stage;
    for (std::int64_t i = 0; i < blocks; ++i) {
        const std::string prefix = "trunk.s" + std::to_string(i / cfg_.blocks_per_stage) +
                                   ".b" + std::to_string(i % cfg_.blocks_per_stage);
        if (lc && cfg_.use_sbdb) {
            sbdb_blocks_.push_back(make_sbdb_block(cb, ci, cfg_.groups, rng));
            register_sbdb_block(registry_, prefix, sbdb_blocks_.back());
        } else {
            plain_kernels_.push_back(
                weight_param({trunk_c, trunk_c, 3, 3}, trunk_c * 9, rng));
            plain_biases_.push_back(zeros_param({trunk_c}));
            registry_.add(prefix + ".k", plain_kernels_.back());
            registry_.add(prefix + ".b", plain_biases_.back());
        }
    }

    mask_head_ = make_foreground_head(trunk_c, cfg_.head_hidden, rng);
    bias_towards_background(mask_head_);
    register_foreground_head(registry_, "mask_head", mask_head_);

    center_head_ = make_foreground_head(trunk_c, cfg_.head_hidden, rng);
    bias_towards_background(center_head_);
    register_foreground_head(registry_, "center_head", center_head_);
}

Tensor Pipeline::encode_occupied_rows(const Tensor& voxel_feats,
                                      const std::vector<std::int64_t>& seg_of_voxel,
                                      std::int64_t num_segments) const {
    Tensor h = relu(add_bias_rows(matmul(voxel_feats, enc_w1_), enc_b1_));
    h = relu(add_bias_rows(matmul(h, enc_w2_), enc_b2_));
    return segment_max(h, seg_of_voxel, num_segments);
}

Tensor Pipeline::image_to_bev(const Scene& scene, const Degradation& degr) const {
    std::mt19937_64 drng(degr.seed);
    Tensor logits = predict_depth_logits(depth_head_, scene.image_feat);
    if (degr.kind == DegradationKind::RandomNoise) {
        logits = apply_logit_noise(logits, degr.magnitude, drng);
    }
    Tensor dist = softmax_depth(logits);
    if (degr.kind == DegradationKind::OneHotNoise) {
        dist = apply_one_hot_noise(dist, degr.magnitude, drng);
    }
    const auto table = splat_cell_table(scene.camera, cfg_.depth_bins, cfg_.grid);
    Tensor bev = lift_splat(scene.image_feat, dist, table, cfg_.grid);
    bev = downsample_image_bev(image_encoder_, bev);
    if (degr.kind == DegradationKind::SpatialMisalignment) {
        bev = shift_bev(bev, std::llround(degr.magnitude));
    }
    return bev;
}

Pipeline::Outputs Pipeline::forward(const Scene& scene,
                                    const Degradation& degr) const {
    require(scene.image_feat.rank() == 3 &&
                scene.image_feat.extent(0) == cfg_.image_channels,
            "Pipeline::forward: scene image channels do not match the config");
    const auto voxels = voxelize(scene.points, cfg_.grid);
    const auto grouping = group_by_bev_cell(voxels);
    Tensor rows = encode_occupied_rows(
        voxels.features, grouping.seg_of_voxel,
        std::int64_t(grouping.cell_coords.size()));
    SparseBEVSet occupied{grouping.cell_coords, rows, voxels.bins[0],
                          voxels.bins[1]};

    Outputs out{Tensor::scalar(0.0), Tensor::scalar(0.0),
                image_to_bev(scene, degr), std::nullopt, {}};
    Tensor lidar_dense = scatter_to_bev(occupied);

    Tensor trunk;
    if (cfg_.mode == PipelineMode::LidarCentric) {
        if (cfg_.use_svdb) {
            auto sv = dilate_and_refine(svdb_, occupied, out.image_bev, lidar_dense);
            trunk = scatter_to_bev(sv.refined);
            out.svdb = std::move(sv);
        } else {
            trunk = lidar_dense;
        }
    } else {
        trunk = concat0(lidar_dense, out.image_bev);
    }

    for (std::size_t i = 0; i < std::size_t(cfg_.stages * cfg_.blocks_per_stage);
         ++i) {
        if (!sbdb_blocks_.empty()) {
            DeformationField field;
            trunk = sbdb_block(trunk, out.image_bev, sbdb_blocks_[i], &field);
            out.fields.push_back(std::move(field));
        } else {
            trunk = silu(add_bias_channels(conv2d(trunk, plain_kernels_[i], 1, 1),
                                           plain_biases_[i]));
        }
    }

    out.mask_prob = predict_foreground(mask_head_, trunk);
    out.center_prob = predict_foreground(center_head_, trunk);
    return out;
}

Pipeline::Targets Pipeline::targets(const Scene& scene) const {
    std::vector<FootprintRect> rects;
    rects.reserve(scene.boxes.size());
    for (const auto& b : scene.boxes) {
        rects.push_back({b.cx, b.cy, b.w / 2.0, b.l / 2.0, b.yaw});
    }
    Targets t{foreground_target(rects, cfg_.grid), Tensor::scalar(0.0)};

    const auto bins = cfg_.grid.bins();
    const std::int64_t xb = bins[0], yb = bins[1];
    std::vector<double> center(std::size_t(yb * xb), 0.0);
    const double r2 = cfg_.center_radius_m * cfg_.center_radius_m;
    for (const auto& b : scene.boxes) {
        for (std::int64_t iy = 0; iy < yb; ++iy) {
            const double cy =
                cfg_.grid.min_corner[1] + (iy + 0.5) * cfg_.grid.voxel_size[1];
            for (std::int64_t ix = 0; ix < xb; ++ix) {
                const double cx =
                    cfg_.grid.min_corner[0] + (ix + 0.5) * cfg_.grid.voxel_size[0];
                const double dx = cx - b.cx, dy = cy - b.cy;
                if (dx * dx + dy * dy <= r2) center[std::size_t(iy * xb + ix)] = 1.0;
            }
        }
    }
    t.center = Tensor::from({1, yb, xb}, std::move(center));
    return t;
}

Tensor Pipeline::loss(const Outputs& out, const Targets& tgt) const {
    Tensor total = add(
        focal_loss(out.mask_prob, tgt.mask, cfg_.focal_alpha, cfg_.focal_gamma),
        focal_loss(out.center_prob, tgt.center, cfg_.focal_alpha, cfg_.focal_gamma));
    if (out.svdb.has_value()) {
        total = add(total, scale(focal_loss(out.svdb->prob, tgt.mask,
                                            cfg_.focal_alpha, cfg_.focal_gamma),
                                 cfg_.aux_mask_weight));
    }
    return total;
}

double Pipeline::mask_focal(const Scene& scene) const {
    const auto out = forward(scene);
    const auto tgt = targets(scene);
    return focal_loss(out.mask_prob, tgt.mask, cfg_.focal_alpha, cfg_.focal_gamma)
        .item();
}

TrainResult Pipeline::train(const std::vector<Scene>& scenes) {
    require(!scenes.empty(), "Pipeline::train: no scenes");
    AdamW opt(registry_, cfg_.opt);
    TrainResult res;

    auto mean_mask_focal = [&] {
        double s = 0.0;
        for (const auto& scene : scenes) s += mask_focal(scene);
        return s / double(scenes.size());
    };
    res.initial_mask_focal = mean_mask_focal();

    Tape tape;
    for (std::int64_t step = 0; step < cfg_.train_steps; ++step) {
        double step_loss = 0.0;
        try {
            for (std::int64_t j = 0; j < cfg_.batch_size; ++j) {
                const auto& scene =
                    scenes[std::size_t((step * cfg_.batch_size + j) %
                                       std::int64_t(scenes.size()))];
                TapeScope scope(tape);
                const auto out = forward(scene);
                Tensor l = scale(loss(out, targets(scene)), 1.0 / cfg_.batch_size);
                step_loss += l.item();
                tape.backward(l);
            }
        } catch (const Error& e) {
            fail("Pipeline::train: diverged at step " + std::to_string(step) +
                 " (loss so far " + std::to_string(step_loss) + "): " + e.what());
        }
        require(std::isfinite(step_loss),
                "Pipeline::train: non-finite loss at step " + std::to_string(step));
        opt.step();
        opt.zero_grad();
        res.loss_curve.push_back(step_loss);
    }

    res.final_mask_focal = mean_mask_focal();
    return res;
}

Metrics Pipeline::evaluate(const std::vector<Scene>& scenes,
                           const Degradation& degr) const {
    require(!scenes.empty(), "Pipeline::evaluate: no scenes");
    Metrics m;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        Degradation d = degr;
        d.seed = degr.seed + 0x9e3779b97f4a7c15ULL * (i + 1);
        const auto out = forward(scenes[i], d);
        const auto tgt = targets(scenes[i]);
        m.mask_iou += mask_iou(out.mask_prob, tgt.mask, cfg_.tau);
        m.center_mae_m += center_mae(out.center_prob, scenes[i].boxes, cfg_.grid,
                                     cfg_.peak_threshold);
    }
    m.mask_iou /= double(scenes.size());
    m.center_mae_m /= double(scenes.size());
    return m;
}

double mask_iou(const Tensor& prob, const Tensor& target, double tau) {
    require(prob.shape() == target.shape(), "mask_iou: shape mismatch");
    const auto p = prob.data();
    const auto t = target.data();
    std::int64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool a = p[i] > tau;
        const bool b = t[i] > 0.5;
        inter += (a && b) ? 1 : 0;
        uni += (a || b) ? 1 : 0;
    }
    return uni == 0 ? 1.0 : double(inter) / double(uni);
}

double center_mae(const Tensor& center_prob, const std::vector<Box>& boxes,
                  const VoxelizationConfig& grid, double peak_threshold) {
    require(center_prob.rank() == 3 && center_prob.extent(0) == 1,
            "center_mae: expects [1,Y,X]");
    if (boxes.empty()) return 0.0;
    const std::int64_t yb = center_prob.extent(1);
    const std::int64_t xb = center_prob.extent(2);
    const auto p = center_prob.data();
    auto at = [&](std::int64_t y, std::int64_t x) {
        return p[std::size_t(y * xb + x)];
    };

    struct Peak {
        double v, x_m, y_m;
        std::int64_t y, x;
    };
    std::vector<Peak> peaks;
    for (std::int64_t y = 0; y < yb; ++y) {
        for (std::int64_t x = 0; x < xb; ++x) {
            const double v = at(y, x);
            if (v < peak_threshold) continue;
            bool is_max = true;
            for (std::int64_t dy = -1; dy <= 1 && is_max; ++dy) {
                for (std::int64_t dx = -1; dx <= 1 && is_max; ++dx) {
                    if (dy == 0 && dx == 0) continue;
                    const std::int64_t ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= yb || nx < 0 || nx >= xb) continue;
                    if (at(ny, nx) >= v) is_max = false;
                }
            }
            if (is_max) {
                peaks.push_back({v,
                                 grid.min_corner[0] + (x + 0.5) * grid.voxel_size[0],
                                 grid.min_corner[1] + (y + 0.5) * grid.voxel_size[1],
                                 y, x});
            }
        }
    }
    std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
        if (a.v != b.v) return a.v > b.v;
        if (a.y != b.y) return a.y < b.y;
        return a.x < b.x;
    });

    constexpr double kMatchRadius = 2.0;
    std::vector<bool> claimed(boxes.size(), false);
    double total = 0.0;
    std::size_t matched = 0;
    for (const auto& pk : peaks) {
        double best = kMatchRadius;
        std::size_t best_i = boxes.size();
        for (std::size_t i = 0; i < boxes.size(); ++i) {
            if (claimed[i]) continue;
            const double d = std::hypot(pk.x_m - boxes[i].cx, pk.y_m - boxes[i].cy);
            if (d < best) {
                best = d;
                best_i = i;
            }
        }
        if (best_i != boxes.size()) {
            claimed[best_i] = true;
            total += best;
            ++matched;
        }
    }
    total += kMatchRadius * double(boxes.size() - matched);
    return total / double(boxes.size());
}

}  // namespace bevkit
