#include "bevkit/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <vector>

#include "bevkit/adam.hpp"
#include "bevkit/common.hpp"
#include "bevkit/fdcheck.hpp"
#include "bevkit/geometry.hpp"
#include "bevkit/hilbert.hpp"
#include "bevkit/lss.hpp"
#include "bevkit/ops.hpp"
#include "bevkit/reference.hpp"
#include "bevkit/sbdb.hpp"
#include "bevkit/scan.hpp"
#include "bevkit/scene.hpp"
#include "bevkit/serialize.hpp"
#include "bevkit/svdb.hpp"

namespace bevkit {

namespace {

constexpr double kFDTol = 1e-4;

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2e", v);
    return buf;
}

Tensor rand_param(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
    Tensor t = Tensor::randn(shape, rng, stddev);
    return Tensor::param(t.shape(), {t.data().begin(), t.data().end()});
}

std::vector<double> rand_vec(std::size_t n, std::mt19937_64& rng,
                             double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

struct Runner {
    SelfTestResult result;

    template <typename Fn>
    void check(const std::string& name, Fn&& fn) {
        try {
            std::string detail = fn();
            result.lines.push_back("ok " + name +
                                   (detail.empty() ? "" : " (" + detail + ")"));
            ++result.passed;
        } catch (const std::exception& e) {
            result.lines.push_back("FAIL " + name + ": " + e.what());
            ++result.failed;
        }
    }
};

std::string fd_detail(const FDReport& r) {
    require(r.max_rel_err < kFDTol,
            "finite-difference mismatch, max rel err " + fmt(r.max_rel_err));
    return "max rel err " + fmt(r.max_rel_err) + " over " +
           std::to_string(r.checked) + " elements";
}

std::string check_grad_dense_stack() {
    std::mt19937_64 rng(11);
    std::vector<Tensor> leaves{rand_param({3, 4}, rng), rand_param({4, 5}, rng),
                               rand_param({5}, rng, 0.1),
                               rand_param({5}, rng, 0.2), rand_param({5}, rng, 0.2)};
    auto loss = [&] {
        Tensor h = silu(add_bias_rows(matmul(leaves[0], leaves[1]), leaves[2]));
        h = layer_norm(h, leaves[3], leaves[4], 1e-5);
        return mean(h);
    };
    return fd_detail(fd_check(loss, leaves));
}

std::string check_grad_conv_stack() {
    std::mt19937_64 rng(12);
    std::vector<Tensor> leaves{rand_param({2, 5, 5}, rng),
                               rand_param({3, 2, 3, 3}, rng, 0.4),
                               rand_param({3}, rng, 0.1)};
    auto loss = [&] {
        return mean(silu(
            add_bias_channels(conv2d(leaves[0], leaves[1], 1, 1), leaves[2])));
    };
    return fd_detail(fd_check(loss, leaves));
}

std::string check_grad_focal() {
    std::mt19937_64 rng(13);
    std::vector<Tensor> leaves{rand_param({2, 6}, rng)};
    std::vector<double> bits(12);
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = (i % 3 == 0) ? 1.0 : 0.0;
    Tensor target = Tensor::from({2, 6}, std::move(bits));
    auto loss = [&] { return focal_loss(sigmoid(leaves[0]), target, 0.75, 2.0); };
    return fd_detail(fd_check(loss, leaves));
}

std::string check_grad_softmax() {
    std::mt19937_64 rng(14);
    std::vector<Tensor> leaves{rand_param({3, 5}, rng)};
    Tensor w = Tensor::from({3, 5}, rand_vec(15, rng));
    auto loss = [&] { return sum(mul(softmax_rows(leaves[0]), w)); };
    return fd_detail(fd_check(loss, leaves));
}

std::string check_grad_scan_block() {
    std::mt19937_64 rng(15);
    MambaConfig cfg{4, 3, 2, 3, true};
    MambaParams p = make_mamba(cfg, rng);
    std::vector<Tensor> leaves{rand_param({5, 4}, rng), p.w_x,   p.w_z,
                               p.conv_taps,             p.w_delta, p.b_delta,
                               p.w_b,                   p.w_c,   p.a_log,
                               p.d_skip,                p.w_out, p.b_out};
    auto loss = [&] { return mean(mamba_layer(p, leaves[0])); };
    return fd_detail(fd_check(loss, leaves));
}

std::string check_grad_deform() {
    std::mt19937_64 rng(16);
    std::vector<Tensor> leaves{
        rand_param({4, 4, 5}, rng), rand_param({4, 2, 9}, rng, 0.3),
        rand_param({36, 4, 5}, rng, 0.2), rand_param({18, 4, 5}, rng, 0.3)};
    auto loss = [&] {
        return mean(deform_conv2d(leaves[0], leaves[1], leaves[2],
                                  sigmoid(leaves[3]), 2, 3, 3));
    };
    return fd_detail(fd_check(loss, leaves));
}

std::string check_grad_lift_splat() {
    std::mt19937_64 rng(17);
    std::vector<Tensor> leaves{rand_param({3, 2, 2}, rng),
                               rand_param({4, 2, 2}, rng, 0.5)};
    std::vector<std::int32_t> cell_of(16);
    for (std::size_t i = 0; i < cell_of.size(); ++i) {
        cell_of[i] = (i % 5 == 0) ? -1 : std::int32_t(i % 6);
    }
    auto loss = [&] {
        return mean(lift_splat_op(leaves[0], leaves[1], cell_of, 2, 3));
    };
    return fd_detail(fd_check(loss, leaves));
}

std::string check_oracle_scan() {
    std::mt19937_64 rng(18);
    const std::int64_t len = 7, ch = 3, st = 2;
    auto xv = rand_vec(std::size_t(len * ch), rng);
    auto dv = rand_vec(std::size_t(len * ch), rng, 0.01, 1.5);
    auto bv = rand_vec(std::size_t(len * st), rng);
    auto cv = rand_vec(std::size_t(len * st), rng);
    auto av = rand_vec(std::size_t(ch * st), rng, -2.0, -0.05);
    auto dskip = rand_vec(std::size_t(ch), rng);

    Tensor y = ssm_scan(Tensor::from({len, ch}, std::vector<double>(xv)),
                        Tensor::from({len, ch}, std::vector<double>(dv)),
                        Tensor::from({len, st}, std::vector<double>(bv)),
                        Tensor::from({len, st}, std::vector<double>(cv)),
                        Tensor::from({ch, st}, std::vector<double>(av)),
                        Tensor::from({ch}, std::vector<double>(dskip)));
    const auto want = reference::ssm_scan(xv, dv, bv, cv, av, dskip, len, ch, st);
    double worst = 0.0;
    for (std::size_t i = 0; i < want.size(); ++i) {
        worst = std::max(worst, std::abs(y.data()[i] - want[i]));
    }
    require(worst < 1e-10, "scan deviates from the literal recurrence by " + fmt(worst));
    return "max abs err " + fmt(worst);
}

std::string check_oracle_conv() {
    std::mt19937_64 rng(19);
    double worst = 0.0;
    for (auto [stride, h, w] : {std::array<std::int64_t, 3>{1, 6, 5},
                                std::array<std::int64_t, 3>{2, 7, 5}}) {
        auto xv = rand_vec(std::size_t(3 * h * w), rng);
        auto kv = rand_vec(std::size_t(4 * 3 * 3 * 3), rng);
        Tensor y = conv2d(Tensor::from({3, h, w}, std::vector<double>(xv)),
                          Tensor::from({4, 3, 3, 3}, std::vector<double>(kv)),
                          stride, 1);
        const auto want = reference::conv2d(xv, 3, h, w, kv, 4, 3, 3, stride, 1);
        for (std::size_t i = 0; i < want.size(); ++i) {
            worst = std::max(worst, std::abs(y.data()[i] - want[i]));
        }
    }
    require(worst < 1e-12, "conv deviates from the plain-loop oracle by " + fmt(worst));
    return "max abs err " + fmt(worst);
}

std::string check_oracle_focal() {
    std::mt19937_64 rng(20);
    auto pv = rand_vec(24, rng, 0.001, 0.999);
    std::vector<double> tv(24);
    for (std::size_t i = 0; i < tv.size(); ++i) tv[i] = (i % 4 == 0) ? 1.0 : 0.0;
    const double got =
        focal_loss(Tensor::from({24}, std::vector<double>(pv)),
                   Tensor::from({24}, std::vector<double>(tv)), 0.25, 2.0)
            .item();
    const double want = reference::focal_loss(pv, tv, 0.25, 2.0);
    require(std::abs(got - want) < 1e-12,
            "focal deviates from the per-element oracle by " + fmt(got - want));
    return "abs err " + fmt(std::abs(got - want));
}

std::string check_oracle_rowwise() {
    std::mt19937_64 rng(21);
    auto xv = rand_vec(20, rng, -3.0, 3.0);
    auto gv = rand_vec(5, rng, 0.5, 1.5);
    auto bv = rand_vec(5, rng);
    Tensor sm = softmax_rows(Tensor::from({4, 5}, std::vector<double>(xv)));
    Tensor ln = layer_norm(Tensor::from({4, 5}, std::vector<double>(xv)),
                           Tensor::from({5}, std::vector<double>(gv)),
                           Tensor::from({5}, std::vector<double>(bv)), 1e-5);
    const auto sm_want = reference::softmax_rows(xv, 4, 5);
    const auto ln_want = reference::layer_norm(xv, 4, 5, gv, bv, 1e-5);
    double worst = 0.0;
    for (std::size_t i = 0; i < sm_want.size(); ++i) {
        worst = std::max(worst, std::abs(sm.data()[i] - sm_want[i]));
        worst = std::max(worst, std::abs(ln.data()[i] - ln_want[i]));
    }
    require(worst < 1e-12, "row kernels deviate from oracles by " + fmt(worst));
    return "max abs err " + fmt(worst);
}

std::string check_hilbert_walk() {
    {
        const int bits = 4;
        const std::uint32_t side = 1u << bits;
        std::vector<std::uint32_t> xs(side * side), ys(side * side);
        std::vector<bool> seen(side * side, false);
        for (std::uint32_t y = 0; y < side; ++y) {
            for (std::uint32_t x = 0; x < side; ++x) {
                const auto idx = hilbert_index_2d(x, y, bits);
                require(idx < side * side && !seen[std::size_t(idx)],
                        "2d index collision");
                seen[std::size_t(idx)] = true;
                xs[std::size_t(idx)] = x;
                ys[std::size_t(idx)] = y;
            }
        }
        for (std::size_t i = 1; i < xs.size(); ++i) {
            const auto step = std::abs(int(xs[i]) - int(xs[i - 1])) +
                              std::abs(int(ys[i]) - int(ys[i - 1]));
            require(step == 1, "2d walk step " + std::to_string(step));
        }
    }
    {
        const int bits = 2;
        const std::uint32_t side = 1u << bits;
        std::vector<std::array<std::uint32_t, 3>> at(side * side * side);
        std::vector<bool> seen(at.size(), false);
        for (std::uint32_t z = 0; z < side; ++z) {
            for (std::uint32_t y = 0; y < side; ++y) {
                for (std::uint32_t x = 0; x < side; ++x) {
                    const auto idx = hilbert_index_3d(x, y, z, bits);
                    require(idx < at.size() && !seen[std::size_t(idx)],
                            "3d index collision");
                    seen[std::size_t(idx)] = true;
                    at[std::size_t(idx)] = {x, y, z};
                }
            }
        }
        for (std::size_t i = 1; i < at.size(); ++i) {
            int step = 0;
            for (int a = 0; a < 3; ++a) {
                step += std::abs(int(at[i][a]) - int(at[i - 1][a]));
            }
            require(step == 1, "3d walk step " + std::to_string(step));
        }
    }
    return "2d 16x16 and 3d 4x4x4 exhaustive";
}

std::string check_deform_degeneracy() {
    std::mt19937_64 rng(22);
    const std::int64_t cin = 4, cout = 4, groups = 2, h = 5, w = 6;
    auto fv = rand_vec(std::size_t(cin * h * w), rng);
    auto wv = rand_vec(std::size_t(cout * (cin / groups) * 9), rng);
    Tensor feat = Tensor::from({cin, h, w}, std::vector<double>(fv));
    Tensor weight = Tensor::from({cout, cin / groups, 9}, std::vector<double>(wv));
    Tensor offsets = Tensor::zeros({groups * 9 * 2, h, w});
    Tensor modulation = Tensor::full({groups * 9, h, w}, 0.5);
    Tensor got = deform_conv2d(feat, weight, offsets, modulation, groups, 3, 3);

    std::vector<double> dense(std::size_t(cout * cin * 9), 0.0);
    const std::int64_t cpg_in = cin / groups, cpg_out = cout / groups;
    for (std::int64_t co = 0; co < cout; ++co) {
        const std::int64_t g = co / cpg_out;
        for (std::int64_t cl = 0; cl < cpg_in; ++cl) {
            for (std::int64_t k = 0; k < 9; ++k) {
                dense[std::size_t((co * cin + g * cpg_in + cl) * 9 + k)] =
                    0.5 * wv[std::size_t((co * cpg_in + cl) * 9 + k)];
            }
        }
    }
    const auto want = reference::conv2d(fv, cin, h, w, dense, cout, 3, 3, 1, 1);
    double worst = 0.0;
    for (std::size_t i = 0; i < want.size(); ++i) {
        worst = std::max(worst, std::abs(got.data()[i] - want[i]));
    }
    require(worst < 1e-10,
            "deformable conv with zero offsets deviates from dense conv by " +
                fmt(worst));
    return "max abs err " + fmt(worst);
}

std::string check_zero_modulation() {
    std::mt19937_64 rng(23);
    const std::int64_t h = 4, w = 4;
    Tensor feat = Tensor::from({4, h, w}, rand_vec(std::size_t(4 * h * w), rng));
    Tensor weight = Tensor::from({4, 2, 9}, rand_vec(72, rng));
    Tensor mod = Tensor::zeros({18, h, w});
    Tensor off_a = Tensor::from({36, h, w}, rand_vec(std::size_t(36 * h * w), rng));
    Tensor off_b = Tensor::from({36, h, w}, rand_vec(std::size_t(36 * h * w), rng));
    Tensor ya = deform_conv2d(feat, weight, off_a, mod, 2, 3, 3);
    Tensor yb = deform_conv2d(feat, weight, off_b, mod, 2, 3, 3);
    for (std::size_t i = 0; i < ya.data().size(); ++i) {
        require(ya.data()[i] == 0.0 && yb.data()[i] == 0.0,
                "zero modulation must produce exactly zero output");
    }
    return "output bitwise zero for both offset fields";
}

std::string check_lss_conservation() {
    std::mt19937_64 rng(24);
    CameraModel cam = make_toy_camera(8, 8);
    DepthBins bins{1.0, 7.0, 6};
    VoxelizationConfig grid{{-8.0, -8.0, -1.0}, {8.0, 8.0, 3.0}, {0.25, 0.25, 0.5}};
    const auto table = splat_cell_table(cam, bins, grid);
    for (auto c : table) require(c >= 0, "expected a fully in-grid frustum");

    Tensor feat = Tensor::from({3, 8, 8}, rand_vec(192, rng, 0.0, 1.0));
    Tensor logits = Tensor::from({6, 8, 8}, rand_vec(384, rng, -2.0, 2.0));
    Tensor dist = softmax_depth(logits);
    for (std::int64_t p = 0; p < 64; ++p) {
        double s = 0.0;
        for (std::int64_t d = 0; d < 6; ++d) s += dist.data()[std::size_t(d * 64 + p)];
        require(std::abs(s - 1.0) < 1e-12, "depth softmax must sum to one");
    }
    Tensor bev = lift_splat(feat, dist, table, grid);
    double worst = 0.0;
    for (std::int64_t c = 0; c < 3; ++c) {
        double in_mass = 0.0, out_mass = 0.0;
        for (std::int64_t p = 0; p < 64; ++p) {
            in_mass += feat.data()[std::size_t(c * 64 + p)];
        }
        const auto plane = std::size_t(bev.extent(1) * bev.extent(2));
        for (std::size_t p = 0; p < plane; ++p) {
            out_mass += bev.data()[std::size_t(c) * plane + p];
        }
        worst = std::max(worst, std::abs(in_mass - out_mass));
    }
    require(worst < 1e-9, "splat does not conserve feature mass, err " + fmt(worst));
    return "mass err " + fmt(worst);
}

std::string check_voxel_permutation() {
    SceneGenConfig cfg;
    Scene scene = generate_scene(5, cfg);
    auto shuffled = scene.points;
    std::mt19937_64 rng(99);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto a = voxelize(scene.points, cfg.grid);
    const auto b = voxelize(shuffled, cfg.grid);
    require(a.coords == b.coords, "voxel coordinates changed under permutation");
    const auto av = a.features.data(), bv = b.features.data();
    for (std::size_t i = 0; i < av.size(); ++i) {
        require(av[i] == bv[i], "voxel features changed under permutation");
    }
    return std::to_string(a.coords.size()) + " voxels bit-identical";
}

std::string check_checkpoint_roundtrip() {
    std::mt19937_64 rng(25);
    ParamRegistry reg;
    Tensor a = rand_param({3, 4}, rng);
    Tensor b = rand_param({7}, rng);
    reg.add("a", a);
    reg.add("b", b);
    const std::vector<double> a0(a.data().begin(), a.data().end());
    const auto path = std::filesystem::temp_directory_path() / "bevkit_selftest.ckpt";
    reg.save_checkpoint(path);
    for (auto& v : a.data()) v += 1.0;
    for (auto& v : b.data()) v -= 2.0;
    reg.load_checkpoint(path);
    std::filesystem::remove(path);
    for (std::size_t i = 0; i < a0.size(); ++i) {
        require(a.data()[i] == a0[i], "checkpoint did not restore bitwise");
    }
    return "binary roundtrip bitwise";
}

std::string check_adam_formula() {
    ParamRegistry reg;
    Tensor w = Tensor::param({1}, {1.0});
    reg.add("w", w);
    AdamWConfig cfg;
    AdamW opt(reg, cfg);

    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = scale(sum(w), 0.5);  // gradient 0.5
        tape.backward(loss);
    }
    opt.step();
    const double g = 0.5;
    const double mhat = g, vhat = g * g;
    const double want =
        1.0 - cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * 1.0);
    const double err = std::abs(w.item() - want);
    require(err < 1e-12, "first step deviates from the closed form by " + fmt(err));
    return "abs err " + fmt(err);
}

std::string check_dilation_merge() {
    std::mt19937_64 rng(26);
    SparseBEVSet occ;
    occ.xbins = 4;
    occ.ybins = 4;
    occ.coords = {{1, 0}, {2, 1}, {0, 3}};
    occ.features = rand_param({3, 5}, rng);
    Tensor embedding = rand_param({5}, rng);
    std::vector<std::uint8_t> mask(16, 0);
    mask[std::size_t(0 * 4 + 1)] = 1;  // already occupied
    mask[std::size_t(2 * 4 + 3)] = 1;  // new
    mask[std::size_t(0 * 4 + 0)] = 1;  // new

    const auto res = dilate(occ, mask, embedding);
    require(res.dilated.coords ==
                (std::vector<std::array<std::int64_t, 2>>{
                    {0, 0}, {1, 0}, {2, 1}, {3, 2}, {0, 3}}),
            "merged coordinates are not in canonical order");
    require((res.is_new == std::vector<std::uint8_t>{1, 0, 0, 1, 0}),
            "new-cell flags are wrong");
    const auto out = res.dilated.features.data();
    const auto in = occ.features.data();
    for (std::int64_t c = 0; c < 5; ++c) {
        require(out[std::size_t(1 * 5 + c)] == in[std::size_t(0 * 5 + c)] &&
                    out[std::size_t(2 * 5 + c)] == in[std::size_t(1 * 5 + c)] &&
                    out[std::size_t(4 * 5 + c)] == in[std::size_t(2 * 5 + c)],
                "original rows must pass through bitwise");
        require(out[std::size_t(0 * 5 + c)] == embedding.data()[std::size_t(c)],
                "new rows must carry the embedding");
    }
    return "merge of 3+2 cells canonical and bitwise";
}

std::string check_tape_accumulation() {
    Tensor w = Tensor::param({2}, {0.3, -0.7});
    Tape tape;
    auto run = [&] {
        TapeScope scope(tape);
        tape.backward(sum(mul(w, w)));
    };
    run();
    std::vector<double> once(w.grad().begin(), w.grad().end());
    run();
    for (std::size_t i = 0; i < once.size(); ++i) {
        require(w.grad()[i] == 2.0 * once[i],
                "second backward must accumulate exactly");
    }
    w.zero_grad();
    return "two passes accumulate exactly twice";
}

std::string check_scan_zero_identity() {
    std::mt19937_64 rng(27);
    MambaConfig cfg{6, 4, 2, 4, true};
    MambaParams p = make_mamba(cfg, rng);
    Tensor y = mamba_layer(p, Tensor::zeros({9, 6}));
    for (double v : y.data()) {
        require(v == 0.0, "zero sequence must map to exactly zero");
    }
    return "zero in, zero out, bitwise";
}

}  // namespace

SelfTestResult run_selftest() {
    Runner r;
    r.check("grad_dense_stack", check_grad_dense_stack);
    r.check("grad_conv_stack", check_grad_conv_stack);
    r.check("grad_focal", check_grad_focal);
    r.check("grad_softmax", check_grad_softmax);
    r.check("grad_scan_block", check_grad_scan_block);
    r.check("grad_deform_conv", check_grad_deform);
    r.check("grad_lift_splat", check_grad_lift_splat);
    r.check("oracle_scan", check_oracle_scan);
    r.check("oracle_conv", check_oracle_conv);
    r.check("oracle_focal", check_oracle_focal);
    r.check("oracle_rowwise", check_oracle_rowwise);
    r.check("hilbert_walk", check_hilbert_walk);
    r.check("deform_degeneracy", check_deform_degeneracy);
    r.check("deform_zero_modulation", check_zero_modulation);
    r.check("lss_conservation", check_lss_conservation);
    r.check("voxel_permutation", check_voxel_permutation);
    r.check("checkpoint_roundtrip", check_checkpoint_roundtrip);
    r.check("adam_formula", check_adam_formula);
    r.check("dilation_merge", check_dilation_merge);
    r.check("tape_accumulation", check_tape_accumulation);
    r.check("scan_zero_identity", check_scan_zero_identity);
    return r.result;
}

}  // namespace bevkit
