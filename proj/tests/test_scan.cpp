#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>
#include <vector>

#include "bevkit/common.hpp"
#include "bevkit/ops.hpp"
#include "bevkit/reference.hpp"
#include "bevkit/scan.hpp"
#include "bevkit/serialize.hpp"

using namespace bevkit;

namespace {

std::vector<double> draw(std::mt19937_64& rng, std::int64_t n, double lo,
                         double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = d(rng);
    return v;
}

struct ScanInputs {
    std::vector<double> x, delta, b, c, a, d;
    Tensor tx, tdelta, tb, tc, ta, td;
};

ScanInputs make_scan_inputs(std::mt19937_64& rng, std::int64_t len,
                            std::int64_t channels, std::int64_t state) {
    ScanInputs in;
    in.x = draw(rng, len * channels, -1.5, 1.5);
    in.delta = draw(rng, len * channels, 0.1, 0.9);
    in.b = draw(rng, len * state, -1.0, 1.0);
    in.c = draw(rng, len * state, -1.0, 1.0);
    in.a = draw(rng, channels * state, -1.5, -0.2);
    in.d = draw(rng, channels, -1.0, 1.0);
    in.tx = Tensor::from({len, channels}, in.x);
    in.tdelta = Tensor::from({len, channels}, in.delta);
    in.tb = Tensor::from({len, state}, in.b);
    in.tc = Tensor::from({len, state}, in.c);
    in.ta = Tensor::from({channels, state}, in.a);
    in.td = Tensor::from({channels}, in.d);
    return in;
}

}  // namespace

TEST_CASE("ssm_scan matches the literal recurrence across lengths") {
    std::mt19937_64 rng(411);
    for (const std::int64_t len : {1, 7, 64, 1024}) {
        const std::int64_t channels = 5, state = 3;
        const auto in = make_scan_inputs(rng, len, channels, state);
        const Tensor y = ssm_scan(in.tx, in.tdelta, in.tb, in.tc, in.ta, in.td);
        const auto want = reference::ssm_scan(in.x, in.delta, in.b, in.c, in.a,
                                              in.d, len, channels, state);
        REQUIRE(y.shape() == Shape{len, channels});
        for (std::int64_t i = 0; i < y.numel(); ++i) {
            const double g = y.data()[i];
            const double w = want[static_cast<std::size_t>(i)];
            CAPTURE(len);
            CAPTURE(i);
            CHECK(std::abs(g - w) <=
                  1e-10 * std::max({std::abs(g), std::abs(w), 1.0}));
        }
    }
}

TEST_CASE("ssm_scan output at t depends only on inputs up to t") {
    std::mt19937_64 rng(419);
    const std::int64_t len = 64, channels = 4, state = 3;
    const auto in = make_scan_inputs(rng, len, channels, state);
    const Tensor full = ssm_scan(in.tx, in.tdelta, in.tb, in.tc, in.ta, in.td);

    auto head = [](const std::vector<double>& v, std::int64_t rows,
                   std::int64_t cols) {
        return std::vector<double>(v.begin(), v.begin() + rows * cols);
    };
    for (std::int64_t t0 = 1; t0 <= len; ++t0) {
        const Tensor part = ssm_scan(
            Tensor::from({t0, channels}, head(in.x, t0, channels)),
            Tensor::from({t0, channels}, head(in.delta, t0, channels)),
            Tensor::from({t0, state}, head(in.b, t0, state)),
            Tensor::from({t0, state}, head(in.c, t0, state)), in.ta, in.td);
        for (std::int64_t i = 0; i < t0 * channels; ++i) {
            REQUIRE(part.data()[i] == full.data()[i]);
        }
    }
}

TEST_CASE("ssm_scan with zero input is exactly zero") {
    std::mt19937_64 rng(421);
    const std::int64_t len = 16, channels = 4, state = 3;
    auto in = make_scan_inputs(rng, len, channels, state);
    const Tensor zero = Tensor::zeros({len, channels});
    const Tensor y = ssm_scan(zero, in.tdelta, in.tb, in.tc, in.ta, in.td);
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
}

TEST_CASE("ssm_scan rejects non-contractive parameters") {
    std::mt19937_64 rng(431);
    const std::int64_t len = 4, channels = 2, state = 2;
    auto in = make_scan_inputs(rng, len, channels, state);
    auto bad_delta = in.delta;
    bad_delta[3] = -0.1;
    CHECK_THROWS_AS((void)ssm_scan(in.tx,
                                   Tensor::from({len, channels}, bad_delta),
                                   in.tb, in.tc, in.ta, in.td),
                    Error);
    auto bad_a = in.a;
    bad_a[1] = 0.3;
    CHECK_THROWS_AS((void)ssm_scan(in.tx, in.tdelta, in.tb, in.tc,
                                   Tensor::from({channels, state}, bad_a), in.td),
                    Error);
}

TEST_CASE("causal depthwise conv matches a direct loop") {
    std::mt19937_64 rng(433);
    const std::int64_t len = 23, channels = 6, k = 4;
    const auto xv = draw(rng, len * channels, -1.0, 1.0);
    const auto tv = draw(rng, k * channels, -1.0, 1.0);
    const Tensor y = causal_depthwise_conv1d(Tensor::from({len, channels}, xv),
                                             Tensor::from({k, channels}, tv));
    REQUIRE(y.shape() == Shape{len, channels});
    for (std::int64_t t = 0; t < len; ++t) {
        for (std::int64_t c = 0; c < channels; ++c) {
            double want = 0.0;
            for (std::int64_t j = 0; j < k; ++j) {
                const std::int64_t src = t - k + 1 + j;
                if (src < 0) continue;
                want += tv[std::size_t(j * channels + c)] *
                        xv[std::size_t(src * channels + c)];
            }
            CHECK(y.at({t, c}) == doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("mamba layer maps the zero sequence to zero") {
    std::mt19937_64 rng(439);
    MambaConfig cfg;
    cfg.dim = 6;
    cfg.state_dim = 4;
    cfg.expand = 2;
    cfg.conv_kernel = 3;
    const auto p = make_mamba(cfg, rng);
    const Tensor y = mamba_layer(p, Tensor::zeros({9, cfg.dim}));
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
}

TEST_CASE("mamba layer is deterministic and shape preserving") {
    std::mt19937_64 rng(443);
    MambaConfig cfg;
    cfg.dim = 5;
    cfg.state_dim = 3;
    cfg.conv_kernel = 3;
    const auto p = make_mamba(cfg, rng);
    std::mt19937_64 srng(7);
    const Tensor seq = Tensor::randn({13, cfg.dim}, srng);
    const Tensor a = mamba_layer(p, seq);
    const Tensor b = mamba_layer(p, seq);
    REQUIRE(a.shape() == Shape{13, cfg.dim});
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("register_mamba exposes every parameter for checkpointing") {
    MambaConfig cfg;
    cfg.dim = 4;
    cfg.state_dim = 3;
    cfg.conv_kernel = 3;
    std::mt19937_64 rng_a(7), rng_b(1234);
    const auto pa = make_mamba(cfg, rng_a);
    auto pb = make_mamba(cfg, rng_b);

    ParamRegistry reg_a, reg_b;
    register_mamba(reg_a, "blk", pa);
    register_mamba(reg_b, "blk", pb);
    REQUIRE(reg_a.entries().size() == 11);

    const auto path = std::filesystem::temp_directory_path() / "mamba_ckpt.bin";
    reg_a.save_checkpoint(path);
    reg_b.load_checkpoint(path);
    std::filesystem::remove(path);

    std::mt19937_64 srng(99);
    const Tensor seq = Tensor::randn({11, cfg.dim}, srng);
    const Tensor ya = mamba_layer(pa, seq);
    const Tensor yb = mamba_layer(pb, seq);
    for (std::int64_t i = 0; i < ya.numel(); ++i) {
        CHECK(ya.data()[i] == yb.data()[i]);
    }
}

TEST_CASE("mamba layer without the conv branch still runs") {
    std::mt19937_64 rng(449);
    MambaConfig cfg;
    cfg.dim = 4;
    cfg.state_dim = 2;
    cfg.use_conv = false;
    const auto p = make_mamba(cfg, rng);
    std::mt19937_64 srng(3);
    const Tensor seq = Tensor::randn({6, cfg.dim}, srng);
    const Tensor y = mamba_layer(p, seq);
    REQUIRE(y.shape() == Shape{6, cfg.dim});
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(std::isfinite(y.data()[i]));
}
