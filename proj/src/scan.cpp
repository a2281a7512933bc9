#include "bevkit/scan.hpp"

#include <cmath>

#include "bevkit/ops.hpp"

namespace bevkit {

namespace {

Tensor randn_fan_in(Shape shape, std::mt19937_64& rng) {
    const double stddev = 1.0 / std::sqrt(static_cast<double>(shape[0]));
    Tensor t = Tensor::randn(shape, rng, stddev);
    return Tensor::param(t.shape(), {t.data().begin(), t.data().end()});
}

}  // namespace

MambaParams make_mamba(const MambaConfig& cfg, std::mt19937_64& rng) {
    require(cfg.dim >= 1 && cfg.state_dim >= 1 && cfg.expand >= 1 &&
                cfg.conv_kernel >= 1,
            "make_mamba: invalid configuration");
    const auto d = cfg.dim, n = cfg.inner(), s = cfg.state_dim;

    MambaParams p;
    p.cfg = cfg;
    p.w_x = randn_fan_in({d, n}, rng);
    p.w_z = randn_fan_in({d, n}, rng);
    p.conv_taps = randn_fan_in({cfg.conv_kernel, n}, rng);
    p.w_delta = randn_fan_in({n, n}, rng);
    // softplus(b) = 0.05 at init keeps the step size small but positive.
    const double b0 = std::log(std::expm1(0.05));
    p.b_delta = Tensor::param({n}, std::vector<double>(static_cast<std::size_t>(n), b0));
    p.w_b = randn_fan_in({n, s}, rng);
    p.w_c = randn_fan_in({n, s}, rng);
    std::vector<double> alog(static_cast<std::size_t>(n * s));
    for (std::int64_t c = 0; c < n; ++c) {
        for (std::int64_t j = 0; j < s; ++j) {
            alog[static_cast<std::size_t>(c * s + j)] =
                std::log(static_cast<double>(j + 1));
        }
    }
    p.a_log = Tensor::param({n, s}, std::move(alog));
    p.d_skip = Tensor::param({n}, std::vector<double>(static_cast<std::size_t>(n), 1.0));
    p.w_out = randn_fan_in({n, d}, rng);
    p.b_out = Tensor::param({d}, std::vector<double>(static_cast<std::size_t>(d), 0.0));
    return p;
}

void register_mamba(ParamRegistry& reg, const std::string& prefix,
                    const MambaParams& p) {
    reg.add(prefix + ".w_x", p.w_x);
    reg.add(prefix + ".w_z", p.w_z);
    reg.add(prefix + ".conv_taps", p.conv_taps);
    reg.add(prefix + ".w_delta", p.w_delta);
    reg.add(prefix + ".b_delta", p.b_delta);
    reg.add(prefix + ".w_b", p.w_b);
    reg.add(prefix + ".w_c", p.w_c);
    reg.add(prefix + ".a_log", p.a_log);
    reg.add(prefix + ".d_skip", p.d_skip);
    reg.add(prefix + ".w_out", p.w_out);
    reg.add(prefix + ".b_out", p.b_out);
}

Tensor mamba_layer(const MambaParams& p, const Tensor& seq) {
    require(seq.rank() == 2 && seq.extent(1) == p.cfg.dim,
            "mamba_layer: sequence width does not match the block");

    Tensor x_in = matmul(seq, p.w_x);
    Tensor z = matmul(seq, p.w_z);
    Tensor x_path = p.cfg.use_conv ? causal_depthwise_conv1d(x_in, p.conv_taps) : x_in;
    Tensor x_act = silu(x_path);

    Tensor delta = softplus(add_bias_rows(matmul(x_act, p.w_delta), p.b_delta));
    Tensor b_seq = matmul(x_act, p.w_b);
    Tensor c_seq = matmul(x_act, p.w_c);
    Tensor a_decay = scale(exp_op(p.a_log), -1.0);

    Tensor y = ssm_scan(x_act, delta, b_seq, c_seq, a_decay, p.d_skip);
    Tensor gated = mul(y, silu(z));
    Tensor out = add_bias_rows(matmul(gated, p.w_out), p.b_out);
    return add(out, seq);
}

}  // namespace bevkit
