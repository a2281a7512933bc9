#include "bevkit/adam.hpp"

#include <cmath>

namespace bevkit {

AdamW::AdamW(const ParamRegistry& params, AdamWConfig cfg) : cfg_(cfg) {
    require(cfg.lr > 0.0 && cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 &&
                cfg.beta2 >= 0.0 && cfg.beta2 < 1.0 && cfg.eps > 0.0 &&
                cfg.weight_decay >= 0.0,
            "AdamW: invalid configuration");
    for (const auto& [name, t] : params.entries()) {
        require(t.requires_grad(), "AdamW: non-trainable parameter " + name);
        Slot s;
        s.param = t;
        s.m.assign(static_cast<std::size_t>(t.numel()), 0.0);
        s.v.assign(static_cast<std::size_t>(t.numel()), 0.0);
        slots_.push_back(std::move(s));
    }
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
        if (!s.param.has_grad()) {
            continue;
        }
        const auto g = s.param.grad();
        auto w = s.param.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
            s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                               cfg_.weight_decay * w[i]);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& s : slots_) {
        s.param.zero_grad();
    }
}

}  // namespace bevkit
