#pragma once

#include <vector>

#include "bevkit/serialize.hpp"
#include "bevkit/tensor.hpp"

namespace bevkit {

struct AdamWConfig {
    double lr = 5e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Fixed-step AdamW with decoupled weight decay. Parameters that carry no
/// gradient in a step are left untouched, moments included.
class AdamW {
public:
    AdamW(const ParamRegistry& params, AdamWConfig cfg);

    void step();
    void zero_grad();
    std::int64_t steps_taken() const { return t_; }

private:
    struct Slot {
        Tensor param;
        std::vector<double> m;
        std::vector<double> v;
    };
    std::vector<Slot> slots_;
    AdamWConfig cfg_;
    std::int64_t t_ = 0;
};

}  // namespace bevkit
