#pragma once

#include <functional>
#include <span>

#include "bevkit/tensor.hpp"

namespace bevkit {

struct FDReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::int64_t checked = 0;
};

/// Central-difference check of reverse-mode gradients. `build_loss` must
/// rebuild the scalar loss from the current leaf values on every call; it
/// runs once on a tape for the analytic gradients and twice per element for
/// the numeric ones. Error per element is |a-n| / max(|a|+|n|, 1), an
/// absolute comparison for small gradients and relative for large ones.
FDReport fd_check(const std::function<Tensor()>& build_loss,
                  std::span<Tensor> leaves, double h = 1e-5);

}  // namespace bevkit
