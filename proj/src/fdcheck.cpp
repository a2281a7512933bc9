#include "bevkit/fdcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "bevkit/common.hpp"

namespace bevkit {

FDReport fd_check(const std::function<Tensor()>& build_loss,
                  std::span<Tensor> leaves, double h) {
    require(h > 0.0, "fd_check: step must be positive");
    for (auto& leaf : leaves) {
        require(leaf.requires_grad(), "fd_check: leaves must require grad");
        leaf.zero_grad();
    }

    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = build_loss();
        require(loss.numel() == 1, "fd_check: loss must be scalar");
        tape.backward(loss);
    }

    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (auto& leaf : leaves) {
        if (leaf.has_grad()) {
            analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
        } else {
            analytic.emplace_back(std::size_t(leaf.numel()), 0.0);
        }
        leaf.zero_grad();
    }

    FDReport report;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto vals = leaves[li].data();
        for (std::size_t e = 0; e < vals.size(); ++e) {
            const double orig = vals[e];
            vals[e] = orig + h;
            const double fp = build_loss().item();
            vals[e] = orig - h;
            const double fm = build_loss().item();
            vals[e] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[li][e];
            const double abs_err = std::abs(a - numeric);
            const double rel_err =
                abs_err / std::max(std::abs(a) + std::abs(numeric), 1.0);
            report.max_abs_err = std::max(report.max_abs_err, abs_err);
            report.max_rel_err = std::max(report.max_rel_err, rel_err);
            ++report.checked;
        }
    }
    return report;
}

}  // namespace bevkit
