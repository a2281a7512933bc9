#pragma once

#include <string>
#include <vector>

namespace bevkit {

struct SelfTestResult {
    std::vector<std::string> lines;
    int passed = 0;
    int failed = 0;
    bool ok() const { return failed == 0; }
};

/// Deterministic smoke battery: finite-difference gradient checks over the
/// differentiable kernels, closed-form oracles for the scan and the conv,
/// the geometry and serialization invariants, and the module degeneracies.
/// Output lines are byte-stable across runs.
SelfTestResult run_selftest();

}  // namespace bevkit
