#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace bevkit {

/// Error type thrown by all bevkit failures (shape mismatches, checked-mode
/// violations, bad configs). Carries a human-readable description.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

[[noreturn]] void fail(const std::string& msg);

// Precondition that always fires, independent of checked mode.
inline void require(bool cond, const std::string& msg) {
    if (!cond) {
        fail(msg);
    }
}

// Checked mode gates the expensive validations: finiteness scans at op
// boundaries, exact conv extent divisibility, scatter coord bounds.
// Default on; benchmarks may turn it off.
bool checked_mode();
void set_checked_mode(bool on);

// Forward primitives may fan out across output elements; each element is
// written by exactly one task, so results are identical for any thread count.
int max_threads();
void set_max_threads(int n);

// Runs fn(begin..end) split across up to max_threads() workers.
void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t, std::int64_t)>& fn);

std::int64_t product(const std::vector<std::int64_t>& extents);

}  // namespace bevkit
