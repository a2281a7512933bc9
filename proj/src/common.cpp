#include "bevkit/common.hpp"

#include <atomic>
#include <thread>

namespace bevkit {

namespace {
std::atomic<bool> g_checked{true};
std::atomic<int> g_threads{1};
}  // namespace

void fail(const std::string& msg) { throw Error(msg); }

bool checked_mode() { return g_checked.load(std::memory_order_relaxed); }
void set_checked_mode(bool on) { g_checked.store(on, std::memory_order_relaxed); }

int max_threads() { return g_threads.load(std::memory_order_relaxed); }

void set_max_threads(int n) {
    require(n >= 1, "max_threads must be >= 1");
    g_threads.store(n, std::memory_order_relaxed);
}

void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t, std::int64_t)>& fn) {
    const std::int64_t n = end - begin;
    if (n <= 0) {
        return;
    }
    const int workers = static_cast<int>(
        std::min<std::int64_t>(max_threads(), n));
    if (workers <= 1) {
        fn(begin, end);
        return;
    }
    const std::int64_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        const std::int64_t lo = begin + w * chunk;
        const std::int64_t hi = std::min(end, lo + chunk);
        if (lo >= hi) {
            break;
        }
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& t : pool) {
        t.join();
    }
}

std::int64_t product(const std::vector<std::int64_t>& extents) {
    std::int64_t p = 1;
    for (auto e : extents) {
        p *= e;
    }
    return p;
}

}  // namespace bevkit
