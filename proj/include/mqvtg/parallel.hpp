#pragma once

#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace mqvtg {

// Worker cap: MQVTG_THREADS if set (minimum 1), else hardware concurrency.
inline std::size_t worker_count() {
    if (const char* env = std::getenv("MQVTG_THREADS")) {
        const long n = std::strtol(env, nullptr, 10);
        if (n >= 1) return static_cast<std::size_t>(n);
        return 1;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? hw : 1;
}

// Runs fn(i) for i in [0, n) across up to worker_count() threads. Each index
// is processed exactly once; callers must make fn(i) independent of execution
// order (per-index seeds, pre-sized output slots) so results are
// deterministic regardless of the thread count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::min(worker_count(), n ? n : 1);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace mqvtg
