#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace psdf {

inline unsigned default_thread_count() {
    const unsigned n = std::thread::hardware_concurrency();
    return n ? n : 1;
}

/// Run fn(i) for i in [0, n). Work items are claimed atomically, but each item
/// writes only to its own output slot, so results are independent of both the
/// thread count and the claiming order. Callers that reduce across items must
/// do so by item index afterwards.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    if (threads <= 1 || n == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            fn(i);
        }
    };
    std::vector<std::thread> pool;
    const unsigned use = static_cast<unsigned>(std::min<std::size_t>(threads, n));
    pool.reserve(use);
    for (unsigned t = 0; t < use; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
}

}  // namespace psdf
