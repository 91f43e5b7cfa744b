#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace vssm::parallel {

inline std::size_t& worker_count_ref() {
    static std::size_t n = 1;
    return n;
}

inline std::size_t workers() { return worker_count_ref(); }
inline void set_workers(std::size_t n) { worker_count_ref() = std::max<std::size_t>(n, 1); }

/// Runs fn(begin, end) over contiguous blocks of [0, n). Blocks are fixed by
/// (n, workers), and fn must only write indices inside its block.
template <class Fn>
void for_blocks(std::size_t n, std::size_t min_block, Fn&& fn) {
    const std::size_t w = std::min(workers(), std::max<std::size_t>(1, n / std::max<std::size_t>(min_block, 1)));
    if (w <= 1) {
        fn(std::size_t{0}, n);
        return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(w - 1);
    const std::size_t step = (n + w - 1) / w;
    for (std::size_t i = 1; i < w; ++i) {
        const std::size_t b = i * step, e = std::min(n, b + step);
        if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    fn(std::size_t{0}, std::min(n, step));
}

}  // namespace vssm::parallel
