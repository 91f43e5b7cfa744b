#pragma once

// Diagonal linear recurrence h_t = a * h_{t-1} + b_t over F independent lanes.
//
// The parallel path is a work-efficient (Blelloch) up-sweep/down-sweep over
// scan elements (a_t, b_t) with the composition
//     (a1, b1) then (a2, b2)  =  (a2 * a1, a2 * b1 + b2),
// padded with identity elements (1, 0) to a power of two. The reduction tree
// depends only on T, so results do not depend on the worker count.

#include <cstddef>
#include <span>
#include <vector>

#include "vssm/errors.hpp"
#include "vssm/parallel.hpp"

namespace vssm {

enum class ScanMode { sequential, parallel };

template <class S>
struct ScanElement {
    std::vector<S> a, b;
};

/// Applying `first` then `second`.
template <class S>
ScanElement<S> compose(const ScanElement<S>& first, const ScanElement<S>& second) {
    require(first.a.size() == second.a.size() && first.b.size() == second.b.size() && first.a.size() == first.b.size(),
            "compose: lane count mismatch");
    ScanElement<S> out{std::vector<S>(first.a.size()), std::vector<S>(first.a.size())};
    for (std::size_t f = 0; f < first.a.size(); ++f) {
        out.a[f] = second.a[f] * first.a[f];
        out.b[f] = second.a[f] * first.b[f] + second.b[f];
    }
    return out;
}

namespace detail {

template <class S>
void check_scan_args(std::span<const S> a, std::span<const S> b, std::span<const S> h0, std::span<S> h) {
    const std::size_t f = a.size();
    if (f == 0 || b.size() % f != 0 || b.empty()) throw UsageError("linear_scan: input length is not a positive multiple of the lane count");
    if (!h0.empty() && h0.size() != f) throw UsageError("linear_scan: initial state size does not match lane count");
    if (h.size() != b.size()) throw UsageError("linear_scan: output size mismatch");
}

}  // namespace detail

/// Literal left-to-right recurrence. `b` and `h` are T x F row-major;
/// an empty `h0` means zeros.
template <class S>
void linear_scan_sequential(std::span<const S> a, std::span<const S> b, std::span<const S> h0, std::span<S> h) {
    detail::check_scan_args(a, b, h0, h);
    const std::size_t f = a.size(), steps = b.size() / f;
    for (std::size_t i = 0; i < f; ++i) h[i] = (h0.empty() ? S(0) : a[i] * h0[i]) + b[i];
    for (std::size_t t = 1; t < steps; ++t) {
        const S* prev = h.data() + (t - 1) * f;
        const S* bt = b.data() + t * f;
        S* ht = h.data() + t * f;
        for (std::size_t i = 0; i < f; ++i) ht[i] = a[i] * prev[i] + bt[i];
    }
}

template <class S>
void linear_scan_parallel(std::span<const S> a, std::span<const S> b, std::span<const S> h0, std::span<S> h) {
    detail::check_scan_args(a, b, h0, h);
    const std::size_t f = a.size(), steps = b.size() / f;
    std::size_t n = 1;
    while (n < steps) n <<= 1;
    std::vector<S> ea(n * f, S(1)), eb(n * f, S(0));
    for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t i = 0; i < f; ++i) {
            ea[t * f + i] = a[i];
            eb[t * f + i] = b[t * f + i];
        }
    const std::size_t min_block = 1 + 4096 / f;

    // Up-sweep: node k accumulates the composition of its subtree.
    for (std::size_t s = 1; s < n; s <<= 1) {
        const std::size_t count = n / (2 * s);
        parallel::for_blocks(count, min_block, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t j = lo; j < hi; ++j) {
                const std::size_t k = (2 * j + 2) * s - 1, l = k - s;
                S* ak = ea.data() + k * f;
                S* bk = eb.data() + k * f;
                const S* al = ea.data() + l * f;
                const S* bl = eb.data() + l * f;
                for (std::size_t i = 0; i < f; ++i) {
                    bk[i] = ak[i] * bl[i] + bk[i];
                    ak[i] = ak[i] * al[i];
                }
            }
        });
    }
    // Down-sweep to exclusive prefixes.
    std::fill(ea.begin() + static_cast<std::ptrdiff_t>((n - 1) * f), ea.end(), S(1));
    std::fill(eb.begin() + static_cast<std::ptrdiff_t>((n - 1) * f), eb.end(), S(0));
    for (std::size_t s = n >> 1; s >= 1; s >>= 1) {
        const std::size_t count = n / (2 * s);
        parallel::for_blocks(count, min_block, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t j = lo; j < hi; ++j) {
                const std::size_t k = (2 * j + 2) * s - 1, l = k - s;
                S* ak = ea.data() + k * f;
                S* bk = eb.data() + k * f;
                S* al = ea.data() + l * f;
                S* bl = eb.data() + l * f;
                for (std::size_t i = 0; i < f; ++i) {
                    const S ta = al[i], tb = bl[i];
                    al[i] = ak[i];
                    bl[i] = bk[i];
                    bk[i] = ta * bk[i] + tb;
                    ak[i] = ta * ak[i];
                }
            }
        });
        if (s == 1) break;
    }
    // Inclusive: h_t = a * (E_t applied to h0) + b_t.
    parallel::for_blocks(steps, min_block, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t t = lo; t < hi; ++t)
            for (std::size_t i = 0; i < f; ++i) {
                const S prefix = (h0.empty() ? S(0) : ea[t * f + i] * h0[i]) + eb[t * f + i];
                h[t * f + i] = a[i] * prefix + b[t * f + i];
            }
    });
}

template <class S>
void linear_scan(ScanMode mode, std::span<const S> a, std::span<const S> b, std::span<const S> h0, std::span<S> h) {
    if (mode == ScanMode::parallel)
        linear_scan_parallel(a, b, h0, h);
    else
        linear_scan_sequential(a, b, h0, h);
}

}  // namespace vssm
