#pragma once

// Differentiable ops on Var. Shapes are checked eagerly; every op that has a
// gradient records a closure that accumulates into its parents.

#if defined(__x86_64__) || defined(__i386__)
#include <immintrin.h>
#endif

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "vssm/autodiff.hpp"
#include "vssm/errors.hpp"
#include "vssm/tensor.hpp"

namespace vssm {

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMat = Eigen::Map<RowMat<S>>;
template <class S>
using CMapMat = Eigen::Map<const RowMat<S>>;

inline bool& row_stable_flag() {
    thread_local bool flag = false;
    return flag;
}

#if defined(__AVX512F__)
inline constexpr std::size_t kVecBytes = 64;
#elif defined(__AVX__)
inline constexpr std::size_t kVecBytes = 32;
#else
inline constexpr std::size_t kVecBytes = 16;
#endif

template <class S>
struct SimdOf {
    typedef S type __attribute__((vector_size(kVecBytes)));
    typedef S unaligned __attribute__((vector_size(kVecBytes), aligned(alignof(S))));
};

// acc + a * b, fused when the target has FMA. Every output element of the
// row-stable product goes through this one helper, so rows stay independent.
template <class S, class V>
inline V mul_add(V acc, V a, V b) {
#if defined(__AVX512F__)
    if constexpr (std::is_same_v<S, float>)
        return (V)_mm512_fmadd_ps((__m512)a, (__m512)b, (__m512)acc);
    else
        return (V)_mm512_fmadd_pd((__m512d)a, (__m512d)b, (__m512d)acc);
#elif defined(__AVX__) && defined(__FMA__)
    if constexpr (std::is_same_v<S, float>)
        return (V)_mm256_fmadd_ps((__m256)a, (__m256)b, (__m256)acc);
    else
        return (V)_mm256_fmadd_pd((__m256d)a, (__m256d)b, (__m256d)acc);
#else
    return acc + a * b;
#endif
}

template <class S>
inline constexpr std::size_t kLanes = kVecBytes / sizeof(S);
// columns per register block: 4 vectors when 32 vector registers are available
template <class S>
inline constexpr std::size_t kPanel = kLanes<S> * (kVecBytes >= 64 ? 4 : 2);

// R rows times one packed panel p [k, kPanel]; each output element is the
// plain k-order sum of rounded products, whatever R is.
template <class S, std::size_t R>
void matmul_panel(const S* x, const S* p, S* out, std::size_t k, std::size_t n) {
    using V = typename SimdOf<S>::type;
    using U = typename SimdOf<S>::unaligned;
    constexpr std::size_t L = kLanes<S>, NV = kPanel<S> / L;
    V acc[R][NV];
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t v = 0; v < NV; ++v) acc[r][v] = V{};
    for (std::size_t j = 0; j < k; ++j) {
        V wv[NV];
        for (std::size_t v = 0; v < NV; ++v) wv[v] = *reinterpret_cast<const U*>(p + j * kPanel<S> + v * L);
        for (std::size_t r = 0; r < R; ++r) {
            const V a = V{} + x[r * k + j];
            for (std::size_t v = 0; v < NV; ++v) acc[r][v] = mul_add<S>(acc[r][v], a, wv[v]);
        }
    }
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t v = 0; v < NV; ++v) *reinterpret_cast<U*>(out + r * n + v * L) = acc[r][v];
}

inline constexpr std::size_t kRowBlock = kVecBytes >= 64 ? 6 : 4;

// out[i, :] = sum_k x[i, k] * w[k, :], accumulated in k order for every row, so
// a row's result never depends on how many rows are multiplied together.
template <class S>
void matmul_row_stable(const S* x, const S* w, S* out, std::size_t m, std::size_t k, std::size_t n) {
    constexpr std::size_t P = kPanel<S>;
    thread_local std::vector<S> panel, tail;
    panel.resize(k * P);
    for (std::size_t c0 = 0; c0 < n; c0 += P) {
        // the last panel is zero padded; its extra columns are computed and dropped
        const std::size_t cw = std::min(P, n - c0);
        if (cw < P) std::fill(panel.begin(), panel.end(), S(0));
        for (std::size_t j = 0; j < k; ++j) std::copy_n(w + j * n + c0, cw, panel.data() + j * P);
        S* dst = out + c0;
        std::size_t ld = n;
        if (cw < P) {
            tail.resize(m * P);
            dst = tail.data();
            ld = P;
        }
        std::size_t i = 0;
        for (; i + kRowBlock <= m; i += kRowBlock) matmul_panel<S, kRowBlock>(x + i * k, panel.data(), dst + i * ld, k, ld);
        for (; i < m; ++i) matmul_panel<S, 1>(x + i * k, panel.data(), dst + i * ld, k, ld);
        if (cw < P)
            for (std::size_t r = 0; r < m; ++r) std::copy_n(tail.data() + r * P, cw, out + r * n + c0);
    }
}

template <class S>
void accumulate(Tensor<S>& dst, const Tensor<S>& src) {
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) throw UsageError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

struct AxisLayout {
    std::size_t outer, extent, inner;
};

inline AxisLayout axis_layout(const Shape& shape, int axis, const char* op) {
    const int rank = static_cast<int>(shape.size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw UsageError(std::string(op) + ": invalid axis for shape " + shape_str(shape));
    AxisLayout l{1, shape[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) l.outer *= shape[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < rank; ++i) l.inner *= shape[static_cast<std::size_t>(i)];
    if (l.extent == 0) throw UsageError(std::string(op) + ": empty axis");
    return l;
}

}  // namespace detail

/// While alive, matmul uses a kernel whose per-row result is independent of
/// the number of rows. Generation relies on this for bit-exact chunking.
class RowStableMatmul {
   public:
    RowStableMatmul() : prev_(detail::row_stable_flag()) { detail::row_stable_flag() = true; }
    ~RowStableMatmul() { detail::row_stable_flag() = prev_; }
    RowStableMatmul(const RowStableMatmul&) = delete;
    RowStableMatmul& operator=(const RowStableMatmul&) = delete;

   private:
    bool prev_;
};

/// x[..., K] @ w[K, N] -> [..., N]
template <class S>
Var<S> matmul(Var<S> x, Var<S> w) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (ws.size() != 2 || xs.empty() || xs.back() != ws[0])
        throw UsageError("matmul: incompatible shapes " + shape_str(xs) + " and " + shape_str(ws));
    const std::size_t k = ws[0], n = ws[1], m = x.numel() / k;
    Shape out_shape = xs;
    out_shape.back() = n;
    Tensor<S> out(out_shape);
    if (detail::row_stable_flag()) {
        detail::matmul_row_stable(x.value().data().data(), w.value().data().data(), out.data().data(), m, k, n);
    } else {
        detail::MapMat<S>(out.data().data(), m, n).noalias() =
            detail::CMapMat<S>(x.value().data().data(), m, k) * detail::CMapMat<S>(w.value().data().data(), k, n);
    }
    return x.tape()->record(std::move(out), {x, w}, [x, w, m, k, n](Tape<S>& t, std::size_t self) {
        detail::CMapMat<S> g(t.grad(self).data().data(), m, n);
        if (x.requires_grad())
            detail::MapMat<S>(t.grad(x.id()).data().data(), m, k).noalias() +=
                g * detail::CMapMat<S>(w.value().data().data(), k, n).transpose();
        if (w.requires_grad())
            detail::MapMat<S>(t.grad(w.id()).data().data(), k, n).noalias() +=
                detail::CMapMat<S>(x.value().data().data(), m, k).transpose() * g;
    });
}

/// x[..., N] + b[N]
template <class S>
Var<S> add_bias(Var<S> x, Var<S> b) {
    const std::size_t n = b.numel();
    if (x.shape().empty() || x.shape().back() != n)
        throw UsageError("add_bias: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out = x.value();
    const auto bv = b.value().data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i % n];
    return x.tape()->record(std::move(out), {x, b}, [x, b, n](Tape<S>& t, std::size_t self) {
        const Tensor<S>& g = t.grad(self);
        if (x.requires_grad()) detail::accumulate(t.grad(x.id()), g);
        if (b.requires_grad()) {
            auto gb = t.grad(b.id()).data();
            const auto gv = g.data();
            for (std::size_t i = 0; i < gv.size(); ++i) gb[i % n] += gv[i];
        }
    });
}

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
    detail::check_same_shape(a.shape(), b.shape(), "add");
    Tensor<S> out = a.value();
    auto o = out.data();
    const auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
    return a.tape()->record(std::move(out), {a, b}, [a, b](Tape<S>& t, std::size_t self) {
        const Tensor<S>& g = t.grad(self);
        if (a.requires_grad()) detail::accumulate(t.grad(a.id()), g);
        if (b.requires_grad()) detail::accumulate(t.grad(b.id()), g);
    });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
    detail::check_same_shape(a.shape(), b.shape(), "sub");
    Tensor<S> out = a.value();
    auto o = out.data();
    const auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
    return a.tape()->record(std::move(out), {a, b}, [a, b](Tape<S>& t, std::size_t self) {
        const Tensor<S>& g = t.grad(self);
        if (a.requires_grad()) detail::accumulate(t.grad(a.id()), g);
        if (b.requires_grad()) {
            auto gb = t.grad(b.id()).data();
            const auto gv = g.data();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gv[i];
        }
    });
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
    detail::check_same_shape(a.shape(), b.shape(), "mul");
    Tensor<S> out = a.value();
    auto o = out.data();
    const auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
    return a.tape()->record(std::move(out), {a, b}, [a, b](Tape<S>& t, std::size_t self) {
        const auto g = t.grad(self).data();
        if (a.requires_grad()) {
            auto ga = t.grad(a.id()).data();
            const auto bv = b.value().data();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (b.requires_grad()) {
            auto gb = t.grad(b.id()).data();
            const auto av = a.value().data();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

template <class S>
Var<S> scale(Var<S> x, S c) {
    Tensor<S> out = x.value();
    for (auto& v : out.data()) v *= c;
    return x.tape()->record(std::move(out), {x}, [x, c](Tape<S>& t, std::size_t self) {
        const auto g = t.grad(self).data();
        auto gx = t.grad(x.id()).data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * g[i];
    });
}

template <class S>
Var<S> add_scalar(Var<S> x, S c) {
    Tensor<S> out = x.value();
    for (auto& v : out.data()) v += c;
    return x.tape()->record(std::move(out), {x}, [x](Tape<S>& t, std::size_t self) {
        detail::accumulate(t.grad(x.id()), t.grad(self));
    });
}

namespace detail {

// y = f(x) elementwise; dy/dx evaluated from (x, y) in backward.
template <class S, class F, class DF>
Var<S> unary(Var<S> x, F f, DF df) {
    Tensor<S> out = x.value();
    for (auto& v : out.data()) v = f(v);
    return x.tape()->record(std::move(out), {x}, [x, df](Tape<S>& t, std::size_t self) {
        const auto g = t.grad(self).data();
        const auto xv = x.value().data();
        const auto yv = t.value(self).data();
        auto gx = t.grad(x.id()).data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
    });
}

}  // namespace detail

template <class S>
Var<S> square(Var<S> x) {
    return detail::unary(x, [](S v) { return v * v; }, [](S v, S) { return S(2) * v; });
}

template <class S>
Var<S> exp(Var<S> x) {
    return detail::unary(x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <class S>
Var<S> tanh(Var<S> x) {
    return detail::unary(x, [](S v) { return std::tanh(v); }, [](S, S y) { return S(1) - y * y; });
}

/// x * sigmoid(x)
template <class S>
Var<S> silu(Var<S> x) {
    return detail::unary(
        x, [](S v) { return v / (S(1) + std::exp(-v)); },
        [](S v, S) {
            const S s = S(1) / (S(1) + std::exp(-v));
            return s * (S(1) + v * (S(1) - s));
        });
}

template <class S>
Var<S> sum(Var<S> x) {
    S acc = 0;
    for (S v : x.value().data()) acc += v;
    return x.tape()->record(Tensor<S>::scalar(acc), {x}, [x](Tape<S>& t, std::size_t self) {
        const S g = t.grad(self)[0];
        for (auto& v : t.grad(x.id()).data()) v += g;
    });
}

/// Sums every axis but the first: [B, ...] -> [B].
template <class S>
Var<S> sum_per_item(Var<S> x) {
    if (x.shape().empty()) throw UsageError("sum_per_item: rank-0 input");
    const std::size_t b = x.shape()[0], inner = x.numel() / std::max<std::size_t>(b, 1);
    Tensor<S> out(Shape{b});
    const auto xv = x.value().data();
    for (std::size_t i = 0; i < b; ++i) {
        S acc = 0;
        for (std::size_t j = 0; j < inner; ++j) acc += xv[i * inner + j];
        out[i] = acc;
    }
    return x.tape()->record(std::move(out), {x}, [x, b, inner](Tape<S>& t, std::size_t self) {
        const auto g = t.grad(self).data();
        auto gx = t.grad(x.id()).data();
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < inner; ++j) gx[i * inner + j] += g[i];
    });
}

template <class S>
Var<S> reshape(Var<S> x, Shape shape) {
    Tensor<S> out = x.value().reshaped(std::move(shape));
    return x.tape()->record(std::move(out), {x}, [x](Tape<S>& t, std::size_t self) {
        detail::accumulate(t.grad(x.id()), t.grad(self));
    });
}

/// Same value, no gradient path.
template <class S>
Var<S> detach(Var<S> x) {
    return x.tape()->constant(x.value());
}

/// Max-shifted log-softmax along `axis`.
template <class S>
Var<S> log_softmax(Var<S> x, int axis = -1) {
    const auto l = detail::axis_layout(x.shape(), axis, "log_softmax");
    Tensor<S> out(x.shape());
    const auto xv = x.value().data();
    auto o = out.data();
    for (std::size_t a = 0; a < l.outer; ++a)
        for (std::size_t c = 0; c < l.inner; ++c) {
            const std::size_t base = a * l.extent * l.inner + c;
            S mx = -std::numeric_limits<S>::infinity();
            for (std::size_t k = 0; k < l.extent; ++k) mx = std::max(mx, xv[base + k * l.inner]);
            S se = 0;
            for (std::size_t k = 0; k < l.extent; ++k) se += std::exp(xv[base + k * l.inner] - mx);
            const S lse = mx + std::log(se);
            for (std::size_t k = 0; k < l.extent; ++k) o[base + k * l.inner] = xv[base + k * l.inner] - lse;
        }
    return x.tape()->record(std::move(out), {x}, [x, l](Tape<S>& t, std::size_t self) {
        const auto g = t.grad(self).data();
        const auto y = t.value(self).data();
        auto gx = t.grad(x.id()).data();
        for (std::size_t a = 0; a < l.outer; ++a)
            for (std::size_t c = 0; c < l.inner; ++c) {
                const std::size_t base = a * l.extent * l.inner + c;
                S gs = 0;
                for (std::size_t k = 0; k < l.extent; ++k) gs += g[base + k * l.inner];
                for (std::size_t k = 0; k < l.extent; ++k) {
                    const std::size_t i = base + k * l.inner;
                    gx[i] += g[i] - std::exp(y[i]) * gs;
                }
            }
    });
}

namespace detail {

template <class S>
void softmax_rows(std::span<const S> x, std::span<S> out, std::size_t n, S inv_temp) {
    for (std::size_t r = 0; r < x.size() / n; ++r) {
        const S* xi = x.data() + r * n;
        S* oi = out.data() + r * n;
        S mx = -std::numeric_limits<S>::infinity();
        for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, xi[k] * inv_temp);
        S se = 0;
        for (std::size_t k = 0; k < n; ++k) se += (oi[k] = std::exp(xi[k] * inv_temp - mx));
        for (std::size_t k = 0; k < n; ++k) oi[k] /= se;
    }
}

// g_in += (p * (g - <g, p>)) * inv_temp, row-wise.
template <class S>
void softmax_rows_backward(std::span<const S> p, std::span<const S> g, std::span<S> gin, std::size_t n, S inv_temp) {
    for (std::size_t r = 0; r < p.size() / n; ++r) {
        const std::size_t b = r * n;
        S dot = 0;
        for (std::size_t k = 0; k < n; ++k) dot += g[b + k] * p[b + k];
        for (std::size_t k = 0; k < n; ++k) gin[b + k] += p[b + k] * (g[b + k] - dot) * inv_temp;
    }
}

}  // namespace detail

/// Softmax along the last axis.
template <class S>
Var<S> softmax(Var<S> x) {
    const auto l = detail::axis_layout(x.shape(), -1, "softmax");
    Tensor<S> out(x.shape());
    detail::softmax_rows<S>(x.value().data(), out.data(), l.extent, S(1));
    return x.tape()->record(std::move(out), {x}, [x, n = l.extent](Tape<S>& t, std::size_t self) {
        detail::softmax_rows_backward<S>(t.value(self).data(), t.grad(self).data(), t.grad(x.id()).data(), n, S(1));
    });
}

/// Relaxed categorical sample along the last axis from `logits + noise`,
/// where `noise` holds standard Gumbel draws of the same shape. With `hard`,
/// the forward value is the one-hot argmax and gradients flow through the
/// relaxation (straight-through).
template <class S>
Var<S> gumbel_softmax(Var<S> logits, S temperature, bool hard, const Tensor<S>& noise) {
    if (!(temperature > S(0))) throw UsageError("gumbel_softmax: temperature must be positive");
    detail::check_same_shape(logits.shape(), noise.shape(), "gumbel_softmax");
    const auto l = detail::axis_layout(logits.shape(), -1, "gumbel_softmax");
    const std::size_t n = l.extent;
    Tensor<S> perturbed = logits.value();
    auto pv = perturbed.data();
    const auto nv = noise.data();
    for (std::size_t i = 0; i < pv.size(); ++i) {
        if (!std::isfinite(pv[i])) throw NumericError("gumbel_softmax: non-finite logit");
        pv[i] += nv[i];
    }
    Tensor<S> relaxed(logits.shape());
    const S inv_temp = S(1) / temperature;
    detail::softmax_rows<S>(perturbed.data(), relaxed.data(), n, inv_temp);
    Tensor<S> out = relaxed;
    if (hard) {
        auto o = out.data();
        for (std::size_t r = 0; r < o.size() / n; ++r) {
            const auto first = pv.begin() + static_cast<std::ptrdiff_t>(r * n);
            const std::size_t am = static_cast<std::size_t>(std::max_element(first, first + static_cast<std::ptrdiff_t>(n)) - first);
            for (std::size_t k = 0; k < n; ++k) o[r * n + k] = k == am ? S(1) : S(0);
        }
    }
    return logits.tape()->record(std::move(out), {logits},
                                 [logits, relaxed = std::move(relaxed), n, inv_temp](Tape<S>& t, std::size_t self) {
                                     detail::softmax_rows_backward<S>(relaxed.data(), t.grad(self).data(),
                                                                      t.grad(logits.id()).data(), n, inv_temp);
                                 });
}

/// (x - mean) / sqrt(var + eps) * gain + bias over the last axis.
template <class S>
Var<S> layer_norm(Var<S> x, Var<S> gain, Var<S> bias, S eps = S(1e-5)) {
    const std::size_t n = gain.numel();
    if (x.shape().empty() || x.shape().back() != n || bias.numel() != n)
        throw UsageError("layer_norm: shape mismatch " + shape_str(x.shape()));
    const std::size_t rows = x.numel() / n;
    Tensor<S> out(x.shape());
    Tensor<S> xhat(x.shape());
    std::vector<S> rstd(rows);
    const auto xv = x.value().data();
    const auto gv = gain.value().data();
    const auto bv = bias.value().data();
    auto o = out.data();
    auto xh = xhat.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const S* xi = xv.data() + r * n;
        S mean = 0;
        for (std::size_t k = 0; k < n; ++k) mean += xi[k];
        mean /= S(n);
        S var = 0;
        for (std::size_t k = 0; k < n; ++k) var += (xi[k] - mean) * (xi[k] - mean);
        var /= S(n);
        rstd[r] = S(1) / std::sqrt(var + eps);
        for (std::size_t k = 0; k < n; ++k) {
            xh[r * n + k] = (xi[k] - mean) * rstd[r];
            o[r * n + k] = xh[r * n + k] * gv[k] + bv[k];
        }
    }
    return x.tape()->record(
        std::move(out), {x, gain, bias},
        [x, gain, bias, n, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<S>& t, std::size_t self) {
            const auto g = t.grad(self).data();
            const auto xh = xhat.data();
            if (gain.requires_grad() || bias.requires_grad()) {
                auto gg = t.grad(gain.id()).data();
                auto gb = t.grad(bias.id()).data();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t k = 0; k < n; ++k) {
                        gg[k] += g[r * n + k] * xh[r * n + k];
                        gb[k] += g[r * n + k];
                    }
            }
            if (x.requires_grad()) {
                const auto gv = gain.value().data();
                auto gx = t.grad(x.id()).data();
                for (std::size_t r = 0; r < rows; ++r) {
                    S m1 = 0, m2 = 0;
                    for (std::size_t k = 0; k < n; ++k) {
                        const S d = g[r * n + k] * gv[k];
                        m1 += d;
                        m2 += d * xh[r * n + k];
                    }
                    m1 /= S(n);
                    m2 /= S(n);
                    for (std::size_t k = 0; k < n; ++k) {
                        const S d = g[r * n + k] * gv[k];
                        gx[r * n + k] += rstd[r] * (d - m1 - xh[r * n + k] * m2);
                    }
                }
            }
        });
}

}  // namespace vssm
