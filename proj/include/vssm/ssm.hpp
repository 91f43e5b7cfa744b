#pragma once

// Diagonal state-space layers and the stacked SSM/FNN sequence model.
//
// Per layer, with u the (normalized) block input of width W and P the state
// size, every channel d carries P lanes:
//     h_t[d, p] = a[d, p] * h_{t-1}[d, p] + B[d, p] * u_t[d],  a = tanh(a_raw)
// and the feedforward reads the flattened state h_t (W * P values):
//     y_t = W2 silu(W1 h_t + b1) + b2.
// Blocks are pre-norm residual: u <- u + FNN(SSM(LN(u))).

#include <atomic>
#include <cmath>
#include <cstddef>
#include <optional>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include "vssm/autodiff.hpp"
#include "vssm/errors.hpp"
#include "vssm/ops.hpp"
#include "vssm/params.hpp"
#include "vssm/rng.hpp"
#include "vssm/scan.hpp"
#include "vssm/tensor.hpp"

namespace vssm {

struct StackConfig {
    std::size_t in_dim = 1;
    std::size_t width = 16;
    std::size_t state = 4;
    std::size_t hidden = 16;
    std::size_t layers = 1;
    std::size_t out_dim = 1;

    std::size_t lanes() const { return width * state; }
    friend bool operator==(const StackConfig&, const StackConfig&) = default;
};

/// Machine-independent call counters used by the generation benchmark.
struct ForwardCounters {
    std::atomic<std::uint64_t> sequence_passes{0};
    std::atomic<std::uint64_t> single_steps{0};
    void reset() {
        sequence_passes = 0;
        single_steps = 0;
    }
};

inline ForwardCounters& forward_counters() {
    static ForwardCounters c;
    return c;
}

/// Read-only view of one layer's recurrence parameters.
template <class S>
struct SsmLayer {
    const Tensor<S>* a_raw = nullptr;  // [channels, state]
    const Tensor<S>* b = nullptr;      // [channels, state]

    std::size_t channels() const { return a_raw->dim(0); }
    std::size_t state() const { return a_raw->dim(1); }
    std::size_t lanes() const { return a_raw->numel(); }

    std::vector<S> decay() const {
        std::vector<S> a(lanes());
        for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::tanh((*a_raw)[i]);
        return a;
    }
};

namespace detail {

template <class S>
void expand_input(const S* u, const S* bmat, S* out, std::size_t steps, std::size_t channels, std::size_t state) {
    for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t d = 0; d < channels; ++d) {
            const S ud = u[t * channels + d];
            for (std::size_t p = 0; p < state; ++p)
                out[(t * channels + d) * state + p] = bmat[d * state + p] * ud;
        }
}

template <class S>
Tensor<S> run_layer_scan(const SsmLayer<S>& layer, const Tensor<S>& u, const Tensor<S>* h0, ScanMode mode) {
    if (u.rank() != 2 || u.dim(1) != layer.channels())
        throw UsageError("scan: input must be [T, " + std::to_string(layer.channels()) + "], got " + shape_str(u.shape()));
    if (u.dim(0) == 0) throw UsageError("scan: empty sequence");
    if (h0 && h0->numel() != layer.lanes()) throw UsageError("scan: initial state size mismatch");
    const std::size_t steps = u.dim(0);
    Tensor<S> bu(Shape{steps, layer.lanes()});
    expand_input(u.data().data(), layer.b->data().data(), bu.data().data(), steps, layer.channels(), layer.state());
    const auto a = layer.decay();
    Tensor<S> h(Shape{steps, layer.lanes()});
    linear_scan<S>(mode, a, bu.data(), h0 ? h0->data() : std::span<const S>{}, h.data());
    return h;
}

}  // namespace detail

/// States h_1..T of one layer by the literal recurrence. u is [T, channels].
template <class S>
Tensor<S> scan_sequential(const SsmLayer<S>& layer, const Tensor<S>& u, const Tensor<S>* h0 = nullptr) {
    return detail::run_layer_scan(layer, u, h0, ScanMode::sequential);
}

/// Same as scan_sequential, evaluated by the parallel prefix scan.
template <class S>
Tensor<S> scan_parallel(const SsmLayer<S>& layer, const Tensor<S>& u, const Tensor<S>* h0 = nullptr) {
    return detail::run_layer_scan(layer, u, h0, ScanMode::parallel);
}

/// Differentiable diagonal scan. u: [B, T, C]; a_raw, bmat: [C, P];
/// h0: optional constant [B, C*P]. Returns h: [B, T, C*P].
template <class S>
Var<S> ssm_scan(Var<S> u, Var<S> a_raw, Var<S> bmat, std::type_identity_t<const Tensor<S>*> h0, ScanMode mode) {
    const Shape& us = u.shape();
    if (us.size() != 3 || a_raw.shape().size() != 2 || a_raw.shape() != bmat.shape() || us[2] != a_raw.shape()[0])
        throw UsageError("ssm_scan: incompatible shapes " + shape_str(us) + ", " + shape_str(a_raw.shape()));
    const std::size_t batch = us[0], steps = us[1], channels = us[2], state = a_raw.shape()[1];
    const std::size_t lanes = channels * state;
    if (steps == 0) throw UsageError("ssm_scan: empty sequence");
    if (h0 && h0->numel() != batch * lanes)
        throw UsageError("ssm_scan: initial state " + shape_str(h0->shape()) + " does not match batch x lanes");
    std::vector<S> a(lanes);
    for (std::size_t i = 0; i < lanes; ++i) a[i] = std::tanh(a_raw.value()[i]);
    Tensor<S> h(Shape{batch, steps, lanes});
    std::vector<S> bu(steps * lanes);
    for (std::size_t b = 0; b < batch; ++b) {
        detail::expand_input(u.value().data().data() + b * steps * channels, bmat.value().data().data(), bu.data(),
                             steps, channels, state);
        std::span<const S> init = h0 ? h0->data().subspan(b * lanes, lanes) : std::span<const S>{};
        linear_scan<S>(mode, a, bu, init, h.data().subspan(b * steps * lanes, steps * lanes));
    }
    std::optional<Tensor<S>> init_copy;
    if (h0) init_copy = *h0;
    return u.tape()->record(
        std::move(h), {u, a_raw, bmat},
        [u, a_raw, bmat, a = std::move(a), init_copy = std::move(init_copy), batch, steps, channels, state, lanes,
         mode](Tape<S>& t, std::size_t self) {
            const auto g = t.grad(self).data();
            const auto hv = t.value(self).data();
            const auto uv = u.value().data();
            const auto bv = bmat.value().data();
            std::vector<S> lam(steps * lanes), grev(steps * lanes), lrev(steps * lanes);
            std::vector<S> da(lanes, S(0));
            Tensor<S>* gu = u.requires_grad() ? &t.grad(u.id()) : nullptr;
            Tensor<S>* gb = bmat.requires_grad() ? &t.grad(bmat.id()) : nullptr;
            for (std::size_t b = 0; b < batch; ++b) {
                const std::size_t off = b * steps * lanes;
                // Adjoint recurrence lam_t = g_t + a * lam_{t+1}, run as a forward scan on reversed time.
                for (std::size_t s = 0; s < steps; ++s)
                    std::copy_n(g.data() + off + (steps - 1 - s) * lanes, lanes, grev.data() + s * lanes);
                linear_scan<S>(mode, a, grev, {}, lrev);
                for (std::size_t s = 0; s < steps; ++s)
                    std::copy_n(lrev.data() + (steps - 1 - s) * lanes, lanes, lam.data() + s * lanes);
                for (std::size_t s = 0; s < steps; ++s) {
                    const S* prev = s == 0 ? (init_copy ? init_copy->data().data() + b * lanes : nullptr)
                                           : hv.data() + off + (s - 1) * lanes;
                    const S* l = lam.data() + s * lanes;
                    if (prev)
                        for (std::size_t i = 0; i < lanes; ++i) da[i] += l[i] * prev[i];
                    const S* ut = uv.data() + (b * steps + s) * channels;
                    for (std::size_t d = 0; d < channels; ++d)
                        for (std::size_t p = 0; p < state; ++p) {
                            const std::size_t i = d * state + p;
                            if (gb) (*gb)[i] += l[i] * ut[d];
                            if (gu) (*gu)[(b * steps + s) * channels + d] += l[i] * bv[i];
                        }
                }
            }
            if (a_raw.requires_grad()) {
                auto ga = t.grad(a_raw.id()).data();
                for (std::size_t i = 0; i < lanes; ++i) ga[i] += da[i] * (S(1) - a[i] * a[i]);
            }
        });
}

/// Per-layer carried state h_t, each [B, lanes].
template <class S>
struct LayerStates {
    std::vector<Tensor<S>> h;
    std::size_t t = 0;

    static LayerStates zeros(const StackConfig& cfg, std::size_t batch) {
        LayerStates s;
        for (std::size_t i = 0; i < cfg.layers; ++i) s.h.emplace_back(Shape{batch, cfg.lanes()});
        return s;
    }
    friend bool operator==(const LayerStates&, const LayerStates&) = default;
};

template <class S>
struct StackOutput {
    Var<S> y;             // [B, T, out_dim]
    LayerStates<S> final;  // states after the last input step
};

/// Adds a stack's parameters to `store`, names prefixed by `prefix`.
template <class S>
void init_stack(ParamStore<S>& store, const std::string& prefix, const StackConfig& cfg, const CounterRng& rng,
                double head_scale = 1.0) {
    require(cfg.in_dim > 0 && cfg.width > 0 && cfg.state > 0 && cfg.hidden > 0 && cfg.layers > 0 && cfg.out_dim > 0,
            "init_stack: all stack dimensions must be positive");
    auto lin = [&](const std::string& n, std::size_t in, std::size_t out, double gain) {
        const double bound = gain * std::sqrt(3.0 / static_cast<double>(in));
        store.add(n + ".w", uniform_init<S>(Shape{in, out}, bound, rng, prefix + n + ".w"));
        store.add(n + ".b", Tensor<S>(Shape{out}));
    };
    auto norm = [&](const std::string& n, std::size_t dim) {
        store.add(n + ".g", Tensor<S>(Shape{dim}, S(1)));
        store.add(n + ".b", Tensor<S>(Shape{dim}));
    };
    lin(prefix + "embed", cfg.in_dim, cfg.width, 1.0);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string p = prefix + "layer" + std::to_string(l) + ".";
        norm(p + "norm", cfg.width);
        // |a| spread over [0.5, 0.98]; B scaled so each lane has unit stationary variance.
        Tensor<S> a_raw(Shape{cfg.width, cfg.state}), bmat(Shape{cfg.width, cfg.state});
        for (std::size_t i = 0; i < a_raw.numel(); ++i) {
            const double a = 0.5 + 0.48 * rng.uniform(Role::init, l, i, 0xA);
            a_raw[i] = S(std::atanh(a));
            bmat[i] = S((2.0 * rng.uniform(Role::init, l, i, 0xB) - 1.0) * std::sqrt(3.0 * (1.0 - a * a)));
        }
        store.add(p + "a", std::move(a_raw));
        store.add(p + "bmat", std::move(bmat));
        lin(p + "ff1", cfg.lanes(), cfg.hidden, 1.0);
        lin(p + "ff2", cfg.hidden, cfg.width, 0.5);
    }
    norm(prefix + "out_norm", cfg.width);
    lin(prefix + "head", cfg.width, cfg.out_dim, head_scale);
}

/// Stacked SSM/FNN over x: [B, T, in_dim]. Causal: y_t depends on x_1..t and
/// the initial states only.
template <class S>
StackOutput<S> stacked_forward(const Binding<S>& params, const std::string& prefix, const StackConfig& cfg, Var<S> x,
                               std::type_identity_t<const LayerStates<S>*> initial, ScanMode mode, bool count = true) {
    const Shape& xs = x.shape();
    if (xs.size() != 3 || xs[2] != cfg.in_dim)
        throw UsageError("stacked_forward: expected [B, T, " + std::to_string(cfg.in_dim) + "], got " + shape_str(xs));
    const std::size_t batch = xs[0], steps = xs[1];
    if (initial) {
        if (initial->h.size() != cfg.layers) throw UsageError("stacked_forward: initial state layer count mismatch");
        for (const auto& h : initial->h)
            if (h.numel() != batch * cfg.lanes()) throw UsageError("stacked_forward: initial state size mismatch");
    }
    if (count) forward_counters().sequence_passes.fetch_add(1, std::memory_order_relaxed);
    auto P = [&](const std::string& n) { return params(prefix + n); };
    Var<S> u = add_bias(matmul(x, P("embed.w")), P("embed.b"));
    StackOutput<S> out;
    out.final.t = (initial ? initial->t : 0) + steps;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        Var<S> n = layer_norm(u, P(p + "norm.g"), P(p + "norm.b"));
        Var<S> h = ssm_scan(n, P(p + "a"), P(p + "bmat"), initial ? &initial->h[l] : nullptr, mode);
        Tensor<S> last(Shape{batch, cfg.lanes()});
        for (std::size_t b = 0; b < batch; ++b)
            std::copy_n(h.value().data().data() + (b * steps + steps - 1) * cfg.lanes(), cfg.lanes(),
                        last.data().data() + b * cfg.lanes());
        out.final.h.push_back(std::move(last));
        Var<S> f = add_bias(matmul(silu(add_bias(matmul(h, P(p + "ff1.w")), P(p + "ff1.b"))), P(p + "ff2.w")),
                            P(p + "ff2.b"));
        u = add(u, f);
    }
    Var<S> n = layer_norm(u, P("out_norm.g"), P("out_norm.b"));
    out.y = add_bias(matmul(n, P("head.w")), P("head.b"));
    return out;
}

/// One timestep from carried states; counted as a single-step evaluation.
template <class S>
StackOutput<S> stacked_step(const Binding<S>& params, const std::string& prefix, const StackConfig& cfg, Var<S> x,
                            const LayerStates<S>& states) {
    require(x.shape().size() == 3 && x.shape()[1] == 1, "stacked_step: input must hold exactly one timestep");
    forward_counters().single_steps.fetch_add(1, std::memory_order_relaxed);
    return stacked_forward(params, prefix, cfg, x, &states, ScanMode::sequential, false);
}

}  // namespace vssm
