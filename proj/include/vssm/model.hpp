#pragma once

// Variational SSM: uniform discrete prior over Z categorical components with
// N categories per timestep, a Gaussian decoder with fixed sigma, a causal
// categorical posterior q(z_t | x_1..t), and a partial posterior
// q(z_t | x_1..min(C,t)) that reads the prompt padded with empty tokens.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "vssm/autodiff.hpp"
#include "vssm/errors.hpp"
#include "vssm/ops.hpp"
#include "vssm/params.hpp"
#include "vssm/rng.hpp"
#include "vssm/ssm.hpp"
#include "vssm/tensor.hpp"

namespace vssm {

struct VssmHyper {
    std::size_t T = 28;  // sequence length
    std::size_t D = 28;  // observation dim per step
    std::size_t Z = 8;   // latent components per step
    std::size_t N = 16;  // categories per component
    double sigma = 0.1;  // fixed Gaussian output std
    double tau = 1.0;    // Gumbel-softmax temperature
    std::size_t width = 128;
    std::size_t state = 8;
    std::size_t hidden = 128;
    std::size_t layers = 2;

    void validate() const {
        require(N >= 2, "VssmHyper: N must be at least 2");
        require(Z >= 1, "VssmHyper: Z must be at least 1");
        require(sigma > 0, "VssmHyper: sigma must be positive");
        require(tau > 0, "VssmHyper: tau must be positive");
        require(T >= 1 && D >= 1, "VssmHyper: T and D must be positive");
        require(width > 0 && state > 0 && hidden > 0 && layers > 0, "VssmHyper: stack dimensions must be positive");
    }

    std::size_t latent_dim() const { return Z * N; }
    StackConfig decoder_config() const { return {latent_dim(), width, state, hidden, layers, D}; }
    StackConfig posterior_config() const { return {D, width, state, hidden, layers, latent_dim()}; }
    StackConfig partial_config() const { return {D + 1, width, state, hidden, layers, latent_dim()}; }

    friend bool operator==(const VssmHyper&, const VssmHyper&) = default;
};

inline constexpr const char* kDecoderPrefix = "dec.";
inline constexpr const char* kPosteriorPrefix = "enc.";
inline constexpr const char* kPartialPrefix = "par.";

template <class S>
struct VssmModel {
    VssmHyper hyper;
    ParamStore<S> params;

    static VssmModel init(const VssmHyper& h, std::uint64_t seed) {
        h.validate();
        VssmModel m{h, {}};
        const CounterRng rng(seed);
        init_stack(m.params, kDecoderPrefix, h.decoder_config(), rng.child(1));
        init_stack(m.params, kPosteriorPrefix, h.posterior_config(), rng.child(2), 0.5);
        init_stack(m.params, kPartialPrefix, h.partial_config(), rng.child(3), 0.5);
        return m;
    }

    template <class U>
    VssmModel<U> cast() const {
        return {hyper, params.template cast<U>()};
    }

    /// True for parameters of the partial posterior stack.
    bool is_partial_param(std::size_t i) const { return params.name(i).rfind(kPartialPrefix, 0) == 0; }
};

/// z_1..T with 0-based category indices, laid out [T, Z].
struct LatentSequence {
    std::size_t T = 0, Z = 0, N = 0;
    std::vector<std::uint32_t> index;

    std::uint32_t at(std::size_t t, std::size_t z) const { return index[t * Z + z]; }
    void validate() const {
        require(index.size() == T * Z, "LatentSequence: index count does not match T x Z");
        for (auto i : index)
            if (i >= N) throw UsageError("LatentSequence: category index out of range");
    }
};

/// Flattened one-hots [B, T, Z*N] for a batch of latent sequences.
template <class S>
Tensor<S> one_hot(const std::vector<LatentSequence>& zs) {
    require(!zs.empty(), "one_hot: empty batch");
    const auto& z0 = zs.front();
    Tensor<S> out(Shape{zs.size(), z0.T, z0.Z * z0.N});
    for (std::size_t b = 0; b < zs.size(); ++b) {
        zs[b].validate();
        require(zs[b].T == z0.T && zs[b].Z == z0.Z && zs[b].N == z0.N, "one_hot: inconsistent batch");
        for (std::size_t t = 0; t < z0.T; ++t)
            for (std::size_t z = 0; z < z0.Z; ++z)
                out[(b * z0.T + t) * z0.Z * z0.N + z * z0.N + zs[b].at(t, z)] = S(1);
    }
    return out;
}

/// x-bar_1..T: observed rows (x_t, 1) for t <= C, empty rows (0, ..., 0, 0) after.
template <class S>
struct PaddedPrompt {
    std::size_t C = 0;
    Tensor<S> values;  // [T, D + 1]; last column is the observed mask

    std::size_t length() const { return values.dim(0); }
};

/// `prefix` is [C', D] with C' >= C; only its first C rows are used.
template <class S>
PaddedPrompt<S> make_padded_prompt(const Tensor<S>& prefix, std::size_t C, std::size_t T, std::size_t D) {
    if (C > T) throw UsageError("prompt length C=" + std::to_string(C) + " exceeds T=" + std::to_string(T));
    if (C > 0) require(prefix.rank() == 2 && prefix.dim(1) == D && prefix.dim(0) >= C, "make_padded_prompt: prefix must be [>=C, D]");
    PaddedPrompt<S> p{C, Tensor<S>(Shape{T, D + 1})};
    for (std::size_t t = 0; t < C; ++t) {
        for (std::size_t d = 0; d < D; ++d) p.values[t * (D + 1) + d] = prefix[t * D + d];
        p.values[t * (D + 1) + D] = S(1);
    }
    return p;
}

/// Flattened empty-token rows [1, W, D + 1].
template <class S>
Tensor<S> empty_tokens(std::size_t W, std::size_t D) {
    return Tensor<S>(Shape{1, W, D + 1});
}

// --- Stack evaluations on a tape -------------------------------------------

/// Posterior logits [B, T, Z, N] from x [B, T, D].
template <class S>
Var<S> encode_posterior(const Binding<S>& p, const VssmHyper& h, Var<S> x, ScanMode mode) {
    require(x.shape().size() == 3 && x.shape()[2] == h.D, "encode_posterior: x must be [B, T, D], got " + shape_str(x.shape()));
    auto out = stacked_forward(p, kPosteriorPrefix, h.posterior_config(), x, nullptr, mode);
    return reshape(out.y, Shape{x.shape()[0], x.shape()[1], h.Z, h.N});
}

/// Partial-posterior logits [B, T, Z, N] from padded prompts [B, T, D + 1].
template <class S>
StackOutput<S> encode_partial(const Binding<S>& p, const VssmHyper& h, Var<S> xbar, ScanMode mode,
                              std::type_identity_t<const LayerStates<S>*> initial = nullptr) {
    require(xbar.shape().size() == 3 && xbar.shape()[2] == h.D + 1,
            "encode_partial: input must be [B, T, D + 1], got " + shape_str(xbar.shape()));
    auto out = stacked_forward(p, kPartialPrefix, h.partial_config(), xbar, initial, mode);
    out.y = reshape(out.y, Shape{xbar.shape()[0], xbar.shape()[1], h.Z, h.N});
    return out;
}

/// Decoder means [B, T, D] from latent one-hots (or relaxations) [B, T, Z*N].
template <class S>
StackOutput<S> decode(const Binding<S>& p, const VssmHyper& h, Var<S> z, ScanMode mode,
                      std::type_identity_t<const LayerStates<S>*> initial = nullptr) {
    require(z.shape().size() == 3 && z.shape()[2] == h.latent_dim(),
            "decode: latent input must be [B, T, Z*N], got " + shape_str(z.shape()));
    return stacked_forward(p, kDecoderPrefix, h.decoder_config(), z, initial, mode);
}

// --- Closed-form densities ---------------------------------------------------

/// log p(z_1..T) = -T Z log N under the uniform prior.
inline double prior_log_prob(const LatentSequence& z, const VssmHyper& h) {
    require(z.Z == h.Z && z.N == h.N, "prior_log_prob: latent shape does not match hyperparameters");
    return -static_cast<double>(z.T * z.Z) * std::log(static_cast<double>(z.N));
}

/// KL(softmax(v) || Uniform(N)) summed over the Z rows of `logits` [Z, N].
template <class S>
double kl_to_uniform(const Tensor<S>& logits) {
    require(logits.rank() >= 1 && !logits.empty(), "kl_to_uniform: empty logits");
    const std::size_t n = logits.shape().back();
    double kl = 0;
    for (std::size_t r = 0; r < logits.numel() / n; ++r) {
        double mx = -INFINITY;
        for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, double(logits[r * n + k]));
        double se = 0;
        for (std::size_t k = 0; k < n; ++k) se += std::exp(double(logits[r * n + k]) - mx);
        const double lse = mx + std::log(se);
        double neg_entropy = 0;
        for (std::size_t k = 0; k < n; ++k) {
            const double lp = double(logits[r * n + k]) - lse;
            neg_entropy += std::exp(lp) * lp;
        }
        kl += std::log(double(n)) + neg_entropy;
    }
    return std::max(kl, 0.0);
}

/// sum_d log N(x_d | w_d, sigma^2)
template <class S>
double gaussian_log_prob(std::span<const S> x, std::span<const S> w, double sigma) {
    require(sigma > 0, "gaussian_log_prob: sigma must be positive");
    require(x.size() == w.size(), "gaussian_log_prob: dimension mismatch");
    const double norm = std::log(sigma * std::sqrt(2.0 * std::numbers::pi));
    double s = 0;
    for (std::size_t d = 0; d < x.size(); ++d) {
        const double r = double(x[d]) - double(w[d]);
        s += -r * r / (2.0 * sigma * sigma) - norm;
    }
    return s;
}

// --- Differentiable objective terms -------------------------------------------

/// Per-item sum_t sum_d log N(x | w, sigma^2): [B].
template <class S>
Var<S> gaussian_log_lik(Var<S> x, Var<S> w, double sigma) {
    require(sigma > 0, "gaussian_log_lik: sigma must be positive");
    const std::size_t per_item = x.numel() / x.shape()[0];
    const S norm = S(std::log(sigma * std::sqrt(2.0 * std::numbers::pi)) * double(per_item));
    return add_scalar(scale(sum_per_item(square(sub(x, w))), S(-1.0 / (2.0 * sigma * sigma))), -norm);
}

/// Per-item sum over t and components of KL(q || Uniform): [B]. logits [B, T, Z, N].
template <class S>
Var<S> kl_to_uniform_per_item(Var<S> logits, std::size_t N) {
    Var<S> lp = log_softmax(logits);
    const std::size_t rows = logits.numel() / logits.shape()[0] / N;
    return add_scalar(sum_per_item(mul(exp(lp), lp)), S(double(rows) * std::log(double(N))));
}

/// Standard Gumbel noise for a batch, keyed by (item, t, z*N + n).
template <class S>
Tensor<S> latent_gumbel_noise(const CounterRng& rng, Role role, std::size_t batch, std::size_t T, std::size_t Z,
                              std::size_t N, std::size_t item_offset = 0) {
    Tensor<S> noise(Shape{batch, T, Z, N});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < Z * N; ++c)
                noise[(b * T + t) * Z * N + c] = S(rng.gumbel(role, item_offset + b, t, c));
    return noise;
}

/// One-hot argmax of logits + noise along the last axis (an exact categorical draw).
template <class S>
Tensor<S> hard_sample(const Tensor<S>& logits, const Tensor<S>& noise) {
    const std::size_t n = logits.shape().back();
    Tensor<S> out(logits.shape());
    for (std::size_t r = 0; r < logits.numel() / n; ++r) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < n; ++k)
            if (logits[r * n + k] + noise[r * n + k] > logits[r * n + best] + noise[r * n + best]) best = k;
        out[r * n + best] = S(1);
    }
    return out;
}

template <class S>
struct ElboTerms {
    Var<S> elbo;            // [B]
    Var<S> reconstruction;  // [B]
    Var<S> kl;              // [B]
    Var<S> logits;          // posterior logits [B, T, Z, N]
    Tensor<S> sample;       // exact categorical draw, one-hot [B, T, Z*N]
};

/// Single-sample reparametrized ELBO per item: the reconstruction term uses
/// the Gumbel-softmax sample (straight-through when `hard`), the KL term is
/// closed form. `noise` is standard Gumbel [B, T, Z, N].
template <class S>
ElboTerms<S> elbo_terms(const Binding<S>& p, const VssmHyper& h, Var<S> x, const Tensor<S>& noise, ScanMode mode,
                        bool hard) {
    const std::size_t B = x.shape()[0], T = x.shape()[1];
    ElboTerms<S> r;
    r.logits = encode_posterior(p, h, x, mode);
    Var<S> z = gumbel_softmax(r.logits, S(h.tau), hard, noise);
    Var<S> w = decode(p, h, reshape(z, Shape{B, T, h.latent_dim()}), mode).y;
    r.reconstruction = gaussian_log_lik(x, w, h.sigma);
    r.kl = kl_to_uniform_per_item(r.logits, h.N);
    r.elbo = sub(r.reconstruction, r.kl);
    r.sample = hard_sample(r.logits.value(), noise).reshaped(Shape{B, T, h.latent_dim()});
    return r;
}

/// Per-item cross-entropy -sum_t sum_z log q_partial(z_{t,z} | x_1..min(C,t)) of
/// a fixed posterior draw `sample` (one-hot [B, T, Z*N]; carries no gradient).
template <class S>
Var<S> partial_posterior_loss(const Binding<S>& p, const VssmHyper& h, Var<S> xbar, const Tensor<S>& sample,
                              ScanMode mode) {
    const std::size_t B = xbar.shape()[0], T = xbar.shape()[1];
    require(sample.shape() == (Shape{B, T, h.latent_dim()}), "partial_posterior_loss: sample shape mismatch");
    Var<S> lq = log_softmax(encode_partial(p, h, xbar, mode).y);
    Var<S> target = lq.tape()->constant(sample.reshaped(Shape{B, T, h.Z, h.N}));
    return scale(sum_per_item(mul(lq, target)), S(-1));
}

/// Stacks padded prompts for a batch: rows of item b are observed for t < cuts[b].
template <class S>
Tensor<S> padded_batch(const Tensor<S>& x, const std::vector<std::size_t>& cuts) {
    const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
    require(cuts.size() == B, "padded_batch: one cut per item required");
    Tensor<S> out(Shape{B, T, D + 1});
    for (std::size_t b = 0; b < B; ++b) {
        if (cuts[b] > T) throw UsageError("cut C exceeds sequence length");
        for (std::size_t t = 0; t < cuts[b]; ++t) {
            for (std::size_t d = 0; d < D; ++d) out[(b * T + t) * (D + 1) + d] = x[(b * T + t) * D + d];
            out[(b * T + t) * (D + 1) + D] = S(1);
        }
    }
    return out;
}

// --- Tensor-level conveniences (no gradients) ------------------------------------

/// Posterior logits [T, Z, N] for one sequence x [T, D].
template <class S>
Tensor<S> encode_posterior(const VssmModel<S>& m, const Tensor<S>& x, ScanMode mode = ScanMode::sequential) {
    require(x.rank() == 2 && x.dim(1) == m.hyper.D, "encode_posterior: x must be [T, D]");
    Tape<S> tape(false);
    Binding<S> p(tape, m.params, false);
    return encode_posterior(p, m.hyper, tape.constant(x.reshaped(Shape{1, x.dim(0), x.dim(1)})), mode)
        .value()
        .reshaped(Shape{x.dim(0), m.hyper.Z, m.hyper.N});
}

template <class S>
Tensor<S> encode_partial(const VssmModel<S>& m, const PaddedPrompt<S>& prompt, ScanMode mode = ScanMode::sequential) {
    Tape<S> tape(false);
    Binding<S> p(tape, m.params, false);
    const std::size_t T = prompt.length();
    return encode_partial(p, m.hyper, tape.constant(prompt.values.reshaped(Shape{1, T, m.hyper.D + 1})), mode)
        .y.value()
        .reshaped(Shape{T, m.hyper.Z, m.hyper.N});
}

/// Decoder means [T, D].
template <class S>
Tensor<S> decode(const VssmModel<S>& m, const LatentSequence& z, ScanMode mode = ScanMode::sequential) {
    require(z.Z == m.hyper.Z && z.N == m.hyper.N, "decode: latent shape does not match hyperparameters");
    Tape<S> tape(false);
    Binding<S> p(tape, m.params, false);
    return decode(p, m.hyper, tape.constant(one_hot<S>({z})), mode).y.value().reshaped(Shape{z.T, m.hyper.D});
}

struct ElboValue {
    double elbo = 0, reconstruction = 0, kl = 0;
};

/// Single-sample ELBO of one sequence with hard posterior samples.
template <class S>
ElboValue elbo(const VssmModel<S>& m, const Tensor<S>& x, const CounterRng& rng, bool hard = true,
               ScanMode mode = ScanMode::sequential) {
    require(x.rank() == 2 && x.dim(1) == m.hyper.D, "elbo: x must be [T, D]");
    Tape<S> tape(false);
    Binding<S> p(tape, m.params, false);
    const std::size_t T = x.dim(0);
    auto noise = latent_gumbel_noise<S>(rng, Role::train_gumbel, 1, T, m.hyper.Z, m.hyper.N);
    auto r = elbo_terms(p, m.hyper, tape.constant(x.reshaped(Shape{1, T, m.hyper.D})), noise, mode, hard);
    return {double(r.elbo.value()[0]), double(r.reconstruction.value()[0]), double(r.kl.value()[0])};
}

}  // namespace vssm
