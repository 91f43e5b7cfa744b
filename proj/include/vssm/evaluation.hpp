#pragma once

// Importance-sampled log-likelihoods with posterior proposals, and exact
// enumeration over the latent space for models small enough to afford it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "vssm/errors.hpp"
#include "vssm/model.hpp"
#include "vssm/rng.hpp"

namespace vssm {

struct LikelihoodReport {
    std::string mode = "full";  // "full" or "partial"
    std::size_t C = 0;
    std::size_t K = 0;
    double estimate = 0;       // nats
    double weight_spread = 0;  // max log-weight minus the log mean weight
    std::vector<double> log_weights;
};

inline nlohmann::json to_json(const LikelihoodReport& r, std::size_t sequence_id) {
    return {{"sequence_id", sequence_id}, {"mode", r.mode}, {"C", r.C},
            {"K", r.K},                   {"estimate_nats", r.estimate}, {"weight_spread", r.weight_spread}};
}

inline double log_sum_exp(const std::vector<double>& v) {
    require(!v.empty(), "log_sum_exp: empty input");
    const double mx = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(mx)) return mx;
    double s = 0;
    for (double x : v) s += std::exp(x - mx);
    return mx + std::log(s);
}

/// Consumes a set of log importance weights.
inline LikelihoodReport summarize_weights(std::vector<double> log_w, std::string mode, std::size_t C) {
    LikelihoodReport r;
    r.mode = std::move(mode);
    r.C = C;
    r.K = log_w.size();
    r.estimate = log_sum_exp(log_w) - std::log(double(log_w.size()));
    r.weight_spread = *std::max_element(log_w.begin(), log_w.end()) - r.estimate;
    if (!std::isfinite(r.estimate)) throw NumericError("importance-sampled estimate is not finite");
    r.log_weights = std::move(log_w);
    return r;
}

namespace detail {

// Row-wise log-softmax of [rows, N] logits in double precision.
template <class S>
std::vector<double> log_probs(const Tensor<S>& logits, std::size_t N) {
    std::vector<double> out(logits.numel());
    for (std::size_t r = 0; r < logits.numel() / N; ++r) {
        double mx = -INFINITY;
        for (std::size_t n = 0; n < N; ++n) mx = std::max(mx, double(logits[r * N + n]));
        double s = 0;
        for (std::size_t n = 0; n < N; ++n) s += std::exp(double(logits[r * N + n]) - mx);
        const double lse = mx + std::log(s);
        for (std::size_t n = 0; n < N; ++n) out[r * N + n] = double(logits[r * N + n]) - lse;
    }
    return out;
}

inline double sequence_log_prob(const std::vector<double>& lp, const std::vector<std::uint32_t>& idx, std::size_t N) {
    double s = 0;
    for (std::size_t r = 0; r < idx.size(); ++r) s += lp[r * N + idx[r]];
    return s;
}

// Categorical draws (Gumbel-max) per (t, component): k-th sequence keyed by k.
template <class S>
std::vector<std::uint32_t> draw_indices(const Tensor<S>& logits, std::size_t N, const CounterRng& rng, std::size_t k) {
    const std::size_t rows = logits.numel() / N;
    std::vector<std::uint32_t> idx(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double best = -INFINITY;
        for (std::size_t n = 0; n < N; ++n) {
            const double s = double(logits[r * N + n]) + rng.gumbel(Role::eval_latent, k, r, n);
            if (s > best) {
                best = s;
                idx[r] = static_cast<std::uint32_t>(n);
            }
        }
    }
    return idx;
}

// sum_{t >= from} log N(x_t | w_t, sigma^2) for each latent sequence, decoded in batches.
template <class S>
std::vector<double> reconstruction_log_probs(const VssmModel<S>& m, const Tensor<S>& x,
                                             const std::vector<LatentSequence>& zs, std::size_t from,
                                             std::size_t batch = 256) {
    const VssmHyper& h = m.hyper;
    const std::size_t T = x.dim(0);
    std::vector<double> out;
    out.reserve(zs.size());
    for (std::size_t b0 = 0; b0 < zs.size(); b0 += batch) {
        const std::size_t b1 = std::min(zs.size(), b0 + batch);
        Tape<S> tape(false);
        Binding<S> p(tape, m.params, false);
        std::vector<LatentSequence> block(zs.begin() + b0, zs.begin() + b1);
        Tensor<S> w = decode(p, h, tape.constant(one_hot<S>(block)), ScanMode::sequential).y.value();
        for (std::size_t b = 0; b < b1 - b0; ++b) {
            const std::size_t off = (b * T + from) * h.D, len = (T - from) * h.D;
            out.push_back(gaussian_log_prob<S>(x.data().subspan(from * h.D, len), w.data().subspan(off, len), h.sigma));
        }
    }
    return out;
}

inline void check_sequence(const VssmHyper& h, const auto& x) {
    require(x.rank() == 2 && x.dim(1) == h.D && x.dim(0) >= 1,
            "likelihood: x must be [T, " + std::to_string(h.D) + "], got " + shape_str(x.shape()));
}

}  // namespace detail

/// log p(x) ~ log (1/K) sum_k p(x|z^k) p(z^k) / q(z^k|x), z^k ~ q(.|x).
template <class S>
LikelihoodReport is_log_likelihood(const VssmModel<S>& m, const Tensor<S>& x, std::size_t K, const CounterRng& rng) {
    if (K < 1) throw UsageError("is_log_likelihood: K must be at least 1");
    detail::check_sequence(m.hyper, x);
    const VssmHyper& h = m.hyper;
    const std::size_t T = x.dim(0);
    const Tensor<S> logits = encode_posterior(m, x);
    const auto lq = detail::log_probs(logits, h.N);
    std::vector<LatentSequence> zs;
    std::vector<double> log_w;
    for (std::size_t k = 0; k < K; ++k) {
        zs.push_back({T, h.Z, h.N, detail::draw_indices(logits, h.N, rng, k)});
        log_w.push_back(prior_log_prob(zs.back(), h) - detail::sequence_log_prob(lq, zs.back().index, h.N));
    }
    const auto recon = detail::reconstruction_log_probs(m, x, zs, 0);
    for (std::size_t k = 0; k < K; ++k) log_w[k] += recon[k];
    return summarize_weights(std::move(log_w), "full", 0);
}

/// log p(x_{C+1..T} | x_1..C) ~ log (1/K) sum_k p(x_{C+1..T}|z^k) q_par(z^k|x_1..C) / q(z^k|x), z^k ~ q(.|x).
template <class S>
LikelihoodReport is_partial_log_likelihood(const VssmModel<S>& m, const Tensor<S>& x, std::size_t C, std::size_t K,
                                           const CounterRng& rng) {
    if (K < 1) throw UsageError("is_partial_log_likelihood: K must be at least 1");
    detail::check_sequence(m.hyper, x);
    const VssmHyper& h = m.hyper;
    const std::size_t T = x.dim(0);
    if (C >= T) throw UsageError("is_partial_log_likelihood: requires C < T");
    const Tensor<S> logits = encode_posterior(m, x);
    const auto lq = detail::log_probs(logits, h.N);
    const auto lpar = detail::log_probs(encode_partial(m, make_padded_prompt(x, C, T, h.D)), h.N);
    std::vector<LatentSequence> zs;
    std::vector<double> log_w;
    for (std::size_t k = 0; k < K; ++k) {
        zs.push_back({T, h.Z, h.N, detail::draw_indices(logits, h.N, rng, k)});
        log_w.push_back(detail::sequence_log_prob(lpar, zs.back().index, h.N) -
                        detail::sequence_log_prob(lq, zs.back().index, h.N));
    }
    const auto recon = detail::reconstruction_log_probs(m, x, zs, C);
    for (std::size_t k = 0; k < K; ++k) log_w[k] += recon[k];
    return summarize_weights(std::move(log_w), "partial", C);
}

inline constexpr std::size_t kMaxEnumeration = std::size_t{1} << 20;

namespace detail {

inline std::size_t latent_space_size(const VssmHyper& h, std::size_t T) {
    std::size_t n = 1;
    for (std::size_t i = 0; i < T * h.Z; ++i) {
        if (n > kMaxEnumeration / h.N) throw UsageError("exact likelihood: latent space exceeds 2^20 sequences");
        n *= h.N;
    }
    return n;
}

template <class F>
void for_each_latent(const VssmHyper& h, std::size_t T, F&& visit_block) {
    const std::size_t total = latent_space_size(h, T);
    std::vector<LatentSequence> block;
    LatentSequence z{T, h.Z, h.N, std::vector<std::uint32_t>(T * h.Z, 0)};
    for (std::size_t i = 0; i < total; ++i) {
        block.push_back(z);
        for (std::size_t j = 0; j < z.index.size() && ++z.index[j] == h.N; ++j) z.index[j] = 0;
        if (block.size() == 4096 || i + 1 == total) {
            visit_block(block);
            block.clear();
        }
    }
}

}  // namespace detail

/// log sum_z p(x|z) p(z), by enumeration.
template <class S>
double exact_log_likelihood(const VssmModel<S>& m, const Tensor<S>& x) {
    detail::check_sequence(m.hyper, x);
    const std::size_t T = x.dim(0);
    std::vector<double> terms;
    detail::for_each_latent(m.hyper, T, [&](const std::vector<LatentSequence>& zs) {
        for (double r : detail::reconstruction_log_probs(m, x, zs, 0)) terms.push_back(r);
    });
    const double prior = -double(T * m.hyper.Z) * std::log(double(m.hyper.N));
    return log_sum_exp(terms) + prior;
}

/// log sum_z p(x_{C+1..T}|z) q_par(z|x_1..C), by enumeration.
template <class S>
double exact_partial_log_likelihood(const VssmModel<S>& m, const Tensor<S>& x, std::size_t C) {
    detail::check_sequence(m.hyper, x);
    const std::size_t T = x.dim(0);
    if (C >= T) throw UsageError("exact_partial_log_likelihood: requires C < T");
    const auto lpar = detail::log_probs(encode_partial(m, make_padded_prompt(x, C, T, m.hyper.D)), m.hyper.N);
    std::vector<double> terms;
    detail::for_each_latent(m.hyper, T, [&](const std::vector<LatentSequence>& zs) {
        const auto recon = detail::reconstruction_log_probs(m, x, zs, C);
        for (std::size_t i = 0; i < zs.size(); ++i)
            terms.push_back(recon[i] + detail::sequence_log_prob(lpar, zs[i].index, m.hyper.N));
    });
    return log_sum_exp(terms);
}

}  // namespace vssm
