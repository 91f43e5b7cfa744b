#pragma once

// Joint training of decoder, posterior and partial posterior, training of the
// sequential SSM baseline, validation-based selection and the learning-rate grid.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "vssm/checkpoint.hpp"
#include "vssm/data.hpp"
#include "vssm/errors.hpp"
#include "vssm/evaluation.hpp"
#include "vssm/model.hpp"
#include "vssm/params.hpp"
#include "vssm/rng.hpp"
#include "vssm/sampling.hpp"

namespace vssm {

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    std::vector<double> lr_grid{1e-2, 5e-3, 1e-3, 5e-4, 1e-4};
    double lr = 1e-3;  // used when the grid is not searched
    AdamConfig adam;
    double valid_fraction = 0.1;
    std::uint64_t seed = 0;
    double elbo_weight = 1.0;
    double partial_weight = 1.0;  // lambda
    std::size_t checkpoint_every = 1;  // epochs; 0 saves only best and final
    std::size_t workers = 1;
    bool hard = true;  // straight-through Gumbel samples feed the decoder
    ScanMode scan = ScanMode::parallel;
    std::size_t valid_k = 10;         // IS samples for the per-epoch likelihood
    std::size_t valid_is_items = 100;  // validation items scored by IS (0 = all)
    std::size_t max_steps = 0;        // per epoch, 0 = full pass

    void validate() const {
        if (epochs == 0 || batch_size == 0) throw UsageError("TrainConfig: epochs and batch size must be positive");
        if (!(lr >= 0) || !std::isfinite(lr)) throw UsageError("TrainConfig: learning rate must be finite and >= 0");
        for (double g : lr_grid)
            if (!(g > 0) || !std::isfinite(g)) throw UsageError("TrainConfig: grid learning rates must be positive");
        if (!(elbo_weight >= 0) || !(partial_weight >= 0)) throw UsageError("TrainConfig: loss weights must be >= 0");
        if (!(valid_fraction > 0 && valid_fraction < 1)) throw UsageError("TrainConfig: valid fraction must lie in (0, 1)");
        if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1 && adam.eps > 0))
            throw UsageError("TrainConfig: invalid Adam moments");
        if (workers == 0) throw UsageError("TrainConfig: workers must be at least 1");
        if (valid_k == 0) throw UsageError("TrainConfig: valid_k must be at least 1");
    }
};

/// Per-item means over a batch or an epoch.
struct StepMetrics {
    double loss = 0, elbo = 0, reconstruction = 0, kl = 0, partial = 0;
    std::size_t items = 0;

    void accumulate(const StepMetrics& s) {
        const double n = double(items + s.items);
        if (n == 0) return;
        const double a = double(items) / n, b = double(s.items) / n;
        loss = a * loss + b * s.loss;
        elbo = a * elbo + b * s.elbo;
        reconstruction = a * reconstruction + b * s.reconstruction;
        kl = a * kl + b * s.kl;
        partial = a * partial + b * s.partial;
        items += s.items;
    }
};

struct ValidMetrics {
    double elbo = 0, elbo_se = 0, reconstruction = 0, kl = 0, partial = 0;
    double is_ll_median = 0, partial_is_ll_median = 0;
    std::size_t items = 0;
};

struct EpochMetrics {
    std::string model = "vssm";
    std::size_t epoch = 0;  // 1-based
    double lr = 0;
    std::size_t steps = 0;
    StepMetrics train;
    ValidMetrics valid;
    double score = 0;
    bool best = false;
    double seconds = 0;  // wall clock; kept out of the deterministic record
};

inline nlohmann::json to_json(const EpochMetrics& m) {
    nlohmann::json j;
    j["model"] = m.model;
    j["epoch"] = m.epoch;
    j["lr"] = m.lr;
    j["steps"] = m.steps;
    j["train"] = {{"loss", m.train.loss},
                  {"elbo", m.train.elbo},
                  {"reconstruction", m.train.reconstruction},
                  {"kl", m.train.kl},
                  {"partial_loss", m.train.partial},
                  {"items", m.train.items}};
    j["valid"] = {{"elbo", m.valid.elbo},
                  {"elbo_se", m.valid.elbo_se},
                  {"reconstruction", m.valid.reconstruction},
                  {"kl", m.valid.kl},
                  {"partial_loss", m.valid.partial},
                  {"is_ll_median", m.valid.is_ll_median},
                  {"partial_is_ll_median", m.valid.partial_is_ll_median},
                  {"items", m.valid.items}};
    j["score"] = m.score;
    j["best"] = m.best;
    return j;
}

inline nlohmann::json timing_json(const EpochMetrics& m) {
    return {{"model", m.model}, {"epoch", m.epoch}, {"seconds", m.seconds}};
}

// Stream roots derived from the seed; kept apart so shuffles, steps and
// validation never share counters.
namespace detail {
inline constexpr std::uint64_t kShuffleStream = 0x5348, kStepStream = 0x5354, kValidStream = 0x5641;
}

/// Desk and full-scale presets.
struct Profile {
    VssmHyper vssm;
    BaselineHyper baseline;
    TrainConfig train;
    std::size_t train_items = 0;  // dataset subset size, 0 = all
};

inline Profile desk_profile() {
    Profile p;
    p.train.epochs = 20;
    p.train_items = 8000;
    return p;
}

inline Profile paper_profile() {
    Profile p;
    p.vssm.layers = p.baseline.layers = 4;
    p.vssm.width = p.baseline.width = 1024;
    p.vssm.hidden = p.baseline.hidden = 1024;
    p.vssm.state = p.baseline.state = 16;
    p.train.epochs = 200;
    return p;
}

inline Profile profile_named(const std::string& name) {
    if (name == "desk") return desk_profile();
    if (name == "paper") return paper_profile();
    throw UsageError("unknown profile '" + name + "' (expected desk or paper)");
}

namespace detail {

inline bool all_finite(const Tensorf& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](float v) { return std::isfinite(v); });
}

struct ShardResult {
    std::vector<Tensorf> grads;
    StepMetrics sums;  // per-item sums, not means
    bool finite = true;
};

// Fixed contiguous shards; shard s covers items [bounds[s], bounds[s+1]).
inline std::vector<std::size_t> shard_bounds(std::size_t B, std::size_t workers) {
    const std::size_t w = std::max<std::size_t>(1, std::min(workers, B));
    std::vector<std::size_t> bounds{0};
    for (std::size_t s = 0; s < w; ++s) bounds.push_back(bounds.back() + B / w + (s < B % w ? 1 : 0));
    return bounds;
}

template <class Fn>
std::vector<ShardResult> run_shards(std::size_t B, std::size_t workers, Fn&& shard) {
    const auto bounds = shard_bounds(B, workers);
    const std::size_t w = bounds.size() - 1;
    std::vector<ShardResult> out(w);
    std::vector<std::exception_ptr> errors(w);
    auto job = [&](std::size_t s) {
        try {
            out[s] = shard(bounds[s], bounds[s + 1]);
        } catch (...) {
            errors[s] = std::current_exception();
        }
    };
    {
        std::vector<std::jthread> pool;
        for (std::size_t s = 1; s < w; ++s) pool.emplace_back(job, s);
        job(0);
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

inline Tensorf slice_items(const Tensorf& batch, std::size_t b0, std::size_t b1) {
    const std::size_t T = batch.dim(1), D = batch.dim(2);
    Tensorf out(Shape{b1 - b0, T, D});
    std::copy(batch.data().begin() + b0 * T * D, batch.data().begin() + b1 * T * D, out.data().begin());
    return out;
}

// Sums shard gradients in shard order, scales to the batch mean, and checks finiteness.
inline std::vector<Tensorf> reduce_shards(std::vector<ShardResult>& shards, const ParamStore<float>& params,
                                          std::size_t B, StepMetrics& metrics) {
    std::vector<Tensorf> grads = std::move(shards[0].grads);
    StepMetrics sums = shards[0].sums;
    bool finite = shards[0].finite;
    for (std::size_t s = 1; s < shards.size(); ++s) {
        for (std::size_t i = 0; i < grads.size(); ++i) {
            auto g = grads[i].data();
            const auto h = shards[s].grads[i].data();
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += h[k];
        }
        sums.loss += shards[s].sums.loss;
        sums.elbo += shards[s].sums.elbo;
        sums.reconstruction += shards[s].sums.reconstruction;
        sums.kl += shards[s].sums.kl;
        sums.partial += shards[s].sums.partial;
        finite = finite && shards[s].finite;
    }
    const double inv = 1.0 / double(B);
    metrics = {sums.loss * inv, sums.elbo * inv, sums.reconstruction * inv, sums.kl * inv, sums.partial * inv, B};
    if (!finite || !std::isfinite(metrics.loss))
        throw NumericError("non-finite training loss (loss " + std::to_string(metrics.loss) + ", elbo " +
                           std::to_string(metrics.elbo) + ", partial " + std::to_string(metrics.partial) + ")");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        for (auto& v : grads[i].data()) v = float(double(v) * inv);
        if (!all_finite(grads[i])) throw NumericError("non-finite gradient for parameter " + params.name(i));
    }
    return grads;
}

inline double sum_of(const Tensorf& t) {
    double s = 0;
    for (float v : t.data()) s += v;
    return s;
}

}  // namespace detail

/// One Adam update on loss = -w_elbo * mean ELBO + lambda * mean partial loss.
/// Each item gets one cut C ~ U{0..T} and one Gumbel draw, keyed by its batch position.
/// Throws NumericError before touching the parameters if anything is non-finite.
inline StepMetrics train_step(VssmModel<float>& m, Adam<float>& opt, const Tensorf& batch, const TrainConfig& cfg,
                              const CounterRng& rng) {
    const VssmHyper& h = m.hyper;
    require(batch.rank() == 3 && batch.dim(1) == h.T && batch.dim(2) == h.D,
            "train_step: batch must be [B, " + std::to_string(h.T) + ", " + std::to_string(h.D) + "], got " +
                shape_str(batch.shape()));
    const std::size_t B = batch.dim(0);
    require(B > 0, "train_step: empty batch");
    const bool use_partial = cfg.partial_weight > 0;
    const bool use_elbo = cfg.elbo_weight > 0;

    auto shards = detail::run_shards(B, cfg.workers, [&](std::size_t b0, std::size_t b1) {
        const std::size_t n = b1 - b0;
        const Tensorf x = detail::slice_items(batch, b0, b1);
        Tape<float> tape;
        Binding<float> p(tape, m.params, true);
        const Tensorf noise = latent_gumbel_noise<float>(rng, Role::train_gumbel, n, h.T, h.Z, h.N, b0);
        ElboTerms<float> terms = elbo_terms(p, h, tape.constant(x), noise, cfg.scan, cfg.hard);
        Var<float> loss = scale(sum(terms.elbo), float(-cfg.elbo_weight));
        detail::ShardResult r;
        r.sums.elbo = detail::sum_of(terms.elbo.value());
        r.sums.reconstruction = detail::sum_of(terms.reconstruction.value());
        r.sums.kl = detail::sum_of(terms.kl.value());
        if (use_partial) {
            std::vector<std::size_t> cuts(n);
            for (std::size_t b = 0; b < n; ++b) cuts[b] = rng.below(h.T + 1, Role::train_cut, b0 + b);
            Var<float> part = partial_posterior_loss(p, h, tape.constant(padded_batch(x, cuts)), terms.sample, cfg.scan);
            r.sums.partial = detail::sum_of(part.value());
            loss = add(loss, scale(sum(part), float(cfg.partial_weight)));
        }
        r.sums.loss = double(loss.value()[0]);
        r.finite = std::isfinite(r.sums.loss);
        r.grads = std::move(backward(loss, p.vars()).grads);
        return r;
    });

    StepMetrics metrics;
    auto grads = detail::reduce_shards(shards, m.params, B, metrics);
    // A zero-weighted term must leave its parameters (and their moments) untouched.
    std::vector<bool> include(m.params.size(), true);
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        const bool partial = m.is_partial_param(i);
        if ((partial && !use_partial) || (!partial && !use_elbo)) include[i] = false;
    }
    opt.step(m.params, grads, include);
    return metrics;
}

/// One Adam update on the mean Gaussian negative log-likelihood (teacher forcing).
inline StepMetrics train_step(SsmBaseline<float>& b, Adam<float>& opt, const Tensorf& batch, const TrainConfig& cfg,
                              const CounterRng&) {
    const BaselineHyper& h = b.hyper;
    require(batch.rank() == 3 && batch.dim(1) == h.T && batch.dim(2) == h.D,
            "train_step: batch must be [B, " + std::to_string(h.T) + ", " + std::to_string(h.D) + "], got " +
                shape_str(batch.shape()));
    const std::size_t B = batch.dim(0);
    require(B > 0, "train_step: empty batch");
    auto shards = detail::run_shards(B, cfg.workers, [&](std::size_t b0, std::size_t b1) {
        Tape<float> tape;
        Binding<float> p(tape, b.params, true);
        Var<float> ll = baseline_log_lik(p, h, detail::slice_items(batch, b0, b1), cfg.scan);
        Var<float> loss = scale(sum(ll), -1.0f);
        detail::ShardResult r;
        r.sums.elbo = r.sums.reconstruction = detail::sum_of(ll.value());
        r.sums.loss = double(loss.value()[0]);
        r.finite = std::isfinite(r.sums.loss);
        r.grads = std::move(backward(loss, p.vars()).grads);
        return r;
    });
    StepMetrics metrics;
    auto grads = detail::reduce_shards(shards, b.params, B, metrics);
    opt.step(b.params, grads);
    return metrics;
}

namespace detail {

inline double median_of(std::vector<double> v) {
    if (v.empty()) return 0;
    auto mid = v.begin() + v.size() / 2;
    std::nth_element(v.begin(), mid, v.end());
    if (v.size() % 2 == 1) return *mid;
    const double hi = *mid;
    return 0.5 * (hi + *std::max_element(v.begin(), mid));
}

// fn(i) for i in [0, n) over contiguous per-thread blocks; fn writes only slot i.
template <class Fn>
void parallel_items(std::size_t n, std::size_t workers, Fn&& fn) {
    const auto bounds = shard_bounds(n, workers);
    std::vector<std::exception_ptr> errors(bounds.size());
    auto job = [&](std::size_t s) {
        try {
            for (std::size_t i = bounds[s]; i < bounds[s + 1]; ++i) fn(i);
        } catch (...) {
            errors[s] = std::current_exception();
        }
    };
    {
        std::vector<std::jthread> pool;
        for (std::size_t s = 1; s + 1 < bounds.size(); ++s) pool.emplace_back(job, s);
        if (bounds.size() > 1) job(0);
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline void finish_elbo_stats(ValidMetrics& v, const std::vector<double>& per_item) {
    const double n = double(per_item.size());
    double mean = 0, sq = 0;
    for (double e : per_item) mean += e / n;
    for (double e : per_item) sq += (e - mean) * (e - mean);
    v.elbo = mean;
    v.elbo_se = per_item.size() > 1 ? std::sqrt(sq / (n - 1) / n) : 0.0;
    v.items = per_item.size();
}

}  // namespace detail

/// Validation metrics under a fixed noise, cut and IS schedule, so epochs are comparable.
/// IS scores use the first `valid_is_items` items; the partial score cuts at T / 2.
inline ValidMetrics validate_model(const VssmModel<float>& m, const SequenceDataset& valid, const TrainConfig& cfg) {
    const VssmHyper& h = m.hyper;
    require(valid.size() > 0, "validation set is empty");
    require(valid.T == h.T && valid.D == h.D, "validation data does not match the model dimensions");
    const CounterRng rng(cfg.seed, detail::kValidStream);
    ValidMetrics v;
    std::vector<double> per_item;
    double recon = 0, kl = 0, partial = 0;
    for (std::size_t b0 = 0; b0 < valid.size(); b0 += cfg.batch_size) {
        const std::size_t b1 = std::min(valid.size(), b0 + cfg.batch_size), n = b1 - b0;
        std::vector<std::size_t> idx(n), cuts(n);
        for (std::size_t b = 0; b < n; ++b) {
            idx[b] = b0 + b;
            cuts[b] = rng.below(h.T + 1, Role::train_cut, b0 + b);
        }
        const Tensorf x = valid.batch(idx);
        Tape<float> tape(false);
        Binding<float> p(tape, m.params, false);
        const Tensorf noise = latent_gumbel_noise<float>(rng, Role::train_gumbel, n, h.T, h.Z, h.N, b0);
        auto terms = elbo_terms(p, h, tape.constant(x), noise, cfg.scan, cfg.hard);
        auto part = partial_posterior_loss(p, h, tape.constant(padded_batch(x, cuts)), terms.sample, cfg.scan);
        for (std::size_t b = 0; b < n; ++b) {
            per_item.push_back(terms.elbo.value()[b]);
            recon += terms.reconstruction.value()[b];
            kl += terms.kl.value()[b];
            partial += part.value()[b];
        }
    }
    detail::finish_elbo_stats(v, per_item);
    v.reconstruction = recon / double(valid.size());
    v.kl = kl / double(valid.size());
    v.partial = partial / double(valid.size());
    const std::size_t n_is = cfg.valid_is_items == 0 ? valid.size() : std::min(valid.size(), cfg.valid_is_items);
    std::vector<double> full(n_is), part(n_is);
    auto score = [&](std::size_t i) {
        const Tensorf x = valid.sequence(i);
        full[i] = is_log_likelihood(m, x, cfg.valid_k, rng.child(2 * i)).estimate;
        part[i] = is_partial_log_likelihood(m, x, h.T / 2, cfg.valid_k, rng.child(2 * i + 1)).estimate;
    };
    detail::parallel_items(n_is, cfg.workers, score);
    v.is_ll_median = detail::median_of(full);
    v.partial_is_ll_median = detail::median_of(part);
    return v;
}

/// Exact Gaussian log-likelihood of the baseline on validation data.
inline ValidMetrics validate_model(const SsmBaseline<float>& b, const SequenceDataset& valid, const TrainConfig& cfg) {
    require(valid.size() > 0, "validation set is empty");
    require(valid.T == b.hyper.T && valid.D == b.hyper.D, "validation data does not match the model dimensions");
    std::vector<double> per_item;
    for (std::size_t b0 = 0; b0 < valid.size(); b0 += cfg.batch_size) {
        const std::size_t b1 = std::min(valid.size(), b0 + cfg.batch_size);
        std::vector<std::size_t> idx;
        for (std::size_t i = b0; i < b1; ++i) idx.push_back(i);
        Tape<float> tape(false);
        Binding<float> p(tape, b.params, false);
        auto ll = baseline_log_lik(p, b.hyper, valid.batch(idx), cfg.scan);
        for (std::size_t i = 0; i < idx.size(); ++i) per_item.push_back(ll.value()[i]);
    }
    ValidMetrics v;
    detail::finish_elbo_stats(v, per_item);
    v.reconstruction = v.elbo;
    v.is_ll_median = v.partial_is_ll_median = detail::median_of(per_item);
    return v;
}

template <class Model>
constexpr const char* model_name() {
    return std::is_same_v<Model, VssmModel<float>> ? "vssm" : "baseline";
}

inline Checkpoint checkpoint_with_state(const auto& model, const Adam<float>& opt, const TrainingState& s) {
    Checkpoint c = checkpoint_of(model);
    TrainingState t = s;
    t.adam_m = opt.first_moments();
    t.adam_v = opt.second_moments();
    t.step = opt.steps();
    c.training = std::move(t);
    return c;
}

/// Epoch-level driver. Holds the current model, optimizer moments, and the best model so far.
template <class Model>
class Trainer {
   public:
    Trainer(Model model, TrainConfig cfg) : cfg_(std::move(cfg)), model_(std::move(model)), best_(model_) {
        cfg_.validate();
        opt_ = Adam<float>(model_.params, adam_config());
        state_.lr = cfg_.lr;
    }

    /// Continues from a checkpoint that carries training state; `best` restores the selected model.
    static Trainer resume(const Checkpoint& last, const std::optional<Checkpoint>& best, TrainConfig cfg) {
        if (!last.training) throw FormatError("checkpoint has no training state to resume from");
        Trainer t(load_model(last), std::move(cfg));
        const TrainingState& s = *last.training;
        t.opt_.first_moments() = s.adam_m;
        t.opt_.second_moments() = s.adam_v;
        for (std::size_t i = 0; i < s.adam_m.size(); ++i)
            if (s.adam_m[i].shape() != t.model_.params[i].shape() || s.adam_v[i].shape() != t.model_.params[i].shape())
                throw FormatError("checkpoint optimizer state does not match the parameters");
        t.opt_.set_steps(s.step);
        t.state_ = s;
        t.state_.adam_m.clear();
        t.state_.adam_v.clear();
        if (s.lr != t.cfg_.lr) throw UsageError("resume: learning rate differs from the checkpoint");
        t.best_ = best ? load_model(*best) : t.model_;
        return t;
    }

    EpochMetrics run_epoch(const SequenceDataset& train, const SequenceDataset& valid) {
        require(train.size() > 0, "training set is empty");
        const auto t0 = std::chrono::steady_clock::now();
        const std::size_t epoch = state_.epoch + 1;
        const auto order = keyed_permutation(train.size(), CounterRng(cfg_.seed, detail::kShuffleStream).child(epoch),
                                             Role::shuffle);
        const CounterRng steps(cfg_.seed, detail::kStepStream);
        EpochMetrics em;
        em.model = model_name<Model>();
        em.epoch = epoch;
        em.lr = cfg_.lr;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg_.batch_size) {
            if (cfg_.max_steps != 0 && em.steps == cfg_.max_steps) break;
            const std::size_t b1 = std::min(order.size(), b0 + cfg_.batch_size);
            const std::span<const std::size_t> idx(order.data() + b0, b1 - b0);
            const StepMetrics sm = train_step(model_, opt_, train.batch(idx), cfg_, steps.child(opt_.steps()));
            em.train.accumulate(sm);
            ++em.steps;
        }
        em.valid = validate_model(model_, valid, cfg_);
        em.score = em.valid.elbo;
        state_.epoch = epoch;
        if (em.score > state_.best_score || state_.best_epoch == 0) {
            state_.best_score = em.score;
            state_.best_epoch = epoch;
            best_ = model_;
            em.best = true;
        }
        em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return em;
    }

    Checkpoint checkpoint() const { return checkpoint_with_state(model_, opt_, state_); }
    const Model& model() const { return model_; }
    const Model& best() const { return best_; }
    const TrainingState& state() const { return state_; }
    const TrainConfig& config() const { return cfg_; }

   private:
    AdamConfig adam_config() const {
        AdamConfig a = cfg_.adam;
        a.lr = cfg_.lr;
        return a;
    }
    static Model load_model(const Checkpoint& c) {
        if constexpr (std::is_same_v<Model, VssmModel<float>>)
            return vssm_from(c);
        else
            return baseline_from(c);
    }

    TrainConfig cfg_;
    Model model_, best_;
    Adam<float> opt_;
    TrainingState state_;
};

template <class Model>
struct TrainResult {
    Model best;
    std::vector<EpochMetrics> metrics;
    TrainingState state;
};

struct TrainOutput {
    std::filesystem::path dir;  // empty: nothing written
    bool resume = false;        // continue from dir/last.ckpt if present
    std::function<void(const EpochMetrics&)> on_epoch = {};
};

namespace detail {

inline void append_line(const std::filesystem::path& path, const std::string& line) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw IoError("cannot write " + path.string());
    out << line << '\n';
    if (!out) throw IoError("error writing " + path.string());
}

inline void write_abort_dump(const std::filesystem::path& dir, const Checkpoint& c, const std::string& what,
                             std::size_t epoch) {
    try {
        save_checkpoint(dir / "abort.ckpt", c);
        std::ofstream out(dir / "abort.json");
        out << nlohmann::json{{"error", what}, {"epoch", epoch + 1}, {"step", c.training ? c.training->step : 0}}.dump(2)
            << '\n';
    } catch (...) {
        // the original fault is more useful than a failure to record it
    }
}

// Keeps metrics and timing lines consistent with the epoch the checkpoint records.
inline void truncate_records(const std::filesystem::path& path, std::size_t epochs) {
    if (!std::filesystem::exists(path)) return;
    std::ifstream in(path);
    std::vector<std::string> keep;
    std::string line;
    while (keep.size() < epochs && std::getline(in, line)) keep.push_back(line);
    in.close();
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : keep) out << l << '\n';
}

}  // namespace detail

/// Runs cfg.epochs epochs (continuing a resumed run up to that total). Writes
/// metrics.jsonl (deterministic), timing.jsonl, last.ckpt and best.ckpt under out.dir.
/// A numeric fault leaves abort.ckpt/abort.json next to the last good checkpoint.
template <class Model>
TrainResult<Model> train(Model init, const SequenceDataset& train_set, const SequenceDataset& valid_set,
                         const TrainConfig& cfg, const TrainOutput& out = {}) {
    cfg.validate();
    const bool write = !out.dir.empty();
    std::optional<Trainer<Model>> trainer;
    if (write) {
        std::filesystem::create_directories(out.dir);
        const auto last = out.dir / "last.ckpt", best = out.dir / "best.ckpt";
        if (out.resume && std::filesystem::exists(last)) {
            std::optional<Checkpoint> best_ckpt;
            if (std::filesystem::exists(best)) best_ckpt = load_checkpoint(best);
            trainer.emplace(Trainer<Model>::resume(load_checkpoint(last), best_ckpt, cfg));
            detail::truncate_records(out.dir / "metrics.jsonl", trainer->state().epoch);
            detail::truncate_records(out.dir / "timing.jsonl", trainer->state().epoch);
        } else {
            std::filesystem::remove(out.dir / "metrics.jsonl");
            std::filesystem::remove(out.dir / "timing.jsonl");
        }
    }
    if (!trainer) trainer.emplace(std::move(init), cfg);

    TrainResult<Model> result{trainer->best(), {}, {}};
    while (trainer->state().epoch < cfg.epochs) {
        EpochMetrics em;
        try {
            em = trainer->run_epoch(train_set, valid_set);
        } catch (const NumericError& e) {
            if (write) detail::write_abort_dump(out.dir, trainer->checkpoint(), e.what(), trainer->state().epoch);
            throw;
        }
        if (write) {
            detail::append_line(out.dir / "metrics.jsonl", to_json(em).dump());
            detail::append_line(out.dir / "timing.jsonl", timing_json(em).dump());
            if (em.best) save_checkpoint(out.dir / "best.ckpt", checkpoint_of(trainer->best()));
            const bool cadence = cfg.checkpoint_every != 0 && em.epoch % cfg.checkpoint_every == 0;
            if (cadence || em.epoch == cfg.epochs) save_checkpoint(out.dir / "last.ckpt", trainer->checkpoint());
        }
        result.metrics.push_back(em);
        if (out.on_epoch) out.on_epoch(em);
    }
    result.best = trainer->best();
    result.state = trainer->state();
    return result;
}

inline TrainResult<SsmBaseline<float>> train_baseline(SsmBaseline<float> init, const SequenceDataset& train_set,
                                                      const SequenceDataset& valid_set, const TrainConfig& cfg,
                                                      const TrainOutput& out = {}) {
    return train(std::move(init), train_set, valid_set, cfg, out);
}

struct GridResult {
    double best_lr = 0;
    double best_score = -INFINITY;
    std::vector<std::pair<double, double>> scores;  // (lr, best validation score)
};

/// Trains a fresh model per grid learning rate; each run writes under out.dir/lr_<rate>.
template <class Model>
std::pair<TrainResult<Model>, GridResult> grid_search(const std::function<Model()>& make, const SequenceDataset& train_set,
                                                      const SequenceDataset& valid_set, const TrainConfig& cfg,
                                                      const TrainOutput& out = {}) {
    require(!cfg.lr_grid.empty(), "grid_search: empty learning-rate grid");
    GridResult g;
    std::optional<TrainResult<Model>> best;
    for (double lr : cfg.lr_grid) {
        TrainConfig c = cfg;
        c.lr = lr;
        TrainOutput o = out;
        if (!out.dir.empty()) {
            std::ostringstream name;
            name << "lr_" << lr;
            o.dir = out.dir / name.str();
        }
        auto r = train(make(), train_set, valid_set, c, o);
        g.scores.emplace_back(lr, r.state.best_score);
        if (r.state.best_score > g.best_score) {
            g.best_score = r.state.best_score;
            g.best_lr = lr;
            best = std::move(r);
        }
    }
    if (!best) throw NumericError("grid_search: no learning rate produced a finite validation score");
    return {std::move(*best), g};
}

}  // namespace vssm
