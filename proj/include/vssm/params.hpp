#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vssm/autodiff.hpp"
#include "vssm/errors.hpp"
#include "vssm/rng.hpp"
#include "vssm/tensor.hpp"

namespace vssm {

/// Ordered collection of named parameter tensors.
template <class S>
class ParamStore {
   public:
    std::size_t add(std::string name, Tensor<S> value) {
        if (index_.count(name)) throw UsageError("duplicate parameter name: " + name);
        index_.emplace(name, entries_.size());
        entries_.push_back({std::move(name), std::move(value)});
        return entries_.size() - 1;
    }

    std::size_t size() const { return entries_.size(); }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw UsageError("unknown parameter: " + name);
        return it->second;
    }

    const std::string& name(std::size_t i) const { return entries_.at(i).first; }
    Tensor<S>& operator[](std::size_t i) { return entries_.at(i).second; }
    const Tensor<S>& operator[](std::size_t i) const { return entries_.at(i).second; }
    Tensor<S>& get(const std::string& n) { return entries_[index_of(n)].second; }
    const Tensor<S>& get(const std::string& n) const { return entries_[index_of(n)].second; }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.second.numel();
        return n;
    }

    template <class U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& [n, t] : entries_) out.add(n, t.template cast<U>());
        return out;
    }

    friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.entries_ == b.entries_; }

   private:
    std::vector<std::pair<std::string, Tensor<S>>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Parameters of a store placed on a tape as leaves (read in place).
template <class S>
class Binding {
   public:
    Binding(Tape<S>& tape, const ParamStore<S>& store, bool requires_grad) : store_(&store) {
        vars_.reserve(store.size());
        for (std::size_t i = 0; i < store.size(); ++i) vars_.push_back(tape.leaf(store[i], requires_grad));
    }

    Var<S> operator()(const std::string& name) const { return vars_[store_->index_of(name)]; }
    std::span<const Var<S>> vars() const { return vars_; }
    const ParamStore<S>& store() const { return *store_; }

   private:
    const ParamStore<S>* store_;
    std::vector<Var<S>> vars_;
};

/// Uniform(-bound, bound) init from a counter stream keyed by the parameter name.
template <class S>
Tensor<S> uniform_init(Shape shape, double bound, const CounterRng& rng, const std::string& name) {
    std::uint64_t tag = 1469598103934665603ull;
    for (unsigned char c : name) tag = (tag ^ c) * 1099511628211ull;
    Tensor<S> t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = S((2.0 * rng.uniform(Role::init, tag, i) - 1.0) * bound);
    return t;
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moments are kept per parameter.
template <class S>
class Adam {
   public:
    Adam() = default;
    Adam(const ParamStore<S>& params, AdamConfig cfg) : cfg_(cfg) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_.emplace_back(params[i].shape());
            v_.emplace_back(params[i].shape());
        }
    }

    const AdamConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    std::uint64_t steps() const { return t_; }
    std::vector<Tensor<S>>& first_moments() { return m_; }
    std::vector<Tensor<S>>& second_moments() { return v_; }
    const std::vector<Tensor<S>>& first_moments() const { return m_; }
    const std::vector<Tensor<S>>& second_moments() const { return v_; }
    void set_steps(std::uint64_t t) { t_ = t; }

    /// `include[i] == false` leaves parameter i and its moments untouched.
    void step(ParamStore<S>& params, std::span<const Tensor<S>> grads, const std::vector<bool>& include = {}) {
        require(grads.size() == params.size() && m_.size() == params.size(), "Adam::step: gradient count mismatch");
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t p = 0; p < params.size(); ++p) {
            if (!include.empty() && !include[p]) continue;
            auto w = params[p].data();
            const auto g = grads[p].data();
            auto m = m_[p].data();
            auto v = v_[p].data();
            require(g.size() == w.size(), "Adam::step: gradient shape mismatch for " + params.name(p));
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] = S(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i]);
                v[i] = S(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i]);
                const double mh = m[i] / c1, vh = v[i] / c2;
                w[i] = S(w[i] - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
            }
        }
    }

   private:
    AdamConfig cfg_;
    std::vector<Tensor<S>> m_, v_;
    std::uint64_t t_ = 0;
};

}  // namespace vssm
