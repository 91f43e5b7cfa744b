#pragma once

// Eager reverse-mode differentiation. Every op appends a node to a Tape in
// creation order, so reverse creation order is a valid topological order.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vssm/errors.hpp"
#include "vssm/tensor.hpp"

namespace vssm {

template <class S>
class Tape;

/// Handle to a value recorded on a Tape.
template <class S>
class Var {
   public:
    Var() = default;
    Var(Tape<S>* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Tensor<S>& value() const { return tape_->value(id_); }
    const Shape& shape() const { return value().shape(); }
    std::size_t numel() const { return value().numel(); }
    std::size_t id() const { return id_; }
    Tape<S>* tape() const { return tape_; }
    bool requires_grad() const { return tape_->requires_grad(id_); }
    bool valid() const { return tape_ != nullptr; }

   private:
    Tape<S>* tape_ = nullptr;
    std::size_t id_ = 0;
};

template <class S>
class Tape {
   public:
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }

    Var<S> constant(Tensor<S> value) { return push(std::move(value), false, nullptr); }

    /// Owned leaf that participates in differentiation.
    Var<S> variable(Tensor<S> value) { return push(std::move(value), grad_enabled_, nullptr); }

    /// Leaf that reads `external` in place. `external` must outlive the tape.
    Var<S> leaf(const Tensor<S>& external, bool requires_grad) {
        Node n;
        n.external = &external;
        n.requires_grad = requires_grad && grad_enabled_;
        nodes_.push_back(std::move(n));
        return Var<S>(this, nodes_.size() - 1);
    }

    /// Records an op result. `fn` is kept only if some parent needs gradients.
    Var<S> record(Tensor<S> value, std::initializer_list<Var<S>> parents, BackwardFn fn) {
        bool needs = false;
        if (grad_enabled_)
            for (const auto& p : parents) needs = needs || p.requires_grad();
        return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
    }

    const Tensor<S>& value(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.external ? *n.external : n.owned;
    }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Gradient accumulator of node `id`, allocated as zeros on first use.
    Tensor<S>& grad(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.numel() != value(id).numel()) n.grad = Tensor<S>(value(id).shape());
        return n.grad;
    }

    /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward closure.
    void run_backward(std::size_t loss_id) {
        for (auto& n : nodes_) n.grad = Tensor<S>();
        grad(loss_id)[0] = S(1);
        for (std::size_t i = loss_id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.backward && !n.grad.empty()) n.backward(*this, i);
        }
    }

   private:
    struct Node {
        Tensor<S> owned;
        const Tensor<S>* external = nullptr;
        Tensor<S> grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Var<S> push(Tensor<S> value, bool requires_grad, BackwardFn fn) {
        Node n;
        n.owned = std::move(value);
        n.requires_grad = requires_grad;
        n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return Var<S>(this, nodes_.size() - 1);
    }

    bool grad_enabled_;
    std::vector<Node> nodes_;
};

/// Gradients aligned with the parameter list passed to backward().
template <class S>
struct GradientMap {
    std::vector<std::size_t> ids;
    std::vector<Tensor<S>> grads;

    const Tensor<S>& at(std::size_t position) const { return grads.at(position); }
    const Tensor<S>& of(const Var<S>& param) const {
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (ids[i] == param.id()) return grads[i];
        throw UsageError("parameter not present in gradient map");
    }
    std::size_t size() const { return grads.size(); }
};

/// Exact reverse-mode gradients of a scalar loss. Parameters that the loss
/// does not depend on receive zeros.
template <class S>
GradientMap<S> backward(const Var<S>& loss, std::span<const Var<S>> params) {
    if (!loss.valid()) throw UsageError("backward: invalid loss handle");
    if (loss.numel() != 1) throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    Tape<S>& tape = *loss.tape();
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].tape() != &tape)
            throw UsageError("backward: parameter " + std::to_string(i) + " is not on the loss tape");
    GradientMap<S> out;
    out.ids.reserve(params.size());
    out.grads.reserve(params.size());
    if (loss.requires_grad()) tape.run_backward(loss.id());
    for (const auto& p : params) {
        out.ids.push_back(p.id());
        // Parameters recorded after the loss cannot influence it.
        if (loss.requires_grad() && p.requires_grad() && p.id() <= loss.id())
            out.grads.push_back(tape.grad(p.id()));
        else
            out.grads.push_back(Tensor<S>(p.shape()));
    }
    return out;
}

template <class S>
GradientMap<S> backward(const Var<S>& loss, std::initializer_list<Var<S>> params) {
    std::vector<Var<S>> v(params);
    return backward(loss, std::span<const Var<S>>(v));
}

}  // namespace vssm
