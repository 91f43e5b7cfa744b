#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "vssm/autodiff.hpp"
#include "vssm/errors.hpp"
#include "vssm/params.hpp"

namespace vssm {

struct GradCheckEntry {
    std::string name;
    std::size_t worst_index = 0;
    double analytic = 0;
    double numeric = 0;
    double max_rel_error = 0;
    std::size_t checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double worst() const {
        double w = 0;
        for (const auto& e : entries) w = std::max(w, e.max_rel_error);
        return w;
    }
};

struct GradCheckOptions {
    double step = 1e-4;
    /// Elements probed per parameter; 0 probes every element.
    std::size_t max_elements = 0;
    /// Denominator floor so that gradients that are both ~0 compare as equal.
    double abs_floor = 1e-8;
};

/// Builds a scalar loss from bound parameters. Must be deterministic.
template <class S>
using LossFn = std::function<Var<S>(Tape<S>&, const Binding<S>&)>;

/// Compares backward() against central differences
///     (L(w + h e_i) - L(w - h e_i)) / 2h
/// and reports the worst relative error per parameter.
template <class S>
GradCheckReport finite_difference_check(const LossFn<S>& loss_fn, ParamStore<S>& params, GradCheckOptions opt = {}) {
    if (!(opt.step > 0)) throw UsageError("finite_difference_check: step must be positive");
    std::vector<Tensor<S>> analytic;
    {
        Tape<S> tape;
        Binding<S> bound(tape, params, true);
        Var<S> loss = loss_fn(tape, bound);
        analytic = backward(loss, bound.vars()).grads;
    }
    auto eval = [&] {
        Tape<S> tape(false);
        Binding<S> bound(tape, params, false);
        return static_cast<double>(loss_fn(tape, bound).value().item());
    };
    GradCheckReport report;
    for (std::size_t p = 0; p < params.size(); ++p) {
        GradCheckEntry e;
        e.name = params.name(p);
        Tensor<S>& w = params[p];
        const std::size_t n = w.numel();
        const std::size_t probes = opt.max_elements == 0 ? n : std::min(n, opt.max_elements);
        for (std::size_t j = 0; j < probes; ++j) {
            const std::size_t i = probes == n ? j : (j * n) / probes + (n / probes) / 2;
            const S saved = w[i];
            w[i] = S(saved + opt.step);
            const double up = eval();
            w[i] = S(saved - opt.step);
            const double down = eval();
            w[i] = saved;
            const double num = (up - down) / (2.0 * opt.step);
            const double ana = analytic[p][i];
            const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), opt.abs_floor});
            ++e.checked;
            if (rel >= e.max_rel_error) {
                e.max_rel_error = rel;
                e.worst_index = i;
                e.analytic = ana;
                e.numeric = num;
            }
        }
        report.entries.push_back(e);
    }
    return report;
}

}  // namespace vssm
