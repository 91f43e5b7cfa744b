#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "vssm/evaluation.hpp"

using namespace vssm;

namespace {

VssmHyper enumerable_hyper(std::size_t T = 2) {
    VssmHyper h;
    h.T = T;
    h.D = 1;
    h.Z = 1;
    h.N = 2;
    h.sigma = 0.5;
    h.width = 4;
    h.state = 2;
    h.hidden = 4;
    h.layers = 1;
    return h;
}

Tensor<double> random_x(std::size_t T, std::size_t D, std::mt19937_64& gen) {
    std::normal_distribution<double> n(0, 1);
    Tensor<double> x(Shape{T, D});
    for (auto& v : x.data()) v = n(gen);
    return x;
}

void zero_head(ParamStore<double>& params, const std::string& prefix, double bias) {
    params.get(prefix + "head.w").fill(0.0);
    params.get(prefix + "head.b").fill(bias);
}

}  // namespace

TEST(ImportanceSampling, FullEstimateMatchesEnumeration) {
    auto m = VssmModel<double>::init(enumerable_hyper(), 1);
    std::mt19937_64 gen(1);
    for (int rep = 0; rep < 5; ++rep) {
        Tensor<double> x = random_x(2, 1, gen);
        auto r = is_log_likelihood(m, x, 10000, CounterRng(rep));
        EXPECT_NEAR(r.estimate, exact_log_likelihood(m, x), 0.05);
        EXPECT_EQ(r.K, 10000u);
        EXPECT_EQ(r.mode, "full");
        EXPECT_GE(r.weight_spread, 0);
    }
}

TEST(ImportanceSampling, PartialEstimateMatchesEnumeration) {
    auto m = VssmModel<double>::init(enumerable_hyper(), 2);
    std::mt19937_64 gen(2);
    for (std::size_t C : {0, 1, 0, 1}) {
        Tensor<double> x = random_x(2, 1, gen);
        auto r = is_partial_log_likelihood(m, x, C, 10000, CounterRng(C));
        EXPECT_NEAR(r.estimate, exact_partial_log_likelihood(m, x, C), 0.05) << "C=" << C;
        EXPECT_EQ(r.C, C);
    }
}

TEST(ImportanceSampling, InvariantToSampleOrder) {
    std::mt19937_64 gen(3);
    std::normal_distribution<double> n(-50, 10);
    std::vector<double> w(100);
    for (auto& v : w) v = n(gen);
    auto a = summarize_weights(w, "full", 0);
    std::shuffle(w.begin(), w.end(), gen);
    auto b = summarize_weights(w, "full", 0);
    EXPECT_NEAR(a.estimate, b.estimate, 1e-12);
    EXPECT_NEAR(a.weight_spread, b.weight_spread, 1e-12);
}

TEST(ImportanceSampling, UniformPartialPosteriorAtZeroCutReducesToFullEstimator) {
    auto m = VssmModel<double>::init(enumerable_hyper(4), 4);
    zero_head(m.params, kPartialPrefix, 0.7);  // constant logits: exactly uniform
    std::mt19937_64 gen(4);
    Tensor<double> x = random_x(4, 1, gen);
    auto full = is_log_likelihood(m, x, 50, CounterRng(9));
    auto partial = is_partial_log_likelihood(m, x, 0, 50, CounterRng(9));
    EXPECT_NEAR(full.estimate, partial.estimate, 1e-9);
}

TEST(ImportanceSampling, ReconstructionOnlyReadsPositionsAfterTheCut) {
    VssmHyper h = enumerable_hyper(5);
    h.D = 2;
    auto m = VssmModel<double>::init(h, 5);
    std::mt19937_64 gen(5);
    Tensor<double> x = random_x(5, 2, gen);
    std::vector<LatentSequence> zs{{5, 1, 2, {0, 1, 1, 0, 1}}, {5, 1, 2, {1, 1, 0, 0, 0}}};
    auto ref = detail::reconstruction_log_probs(m, x, zs, 3);
    Tensor<double> xp = x;
    for (std::size_t i = 0; i < 3 * 2; ++i) xp[i] += 10.0;
    EXPECT_EQ(detail::reconstruction_log_probs(m, xp, zs, 3), ref);
}

TEST(ImportanceSampling, ErrorContracts) {
    auto m = VssmModel<double>::init(enumerable_hyper(), 6);
    Tensor<double> x(Shape{2, 1}, 0.1);
    EXPECT_THROW(is_log_likelihood(m, x, 0, CounterRng(1)), UsageError);
    EXPECT_THROW(is_partial_log_likelihood(m, x, 0, 0, CounterRng(1)), UsageError);
    EXPECT_THROW(is_partial_log_likelihood(m, x, 2, 10, CounterRng(1)), UsageError);
    EXPECT_THROW(is_log_likelihood(m, Tensor<double>(Shape{2, 3}), 10, CounterRng(1)), UsageError);
}

TEST(ImportanceSampling, ReportRecordFields) {
    LikelihoodReport r = summarize_weights({-3.0, -2.0}, "partial", 4);
    auto j = to_json(r, 17);
    EXPECT_EQ(j["sequence_id"], 17);
    EXPECT_EQ(j["mode"], "partial");
    EXPECT_EQ(j["C"], 4);
    EXPECT_EQ(j["K"], 2);
    EXPECT_NEAR(j["estimate_nats"].get<double>(), std::log((std::exp(-3.0) + std::exp(-2.0)) / 2), 1e-12);
    EXPECT_NEAR(j["weight_spread"].get<double>(), -2.0 - r.estimate, 1e-12);
}

TEST(ExactLikelihood, ConstantDecoderMarginalizesLatent) {
    VssmHyper h = enumerable_hyper(3);
    h.D = 2;
    auto m = VssmModel<double>::init(h, 7);
    zero_head(m.params, kDecoderPrefix, 0.25);
    std::mt19937_64 gen(7);
    Tensor<double> x = random_x(3, 2, gen);
    std::vector<double> w(2, 0.25);
    double expected = 0;
    for (std::size_t t = 0; t < 3; ++t) expected += gaussian_log_prob<double>(x.data().subspan(t * 2, 2), w, h.sigma);
    EXPECT_NEAR(exact_log_likelihood(m, x), expected, 1e-9);
}

TEST(ExactLikelihood, DensityIntegratesAlongSlices) {
    VssmHyper h = enumerable_hyper(3);
    auto m = VssmModel<double>::init(h, 8);
    std::mt19937_64 gen(8);
    for (int rep = 0; rep < 2; ++rep) {
        Tensor<double> x = random_x(3, 1, gen);
        // Marginal of (x_2, x_3) by enumeration: p(z) prod_{t >= 2} N(x_t | w_t(z)).
        std::vector<double> terms;
        detail::for_each_latent(h, 3, [&](const std::vector<LatentSequence>& zs) {
            for (double r : detail::reconstruction_log_probs(m, x, zs, 1)) terms.push_back(r - 3 * std::log(2.0));
        });
        const double marginal = std::exp(log_sum_exp(terms));
        // Trapezoid over x_1 on [-6, 6].
        const int steps = 4000;
        const double lo = -6, hi = 6, dx = (hi - lo) / steps;
        double integral = 0;
        for (int i = 0; i <= steps; ++i) {
            x[0] = lo + i * dx;
            integral += (i == 0 || i == steps ? 0.5 : 1.0) * std::exp(exact_log_likelihood(m, x)) * dx;
        }
        EXPECT_NEAR(integral / marginal, 1.0, 1e-4);
    }
}

TEST(ExactLikelihood, BoundsTheElbo) {
    std::mt19937_64 gen(9);
    for (int model = 0; model < 5; ++model) {
        auto m = VssmModel<double>::init(enumerable_hyper(), 100 + model);
        Tensor<double> x = random_x(2, 1, gen);
        double mean = 0, sq = 0;
        for (int i = 0; i < 1000; ++i) {
            const double e = elbo(m, x, CounterRng(model).child(i)).elbo;
            mean += e / 1000;
            sq += e * e / 1000;
        }
        const double se = std::sqrt(std::max(sq - mean * mean, 0.0) / 1000);
        EXPECT_LE(mean, exact_log_likelihood(m, x) + 3 * se);
    }
}

TEST(ExactLikelihood, RejectsLargeLatentSpaces) {
    VssmHyper h = enumerable_hyper(21);
    auto m = VssmModel<double>::init(h, 10);
    EXPECT_THROW(exact_log_likelihood(m, Tensor<double>(Shape{21, 1})), UsageError);
    // 2^20 sequences is the largest admitted space
    EXPECT_EQ(detail::latent_space_size(h, 20), std::size_t{1} << 20);
}

TEST(ImportanceSampling, MeanEstimateTightensWithK) {
    auto m = VssmModel<double>::init(enumerable_hyper(3), 11);
    std::mt19937_64 gen(11);
    Tensor<double> x = random_x(3, 1, gen);
    double prev_mean = -INFINITY, prev_se = 0;
    for (std::size_t K : {1, 10, 100}) {
        const int seeds = 200;
        double mean = 0, sq = 0;
        for (int s = 0; s < seeds; ++s) {
            const double e = is_log_likelihood(m, x, K, CounterRng(1000 + s)).estimate;
            mean += e / seeds;
            sq += e * e / seeds;
        }
        const double se = std::sqrt(std::max(sq - mean * mean, 0.0) / seeds);
        EXPECT_GE(mean + 3 * std::hypot(se, prev_se), prev_mean) << "K=" << K;
        prev_mean = mean;
        prev_se = se;
    }
    EXPECT_LE(prev_mean, exact_log_likelihood(m, x) + 3 * prev_se);
}
