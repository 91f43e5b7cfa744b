#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "vssm/scan.hpp"
#include "vssm/ssm.hpp"

using namespace vssm;

namespace {

Tensorf random_tensor(Shape shape, std::mt19937_64& gen, double lo = -1, double hi = 1) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensorf t(std::move(shape));
    for (auto& v : t.data()) v = float(d(gen));
    return t;
}

// Normwise relative deviation max|x - y| / max(max|y|, tiny).
double rel_dev(std::span<const float> x, std::span<const float> y) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        num = std::max(num, std::abs(double(x[i]) - double(y[i])));
        den = std::max(den, std::abs(double(y[i])));
    }
    return num / std::max(den, 1e-30);
}

struct LayerData {
    Tensorf a_raw, b;
    SsmLayer<float> view() const { return {&a_raw, &b}; }
};

LayerData random_layer(std::size_t channels, std::size_t state, std::mt19937_64& gen) {
    return {random_tensor({channels, state}, gen, -2.5, 2.5), random_tensor({channels, state}, gen)};
}

StackConfig small_stack() { return {.in_dim = 3, .width = 6, .state = 3, .hidden = 8, .layers = 2, .out_dim = 4}; }

}  // namespace

TEST(ScanSequential, ZeroDecayIsMemoryless) {
    std::mt19937_64 gen(1);
    LayerData l{Tensorf(Shape{3, 2}), random_tensor({3, 2}, gen)};
    Tensorf u = random_tensor({5, 3}, gen);
    Tensorf h = scan_sequential(l.view(), u);
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t d = 0; d < 3; ++d)
            for (std::size_t p = 0; p < 2; ++p)
                EXPECT_EQ(h[t * 6 + d * 2 + p], l.b[d * 2 + p] * u[t * 3 + d]);
}

TEST(ScanSequential, UnitDecayIsCumulativeSum) {
    const std::vector<float> a{1.f, 1.f};
    std::vector<float> b(10 * 2), h(10 * 2);
    for (std::size_t t = 0; t < 10; ++t) {
        b[t * 2] = 0.5f;
        b[t * 2 + 1] = -2.f;
    }
    linear_scan_sequential<float>(a, b, {}, h);
    for (std::size_t t = 0; t < 10; ++t) {
        EXPECT_EQ(h[t * 2], 0.5f * float(t + 1));
        EXPECT_EQ(h[t * 2 + 1], -2.f * float(t + 1));
    }
}

TEST(ScanSequential, MatchesDoublePrecisionOracle) {
    std::mt19937_64 gen(2);
    for (int rep = 0; rep < 10; ++rep) {
        LayerData l = random_layer(4, 3, gen);
        Tensorf u = random_tensor({64, 4}, gen);
        Tensorf h0 = random_tensor({12}, gen);
        Tensorf h = scan_sequential(l.view(), u, &h0);
        std::vector<double> prev(h0.data().begin(), h0.data().end());
        std::vector<float> oracle;
        for (std::size_t t = 0; t < 64; ++t)
            for (std::size_t i = 0; i < 12; ++i) {
                prev[i] = std::tanh(double(l.a_raw[i])) * prev[i] + double(l.b[i]) * double(u[t * 4 + i / 3]);
                oracle.push_back(float(prev[i]));
            }
        EXPECT_LE(rel_dev(h.data(), oracle), 1e-6);
    }
}

TEST(ScanParallel, SingleStepIsExact) {
    std::mt19937_64 gen(3);
    LayerData l = random_layer(2, 2, gen);
    Tensorf u = random_tensor({1, 2}, gen), h0 = random_tensor({4}, gen);
    Tensorf h = scan_parallel(l.view(), u, &h0);
    const auto a = l.view().decay();
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(h[i], a[i] * h0[i] + l.b[i] * u[i / 2]);
}

TEST(ScanParallel, EqualsSequential) {
    std::mt19937_64 gen(4);
    for (std::size_t steps : {2, 3, 64, 1000}) {
        LayerData l = random_layer(5, 4, gen);
        Tensorf u = random_tensor({steps, 5}, gen), h0 = random_tensor({20}, gen);
        Tensorf s = scan_sequential(l.view(), u, &h0), p = scan_parallel(l.view(), u, &h0);
        EXPECT_LE(rel_dev(p.data(), s.data()), 1e-5) << "T=" << steps;
    }
}

TEST(ScanParallel, ResultIndependentOfWorkerCount) {
    std::mt19937_64 gen(5);
    LayerData l = random_layer(64, 8, gen);
    Tensorf u = random_tensor({300, 64}, gen);
    Tensorf one = scan_parallel(l.view(), u);
    parallel::set_workers(4);
    Tensorf four = scan_parallel(l.view(), u);
    parallel::set_workers(1);
    EXPECT_EQ(one, four);
}

TEST(ScanCombinator, IsAssociative) {
    std::mt19937_64 gen(6);
    std::uniform_real_distribution<double> d(-1, 1);
    for (int rep = 0; rep < 100; ++rep) {
        std::vector<ScanElement<double>> e(3);
        for (auto& x : e) {
            x.a = {d(gen), d(gen), d(gen)};
            x.b = {d(gen), d(gen), d(gen)};
        }
        auto left = compose(compose(e[0], e[1]), e[2]);
        auto right = compose(e[0], compose(e[1], e[2]));
        for (int i = 0; i < 3; ++i) {
            EXPECT_NEAR(left.a[i], right.a[i], 1e-6);
            EXPECT_NEAR(left.b[i], right.b[i], 1e-6);
        }
    }
}

TEST(Scan, ShapeMismatchIsUsageError) {
    std::mt19937_64 gen(7);
    LayerData l = random_layer(3, 2, gen);
    Tensorf bad_u = random_tensor({4, 2}, gen);
    EXPECT_THROW(scan_sequential(l.view(), bad_u), UsageError);
    Tensorf u = random_tensor({4, 3}, gen), bad_h0(Shape{5});
    EXPECT_THROW(scan_parallel(l.view(), u, &bad_h0), UsageError);
    EXPECT_THROW(scan_sequential(l.view(), Tensorf(Shape{0, 3})), UsageError);
}

TEST(Scan, StaysBoundedOverLongHorizons) {
    std::mt19937_64 gen(8);
    Tensorf a_raw(Shape{4, 4}, std::atanh(0.999f));
    LayerData l{a_raw, random_tensor({4, 4}, gen)};
    Tensorf u = random_tensor({10000, 4}, gen);
    for (auto h : {scan_sequential(l.view(), u), scan_parallel(l.view(), u)}) {
        double mx = 0;
        for (float v : h.data()) {
            ASSERT_TRUE(std::isfinite(v));
            mx = std::max(mx, double(std::abs(v)));
        }
        EXPECT_LE(mx, 1000.0);  // |h| <= max|B u| / (1 - |a|)
    }
}

TEST(StackedForward, SegmentsWithCarriedStatesEqualOnePass) {
    const StackConfig cfg = small_stack();
    ParamStore<float> store;
    init_stack(store, "s.", cfg, CounterRng(3));
    std::mt19937_64 gen(9);
    Tensorf x = random_tensor({2, 17, 3}, gen);
    for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel}) {
        Tape<float> tape(false);
        Binding<float> p(tape, store, false);
        auto full = stacked_forward(p, "s.", cfg, tape.constant(x), nullptr, mode);
        for (std::size_t k = 1; k < 17; ++k) {
            Tensorf x1(Shape{2, k, 3}), x2(Shape{2, 17 - k, 3});
            for (std::size_t b = 0; b < 2; ++b)
                for (std::size_t t = 0; t < 17; ++t)
                    for (std::size_t d = 0; d < 3; ++d)
                        (t < k ? x1[(b * k + t) * 3 + d] : x2[(b * (17 - k) + t - k) * 3 + d]) = x[(b * 17 + t) * 3 + d];
            auto first = stacked_forward(p, "s.", cfg, tape.constant(x1), nullptr, mode);
            auto second = stacked_forward(p, "s.", cfg, tape.constant(x2), &first.final, mode);
            std::vector<float> joined;
            for (std::size_t b = 0; b < 2; ++b) {
                auto y1 = first.y.value().data().subspan(b * k * 4, k * 4);
                auto y2 = second.y.value().data().subspan(b * (17 - k) * 4, (17 - k) * 4);
                joined.insert(joined.end(), y1.begin(), y1.end());
                joined.insert(joined.end(), y2.begin(), y2.end());
            }
            EXPECT_LE(rel_dev(joined, full.y.value().data()), 1e-5) << "k=" << k;
            for (std::size_t l = 0; l < cfg.layers; ++l)
                EXPECT_LE(rel_dev(second.final.h[l].data(), full.final.h[l].data()), 1e-5);
            EXPECT_EQ(second.final.t, 17u);
        }
    }
}

TEST(StackedForward, IsCausalBitForBit) {
    const StackConfig cfg = small_stack();
    ParamStore<float> store;
    init_stack(store, "s.", cfg, CounterRng(4));
    std::mt19937_64 gen(10);
    Tensorf x = random_tensor({1, 12, 3}, gen);
    Tensorf y_ref;
    {
        Tape<float> tape(false);
        Binding<float> p(tape, store, false);
        y_ref = stacked_forward(p, "s.", cfg, tape.constant(x), nullptr, ScanMode::sequential).y.value();
    }
    for (std::size_t t = 0; t < 12; ++t) {
        Tensorf xp = x;
        for (std::size_t i = (t + 1) * 3; i < xp.numel(); ++i) xp[i] += 5.f;
        Tape<float> tape(false);
        Binding<float> p(tape, store, false);
        Tensorf y = stacked_forward(p, "s.", cfg, tape.constant(xp), nullptr, ScanMode::sequential).y.value();
        for (std::size_t i = 0; i < (t + 1) * 4; ++i) EXPECT_EQ(y[i], y_ref[i]);
    }
}

TEST(StackedForward, StateMismatchIsUsageError) {
    const StackConfig cfg = small_stack();
    ParamStore<float> store;
    init_stack(store, "s.", cfg, CounterRng(5));
    Tape<float> tape(false);
    Binding<float> p(tape, store, false);
    Var<float> x = tape.constant(Tensorf(Shape{1, 4, 3}));
    auto wrong_layers = LayerStates<float>::zeros({.in_dim = 3, .width = 6, .state = 3, .hidden = 8, .layers = 1, .out_dim = 4}, 1);
    EXPECT_THROW(stacked_forward(p, "s.", cfg, x, &wrong_layers, ScanMode::sequential), UsageError);
    auto wrong_batch = LayerStates<float>::zeros(cfg, 2);
    EXPECT_THROW(stacked_forward(p, "s.", cfg, x, &wrong_batch, ScanMode::sequential), UsageError);
    EXPECT_THROW(stacked_forward(p, "s.", cfg, tape.constant(Tensorf(Shape{1, 4, 2})), nullptr, ScanMode::sequential),
                 UsageError);
}

TEST(StackedForward, FullScaleConfigurationBuilds) {
    // 4 layers of width 1024 with state size 16.
    const StackConfig cfg{.in_dim = 28, .width = 1024, .state = 16, .hidden = 1024, .layers = 4, .out_dim = 28};
    ParamStore<float> store;
    init_stack(store, "p.", cfg, CounterRng(6));
    EXPECT_EQ(store.get("p.layer3.a").shape(), (Shape{1024, 16}));
    EXPECT_EQ(store.get("p.layer0.ff1.w").shape(), (Shape{1024 * 16, 1024}));
    Tape<float> tape(false);
    Binding<float> p(tape, store, false);
    auto out = stacked_forward(p, "p.", cfg, tape.constant(Tensorf(Shape{1, 2, 28})), nullptr, ScanMode::parallel);
    EXPECT_EQ(out.y.shape(), (Shape{1, 2, 28}));
    EXPECT_EQ(out.final.h.size(), 4u);
}
