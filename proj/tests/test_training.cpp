#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <unistd.h>

#include "vssm/training.hpp"

using namespace vssm;

namespace {

VssmHyper tiny_hyper() {
    VssmHyper h;
    h.T = 8;
    h.D = 4;
    h.Z = 2;
    h.N = 4;
    h.width = 16;
    h.state = 4;
    h.hidden = 16;
    h.layers = 1;
    return h;
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.epochs = 2;
    c.batch_size = 8;
    c.valid_k = 4;
    c.valid_is_items = 4;
    c.seed = 5;
    return c;
}

const SequenceDataset& synthetic() {
    static const SequenceDataset ds = synthetic_dataset(VssmModel<float>::init(tiny_hyper(), 99), 64, 1);
    return ds;
}

std::filesystem::path fresh_dir(const std::string& name) {
    auto d = std::filesystem::temp_directory_path() / ("vssm_train_" + std::to_string(::getpid())) / name;
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
}

Tensorf first_items(const SequenceDataset& ds, std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return ds.batch(idx);
}

// Mean ELBO over a fixed evaluation batch with fixed noise.
double mean_elbo(const VssmModel<float>& m, const Tensorf& x) {
    Tape<float> tape(false);
    Binding<float> p(tape, m.params, false);
    const auto& h = m.hyper;
    auto noise = latent_gumbel_noise<float>(CounterRng(77), Role::train_gumbel, x.dim(0), h.T, h.Z, h.N);
    auto t = elbo_terms(p, h, tape.constant(x), noise, ScanMode::parallel, true);
    double s = 0;
    for (float v : t.elbo.value().data()) s += v;
    return s / double(x.dim(0));
}

}  // namespace

TEST(TrainStep, ZeroPartialWeightLeavesPartialPosteriorUntouched) {
    auto m = VssmModel<float>::init(tiny_hyper(), 1);
    const auto before = m.params;
    TrainConfig c = tiny_config();
    c.partial_weight = 0;
    Adam<float> opt(m.params, {c.lr});
    auto sm = train_step(m, opt, first_items(synthetic(), 8), c, CounterRng(3));
    EXPECT_EQ(sm.partial, 0.0);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        if (m.is_partial_param(i))
            EXPECT_EQ(m.params[i], before[i]) << m.params.name(i);
        else
            changed += m.params[i] != before[i];
    }
    EXPECT_GT(changed, 0u);
}

TEST(TrainStep, ZeroLearningRateLeavesParametersAndReportsMetrics) {
    auto m = VssmModel<float>::init(tiny_hyper(), 2);
    const auto before = m.params;
    TrainConfig c = tiny_config();
    c.lr = 0;
    Adam<float> opt(m.params, {0.0});
    auto sm = train_step(m, opt, first_items(synthetic(), 8), c, CounterRng(3));
    EXPECT_EQ(m.params, before);
    EXPECT_TRUE(std::isfinite(sm.loss));
    EXPECT_TRUE(std::isfinite(sm.elbo));
    EXPECT_GT(sm.partial, 0.0);
    EXPECT_EQ(sm.items, 8u);
    EXPECT_NEAR(sm.loss, -sm.elbo + sm.partial, 1e-3 * std::abs(sm.loss));
    EXPECT_NEAR(sm.elbo, sm.reconstruction - sm.kl, 1e-6 * std::abs(sm.elbo) + 1e-6);
}

TEST(TrainStep, NonFiniteLossAbortsWithoutUpdating) {
    auto m = VssmModel<float>::init(tiny_hyper(), 3);
    m.params.get("dec.head.b")[0] = NAN;
    const auto before = m.params;
    TrainConfig c = tiny_config();
    Adam<float> opt(m.params, {c.lr});
    EXPECT_THROW(train_step(m, opt, first_items(synthetic(), 8), c, CounterRng(3)), NumericError);
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        // NaN != NaN, so compare bit patterns
        ASSERT_EQ(std::memcmp(m.params[i].data().data(), before[i].data().data(), 4 * before[i].numel()), 0);
    }
}

TEST(TrainStep, NumericAbortLeavesDiagnosticDump) {
    auto m = VssmModel<float>::init(tiny_hyper(), 3);
    m.params.get("enc.head.w")[1] = INFINITY;
    const auto dir = fresh_dir("abort");
    auto ds = synthetic();
    EXPECT_THROW(train(m, ds, ds, tiny_config(), {dir}), NumericError);
    EXPECT_TRUE(std::filesystem::exists(dir / "abort.ckpt"));
    std::ifstream in(dir / "abort.json");
    auto j = nlohmann::json::parse(in);
    EXPECT_NE(j["error"].get<std::string>().find("non-finite"), std::string::npos);
    EXPECT_NO_THROW(vssm_from(load_checkpoint(dir / "abort.ckpt")));
}

TEST(TrainStep, SyntheticSmokeReducesNegativeElbo) {
    const auto& ds = synthetic();
    const Tensorf eval = first_items(ds, 64);
    bool reduced = false;
    for (double lr : TrainConfig{}.lr_grid) {
        auto m = VssmModel<float>::init(tiny_hyper(), 4);
        TrainConfig c = tiny_config();
        c.lr = lr;
        Adam<float> opt(m.params, {lr});
        const CounterRng steps(c.seed, 1);
        double at10 = 0;
        for (std::size_t s = 1; s <= 500; ++s) {
            std::vector<std::size_t> idx(8);
            for (std::size_t b = 0; b < 8; ++b) idx[b] = (s * 8 + b) % ds.size();
            train_step(m, opt, ds.batch(idx), c, steps.child(s));
            if (s == 10) at10 = -mean_elbo(m, eval);
        }
        const double at500 = -mean_elbo(m, eval);
        RecordProperty("lr_" + std::to_string(lr), std::to_string(at10) + " -> " + std::to_string(at500));
        if (at10 > 0 && at500 <= 0.8 * at10) {
            reduced = true;
            break;
        }
    }
    EXPECT_TRUE(reduced);
}

TEST(Train, WritesRecordsAndSelectsBestEpoch) {
    const auto dir = fresh_dir("records");
    auto [tr, va] = split_train_valid(synthetic(), 0.25, 1);
    TrainConfig c = tiny_config();
    c.epochs = 3;
    auto r = train(VssmModel<float>::init(tiny_hyper(), 5), tr, va, c, {dir});
    ASSERT_EQ(r.metrics.size(), 3u);
    std::ifstream in(dir / "metrics.jsonl");
    std::string line;
    std::size_t lines = 0;
    double best = -INFINITY;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j["epoch"], ++lines);
        EXPECT_FALSE(j.contains("seconds"));
        best = std::max(best, j["score"].get<double>());
    }
    EXPECT_EQ(lines, 3u);
    EXPECT_EQ(r.state.best_score, best);
    auto saved = vssm_from(load_checkpoint(dir / "best.ckpt"));
    EXPECT_EQ(saved.params, r.best.params);
    EXPECT_NEAR(validate_model(saved, va, c).elbo, best, 1e-9);
    EXPECT_TRUE(load_checkpoint(dir / "last.ckpt").training.has_value());
}

TEST(Train, ResumeReproducesNextEpochBitForBit) {
    auto [tr, va] = split_train_valid(synthetic(), 0.25, 2);
    TrainConfig c = tiny_config();
    c.epochs = 3;
    const auto straight = fresh_dir("straight"), split = fresh_dir("split");
    auto full = train(VssmModel<float>::init(tiny_hyper(), 6), tr, va, c, {straight});
    TrainConfig first = c;
    first.epochs = 2;
    train(VssmModel<float>::init(tiny_hyper(), 6), tr, va, first, {split});
    auto resumed = train(VssmModel<float>::init(tiny_hyper(), 123), tr, va, c, {split, true});
    ASSERT_EQ(resumed.metrics.size(), 1u);
    EXPECT_EQ(to_json(resumed.metrics[0]).dump(), to_json(full.metrics[2]).dump());
    EXPECT_EQ(resumed.best.params, full.best.params);
    auto read = [](const std::filesystem::path& p) {
        std::ifstream in(p);
        return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    };
    EXPECT_EQ(read(split / "metrics.jsonl"), read(straight / "metrics.jsonl"));
    EXPECT_EQ(read(split / "last.ckpt"), read(straight / "last.ckpt"));
}

TEST(Train, ThreadedMetricsMatchSingleThreaded) {
    auto [tr, va] = split_train_valid(synthetic(), 0.25, 3);
    TrainConfig c = tiny_config();
    c.epochs = 1;
    auto one = train(VssmModel<float>::init(tiny_hyper(), 7), tr, va, c);
    c.workers = 3;
    auto three = train(VssmModel<float>::init(tiny_hyper(), 7), tr, va, c);
    auto close = [](double a, double b) { return std::abs(a - b) <= 1e-4 * std::max(std::abs(a), std::abs(b)); };
    const auto &a = one.metrics[0], &b = three.metrics[0];
    EXPECT_TRUE(close(a.train.loss, b.train.loss)) << a.train.loss << " vs " << b.train.loss;
    EXPECT_TRUE(close(a.train.elbo, b.train.elbo));
    EXPECT_TRUE(close(a.train.partial, b.train.partial));
    EXPECT_TRUE(close(a.valid.elbo, b.valid.elbo)) << a.valid.elbo << " vs " << b.valid.elbo;
    EXPECT_TRUE(close(a.valid.partial, b.valid.partial));
    EXPECT_TRUE(close(a.valid.is_ll_median, b.valid.is_ll_median));
}

TEST(Train, RunsAreDeterministic) {
    auto [tr, va] = split_train_valid(synthetic(), 0.25, 4);
    TrainConfig c = tiny_config();
    auto a = train(VssmModel<float>::init(tiny_hyper(), 8), tr, va, c);
    auto b = train(VssmModel<float>::init(tiny_hyper(), 8), tr, va, c);
    for (std::size_t e = 0; e < c.epochs; ++e) EXPECT_EQ(to_json(a.metrics[e]).dump(), to_json(b.metrics[e]).dump());
    EXPECT_EQ(a.best.params, b.best.params);
}

TEST(Train, GridSearchKeepsBestLearningRate) {
    auto [tr, va] = split_train_valid(synthetic(), 0.25, 5);
    TrainConfig c = tiny_config();
    c.epochs = 1;
    c.lr_grid = {1e-2, 1e-4};
    auto [r, g] = grid_search<VssmModel<float>>([] { return VssmModel<float>::init(tiny_hyper(), 9); }, tr, va, c);
    ASSERT_EQ(g.scores.size(), 2u);
    const auto best = std::max_element(g.scores.begin(), g.scores.end(),
                                       [](auto& x, auto& y) { return x.second < y.second; });
    EXPECT_EQ(g.best_lr, best->first);
    EXPECT_EQ(r.state.best_score, best->second);
}

TEST(Train, ConfigValidation) {
    TrainConfig c;
    c.epochs = 0;
    EXPECT_THROW(c.validate(), UsageError);
    c = {};
    c.partial_weight = -1;
    EXPECT_THROW(c.validate(), UsageError);
    c = {};
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), UsageError);
    c = {};
    c.lr_grid = {1e-3, 0};
    EXPECT_THROW(c.validate(), UsageError);
    EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(Profiles, FullAndDeskDefaults) {
    const auto full = paper_profile();
    EXPECT_EQ(full.train.epochs, 200u);
    EXPECT_EQ(full.vssm.layers, 4u);
    EXPECT_EQ(full.vssm.width, 1024u);
    EXPECT_EQ(full.vssm.state, 16u);
    EXPECT_EQ(full.vssm.tau, 1.0);
    EXPECT_EQ(full.vssm.sigma, 0.1);
    EXPECT_EQ(full.baseline.sigma, 0.1);
    EXPECT_EQ(full.train.lr_grid, (std::vector<double>{1e-2, 5e-3, 1e-3, 5e-4, 1e-4}));
    const auto desk = desk_profile();
    EXPECT_EQ(desk.vssm.layers, 2u);
    EXPECT_EQ(desk.vssm.width, 128u);
    EXPECT_EQ(desk.vssm.state, 8u);
    EXPECT_EQ(desk.vssm.Z, 8u);
    EXPECT_EQ(desk.vssm.N, 16u);
    EXPECT_EQ(desk.train_items, 8000u);
    EXPECT_EQ(desk.train.epochs, 20u);
    EXPECT_EQ(desk.train.valid_k, 10u);
    EXPECT_THROW(profile_named("huge"), UsageError);
}

TEST(TrainBaseline, ConstantSequencesApproachTheNoiseFloor) {
    BaselineHyper h;
    h.T = 6;
    h.D = 3;
    h.width = 16;
    h.state = 4;
    h.hidden = 16;
    h.layers = 1;
    SequenceDataset ds{h.T, h.D, std::vector<float>(40 * h.T * h.D, 0.6f), "synthetic", "none"};
    TrainConfig c = tiny_config();
    c.epochs = 60;
    c.lr = 1e-2;
    auto r = train_baseline(SsmBaseline<float>::init(h, 1), ds, ds.subset(std::vector<std::size_t>{0, 1}), c);
    // -log N(x | x, sigma^2) per dimension
    const double floor = double(h.T * h.D) * std::log(h.sigma * std::sqrt(2 * std::numbers::pi));
    const double final_loss = r.metrics.back().train.loss;
    EXPECT_GE(final_loss, floor - 1e-6);
    EXPECT_LE(final_loss - floor, 0.05 * double(h.T * h.D)) << "loss " << final_loss << " floor " << floor;
    EXPECT_NEAR(-r.metrics.back().valid.elbo, floor, 0.05 * double(h.T * h.D));
}

TEST(TrainBaseline, LossIsExactNegativeLogLikelihood) {
    BaselineHyper h;
    h.T = 5;
    h.D = 2;
    h.width = 8;
    h.state = 2;
    h.hidden = 8;
    h.layers = 1;
    auto b = SsmBaseline<float>::init(h, 2);
    SequenceDataset ds = synthetic_dataset(VssmModel<float>::init([] {
        VssmHyper v = tiny_hyper();
        v.T = 5;
        v.D = 2;
        return v;
    }(), 3), 8, 2);
    TrainConfig c = tiny_config();
    c.lr = 0;
    Adam<float> opt(b.params, {0.0});
    auto sm = train_step(b, opt, first_items(ds, 8), c, CounterRng(1));
    auto v = validate_model(b, ds, c);
    EXPECT_NEAR(sm.loss, -v.elbo, 1e-4 * std::abs(sm.loss));
    EXPECT_EQ(sm.kl, 0.0);
}
