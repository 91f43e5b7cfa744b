// vssm: train, sample, eval and bench entry points.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data or file
// error, 3 numeric fault during training or evaluation.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vssm/bench.hpp"
#include "vssm/checkpoint.hpp"
#include "vssm/config.hpp"
#include "vssm/data.hpp"
#include "vssm/evaluation.hpp"
#include "vssm/image.hpp"
#include "vssm/sampling.hpp"
#include "vssm/training.hpp"

namespace fs = std::filesystem;
using namespace vssm;

namespace {

struct CommonFlags {
    std::string config, profile, out, dataset_kind;
    std::uint64_t seed = 0;
    std::vector<std::string> dataset;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* out_opt = nullptr;
    CLI::Option* dataset_opt = nullptr;
    CLI::Option* kind_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config, "JSON config file (overridden by flags)");
    cmd->add_option("--profile", f.profile, "Defaults profile")->check(CLI::IsMember({"desk", "paper"}));
    f.seed_opt = cmd->add_option("--seed", f.seed, "Random seed");
    f.out_opt = cmd->add_option("--out", f.out, "Output directory");
    f.dataset_opt = cmd->add_option("--dataset", f.dataset,
                                    "Dataset file(s): MNIST IDX images, CIFAR binary batches, or 'synthetic'");
    f.kind_opt = cmd->add_option("--dataset-kind", f.dataset_kind, "mnist, cifar or synthetic (default: inferred)");
}

RunConfig resolve(const CommonFlags& f) {
    RunConfig c = load_run_config(f.config, f.profile);
    if (f.seed_opt->count()) c.seed = f.seed;
    if (f.out_opt->count()) c.out = f.out;
    if (f.dataset_opt->count()) c.dataset.assign(f.dataset.begin(), f.dataset.end());
    if (f.kind_opt->count()) c.dataset_kind = f.dataset_kind;
    c.train.seed = c.seed;
    return c;
}

std::string infer_kind(const RunConfig& c) {
    if (!c.dataset_kind.empty()) return c.dataset_kind;
    if (c.dataset.size() == 1 && c.dataset[0] == "synthetic") return "synthetic";
    if (c.dataset.empty()) throw UsageError("no dataset given (use --dataset)");
    for (const auto& p : c.dataset)
        if (!fs::exists(p)) throw IoError("dataset path does not exist: " + p.string());
    std::ifstream in(c.dataset[0], std::ios::binary);
    unsigned char magic[4] = {0, 0, 0, 0};
    in.read(reinterpret_cast<char*>(magic), 4);
    return magic[0] == 0 && magic[1] == 0 && magic[2] == 8 && magic[3] == 3 ? "mnist" : "cifar";
}

// Synthetic data comes from a randomly initialized VSSM of the configured shape.
SequenceDataset load_dataset(const RunConfig& c, std::size_t limit) {
    const std::string kind = infer_kind(c);
    if (kind == "synthetic") {
        const std::size_t n = limit == 0 ? 1000 : limit;
        return synthetic_dataset(VssmModel<float>::init(c.vssm, c.seed + 1), n, c.seed);
    }
    for (const auto& p : c.dataset)
        if (!fs::exists(p)) throw IoError("dataset path does not exist: " + p.string());
    if (kind == "mnist") {
        if (c.dataset.size() != 1) throw UsageError("MNIST takes exactly one IDX image file");
        return load_mnist(c.dataset[0], limit);
    }
    return load_cifar(c.dataset, limit);
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("error writing " + path.string());
}

bool rgb_rows(std::size_t T, std::size_t D) { return D == 3 * T; }

Tensorf prefix_of(const Tensorf& x, std::size_t C) {
    Tensorf p(Shape{C, x.dim(1)});
    std::copy_n(x.data().begin(), C * x.dim(1), p.data().begin());
    return p;
}

// Nine unconditional and nine prompted samples from the selected model.
void check_finite(const Tensorf& x, const std::string& what) {
    for (float v : x.data())
        if (!std::isfinite(v)) throw NumericError(what + " contains non-finite values");
}

void emit_training_grids(const VssmModel<float>& m, const SequenceDataset& valid, const fs::path& out,
                         std::uint64_t seed) {
    const std::size_t T = m.hyper.T, C = T / 2;
    std::vector<Tensorf> free, prompted;
    const CounterRng rng(seed, 0x4752);
    for (std::size_t i = 0; i < 9; ++i) {
        free.push_back(sample_full(m, Tensorf(), T, rng.child(i)));
        prompted.push_back(sample_full(m, prefix_of(valid.sequence(i % valid.size()), C), T, rng.child(100 + i)));
        check_finite(free.back(), "unconditional sample " + std::to_string(i));
        check_finite(prompted.back(), "prompted sample " + std::to_string(i));
    }
    const GridLayout layout{3, 2, rgb_rows(T, m.hyper.D)};
    write_pnm(out / "samples_unconditional.ppm", sample_grid(free, std::vector<std::size_t>(9, 0), layout));
    write_pnm(out / "samples_prompted.ppm", sample_grid(prompted, std::vector<std::size_t>(9, C), layout));
}

void print_epoch(const EpochMetrics& e, std::size_t total) {
    std::printf("epoch %zu/%zu  train loss %.2f elbo %.2f partial %.2f | valid elbo %.2f (se %.2f) partial %.2f "
                "is-ll %.2f partial-is-ll %.2f%s  [%.1f s]\n",
                e.epoch, total, e.train.loss, e.train.elbo, e.train.partial, e.valid.elbo, e.valid.elbo_se,
                e.valid.partial, e.valid.is_ll_median, e.valid.partial_is_ll_median, e.best ? " *" : "", e.seconds);
    std::fflush(stdout);
}

// --- train -----------------------------------------------------------------

struct TrainFlags {
    CommonFlags common;
    std::string model;
    std::size_t items = 0, epochs = 0, workers = 0, max_steps = 0, batch = 0;
    double lr = 0, lambda = 0;
    bool grid = false, resume = false, no_samples = false;
    CLI::Option *model_opt, *items_opt, *epochs_opt, *workers_opt, *max_steps_opt, *batch_opt, *lr_opt, *lambda_opt;
};

int cmd_train(const TrainFlags& f) {
    RunConfig c = resolve(f.common);
    if (f.model_opt->count()) c.model = f.model;
    if (f.items_opt->count()) c.items = f.items;
    if (f.epochs_opt->count()) c.train.epochs = f.epochs;
    if (f.workers_opt->count()) c.train.workers = f.workers;
    if (f.max_steps_opt->count()) c.train.max_steps = f.max_steps;
    if (f.batch_opt->count()) c.train.batch_size = f.batch;
    if (f.lr_opt->count()) c.train.lr = f.lr;
    if (f.lambda_opt->count()) c.train.partial_weight = f.lambda;
    c.validate();

    const SequenceDataset ds = load_dataset(c, c.items);
    // model dimensions follow the data
    c.vssm.T = c.baseline.T = ds.T;
    c.vssm.D = c.baseline.D = ds.D;
    c.validate();
    auto [train_set, valid_set] = split_train_valid(ds, c.train.valid_fraction, c.seed);
    ensure_dir(c.out);
    write_text(c.out / "config.json", to_json(c).dump(2) + "\n");
    std::printf("%s on %zu %s sequences (%zu train, %zu valid), T=%zu D=%zu\n", c.model.c_str(), ds.size(),
                ds.provenance.c_str(), train_set.size(), valid_set.size(), ds.T, ds.D);

    TrainOutput out{c.out, f.resume, [&](const EpochMetrics& e) { print_epoch(e, c.train.epochs); }};
    if (c.model == "vssm") {
        auto make = [&] { return VssmModel<float>::init(c.vssm, c.seed); };
        VssmModel<float> best;
        if (f.grid) {
            auto [r, g] = grid_search<VssmModel<float>>(make, train_set, valid_set, c.train, out);
            nlohmann::json j = {{"best_lr", g.best_lr}, {"best_score", g.best_score}, {"scores", g.scores}};
            write_text(c.out / "grid.json", j.dump(2) + "\n");
            save_checkpoint(c.out / "best.ckpt", checkpoint_of(r.best));
            best = r.best;
        } else {
            best = train(make(), train_set, valid_set, c.train, out).best;
        }
        if (!f.no_samples) emit_training_grids(best, valid_set, c.out, c.seed);
    } else {
        auto make = [&] { return SsmBaseline<float>::init(c.baseline, c.seed); };
        if (f.grid) {
            auto [r, g] = grid_search<SsmBaseline<float>>(make, train_set, valid_set, c.train, out);
            nlohmann::json j = {{"best_lr", g.best_lr}, {"best_score", g.best_score}, {"scores", g.scores}};
            write_text(c.out / "grid.json", j.dump(2) + "\n");
            save_checkpoint(c.out / "best.ckpt", checkpoint_of(r.best));
        } else {
            train_baseline(make(), train_set, valid_set, c.train, out);
        }
    }
    std::printf("wrote %s\n", (c.out / "best.ckpt").string().c_str());
    return 0;
}

// --- sample ----------------------------------------------------------------

struct SampleFlags {
    CommonFlags common;
    std::string checkpoint;
    std::size_t length = 0, cut = 0, chunk = 0, samples = 9, offset = 0;
    bool mean_only = false;
};

int cmd_sample(const SampleFlags& f) {
    RunConfig c = resolve(f.common);
    const Checkpoint ck = load_checkpoint(f.checkpoint);
    const bool is_vssm = ck.kind == ModelKind::vssm;
    const std::size_t D = is_vssm ? ck.vssm.D : ck.baseline.D;
    const std::size_t T = f.length != 0 ? f.length : (is_vssm ? ck.vssm.T : ck.baseline.T);
    const std::size_t C = f.cut;
    if (C > T) throw UsageError("--cut " + std::to_string(C) + " exceeds --length " + std::to_string(T));
    if (f.samples == 0) throw UsageError("--samples must be positive");
    const std::size_t W = f.chunk == 0 ? T - C : f.chunk;

    std::optional<SequenceDataset> prompts;
    if (C > 0) {
        if (c.dataset.empty()) throw UsageError("--cut > 0 needs --dataset to draw prompts from");
        prompts = load_dataset(c, f.offset + f.samples);
        if (prompts->D != D)
            throw UsageError("dataset rows have D=" + std::to_string(prompts->D) + " but the checkpoint expects D=" +
                             std::to_string(D));
        if (prompts->T < C) throw UsageError("dataset sequences are shorter than the cut");
        if (prompts->size() <= f.offset) throw UsageError("--offset is past the end of the dataset");
    }
    const SampleOptions opt{f.mean_only, ScanMode::sequential};
    const CounterRng root(c.seed);
    std::vector<Tensorf> seqs;
    std::optional<VssmModel<float>> m;
    std::optional<SsmBaseline<float>> b;
    if (is_vssm)
        m = vssm_from(ck);
    else
        b = baseline_from(ck);
    for (std::size_t i = 0; i < f.samples; ++i) {
        const Tensorf prompt =
            C == 0 ? Tensorf() : prefix_of(prompts->sequence(f.offset + i % (prompts->size() - f.offset)), C);
        if (!is_vssm) {
            seqs.push_back(sample_ssm_baseline(*b, prompt, T, root.child(i), opt));
        } else if (W >= T - C) {
            seqs.push_back(sample_full(*m, prompt, T, root.child(i), opt));
        } else {
            auto s = open_session(*m, prompt, T, root.child(i), opt);
            while (!s.done()) step_chunk(*m, s, std::min(W, s.T - s.C));
            seqs.push_back(s.sequence());
        }
        check_finite(seqs.back(), "sample " + std::to_string(i));
    }
    ensure_dir(c.out);
    write_sequences(c.out / "samples.f32", seqs);
    const GridLayout layout{std::size_t(std::ceil(std::sqrt(double(f.samples)))), 2, rgb_rows(T, D)};
    write_pnm(c.out / "samples.ppm", sample_grid(seqs, std::vector<std::size_t>(seqs.size(), C), layout));
    nlohmann::json meta = {{"model", is_vssm ? "vssm" : "baseline"}, {"T", T}, {"C", C}, {"W", is_vssm ? W : 1},
                           {"count", f.samples}, {"seed", c.seed}, {"mean_only", f.mean_only}};
    write_text(c.out / "samples.json", meta.dump(2) + "\n");
    std::printf("wrote %zu samples (T=%zu, C=%zu, W=%zu) to %s\n", f.samples, T, C, is_vssm ? W : 1,
                c.out.string().c_str());
    return 0;
}

// --- eval ------------------------------------------------------------------

struct EvalFlags {
    CommonFlags common;
    std::string checkpoint;
    std::size_t k = 100, samples = 100, offset = 0;
    std::vector<std::size_t> cuts;
};

int cmd_eval(const EvalFlags& f) {
    RunConfig c = resolve(f.common);
    const Checkpoint ck = load_checkpoint(f.checkpoint);
    const bool is_vssm = ck.kind == ModelKind::vssm;
    const std::size_t D = is_vssm ? ck.vssm.D : ck.baseline.D;
    if (f.k == 0) throw UsageError("--k must be positive");
    const SequenceDataset ds = load_dataset(c, f.offset + f.samples);
    if (ds.D != D)
        throw UsageError("dataset rows have D=" + std::to_string(ds.D) + " but the checkpoint expects D=" +
                         std::to_string(D));
    if (ds.size() <= f.offset) throw UsageError("--offset is past the end of the dataset");
    std::vector<std::size_t> cuts = f.cuts.empty() ? std::vector<std::size_t>{ds.T / 2} : f.cuts;
    for (std::size_t C : cuts)
        if (C >= ds.T) throw UsageError("cut C=" + std::to_string(C) + " must be below T=" + std::to_string(ds.T));

    std::optional<VssmModel<float>> m;
    std::optional<SsmBaseline<float>> b;
    if (is_vssm)
        m = vssm_from(ck);
    else
        b = baseline_from(ck);
    ensure_dir(c.out);
    std::ofstream records(c.out / "eval.jsonl");
    if (!records) throw IoError("cannot write " + (c.out / "eval.jsonl").string());
    std::vector<double> full;
    std::vector<std::vector<double>> partial(cuts.size());
    const std::size_t n = std::min(f.samples, ds.size() - f.offset);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t id = f.offset + i;
        const Tensorf x = ds.sequence(id);
        nlohmann::json rec;
        if (is_vssm) {
            const auto r = is_log_likelihood(*m, x, f.k, CounterRng(c.seed, 0).child(id));
            rec = to_json(r, id);
            full.push_back(r.estimate);
        } else {
            const double ll = baseline_partial_log_lik(*b, x, 0);
            rec = {{"sequence_id", id}, {"mode", "full"}, {"C", 0}, {"K", 0}, {"estimate_nats", ll}, {"exact", true}};
            full.push_back(ll);
        }
        records << rec.dump() << '\n';
        for (std::size_t j = 0; j < cuts.size(); ++j) {
            if (is_vssm) {
                const auto r = is_partial_log_likelihood(*m, x, cuts[j], f.k, CounterRng(c.seed, 1 + j).child(id));
                rec = to_json(r, id);
                partial[j].push_back(r.estimate);
            } else {
                const double ll = baseline_partial_log_lik(*b, x, cuts[j]);
                rec = {{"sequence_id", id}, {"mode", "partial"}, {"C", cuts[j]}, {"K", 0},
                       {"estimate_nats", ll}, {"exact", true}};
                partial[j].push_back(ll);
            }
            records << rec.dump() << '\n';
        }
    }
    records.close();
    if (!records) throw IoError("error writing " + (c.out / "eval.jsonl").string());
    auto summary = [](const std::vector<double>& v) {
        double mean = 0;
        for (double x : v) mean += x / double(v.size());
        std::vector<double> s = v;
        std::sort(s.begin(), s.end());
        const double median = s.size() % 2 ? s[s.size() / 2] : 0.5 * (s[s.size() / 2 - 1] + s[s.size() / 2]);
        return nlohmann::json{{"count", v.size()}, {"mean_nats", mean}, {"median_nats", median}};
    };
    nlohmann::json agg = {{"model", is_vssm ? "vssm" : "baseline"}, {"K", is_vssm ? f.k : 0}, {"full", summary(full)}};
    agg["partial"] = nlohmann::json::array();
    for (std::size_t j = 0; j < cuts.size(); ++j) {
        auto s = summary(partial[j]);
        s["C"] = cuts[j];
        agg["partial"].push_back(s);
    }
    write_text(c.out / "eval_summary.json", agg.dump(2) + "\n");
    std::printf("full log-likelihood: mean %.3f nats over %zu sequences\n", agg["full"]["mean_nats"].get<double>(), n);
    for (const auto& p : agg["partial"])
        std::printf("partial log-likelihood at C=%zu: mean %.3f nats\n", p["C"].get<std::size_t>(),
                    p["mean_nats"].get<double>());
    return 0;
}

// --- bench -----------------------------------------------------------------

struct BenchFlags {
    CommonFlags common;
    std::string checkpoint, baseline_checkpoint;
    std::vector<std::size_t> lengths{64, 256, 1024}, chunks{16};
    std::size_t cut = 0, reps = 5, workers = 1;
};

int cmd_bench(const BenchFlags& f) {
    RunConfig c = resolve(f.common);
    BenchConfig bc;
    bc.lengths = f.lengths;
    bc.chunks = f.chunks;
    bc.C = f.cut;
    bc.reps = f.reps;
    bc.workers = f.workers;
    bc.seed = c.seed;
    bc.validate();
    // Timing does not depend on the weights, so untrained models stand in when no checkpoint is given.
    const VssmModel<float> m =
        f.checkpoint.empty() ? VssmModel<float>::init(c.vssm, c.seed) : vssm_from(load_checkpoint(f.checkpoint));
    const SsmBaseline<float> b = f.baseline_checkpoint.empty() ? SsmBaseline<float>::init(c.baseline, c.seed)
                                                               : baseline_from(load_checkpoint(f.baseline_checkpoint));
    const BenchReport r = run_bench(m, b, bc);
    const std::string table = format_table(r);
    std::cout << table;
    ensure_dir(c.out);
    write_text(c.out / "bench.txt", table);
    write_text(c.out / "bench.json", to_json(r).dump(2) + "\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Variational state space model: train, sample, evaluate, benchmark"};
    app.require_subcommand(1);

    TrainFlags tf;
    auto* train_cmd = app.add_subcommand("train", "Train a VSSM or the SSM baseline");
    add_common(train_cmd, tf.common);
    tf.model_opt = train_cmd->add_option("--model", tf.model, "vssm or baseline")->check(CLI::IsMember({"vssm", "baseline"}));
    tf.items_opt = train_cmd->add_option("--items", tf.items, "Use the first N dataset items (0 = all)");
    tf.epochs_opt = train_cmd->add_option("--epochs", tf.epochs, "Training epochs");
    tf.batch_opt = train_cmd->add_option("--batch", tf.batch, "Batch size");
    tf.lr_opt = train_cmd->add_option("--lr", tf.lr, "Learning rate (ignored with --lr-grid)");
    tf.lambda_opt = train_cmd->add_option("--lambda", tf.lambda, "Partial-posterior loss weight");
    tf.workers_opt = train_cmd->add_option("--workers", tf.workers, "Data-parallel worker threads");
    tf.max_steps_opt = train_cmd->add_option("--max-steps", tf.max_steps, "Cap on optimizer steps per epoch");
    train_cmd->add_flag("--lr-grid", tf.grid, "Train once per grid learning rate and keep the best");
    train_cmd->add_flag("--resume", tf.resume, "Continue from OUT/last.ckpt");
    train_cmd->add_flag("--no-samples", tf.no_samples, "Skip the sample grids after training");

    SampleFlags sf;
    auto* sample_cmd = app.add_subcommand("sample", "Generate sequences from a checkpoint");
    add_common(sample_cmd, sf.common);
    sample_cmd->add_option("--checkpoint", sf.checkpoint, "Model checkpoint")->required();
    sample_cmd->add_option("--length", sf.length, "Sequence length T (default: the model's)");
    sample_cmd->add_option("--cut", sf.cut, "Prompt length C taken from --dataset items");
    sample_cmd->add_option("--chunk", sf.chunk, "Chunk size W (default: T - C in one shot)");
    sample_cmd->add_option("--samples", sf.samples, "Number of sequences");
    sample_cmd->add_option("--offset", sf.offset, "First dataset item used as a prompt");
    sample_cmd->add_flag("--mean-only", sf.mean_only, "Emit decoder means instead of noisy draws");

    EvalFlags ef;
    auto* eval_cmd = app.add_subcommand("eval", "Importance-sampled full and partial log-likelihoods");
    add_common(eval_cmd, ef.common);
    eval_cmd->add_option("--checkpoint", ef.checkpoint, "Model checkpoint")->required();
    eval_cmd->add_option("--k", ef.k, "Importance samples per sequence");
    eval_cmd->add_option("--cut", ef.cuts, "Prompt lengths for the partial likelihood (default T/2)")->delimiter(',');
    eval_cmd->add_option("--samples", ef.samples, "Number of dataset sequences to score");
    eval_cmd->add_option("--offset", ef.offset, "First dataset item scored");

    BenchFlags bf;
    auto* bench_cmd = app.add_subcommand("bench", "Generation latency: VSSM vs sequential SSM baseline");
    add_common(bench_cmd, bf.common);
    bench_cmd->add_option("--checkpoint", bf.checkpoint, "VSSM checkpoint (default: untrained profile model)");
    bench_cmd->add_option("--baseline-checkpoint", bf.baseline_checkpoint, "Baseline checkpoint");
    bench_cmd->add_option("--length", bf.lengths, "Sequence lengths T")->delimiter(',');
    bench_cmd->add_option("--cut", bf.cut, "Prompt length C");
    bench_cmd->add_option("--chunk", bf.chunks, "Chunk sizes W for the chunked path")->delimiter(',');
    bench_cmd->add_option("--reps", bf.reps, "Measured repetitions (at least 5)");
    bench_cmd->add_option("--workers", bf.workers, "Worker threads recorded in the report");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }
    try {
        if (*train_cmd) return cmd_train(tf);
        if (*sample_cmd) return cmd_sample(sf);
        if (*eval_cmd) return cmd_eval(ef);
        if (*bench_cmd) return cmd_bench(bf);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return 3;
    } catch (const IoError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
