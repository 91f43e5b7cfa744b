#pragma once

// Generation-latency benchmark: one-shot and chunked VSSM sampling against the
// sequential SSM baseline, with wall times paired with step counters.

#include <sys/utsname.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "vssm/errors.hpp"
#include "vssm/parallel.hpp"
#include "vssm/sampling.hpp"
#include "vssm/ssm.hpp"

namespace vssm {

struct BenchConfig {
    std::vector<std::size_t> lengths{64, 256, 1024};
    std::size_t C = 0;
    std::vector<std::size_t> chunks{16};  // W values for the chunked VSSM path
    std::size_t reps = 5;
    std::size_t warmup = 3;
    std::size_t workers = 1;
    std::uint64_t seed = 0;

    void validate() const {
        if (reps < 5) throw UsageError("bench: at least 5 repetitions are required, got " + std::to_string(reps));
        if (lengths.empty()) throw UsageError("bench: no sequence lengths given");
        for (std::size_t T : lengths)
            if (T <= C) throw UsageError("bench: every length must exceed the cut C=" + std::to_string(C));
        for (std::size_t W : chunks)
            if (W == 0) throw UsageError("bench: chunk sizes must be positive");
    }
};

struct BenchRow {
    std::string model;  // "vssm", "vssm-chunked", "ssm-baseline"
    std::size_t T = 0, C = 0, W = 0;
    double mean = 0, min = 0, max = 0;  // seconds per generated sequence
    std::uint64_t sequence_passes = 0, single_steps = 0;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    std::size_t reps = 0, warmup = 0, workers = 0;
    double vssm_slope = 0, baseline_slope = 0, slope_ratio = 0;  // log-log fits of mean time vs T
    std::vector<std::pair<std::size_t, double>> speedup;          // baseline mean / vssm mean, per T
    nlohmann::json environment;
};

namespace detail {

template <class Fn>
BenchRow time_case(BenchRow row, const BenchConfig& cfg, Fn&& run) {
    for (std::size_t i = 0; i < cfg.warmup; ++i) run(i);
    std::vector<double> secs;
    for (std::size_t r = 0; r < cfg.reps; ++r) {
        forward_counters().reset();
        const auto t0 = std::chrono::steady_clock::now();
        run(cfg.warmup + r);
        secs.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        row.sequence_passes = forward_counters().sequence_passes;
        row.single_steps = forward_counters().single_steps;
    }
    row.min = *std::min_element(secs.begin(), secs.end());
    row.max = *std::max_element(secs.begin(), secs.end());
    row.mean = 0;
    for (double s : secs) row.mean += s / double(secs.size());
    return row;
}

// Least-squares slope of log(y) against log(x).
inline double log_log_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    if (n < 2) return 0;
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += std::log(x[i]) / double(n);
        my += std::log(y[i]) / double(n);
    }
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
        sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
    }
    return sxx > 0 ? sxy / sxx : 0;
}

inline nlohmann::json environment_info(std::size_t workers) {
    nlohmann::json env;
    env["workers"] = workers;
    env["hardware_threads"] = std::thread::hardware_concurrency();
#ifdef __VERSION__
    env["compiler"] = __VERSION__;
#endif
#ifdef NDEBUG
    env["assertions"] = false;
#else
    env["assertions"] = true;
#endif
    utsname u{};
    if (uname(&u) == 0) env["system"] = std::string(u.sysname) + " " + u.release + " " + u.machine;
    std::ifstream cpu("/proc/cpuinfo");
    for (std::string line; std::getline(cpu, line);)
        if (line.rfind("model name", 0) == 0) {
            env["cpu"] = line.substr(line.find(':') + 2);
            break;
        }
    return env;
}

}  // namespace detail

inline BenchReport run_bench(const VssmModel<float>& m, const SsmBaseline<float>& b, const BenchConfig& cfg) {
    cfg.validate();
    if (m.hyper.D != b.hyper.D) throw UsageError("bench: VSSM and baseline observation sizes differ");
    const std::size_t saved_workers = parallel::workers();
    parallel::set_workers(cfg.workers);
    BenchReport rep;
    rep.reps = cfg.reps;
    rep.warmup = cfg.warmup;
    rep.workers = cfg.workers;
    const CounterRng root(cfg.seed);
    const Tensorf prompt = cfg.C == 0 ? Tensorf() : Tensorf(Shape{cfg.C, m.hyper.D}, 0.5f);
    std::vector<double> Ts, vssm_t, base_t;
    for (std::size_t T : cfg.lengths) {
        const BenchRow v = detail::time_case({"vssm", T, cfg.C, T - cfg.C}, cfg,
                                             [&](std::size_t i) { sample_full(m, prompt, T, root.child(i)); });
        rep.rows.push_back(v);
        for (std::size_t W : cfg.chunks) {
            if (W >= T - cfg.C) continue;
            rep.rows.push_back(detail::time_case({"vssm-chunked", T, cfg.C, W}, cfg, [&](std::size_t i) {
                auto s = open_session(m, prompt, T, root.child(i));
                while (!s.done()) step_chunk(m, s, std::min(W, s.T - s.C));
            }));
        }
        const BenchRow base = detail::time_case({"ssm-baseline", T, cfg.C, 1}, cfg,
                                                [&](std::size_t i) { sample_ssm_baseline(b, prompt, T, root.child(i)); });
        rep.rows.push_back(base);
        Ts.push_back(double(T));
        vssm_t.push_back(v.mean);
        base_t.push_back(base.mean);
        rep.speedup.emplace_back(T, base.mean / v.mean);
    }
    rep.vssm_slope = detail::log_log_slope(Ts, vssm_t);
    rep.baseline_slope = detail::log_log_slope(Ts, base_t);
    rep.slope_ratio = rep.baseline_slope != 0 ? rep.vssm_slope / rep.baseline_slope : 0;
    rep.environment = detail::environment_info(cfg.workers);
    parallel::set_workers(saved_workers);
    return rep;
}

inline nlohmann::json to_json(const BenchReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& x : r.rows)
        rows.push_back({{"model", x.model},
                        {"T", x.T},
                        {"C", x.C},
                        {"W", x.W},
                        {"mean_s", x.mean},
                        {"min_s", x.min},
                        {"max_s", x.max},
                        {"sequence_passes", x.sequence_passes},
                        {"single_steps", x.single_steps}});
    nlohmann::json speed = nlohmann::json::array();
    for (auto [T, s] : r.speedup) speed.push_back({{"T", T}, {"baseline_over_vssm", s}});
    return {{"rows", rows},
            {"reps", r.reps},
            {"warmup", r.warmup},
            {"workers", r.workers},
            {"vssm_loglog_slope", r.vssm_slope},
            {"baseline_loglog_slope", r.baseline_slope},
            {"slope_ratio", r.slope_ratio},
            {"speedup", speed},
            {"environment", r.environment}};
}

inline std::string format_table(const BenchReport& r) {
    std::ostringstream o;
    o << std::left << std::setw(14) << "model" << std::right << std::setw(7) << "T" << std::setw(6) << "C" << std::setw(7)
      << "W" << std::setw(12) << "mean ms" << std::setw(12) << "min ms" << std::setw(12) << "max ms" << std::setw(9)
      << "passes" << std::setw(9) << "steps" << '\n';
    o << std::fixed << std::setprecision(3);
    for (const auto& x : r.rows)
        o << std::left << std::setw(14) << x.model << std::right << std::setw(7) << x.T << std::setw(6) << x.C
          << std::setw(7) << x.W << std::setw(12) << 1e3 * x.mean << std::setw(12) << 1e3 * x.min << std::setw(12)
          << 1e3 * x.max << std::setw(9) << x.sequence_passes << std::setw(9) << x.single_steps << '\n';
    o << std::setprecision(2);
    for (auto [T, s] : r.speedup) o << "speedup at T=" << T << ": " << s << "x\n";
    o << std::setprecision(3) << "log-log slope vssm " << r.vssm_slope << ", baseline " << r.baseline_slope << ", ratio "
      << r.slope_ratio << '\n';
    o << "reps " << r.reps << " after " << r.warmup << " warm-up runs, workers " << r.workers << '\n';
    return o.str();
}

}  // namespace vssm
