#pragma once

// Run configuration: profile defaults, overridden by a JSON file, overridden
// by command-line flags.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vssm/errors.hpp"
#include "vssm/training.hpp"

namespace vssm {

struct RunConfig {
    std::string profile = "desk";
    std::string model = "vssm";  // "vssm" or "baseline"
    std::uint64_t seed = 0;
    std::string dataset_kind;    // "mnist", "cifar", "synthetic"; empty = infer from the path
    std::vector<std::filesystem::path> dataset;
    std::size_t items = 0;       // subset of the dataset, 0 = all
    std::filesystem::path out = "out";
    VssmHyper vssm;
    BaselineHyper baseline;
    TrainConfig train;

    static RunConfig from_profile(const std::string& name) {
        const Profile p = profile_named(name);
        RunConfig c;
        c.profile = name;
        c.vssm = p.vssm;
        c.baseline = p.baseline;
        c.train = p.train;
        c.items = p.train_items;
        return c;
    }

    void validate() const {
        if (model != "vssm" && model != "baseline") throw UsageError("model must be vssm or baseline, got '" + model + "'");
        if (!dataset_kind.empty() && dataset_kind != "mnist" && dataset_kind != "cifar" && dataset_kind != "synthetic")
            throw UsageError("dataset kind must be mnist, cifar or synthetic, got '" + dataset_kind + "'");
        vssm.validate();
        baseline.validate();
        train.validate();
    }
};

namespace detail {

// Assigns j[key] to v if present, erasing it so leftovers can be reported.
template <class T>
void take(nlohmann::json& j, const char* key, T& v, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        v = j[key].get<T>();
    } catch (const nlohmann::json::exception&) {
        throw UsageError("config: " + where + key + " has the wrong type (" + j[key].dump() + ")");
    }
    j.erase(key);
}

inline void reject_leftovers(const nlohmann::json& j, const std::string& where) {
    if (!j.empty()) throw UsageError("config: unknown key " + where + j.begin().key());
}

inline nlohmann::json section(nlohmann::json& j, const char* key) {
    if (!j.contains(key)) return nlohmann::json::object();
    if (!j[key].is_object()) throw UsageError(std::string("config: ") + key + " must be an object");
    nlohmann::json s = j[key];
    j.erase(key);
    return s;
}

}  // namespace detail

/// Overwrites the fields present in `j`; unknown keys and type mismatches are usage errors.
inline void apply_json(RunConfig& c, nlohmann::json j) {
    using detail::take;
    if (!j.is_object()) throw UsageError("config: top level must be an object");
    j.erase("profile");  // consumed by load order, see load_run_config
    take(j, "model", c.model, "");
    take(j, "seed", c.seed, "");
    take(j, "out", c.out, "");
    take(j, "items", c.items, "");
    auto data = detail::section(j, "data");
    take(data, "kind", c.dataset_kind, "data.");
    take(data, "paths", c.dataset, "data.");
    detail::reject_leftovers(data, "data.");

    auto m = detail::section(j, "vssm");
    for (auto [k, v] : {std::pair{"T", &c.vssm.T}, {"D", &c.vssm.D}, {"Z", &c.vssm.Z}, {"N", &c.vssm.N},
                        {"width", &c.vssm.width}, {"state", &c.vssm.state}, {"hidden", &c.vssm.hidden},
                        {"layers", &c.vssm.layers}})
        take(m, k, *v, "vssm.");
    take(m, "sigma", c.vssm.sigma, "vssm.");
    take(m, "tau", c.vssm.tau, "vssm.");
    detail::reject_leftovers(m, "vssm.");

    auto b = detail::section(j, "baseline");
    for (auto [k, v] : {std::pair{"T", &c.baseline.T}, {"D", &c.baseline.D}, {"width", &c.baseline.width},
                        {"state", &c.baseline.state}, {"hidden", &c.baseline.hidden}, {"layers", &c.baseline.layers}})
        take(b, k, *v, "baseline.");
    take(b, "sigma", c.baseline.sigma, "baseline.");
    detail::reject_leftovers(b, "baseline.");

    auto t = detail::section(j, "train");
    auto& tc = c.train;
    for (auto [k, v] : {std::pair{"epochs", &tc.epochs}, {"batch_size", &tc.batch_size},
                        {"checkpoint_every", &tc.checkpoint_every}, {"workers", &tc.workers}, {"valid_k", &tc.valid_k},
                        {"valid_is_items", &tc.valid_is_items}, {"max_steps", &tc.max_steps}})
        take(t, k, *v, "train.");
    for (auto [k, v] : {std::pair{"lr", &tc.lr}, {"valid_fraction", &tc.valid_fraction},
                        {"elbo_weight", &tc.elbo_weight}, {"partial_weight", &tc.partial_weight}})
        take(t, k, *v, "train.");
    take(t, "lr_grid", tc.lr_grid, "train.");
    take(t, "hard", tc.hard, "train.");
    std::string scan = tc.scan == ScanMode::parallel ? "parallel" : "sequential";
    take(t, "scan", scan, "train.");
    if (scan != "parallel" && scan != "sequential") throw UsageError("config: train.scan must be parallel or sequential");
    tc.scan = scan == "parallel" ? ScanMode::parallel : ScanMode::sequential;
    auto a = detail::section(t, "adam");
    take(a, "beta1", tc.adam.beta1, "train.adam.");
    take(a, "beta2", tc.adam.beta2, "train.adam.");
    take(a, "eps", tc.adam.eps, "train.adam.");
    detail::reject_leftovers(a, "train.adam.");
    detail::reject_leftovers(t, "train.");
    detail::reject_leftovers(j, "");
}

inline nlohmann::json to_json(const RunConfig& c) {
    std::vector<std::string> paths;
    for (const auto& p : c.dataset) paths.push_back(p.string());
    const auto& t = c.train;
    return {
        {"profile", c.profile},
        {"model", c.model},
        {"seed", c.seed},
        {"out", c.out.string()},
        {"items", c.items},
        {"data", {{"kind", c.dataset_kind}, {"paths", paths}}},
        {"vssm",
         {{"T", c.vssm.T}, {"D", c.vssm.D}, {"Z", c.vssm.Z}, {"N", c.vssm.N}, {"sigma", c.vssm.sigma},
          {"tau", c.vssm.tau}, {"width", c.vssm.width}, {"state", c.vssm.state}, {"hidden", c.vssm.hidden},
          {"layers", c.vssm.layers}}},
        {"baseline",
         {{"T", c.baseline.T}, {"D", c.baseline.D}, {"sigma", c.baseline.sigma}, {"width", c.baseline.width},
          {"state", c.baseline.state}, {"hidden", c.baseline.hidden}, {"layers", c.baseline.layers}}},
        {"train",
         {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr", t.lr},
          {"lr_grid", t.lr_grid},
          {"adam", {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"eps", t.adam.eps}}},
          {"valid_fraction", t.valid_fraction},
          {"elbo_weight", t.elbo_weight},
          {"partial_weight", t.partial_weight},
          {"checkpoint_every", t.checkpoint_every},
          {"workers", t.workers},
          {"hard", t.hard},
          {"scan", t.scan == ScanMode::parallel ? "parallel" : "sequential"},
          {"valid_k", t.valid_k},
          {"valid_is_items", t.valid_is_items},
          {"max_steps", t.max_steps}}},
    };
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path.string());
    try {
        return nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw UsageError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
}

/// Defaults of the chosen profile, then the file. A profile named on the
/// command line wins over one named in the file; remaining CLI flags are
/// applied by the caller afterwards.
inline RunConfig load_run_config(const std::filesystem::path& file, const std::string& cli_profile) {
    nlohmann::json j = file.empty() ? nlohmann::json::object() : read_json_file(file);
    std::string profile = "desk";
    if (j.contains("profile")) {
        if (!j["profile"].is_string()) throw UsageError("config: profile must be a string");
        profile = j["profile"].get<std::string>();
    }
    if (!cli_profile.empty()) profile = cli_profile;
    RunConfig c = RunConfig::from_profile(profile);
    apply_json(c, std::move(j));
    return c;
}

}  // namespace vssm
