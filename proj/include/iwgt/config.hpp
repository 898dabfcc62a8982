#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "channelsim.hpp"
#include "error.hpp"
#include "eval.hpp"
#include "model.hpp"
#include "objectives.hpp"
#include "training.hpp"

namespace iwgt {

// ---------------------------------------------------------------------------
// JSON for objectives and fine-tuning
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const Objective& obj) {
    j = {{"name", objective_name(obj)}};
    if (const auto* pf = std::get_if<ProportionalFairness>(&obj)) j["epsilon"] = pf->epsilon;
    if (const auto* q = std::get_if<QoS>(&obj)) {
        j["r_min"] = q->r_min;
        j["alpha"] = q->alpha;
    }
}

/// Accepts a bare name ("qos") or an object with a name and constants.
inline void from_json(const nlohmann::json& j, Objective& obj) {
    if (j.is_string()) {
        obj = parse_objective(j.get<std::string>());
        return;
    }
    if (!j.is_object() || !j.contains("name")) throw ConfigError("objective: expected a name or an object with 'name'");
    obj = parse_objective(j.at("name").get<std::string>());
    for (const auto& [key, _] : j.items()) {
        const bool ok = key == "name" || (key == "epsilon" && std::holds_alternative<ProportionalFairness>(obj)) ||
                        ((key == "r_min" || key == "alpha") && std::holds_alternative<QoS>(obj));
        if (!ok) throw ConfigError("objective: unknown field '" + key + "'");
    }
    if (auto* pf = std::get_if<ProportionalFairness>(&obj)) pf->epsilon = j.value("epsilon", pf->epsilon);
    if (auto* q = std::get_if<QoS>(&obj)) {
        q->r_min = j.value("r_min", q->r_min);
        q->alpha = j.value("alpha", q->alpha);
    }
}

inline void to_json(nlohmann::json& j, const FinetuneConfig& c) {
    j = {{"warmup_epochs", c.warmup_epochs}, {"full_epochs", c.full_epochs}, {"backbone_lr", c.backbone_lr},
         {"head_lr", c.head_lr},             {"objective", c.objective},     {"n_shot", c.n_shot},
         {"batch_size", c.batch_size},       {"seed", c.seed},               {"grad_clip", c.grad_clip}};
}

inline void from_json(const nlohmann::json& j, FinetuneConfig& c) {
    const FinetuneConfig d;
    c.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
    c.full_epochs = j.value("full_epochs", d.full_epochs);
    c.backbone_lr = j.value("backbone_lr", d.backbone_lr);
    c.head_lr = j.value("head_lr", d.head_lr);
    c.objective = j.contains("objective") ? j.at("objective").get<Objective>() : d.objective;
    c.n_shot = j.value("n_shot", d.n_shot);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.seed = j.value("seed", d.seed);
    c.grad_clip = j.value("grad_clip", d.grad_clip);
}

// ---------------------------------------------------------------------------
// Experiment config
// ---------------------------------------------------------------------------

/// Everything a CLI run needs. Datasets not supplied as files are generated
/// from the scenario fields with the listed base seeds.
struct ExperimentConfig {
    ScenarioConfig scenario = find_scenario("D18-toy");
    std::vector<ScenarioConfig> pretrain_scenarios;
    std::size_t n_pretrain = 200;
    std::size_t n_train = 256;
    std::size_t n_test = 200;
    std::uint64_t pretrain_data_seed = 0;
    std::uint64_t pretrain_seed_stride = 10000;
    std::uint64_t train_data_seed = 500000;
    std::uint64_t test_data_seed = 600000;
    ModelConfig model;
    PretrainConfig pretrain;
    FinetuneConfig finetune;
    EvalConfig eval;
    std::vector<std::size_t> shots{64, 128, 256};
    std::vector<double> mask_ratios{0.1, 0.3, 0.5};
    std::vector<ModelConfig> scaling_models;

    void validate() const {
        scenario.validate();
        for (const auto& s : pretrain_scenarios) s.validate();
        model.validate();
        pretrain.validate();
        finetune.validate();
        eval.validate();
        for (const auto& m : scaling_models) m.validate();
        for (double r : mask_ratios)
            if (!(r >= 0 && r <= 0.5)) throw InvalidArgument("mask_ratios: each ratio must be in [0, 0.5]");
        if (n_test < 1) throw InvalidArgument("n_test must be >= 1");
    }
};

namespace detail {

inline ScenarioConfig scenario_from_json(const nlohmann::json& j, const std::string& where) {
    if (j.is_string()) return find_scenario(j.get<std::string>());
    if (!j.is_object()) throw ConfigError(where + ": expected a scenario name or object");
    ScenarioConfig base;
    if (j.contains("base")) base = find_scenario(j.at("base").get<std::string>());
    nlohmann::json merged = base;
    for (const auto& [k, v] : j.items()) {
        if (k == "base") continue;
        if (!merged.contains(k)) throw ConfigError(where + ": unknown field '" + k + "'");
        merged[k] = v;
    }
    try {
        return merged.get<ScenarioConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + ": " + e.what());
    }
}

/// Parses one section, naming the first unknown or ill-typed field.
template <class T>
T section_from_json(const nlohmann::json& j, const T& defaults, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    nlohmann::json merged = defaults;
    for (const auto& [k, v] : j.items()) {
        if (!merged.contains(k)) throw ConfigError("unknown config field '" + where + "." + k + "'");
        merged[k] = v;
        try {
            (void)merged.get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("bad value for config field '" + where + "." + k + "': " + e.what());
        }
    }
    return merged.get<T>();
}

} // namespace detail

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    nlohmann::json pre = nlohmann::json::array();
    for (const auto& s : c.pretrain_scenarios) pre.push_back(s);
    nlohmann::json scaling = nlohmann::json::array();
    for (const auto& m : c.scaling_models) scaling.push_back(m);
    j = {{"scenario", c.scenario},
         {"pretrain_scenarios", pre},
         {"n_pretrain", c.n_pretrain},
         {"n_train", c.n_train},
         {"n_test", c.n_test},
         {"pretrain_data_seed", c.pretrain_data_seed},
         {"pretrain_seed_stride", c.pretrain_seed_stride},
         {"train_data_seed", c.train_data_seed},
         {"test_data_seed", c.test_data_seed},
         {"model", c.model},
         {"pretrain", c.pretrain},
         {"finetune", c.finetune},
         {"eval", c.eval},
         {"shots", c.shots},
         {"mask_ratios", c.mask_ratios},
         {"scaling_models", scaling}};
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    ExperimentConfig c;
    for (const auto& [k, v] : j.items()) {
        try {
            if (k == "scenario") c.scenario = detail::scenario_from_json(v, "scenario");
            else if (k == "pretrain_scenarios") {
                c.pretrain_scenarios.clear();
                for (const auto& s : v) c.pretrain_scenarios.push_back(detail::scenario_from_json(s, "pretrain_scenarios"));
            } else if (k == "n_pretrain") c.n_pretrain = v.get<std::size_t>();
            else if (k == "n_train") c.n_train = v.get<std::size_t>();
            else if (k == "n_test") c.n_test = v.get<std::size_t>();
            else if (k == "pretrain_data_seed") c.pretrain_data_seed = v.get<std::uint64_t>();
            else if (k == "pretrain_seed_stride") c.pretrain_seed_stride = v.get<std::uint64_t>();
            else if (k == "train_data_seed") c.train_data_seed = v.get<std::uint64_t>();
            else if (k == "test_data_seed") c.test_data_seed = v.get<std::uint64_t>();
            else if (k == "model") c.model = detail::section_from_json(v, ModelConfig{}, "model");
            else if (k == "pretrain") c.pretrain = detail::section_from_json(v, PretrainConfig{}, "pretrain");
            else if (k == "finetune") c.finetune = detail::section_from_json(v, FinetuneConfig{}, "finetune");
            else if (k == "eval") c.eval = detail::section_from_json(v, EvalConfig{}, "eval");
            else if (k == "shots") c.shots = v.get<std::vector<std::size_t>>();
            else if (k == "mask_ratios") c.mask_ratios = v.get<std::vector<double>>();
            else if (k == "scaling_models") {
                c.scaling_models.clear();
                for (const auto& m : v) c.scaling_models.push_back(detail::section_from_json(m, ModelConfig{}, "scaling_models"));
            } else throw ConfigError("unknown config field '" + k + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("bad value for config field '" + k + "': " + e.what());
        }
    }
    try {
        c.validate();
    } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
    return c;
}

/// Desk-scale protocol: pre-train on D1-toy..D9-toy, adapt on D18-toy.
inline ExperimentConfig toy_config() {
    ExperimentConfig c;
    c.scenario = find_scenario("D18-toy");
    for (int i = 1; i <= 9; ++i) c.pretrain_scenarios.push_back(find_scenario("D" + std::to_string(i) + "-toy"));
    c.pretrain.epochs = 30;
    c.pretrain.batch_size = 8;
    c.pretrain.lr = 1e-3;
    ModelConfig small;
    small.L = 1;
    small.d_model = 16;
    small.d_ffn = 32;
    ModelConfig wide;
    wide.d_model = 48;
    wide.d_ffn = 96;
    c.scaling_models = {small, ModelConfig{}, wide};
    return c;
}

/// Full-scale settings. Expressible, but far beyond a desk budget.
inline ExperimentConfig paper_config() {
    ExperimentConfig c;
    c.scenario = find_scenario("D18");
    for (int i = 1; i <= 15; ++i) c.pretrain_scenarios.push_back(find_scenario("D" + std::to_string(i)));
    c.n_pretrain = 100000;
    c.n_train = 2048;
    c.n_test = 5000;
    c.pretrain_seed_stride = 1000000;
    c.train_data_seed = 50000000;
    c.test_data_seed = 60000000;
    c.model.L = 6;
    c.model.d_model = 768;
    c.model.M = 32;
    c.model.d_ffn = 3072;
    c.model.d_proj = 256;
    c.model.d_pred_hidden = 256;
    c.shots = {64, 128, 256, 512, 1024, 2048};
    for (std::size_t L : {4, 6, 8})
        for (std::size_t d : {768, 1024}) {
            ModelConfig m = c.model;
            m.L = L;
            m.d_model = d;
            m.d_ffn = 4 * d;
            c.scaling_models.push_back(m);
        }
    return c;
}

/// Applies "a.b=value" overrides; the value is parsed as JSON, falling back to
/// a plain string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    nlohmann::json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = nlohmann::json::object();
        node = &(*node)[key];
        start = dot + 1;
    }
}

/// `source` is a built-in name ("toy", "paper") or a path to a JSON file.
inline nlohmann::json load_config_json(const std::string& source) {
    if (source == "toy") return toy_config();
    if (source == "paper") return paper_config();
    std::ifstream f(source);
    if (!f) throw FileError("cannot open config " + source);
    try {
        return nlohmann::json::parse(f, nullptr, true, true);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + source + ": " + e.what());
    }
}

inline ExperimentConfig load_config(const std::string& source, const std::vector<std::string>& overrides = {}) {
    nlohmann::json j = load_config_json(source);
    for (const auto& o : overrides) apply_override(j, o);
    return experiment_from_json(j);
}

/// Datasets named by the config, generated deterministically.
inline std::vector<Dataset> config_pretrain_data(const ExperimentConfig& c) {
    std::vector<Dataset> out;
    for (std::size_t i = 0; i < c.pretrain_scenarios.size(); ++i)
        out.push_back(make_dataset(c.pretrain_scenarios[i], c.n_pretrain, c.pretrain_data_seed + i * c.pretrain_seed_stride));
    return out;
}
inline Dataset config_train_data(const ExperimentConfig& c) { return make_dataset(c.scenario, c.n_train, c.train_data_seed); }
inline Dataset config_test_data(const ExperimentConfig& c) { return make_dataset(c.scenario, c.n_test, c.test_data_seed); }

} // namespace iwgt
