#pragma once

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "channelsim.hpp"
#include "config.hpp"
#include "error.hpp"
#include "eval.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "solvers.hpp"
#include "training.hpp"

namespace iwgt::cli {

inline constexpr int kExitUsage = 64;
inline constexpr int kExitConfig = 65;
inline constexpr int kExitNumerical = 70;
inline constexpr int kExitIo = 74;

inline const std::vector<std::string>& subcommands() {
    static const std::vector<std::string> names{"gen",          "pretrain",      "finetune",   "eval",     "sweep-fewshot",
                                                "sweep-scaling", "sweep-mask", "gradcheck", "oracle"};
    return names;
}

/// Raised for a required option that was not given.
class MissingField : public ConfigError {
public:
    explicit MissingField(const std::string& field)
        : ConfigError("missing required field '" + field + "'"), field_(field) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

inline int exit_code_for(const Error& e) {
    const std::string c = e.category();
    if (c == "file-error") return kExitIo;
    if (c == "numerical-failure" || c == "degenerate-loss" || c == "undefined-ratio" || c == "shape-error")
        return kExitNumerical;
    return kExitConfig;
}

// ---------------------------------------------------------------------------
// Diagnostics shared with the acceptance harness
// ---------------------------------------------------------------------------

struct GradFidelity {
    GradCheckResult pretrain;
    GradCheckResult downstream;
};

/// Central-difference checks of the pre-training and downstream losses on a
/// pair of K=4 toy graphs.
inline GradFidelity gradient_fidelity(const ModelConfig& mcfg, const PretrainConfig& pc, const Objective& obj,
                                      std::uint64_t seed, const GradCheckOptions& opt = {}) {
    const Dataset ds = make_dataset(find_scenario("D1-toy"), 2, mix_seed(seed, 0x67726164));
    const auto graphs = build_graphs(ds, compute_norm_stats(ds));
    std::vector<const InterferenceGraph*> batch;
    for (const auto& g : graphs) batch.push_back(&g);

    GradFidelity out;
    ParameterSet student = init_params(mcfg, seed, HeadSet::Pretraining);
    ParameterSet teacher = student.subset(group::teacher);
    out.pretrain = grad_check(student, [&](ad::Graph& g) {
        ad::Var total;
        pretrain_batch_loss(g, student, teacher, mcfg, batch, pc.rho, pc.lambda, mix_seed(seed, 1), &total);
        return total;
    }, opt);
    ParameterSet model = init_params(mcfg, seed, HeadSet::Decision);
    out.downstream = grad_check(model, [&](ad::Graph& g) {
        Binder b(g, model);
        return downstream_loss(b, mcfg, batch, ds.scenario.p_max_w(), obj);
    }, opt);
    return out;
}

struct OracleComparison {
    std::size_t K = 0;
    double wmmse_utility = 0;
    double brute_utility = 0;
    double ratio() const { return wmmse_utility / brute_utility; }
};

/// WMMSE-Best against exhaustive search on small networks, alternating K=2
/// and K=3 over the scenario's geometry.
inline std::vector<OracleComparison> oracle_comparison(const ScenarioConfig& scenario, std::size_t n, std::uint64_t seed,
                                                       int starts, int grid, const Objective& obj = SumRate{}) {
    std::vector<OracleComparison> out(n);
    parallel_for(n, [&](std::size_t i) {
        ScenarioConfig sc = scenario;
        sc.K = 2 + i % 2;
        const ChannelSnapshot snap = sample_snapshot(sc, mix_seed(seed, 0x6f72, i));
        const double sigma2 = noise_power(sc);
        WmmseConfig wc;
        wc.n_starts = starts;
        wc.p_max = sc.p_max_w();
        const auto pw = wmmse_best(snap.H, sigma2, wc, mix_seed(seed, 0x7773, i), obj);
        const auto pb = brute_force(snap.H, sigma2, wc.p_max, grid, obj);
        out[i] = {sc.K, utility_of_powers(snap.H, pw, sigma2, obj), utility_of_powers(snap.H, pb, sigma2, obj)};
    });
    return out;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

namespace detail {

inline void write_or_print(const std::string& path, const std::string& text, std::ostream& out) {
    if (path.empty() || path == "-")
        out << text;
    else
        write_text_file(path, text);
}

inline Checkpoint require_checkpoint(const std::string& path) {
    if (path.empty()) throw MissingField("checkpoint");
    return load_checkpoint(path);
}

inline std::vector<double> parse_double_list(const std::string& s, const std::string& field) {
    std::vector<double> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) {
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw ConfigError("bad value for field '" + field + "': '" + item + "'");
        }
    }
    return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& s, const std::string& field) {
    std::vector<std::size_t> out;
    for (double v : parse_double_list(s, field)) {
        if (!(v >= 1) || v != std::floor(v)) throw ConfigError("bad value for field '" + field + "'");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

} // namespace detail

/// Runs one subcommand. `args` excludes the program name.
inline int cli_main(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    if (args.empty() || args[0] == "--help" || args[0] == "-h") {
        (args.empty() ? err : out) << "usage: iwgt <subcommand> [options]\nsubcommands:";
        for (const auto& s : subcommands()) (args.empty() ? err : out) << " " << s;
        (args.empty() ? err : out) << "\n";
        return args.empty() ? kExitUsage : 0;
    }
    const std::string cmd = args[0];
    if (std::find(subcommands().begin(), subcommands().end(), cmd) == subcommands().end()) {
        err << "error [usage]: unknown subcommand '" << cmd << "'\n";
        return kExitUsage;
    }

    CLI::App app{"iwgt " + cmd};
    std::string config_src = "toy";
    std::vector<std::string> overrides;
    app.add_option("--config", config_src, "config file or built-in name (toy, paper)");
    app.add_option("--set", overrides, "override a config field, e.g. pretrain.epochs=5");

    std::string scenario, out_path, data_path, ckpt_path, metrics_path, records_path, train_path, test_path;
    std::string objective, shots, ratios, rhos;
    std::vector<std::string> data_paths;
    std::optional<std::size_t> n, n_shot, epochs;
    std::optional<std::uint64_t> seed;
    std::optional<double> mask_ratio;
    bool text = false, scratch = false;
    int starts = 100, grid = 101;

    if (cmd == "gen") {
        app.add_option("--scenario", scenario, "scenario name (default: the config's)");
        app.add_option("--n", n, "number of snapshots");
        app.add_option("--seed", seed, "base seed");
        app.add_option("--out", out_path, "output dataset file");
        app.add_flag("--text", text, "write the text encoding");
    } else if (cmd == "pretrain") {
        app.add_option("--data", data_paths, "dataset files (default: generated from the config)");
        app.add_option("--out", out_path, "checkpoint directory");
        app.add_option("--metrics", metrics_path, "per-epoch metrics CSV");
        app.add_option("--epochs", epochs);
        app.add_option("--seed", seed);
    } else if (cmd == "finetune") {
        app.add_option("--checkpoint", ckpt_path, "pre-trained checkpoint directory");
        app.add_flag("--scratch", scratch, "start from a random backbone");
        app.add_option("--data", data_path, "training dataset file");
        app.add_option("--out", out_path, "checkpoint directory");
        app.add_option("--metrics", metrics_path, "per-epoch metrics CSV");
        app.add_option("--n-shot", n_shot);
        app.add_option("--objective", objective);
        app.add_option("--seed", seed);
    } else if (cmd == "eval") {
        app.add_option("--checkpoint", ckpt_path, "fine-tuned checkpoint directory");
        app.add_option("--data", data_path, "test dataset file");
        app.add_option("--out", out_path, "results CSV (default: stdout)");
        app.add_option("--records", records_path, "per-snapshot records CSV");
        app.add_option("--mask-ratio", mask_ratio);
        app.add_option("--objective", objective);
        app.add_option("--seed", seed);
    } else if (cmd == "sweep-fewshot") {
        app.add_option("--checkpoint", ckpt_path, "pre-trained checkpoint (omit for scratch rows only)");
        app.add_option("--train", train_path);
        app.add_option("--test", test_path);
        app.add_option("--shots", shots, "comma-separated shot counts");
        app.add_option("--objective", objective);
        app.add_option("--out", out_path);
    } else if (cmd == "sweep-scaling") {
        app.add_option("--pretrain-data", data_paths);
        app.add_option("--train", train_path);
        app.add_option("--test", test_path);
        app.add_option("--objective", objective);
        app.add_option("--out", out_path);
    } else if (cmd == "sweep-mask") {
        app.add_option("--checkpoint", ckpt_path, "fine-tuned checkpoint");
        app.add_option("--pretrain-rhos", rhos, "pre-train, fine-tune and score one model per ratio");
        app.add_option("--train", train_path);
        app.add_option("--test", test_path);
        app.add_option("--ratios", ratios, "comma-separated inference mask ratios");
        app.add_option("--objective", objective);
        app.add_option("--out", out_path);
    } else if (cmd == "gradcheck") {
        app.add_option("--seed", seed);
        app.add_option("--objective", objective);
    } else if (cmd == "oracle") {
        app.add_option("--n", n);
        app.add_option("--seed", seed);
        app.add_option("--starts", starts);
        app.add_option("--grid", grid);
    }

    try {
        std::vector<std::string> rest(args.rbegin(), args.rend() - 1);
        app.parse(rest);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error [usage]: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        ExperimentConfig cfg = load_config(config_src, overrides);
        if (!objective.empty()) cfg.finetune.objective = parse_objective(objective);
        const Objective& obj = cfg.finetune.objective;

        if (cmd == "gen") {
            if (out_path.empty()) throw MissingField("out");
            const ScenarioConfig sc = scenario.empty() ? cfg.scenario : find_scenario(scenario);
            const Dataset ds = generate_dataset(sc, n.value_or(cfg.n_test), seed.value_or(0), out_path,
                                                text ? DatasetEncoding::Text : DatasetEncoding::Binary);
            out << "wrote " << ds.size() << " snapshots of " << sc.scenario_id << " to " << out_path << "\n";
        } else if (cmd == "pretrain") {
            if (out_path.empty()) throw MissingField("out");
            if (epochs) cfg.pretrain.epochs = *epochs;
            if (seed) cfg.pretrain.seed = *seed;
            std::vector<Dataset> data;
            for (const auto& p : data_paths) data.push_back(read_dataset(p));
            if (data.empty()) data = config_pretrain_data(cfg);
            if (data.empty()) throw MissingField("data");
            std::string metrics = metrics_csv_header(false);
            const auto res = pretrain(data, cfg.model, cfg.pretrain, [&](const EpochMetrics& m) {
                metrics += metrics_csv_row(m, false);
            });
            save_checkpoint(out_path, res.checkpoint);
            if (!metrics_path.empty()) write_text_file(metrics_path, metrics);
            const auto& first = res.history.front();
            const auto& last = res.history.back();
            out << "pretrain: epochs=" << cfg.pretrain.epochs << " L_edge " << first.loss_edge << " -> " << last.loss_edge
                << ", L_cl " << first.loss_cl << " -> " << last.loss_cl << "\n";
        } else if (cmd == "finetune") {
            if (out_path.empty()) throw MissingField("out");
            if (ckpt_path.empty() && !scratch) throw MissingField("checkpoint");
            if (n_shot) cfg.finetune.n_shot = *n_shot;
            if (seed) cfg.finetune.seed = *seed;
            std::optional<Checkpoint> init;
            if (!ckpt_path.empty()) init = load_checkpoint(ckpt_path);
            const Dataset ds = data_path.empty() ? config_train_data(cfg) : read_dataset(data_path);
            std::string metrics = metrics_csv_header(true);
            const auto res = finetune(init, ds, cfg.finetune, cfg.model, [&](const EpochMetrics& m) {
                metrics += metrics_csv_row(m, true);
            });
            save_checkpoint(out_path, res.checkpoint);
            if (!metrics_path.empty()) write_text_file(metrics_path, metrics);
            out << "finetune: " << (init ? "pretrained" : "scratch") << " n_shot=" << cfg.finetune.n_shot
                << " objective=" << objective_name(obj) << " final utility " << res.history.back().loss_total << "\n";
        } else if (cmd == "eval") {
            const Checkpoint ck = detail::require_checkpoint(ckpt_path);
            if (mask_ratio) cfg.eval.mask_ratio = *mask_ratio;
            if (seed) cfg.eval.seed = *seed;
            const Dataset ds = data_path.empty() ? config_test_data(cfg) : read_dataset(data_path);
            const auto rep = evaluate(ck, ds, obj, cfg.eval);
            const auto rows = report_rows(rep, "eval", 0, param_count(ck.config));
            detail::write_or_print(out_path, results_csv(rows), out);
            if (!records_path.empty()) write_text_file(records_path, records_csv(rep));
        } else if (cmd == "sweep-fewshot") {
            std::optional<Checkpoint> pre;
            if (!ckpt_path.empty()) pre = load_checkpoint(ckpt_path);
            const auto shot_list = shots.empty() ? cfg.shots : detail::parse_size_list(shots, "shots");
            const Dataset train = train_path.empty() ? config_train_data(cfg) : read_dataset(train_path);
            const Dataset test = test_path.empty() ? config_test_data(cfg) : read_dataset(test_path);
            const auto rows = fewshot_sweep(pre, train, test, shot_list, cfg.finetune, cfg.model, cfg.eval);
            detail::write_or_print(out_path, results_csv(rows), out);
        } else if (cmd == "sweep-scaling") {
            if (cfg.scaling_models.empty()) throw MissingField("scaling_models");
            std::vector<Dataset> pre_data;
            for (const auto& p : data_paths) pre_data.push_back(read_dataset(p));
            if (pre_data.empty()) pre_data = config_pretrain_data(cfg);
            if (pre_data.empty()) throw MissingField("pretrain_scenarios");
            const Dataset train = train_path.empty() ? config_train_data(cfg) : read_dataset(train_path);
            const Dataset test = test_path.empty() ? config_test_data(cfg) : read_dataset(test_path);
            const auto rows = scaling_sweep(cfg.scaling_models, pre_data, train, test, cfg.pretrain, cfg.finetune, cfg.eval);
            detail::write_or_print(out_path, results_csv(rows), out);
        } else if (cmd == "sweep-mask") {
            const auto ratio_list = ratios.empty() ? cfg.mask_ratios : detail::parse_double_list(ratios, "ratios");
            const Dataset test = test_path.empty() ? config_test_data(cfg) : read_dataset(test_path);
            std::vector<ResultRow> rows;
            if (rhos.empty()) {
                const Checkpoint ck = detail::require_checkpoint(ckpt_path);
                rows = mask_sweep(ck, test, obj, ratio_list, cfg.eval);
            } else {
                const Baselines base = compute_baselines(test, obj, cfg.eval);
                const auto pre_data = config_pretrain_data(cfg);
                if (pre_data.empty()) throw MissingField("pretrain_scenarios");
                const Dataset train = train_path.empty() ? config_train_data(cfg) : read_dataset(train_path);
                for (double rho : detail::parse_double_list(rhos, "pretrain-rhos")) {
                    PretrainConfig pc = cfg.pretrain;
                    pc.rho = rho;
                    const auto pre = pretrain(pre_data, cfg.model, pc);
                    const auto ft = finetune(pre.checkpoint, train, cfg.finetune);
                    const auto part = mask_sweep(ft.checkpoint, test, obj, ratio_list, cfg.eval,
                                                 "pretrain_rho=" + csv_number(rho), cfg.finetune.n_shot, &base);
                    rows.insert(rows.end(), part.begin(), part.end());
                }
            }
            detail::write_or_print(out_path, results_csv(rows), out);
        } else if (cmd == "gradcheck") {
            const auto r = gradient_fidelity(cfg.model, cfg.pretrain, obj, seed.value_or(0));
            const double worst = std::max(r.pretrain.max_rel_error, r.downstream.max_rel_error);
            char buf[256];
            std::snprintf(buf, sizeof buf, "L_pre max_rel_error=%.3e (%zu coords, worst %s)\n",
                          r.pretrain.max_rel_error, r.pretrain.coords_checked, r.pretrain.worst_param.c_str());
            out << buf;
            std::snprintf(buf, sizeof buf, "L_down[%s] max_rel_error=%.3e (%zu coords, worst %s)\n",
                          objective_name(obj).c_str(), r.downstream.max_rel_error, r.downstream.coords_checked,
                          r.downstream.worst_param.c_str());
            out << buf;
            std::snprintf(buf, sizeof buf, "max relative error %.3e\n", worst);
            out << buf;
            if (!(worst < 1e-4)) {
                err << "error [numerical]: gradient check exceeds 1e-4\n";
                return kExitNumerical;
            }
        } else if (cmd == "oracle") {
            const auto res = oracle_comparison(cfg.scenario, n.value_or(100), seed.value_or(0), starts, grid);
            double sum = 0, worst = 1e300;
            std::size_t hits = 0;
            for (const auto& c : res) {
                sum += c.ratio();
                worst = std::min(worst, c.ratio());
                hits += c.ratio() >= 0.98;
            }
            char buf[256];
            std::snprintf(buf, sizeof buf, "oracle: n=%zu mean ratio %.6f, min %.6f, %zu/%zu at >= 0.98\n", res.size(),
                          sum / static_cast<double>(res.size()), worst, hits, res.size());
            out << buf;
        }
    } catch (const Error& e) {
        err << "error [" << e.category() << "]: " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const nlohmann::json::exception& e) {
        err << "error [config-error]: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::bad_alloc&) {
        err << "error [resource]: out of memory\n";
        return kExitNumerical;
    }
    return 0;
}

} // namespace iwgt::cli
