#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "channelsim.hpp"
#include "error.hpp"
#include "model.hpp"
#include "netgraph.hpp"
#include "objectives.hpp"
#include "parallel.hpp"
#include "solvers.hpp"
#include "training.hpp"

namespace iwgt {

struct EvalConfig {
    double mask_ratio = 0.0;
    std::uint64_t seed = 0;
    int wmmse_starts = 100;
    double wmmse_tol = 1e-5;
    int wmmse_max_iters = 500;

    void validate() const {
        if (!(mask_ratio >= 0 && mask_ratio <= 0.5)) throw InvalidArgument("EvalConfig: mask_ratio must be in [0, 0.5]");
        if (wmmse_starts < 1) throw InvalidArgument("EvalConfig: wmmse_starts must be >= 1");
    }

    WmmseConfig wmmse(double p_max) const {
        WmmseConfig w;
        w.n_starts = wmmse_starts;
        w.tol = wmmse_tol;
        w.max_iters = wmmse_max_iters;
        w.p_max = p_max;
        return w;
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalConfig, mask_ratio, seed, wmmse_starts, wmmse_tol, wmmse_max_iters)

enum class Method : std::size_t { Model = 0, WmmseBest = 1, FullReuse = 2 };
inline constexpr std::size_t kMethodCount = 3;

inline const char* method_name(Method m) {
    switch (m) {
    case Method::Model: return "model";
    case Method::WmmseBest: return "wmmse_best";
    case Method::FullReuse: return "full_reuse";
    }
    return "?";
}

/// One method on one snapshot.
struct MethodOutcome {
    double utility = 0;
    std::vector<double> rates;
    std::size_t violated_count = 0;  // users below the rate threshold
    double violated_rate_sum = 0;    // sum of their rates

    friend bool operator==(const MethodOutcome&, const MethodOutcome&) = default;
};

inline MethodOutcome method_outcome(const ChannelMatrix& H, std::span<const double> p, double sigma2, const Objective& obj) {
    MethodOutcome o;
    o.rates = rates(H, p, sigma2);
    o.utility = utility(o.rates, obj);
    const double thr = violation_threshold(obj);
    for (double r : o.rates)
        if (r < thr) {
            ++o.violated_count;
            o.violated_rate_sum += r;
        }
    return o;
}

struct SnapshotRecord {
    std::size_t index = 0;
    std::array<MethodOutcome, kMethodCount> methods;

    const MethodOutcome& operator[](Method m) const { return methods[static_cast<std::size_t>(m)]; }
    /// Per-snapshot model / WMMSE-Best ratio; NaN when the reference is zero.
    double model_ratio() const {
        const double ref = (*this)[Method::WmmseBest].utility;
        return ref == 0.0 ? std::numeric_limits<double>::quiet_NaN() : (*this)[Method::Model].utility / ref;
    }

    friend bool operator==(const SnapshotRecord&, const SnapshotRecord&) = default;
};

struct MethodAggregate {
    double mean_utility = 0;
    double ratio_vs_wmmse_best = 0;
    /// Mean rate over all users below the threshold, pooled over snapshots;
    /// NaN when no user falls below it.
    double violated_user_rate = 0;

    friend bool operator==(const MethodAggregate&, const MethodAggregate&) = default;
};

using Aggregates = std::array<MethodAggregate, kMethodCount>;

/// Ratio of means against WMMSE-Best. Throws UndefinedRatio on a zero reference.
inline Aggregates aggregate_records(std::span<const SnapshotRecord> records) {
    if (records.empty()) throw InvalidArgument("aggregate_records: no records");
    Aggregates agg{};
    std::array<double, kMethodCount> sum{};
    std::array<double, kMethodCount> vsum{};
    std::array<std::size_t, kMethodCount> vcount{};
    for (const auto& r : records)
        for (std::size_t m = 0; m < kMethodCount; ++m) {
            sum[m] += r.methods[m].utility;
            vsum[m] += r.methods[m].violated_rate_sum;
            vcount[m] += r.methods[m].violated_count;
        }
    const double n = static_cast<double>(records.size());
    const double ref = sum[static_cast<std::size_t>(Method::WmmseBest)] / n;
    for (std::size_t m = 0; m < kMethodCount; ++m) {
        agg[m].mean_utility = sum[m] / n;
        agg[m].ratio_vs_wmmse_best = normalized_ratio(agg[m].mean_utility, ref);
        agg[m].violated_user_rate =
            vcount[m] == 0 ? std::numeric_limits<double>::quiet_NaN() : vsum[m] / static_cast<double>(vcount[m]);
    }
    return agg;
}

struct EvalReport {
    std::string scenario;
    std::string objective;
    double mask_ratio = 0;
    std::uint64_t seed = 0;
    std::vector<SnapshotRecord> records;
    Aggregates aggregate{};

    const MethodAggregate& operator[](Method m) const { return aggregate[static_cast<std::size_t>(m)]; }
};

/// Reference solutions on full CSI, shared by every evaluation of one test set.
struct Baselines {
    std::vector<MethodOutcome> wmmse_best;
    std::vector<MethodOutcome> full_reuse;
};

inline std::uint64_t wmmse_seed_for(std::uint64_t seed, std::size_t index) { return mix_seed(seed, 0x776d6d73, index); }
inline std::uint64_t eval_mask_seed_for(std::uint64_t seed, std::size_t index) { return mix_seed(seed, 0x6d61736b, index); }

inline Baselines compute_baselines(const Dataset& ds, const Objective& obj, const EvalConfig& cfg) {
    cfg.validate();
    validate(obj);
    const double p_max = ds.scenario.p_max_w();
    const double sigma2 = noise_power(ds.scenario);
    const WmmseConfig wc = cfg.wmmse(p_max);
    Baselines b;
    b.wmmse_best.resize(ds.size());
    b.full_reuse.resize(ds.size());
    parallel_for(ds.size(), [&](std::size_t i) {
        const auto& H = ds.snapshots[i].H;
        b.wmmse_best[i] = method_outcome(H, wmmse_best(H, sigma2, wc, wmmse_seed_for(cfg.seed, i), obj), sigma2, obj);
        b.full_reuse[i] = method_outcome(H, full_reuse(H.K, p_max), sigma2, obj);
    });
    return b;
}

/// Maps (snapshot index, snapshot) to transmit powers.
using PowerPolicy = std::function<PowerVector(std::size_t, const ChannelSnapshot&)>;

inline EvalReport evaluate_policy(const PowerPolicy& policy, const Dataset& ds, const Objective& obj, const EvalConfig& cfg,
                                  const Baselines* cached = nullptr) {
    cfg.validate();
    validate(obj);
    if (ds.size() == 0) throw InvalidArgument("evaluate: empty dataset");
    std::optional<Baselines> own;
    if (!cached) own = compute_baselines(ds, obj, cfg);
    const Baselines& base = cached ? *cached : *own;
    if (base.wmmse_best.size() != ds.size() || base.full_reuse.size() != ds.size())
        throw InvalidArgument("evaluate: baselines were computed for a different dataset");

    const double p_max = ds.scenario.p_max_w();
    const double sigma2 = noise_power(ds.scenario);
    EvalReport rep;
    rep.scenario = ds.scenario.scenario_id;
    rep.objective = objective_name(obj);
    rep.mask_ratio = cfg.mask_ratio;
    rep.seed = cfg.seed;
    rep.records.resize(ds.size());
    parallel_for(ds.size(), [&](std::size_t i) {
        const auto& snap = ds.snapshots[i];
        PowerVector p = policy(i, snap);
        if (p.size() != snap.H.K) throw ShapeError("evaluate: policy returned the wrong number of powers");
        for (double x : p)
            if (!(x >= 0 && x <= p_max)) throw NumericalFailure("evaluate: policy power outside [0, p_max]");
        SnapshotRecord& r = rep.records[i];
        r.index = i;
        r.methods[static_cast<std::size_t>(Method::Model)] = method_outcome(snap.H, p, sigma2, obj);
        r.methods[static_cast<std::size_t>(Method::WmmseBest)] = base.wmmse_best[i];
        r.methods[static_cast<std::size_t>(Method::FullReuse)] = base.full_reuse[i];
    });
    rep.aggregate = aggregate_records(rep.records);
    return rep;
}

/// The model's powers from the (optionally masked) graph. Features are
/// standardized with the checkpoint's statistics.
inline PowerPolicy model_policy(const Checkpoint& ck, const ScenarioConfig& scenario, double mask_ratio, std::uint64_t seed) {
    ck.stats.validate();
    if (!ck.params.contains("head.w1")) throw InvalidArgument("evaluate: checkpoint has no decision head (fine-tune it first)");
    auto state = std::make_shared<Checkpoint>(ck);
    const double p_max = scenario.p_max_w();
    const double sigma2 = noise_power(scenario);
    return [state, p_max, sigma2, mask_ratio, seed](std::size_t i, const ChannelSnapshot& snap) {
        const InterferenceGraph g = build_graph(snap, state->stats, sigma2);
        const MaskView mask = mask_ratio > 0 ? mask_edges(g.K, mask_ratio, eval_mask_seed_for(seed, i)) : MaskView::none(g.K);
        return infer_powers(state->params, state->config, g, mask, p_max);
    };
}

inline EvalReport evaluate(const Checkpoint& ck, const Dataset& ds, const Objective& obj, const EvalConfig& cfg,
                           const Baselines* cached = nullptr) {
    cfg.validate();
    return evaluate_policy(model_policy(ck, ds.scenario, cfg.mask_ratio, cfg.seed), ds, obj, cfg, cached);
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

struct ResultRow {
    std::string experiment;
    std::string scenario;
    std::string objective;
    std::string method;
    std::size_t n_shot = 0;
    double mask_ratio = 0;
    std::size_t param_count = 0;
    std::uint64_t seed = 0;
    double mean_utility = 0;
    double ratio_vs_wmmse_best = 0;
    double violated_user_rate = 0;

    friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

inline constexpr const char* kResultsHeader =
    "experiment,scenario,objective,method,n_shot,mask_ratio,param_count,seed,mean_utility,ratio_vs_wmmse_best,"
    "violated_user_rate";

/// Shortest round-trip decimal form; "nan" for NaN.
inline std::string csv_number(double v) {
    if (std::isnan(v)) return "nan";
    char buf[32];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

inline std::string results_csv(std::span<const ResultRow> rows) {
    std::string out = std::string(kResultsHeader) + "\n";
    for (const auto& r : rows) {
        out += r.experiment + "," + r.scenario + "," + r.objective + "," + r.method + "," + std::to_string(r.n_shot) + "," +
               csv_number(r.mask_ratio) + "," + std::to_string(r.param_count) + "," + std::to_string(r.seed) + "," +
               csv_number(r.mean_utility) + "," + csv_number(r.ratio_vs_wmmse_best) + "," +
               csv_number(r.violated_user_rate) + "\n";
    }
    return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

inline std::vector<ResultRow> parse_results_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kResultsHeader) throw ConfigError("results CSV: missing or unexpected header");
    std::vector<ResultRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c = split_csv_line(line);
        if (c.size() != 11) throw ConfigError("results CSV: expected 11 cells, got " + std::to_string(c.size()));
        ResultRow r;
        r.experiment = c[0];
        r.scenario = c[1];
        r.objective = c[2];
        r.method = c[3];
        r.n_shot = std::stoull(c[4]);
        r.mask_ratio = std::stod(c[5]);
        r.param_count = std::stoull(c[6]);
        r.seed = std::stoull(c[7]);
        r.mean_utility = std::stod(c[8]);
        r.ratio_vs_wmmse_best = std::stod(c[9]);
        r.violated_user_rate = std::stod(c[10]);
        rows.push_back(std::move(r));
    }
    return rows;
}

/// One row per method of a report.
inline std::vector<ResultRow> report_rows(const EvalReport& rep, const std::string& experiment, std::size_t n_shot,
                                          std::size_t model_param_count) {
    std::vector<ResultRow> rows;
    for (std::size_t m = 0; m < kMethodCount; ++m) {
        const auto method = static_cast<Method>(m);
        ResultRow r;
        r.experiment = experiment;
        r.scenario = rep.scenario;
        r.objective = rep.objective;
        r.method = method_name(method);
        r.n_shot = method == Method::Model ? n_shot : 0;
        r.mask_ratio = method == Method::Model ? rep.mask_ratio : 0.0;
        r.param_count = method == Method::Model ? model_param_count : 0;
        r.seed = rep.seed;
        r.mean_utility = rep.aggregate[m].mean_utility;
        r.ratio_vs_wmmse_best = rep.aggregate[m].ratio_vs_wmmse_best;
        r.violated_user_rate = rep.aggregate[m].violated_user_rate;
        rows.push_back(std::move(r));
    }
    return rows;
}

inline ResultRow model_row(const EvalReport& rep, const std::string& experiment, const std::string& method,
                           std::size_t n_shot, std::size_t param_count) {
    ResultRow r = report_rows(rep, experiment, n_shot, param_count)[static_cast<std::size_t>(Method::Model)];
    r.method = method;
    return r;
}

inline constexpr const char* kRecordsHeader = "snapshot,method,utility,ratio_vs_wmmse_best,violated_count,violated_rate_sum,rates";

/// Per-snapshot records; rates are space-separated. Every aggregate in the
/// matching results file can be recomputed from these lines.
inline std::string records_csv(const EvalReport& rep) {
    std::string out = std::string(kRecordsHeader) + "\n";
    for (const auto& r : rep.records)
        for (std::size_t m = 0; m < kMethodCount; ++m) {
            const auto& o = r.methods[m];
            const double ref = r[Method::WmmseBest].utility;
            out += std::to_string(r.index) + "," + method_name(static_cast<Method>(m)) + "," + csv_number(o.utility) + "," +
                   csv_number(ref == 0.0 ? std::numeric_limits<double>::quiet_NaN() : o.utility / ref) + "," +
                   std::to_string(o.violated_count) + "," + csv_number(o.violated_rate_sum) + ",";
            for (std::size_t k = 0; k < o.rates.size(); ++k) out += (k ? " " : "") + csv_number(o.rates[k]);
            out += "\n";
        }
    return out;
}

inline std::vector<SnapshotRecord> parse_records_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kRecordsHeader) throw ConfigError("records CSV: missing or unexpected header");
    std::vector<SnapshotRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c = split_csv_line(line);
        if (c.size() != 7) throw ConfigError("records CSV: expected 7 cells");
        const std::size_t idx = std::stoull(c[0]);
        if (out.empty() || out.back().index != idx) {
            out.emplace_back();
            out.back().index = idx;
        }
        std::size_t m = 0;
        while (m < kMethodCount && c[1] != method_name(static_cast<Method>(m))) ++m;
        if (m == kMethodCount) throw ConfigError("records CSV: unknown method '" + c[1] + "'");
        MethodOutcome& o = out.back().methods[m];
        o.utility = std::stod(c[2]);
        o.violated_count = std::stoull(c[4]);
        o.violated_rate_sum = std::stod(c[5]);
        std::istringstream rs(c[6]);
        for (double x; rs >> x;) o.rates.push_back(x);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FileError("cannot open " + path + " for writing");
    f << text;
    if (!f) throw FileError("write failed for " + path);
}

/// Fine-tunes from the pre-trained checkpoint (when given) and from scratch at
/// each shot count; every run is scored on the same test set.
inline std::vector<ResultRow> fewshot_sweep(const std::optional<Checkpoint>& pretrained, const Dataset& train,
                                            const Dataset& test, std::span<const std::size_t> shots,
                                            const FinetuneConfig& ft, const ModelConfig& scratch_cfg,
                                            const EvalConfig& ev) {
    for (auto n : shots)
        if (n > train.size())
            throw DatasetTooSmall("sweep-fewshot: " + std::to_string(n) + " shots requested, training set has " +
                                  std::to_string(train.size()));
    const Baselines base = compute_baselines(test, ft.objective, ev);
    std::vector<ResultRow> rows;
    for (auto n : shots) {
        FinetuneConfig cfg = ft;
        cfg.n_shot = n;
        for (bool use_pre : {true, false}) {
            if (use_pre && !pretrained) continue;
            const auto res = finetune(use_pre ? pretrained : std::nullopt, train, cfg, scratch_cfg);
            const auto rep = evaluate(res.checkpoint, test, ft.objective, ev, &base);
            rows.push_back(model_row(rep, "fewshot", use_pre ? "pretrained" : "scratch", n, param_count(res.checkpoint.config)));
        }
    }
    return rows;
}

/// Pre-trains and fine-tunes each model config at a fixed budget. Rows are
/// sorted by parameter count.
inline std::vector<ResultRow> scaling_sweep(std::span<const ModelConfig> models, std::span<const Dataset> pretrain_data,
                                            const Dataset& train, const Dataset& test, const PretrainConfig& pc,
                                            const FinetuneConfig& ft, const EvalConfig& ev) {
    const Baselines base = compute_baselines(test, ft.objective, ev);
    std::vector<ResultRow> rows;
    for (const auto& mc : models) {
        mc.validate();
        const auto pre = pretrain(pretrain_data, mc, pc);
        const auto res = finetune(pre.checkpoint, train, ft);
        const auto rep = evaluate(res.checkpoint, test, ft.objective, ev, &base);
        rows.push_back(model_row(rep, "scaling", "pretrained", ft.n_shot, param_count(mc)));
    }
    std::stable_sort(rows.begin(), rows.end(),
                     [](const ResultRow& a, const ResultRow& b) { return a.param_count < b.param_count; });
    return rows;
}

/// Inference-time robustness: the same model scored with a fraction of the
/// edges withheld. The reference stays on full CSI.
inline std::vector<ResultRow> mask_sweep(const Checkpoint& ck, const Dataset& test, const Objective& obj,
                                         std::span<const double> ratios, const EvalConfig& ev,
                                         const std::string& method = "model", std::size_t n_shot = 0,
                                         const Baselines* cached = nullptr) {
    std::optional<Baselines> own;
    if (!cached) own = compute_baselines(test, obj, ev);
    const Baselines& base = cached ? *cached : *own;
    std::vector<ResultRow> rows;
    for (double r : ratios) {
        EvalConfig cfg = ev;
        cfg.mask_ratio = r;
        const auto rep = evaluate(ck, test, obj, cfg, &base);
        rows.push_back(model_row(rep, "mask", method, n_shot, param_count(ck.config)));
    }
    return rows;
}

} // namespace iwgt
