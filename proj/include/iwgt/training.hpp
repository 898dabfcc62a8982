#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "autodiff.hpp"
#include "channelsim.hpp"
#include "error.hpp"
#include "model.hpp"
#include "netgraph.hpp"
#include "objectives.hpp"
#include "optim.hpp"

namespace iwgt {

struct PretrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 512;
    double lr = 1e-4;
    double rho = 0.3;
    double tau = 0.996;
    double lambda = 0.1;
    double scheduler_factor = 0.5;
    std::size_t scheduler_patience = 10;
    std::uint64_t seed = 0;
    double val_fraction = 0.1;
    double grad_clip = 5.0;

    void validate() const {
        if (!(tau > 0 && tau < 1)) throw InvalidArgument("PretrainConfig: tau must be in (0, 1)");
        if (!(rho >= 0 && rho <= 1)) throw InvalidArgument("PretrainConfig: rho must be in [0, 1]");
        if (!(lambda >= 0)) throw InvalidArgument("PretrainConfig: lambda must be >= 0");
        if (batch_size < 1) throw InvalidArgument("PretrainConfig: batch_size must be >= 1");
        if (!(lr > 0)) throw InvalidArgument("PretrainConfig: lr must be > 0");
        if (!(val_fraction >= 0 && val_fraction < 1)) throw InvalidArgument("PretrainConfig: val_fraction must be in [0, 1)");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PretrainConfig, epochs, batch_size, lr, rho, tau, lambda,
                                                scheduler_factor, scheduler_patience, seed, val_fraction, grad_clip)

struct FinetuneConfig {
    std::size_t warmup_epochs = 10;
    std::size_t full_epochs = 100;
    double backbone_lr = 1e-4;
    double head_lr = 1e-3;
    Objective objective = SumRate{};
    std::size_t n_shot = 64;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    double grad_clip = 5.0;

    void validate() const {
        iwgt::validate(objective);
        if (n_shot < 1) throw InvalidArgument("FinetuneConfig: n_shot must be >= 1");
        if (batch_size < 1) throw InvalidArgument("FinetuneConfig: batch_size must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Differentiable sum utility of the powers p (K x 1) on one graph. Gains and
/// noise are rescaled by 1/sigma2, which leaves every SINR unchanged.
inline ad::Var utility_var(ad::Graph& g, const InterferenceGraph& graph, ad::Var p, const Objective& obj) {
    const std::size_t K = graph.K;
    if (p.shape() != Shape{K, 1}) throw ShapeError("utility_var: powers must be K x 1, got " + shape_str(p.shape()));
    const auto gains = graph.H.power_gains();
    Tensor cross(Shape{K, K}, 0.0), direct(Shape{K, 1});
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t j = 0; j < K; ++j) {
            const double v = gains[k * K + j] / graph.sigma2;
            if (k == j) direct.data[k] = v;
            else cross.data[k * K + j] = v;
        }
    const ad::Var signal = ad::mul(g.constant(std::move(direct)), p);
    const ad::Var denom = ad::add_scalar(ad::matmul(g.constant(std::move(cross)), p), 1.0);
    const ad::Var rate = ad::scale(ad::log(ad::add_scalar(ad::div(signal, denom), 1.0)), 1.0 / std::numbers::ln2);

    struct {
        ad::Graph& g;
        ad::Var r;
        ad::Var operator()(const SumRate&) const { return ad::sum(r); }
        ad::Var operator()(const ProportionalFairness& pf) const { return ad::sum(ad::log(ad::clamp_min(r, pf.epsilon))); }
        ad::Var operator()(const QoS& q) const {
            // relu(r_min - r) has subgradient 0 at r == r_min.
            const ad::Var shortfall = ad::relu(ad::add_scalar(ad::scale(r, -1.0), q.r_min));
            return ad::sub(ad::sum(r), ad::scale(ad::sum(shortfall), q.alpha));
        }
    } v{g, rate};
    return std::visit(v, obj);
}

struct PretrainGraphLoss {
    ad::Var edge;
    ad::Var cl;
    ad::Var total;
};

/// Masked-edge reconstruction plus teacher/student consistency on one graph.
/// The teacher output is detached, so no gradient ever reaches the teacher.
inline PretrainGraphLoss pretrain_graph_loss(Binder& student, Binder& teacher, const ModelConfig& cfg,
                                             const InterferenceGraph& graph, const MaskView& mask, double lambda) {
    ad::Graph& g = student.graph();
    const auto pairs = mask.pairs();
    if (pairs.empty() && lambda == 0.0)
        throw DegenerateLoss("pretrain: empty mask with lambda = 0 leaves nothing to learn");

    const ad::Var zs = backbone_forward(student, cfg, graph, mask);
    ad::Var edge = g.constant(Tensor::scalar(0.0));
    if (!pairs.empty()) {
        Tensor target(Shape{pairs.size(), cfg.F_e});
        for (std::size_t i = 0; i < pairs.size(); ++i)
            for (std::size_t f = 0; f < cfg.F_e; ++f) target.at(i, f) = graph.edge(pairs[i].first, pairs[i].second, f);
        const ad::Var diff = ad::sub(edge_decode(student, zs, pairs), g.constant(std::move(target)));
        edge = ad::scale(ad::sum(ad::mul(diff, diff)), 1.0 / static_cast<double>(pairs.size()));
    }

    const ad::Var us = project_and_predict(student, zs, Role::Student);
    const ad::Var zt = backbone_forward(teacher, cfg, graph);
    const ad::Var yt = ad::detach(project_and_predict(teacher, zt, Role::Teacher));
    const ad::Var cl = ad::scale(ad::mean(ad::cosine_rows(us, yt)), -1.0);
    return {edge, cl, ad::add(edge, ad::scale(cl, lambda))};
}

/// Negative mean utility over a batch of graphs.
inline ad::Var downstream_loss(Binder& p, const ModelConfig& cfg, std::span<const InterferenceGraph* const> batch,
                               double p_max, const Objective& obj) {
    ad::Graph& g = p.graph();
    std::vector<ad::Var> terms;
    for (const InterferenceGraph* gr : batch) {
        const ad::Var powers = decision_head(p, backbone_forward(p, cfg, *gr), p_max);
        terms.push_back(utility_var(g, *gr, powers, obj));
    }
    ad::Var total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
    return ad::scale(total, -1.0 / static_cast<double>(terms.size()));
}

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

struct PretrainStepResult {
    double loss_edge = 0;
    double loss_cl = 0;
    double loss_total = 0;
    double grad_norm = 0;
};

inline std::uint64_t mask_seed_for(std::uint64_t seed, std::uint64_t step, std::uint64_t item) {
    return mix_seed(seed, step, item);
}

/// Batch loss, without any parameter update. Masks are drawn from mask_seed.
inline PretrainStepResult pretrain_batch_loss(ad::Graph& g, ParameterSet& student, ParameterSet& teacher,
                                              const ModelConfig& model_cfg, std::span<const InterferenceGraph* const> batch,
                                              double rho, double lambda, std::uint64_t mask_seed, ad::Var* total_out) {
    if (batch.empty()) throw InvalidArgument("pretrain: empty batch");
    Binder sb(g, student);
    Binder tb(g, teacher);
    ad::Var total{}, edge{}, cl{};
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const MaskView mask = mask_edges(batch[i]->K, rho, mask_seed_for(mask_seed, 0, i));
        const auto l = pretrain_graph_loss(sb, tb, model_cfg, *batch[i], mask, lambda);
        total = i == 0 ? l.total : ad::add(total, l.total);
        edge = i == 0 ? l.edge : ad::add(edge, l.edge);
        cl = i == 0 ? l.cl : ad::add(cl, l.cl);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    total = ad::scale(total, inv);
    if (total_out) *total_out = total;
    return {edge.value().item() * inv, cl.value().item() * inv, total.value().item(), 0.0};
}

/// One optimization step on the student; the teacher is read-only here.
inline PretrainStepResult pretrain_step(std::span<const InterferenceGraph* const> batch, ParameterSet& student,
                                        ParameterSet& teacher, AdamState& adam, const ModelConfig& model_cfg,
                                        const PretrainConfig& cfg, double lr, std::uint64_t mask_seed) {
    student.zero_grad();
    ad::Graph g;
    ad::Var total;
    PretrainStepResult r = pretrain_batch_loss(g, student, teacher, model_cfg, batch, cfg.rho, cfg.lambda, mask_seed, &total);
    g.backward(total);
    r.grad_norm = cfg.grad_clip > 0 ? clip_grad_norm(student, cfg.grad_clip) : 0.0;
    adam_step(student, adam, lr);
    return r;
}

/// theta_t <- tau theta_t + (1 - tau) theta_s over every teacher parameter.
inline void ema_update(ParameterSet& teacher, const ParameterSet& student, double tau) {
    for (auto& e : teacher.entries()) {
        const Tensor& s = student.value(e.name);
        if (s.shape != e.value.shape)
            throw ShapeError("ema_update: '" + e.name + "' is " + shape_str(e.value.shape) + " in teacher, " +
                             shape_str(s.shape) + " in student");
        for (std::size_t i = 0; i < s.size(); ++i) e.value.data[i] = tau * e.value.data[i] + (1.0 - tau) * s.data[i];
    }
}

/// Reduce-on-plateau: multiplies the rate by `factor` after `patience`
/// consecutive epochs without an improvement of at least min_delta.
class LrSchedule {
public:
    LrSchedule(double lr, double factor, std::size_t patience, double min_delta = 1e-8)
        : lr_(lr), factor_(factor), patience_(patience), min_delta_(min_delta) {}

    double step(double val_loss) {
        if (val_loss < best_ - min_delta_) {
            best_ = val_loss;
            bad_ = 0;
        } else if (++bad_ >= patience_) {
            lr_ *= factor_;
            bad_ = 0;
        }
        return lr_;
    }

    double lr() const { return lr_; }
    std::size_t bad_epochs() const { return bad_; }

private:
    double lr_;
    double factor_;
    std::size_t patience_;
    double min_delta_;
    double best_ = std::numeric_limits<double>::infinity();
    std::size_t bad_ = 0;
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double lr = 0;
    double loss_edge = 0;
    double loss_cl = 0;
    double loss_total = 0; // L_pre, or the mean utility for fine-tuning
    double seconds = 0;
};

inline std::string metrics_csv_header(bool finetune) {
    return finetune ? "epoch,lr,utility,seconds\n" : "epoch,lr,L_edge,L_cl,L_pre,seconds\n";
}

inline std::string metrics_csv_row(const EpochMetrics& m, bool finetune) {
    char buf[256];
    if (finetune)
        std::snprintf(buf, sizeof buf, "%zu,%.6g,%.10g,%.3f\n", m.epoch, m.lr, m.loss_total, m.seconds);
    else
        std::snprintf(buf, sizeof buf, "%zu,%.6g,%.10g,%.10g,%.10g,%.3f\n", m.epoch, m.lr, m.loss_edge, m.loss_cl,
                      m.loss_total, m.seconds);
    return buf;
}

/// Graphs of a dataset, with features standardized by `stats`.
inline std::vector<InterferenceGraph> build_graphs(const Dataset& ds, const NormStats& stats) {
    const double sigma2 = noise_power(ds.scenario);
    std::vector<InterferenceGraph> out(ds.size());
    parallel_for(ds.size(), [&](std::size_t i) { out[i] = build_graph(ds.snapshots[i], stats, sigma2); });
    return out;
}

struct PretrainResult {
    Checkpoint checkpoint;
    ParameterSet teacher;
    /// Entry 0 is the untrained model's validation loss.
    std::vector<EpochMetrics> history;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Mean validation losses with masks fixed per validation graph.
inline PretrainStepResult pretrain_validation(ParameterSet& student, ParameterSet& teacher, const ModelConfig& model_cfg,
                                              const PretrainConfig& cfg, std::span<const InterferenceGraph* const> val) {
    PretrainStepResult acc;
    if (val.empty()) return acc;
    for (std::size_t i = 0; i < val.size(); ++i) {
        ad::Graph g;
        const auto r = pretrain_batch_loss(g, student, teacher, model_cfg, val.subspan(i, 1), cfg.rho, cfg.lambda,
                                           mix_seed(cfg.seed, 0xfa11da7e, i), nullptr);
        acc.loss_edge += r.loss_edge;
        acc.loss_cl += r.loss_cl;
        acc.loss_total += r.loss_total;
    }
    const double n = static_cast<double>(val.size());
    acc.loss_edge /= n;
    acc.loss_cl /= n;
    acc.loss_total /= n;
    return acc;
}

/// Train/validation split of n items, fixed by seed. Validation gets
/// round(fraction * n) items, at least one when fraction > 0 and n >= 2.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double fraction,
                                                                                   std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = make_rng(seed, Stream::Split);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5));
    if (fraction > 0 && n >= 2) n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
    if (n < 2) n_val = 0;
    std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
    return {train, val};
}

/// Hybrid self-supervised pre-training over one or more datasets. The
/// teacher starts as a copy of the student's backbone and projector.
inline PretrainResult pretrain(std::span<const Dataset> datasets, const ModelConfig& model_cfg, const PretrainConfig& cfg,
                               const EpochCallback& on_epoch = {}) {
    cfg.validate();
    model_cfg.validate();
    if (datasets.empty()) throw InvalidArgument("pretrain: at least one dataset is required");
    std::vector<ChannelSnapshot> all;
    for (const auto& ds : datasets) all.insert(all.end(), ds.snapshots.begin(), ds.snapshots.end());
    const NormStats stats = compute_norm_stats(std::span<const ChannelSnapshot>(all));

    std::vector<InterferenceGraph> graphs;
    for (const auto& ds : datasets) {
        auto g = build_graphs(ds, stats);
        std::move(g.begin(), g.end(), std::back_inserter(graphs));
    }
    auto [train_idx, val_idx] = split_indices(graphs.size(), cfg.val_fraction, cfg.seed);
    if (train_idx.empty()) throw DatasetTooSmall("pretrain: no training graphs after the validation split");
    std::vector<const InterferenceGraph*> val;
    for (auto i : val_idx) val.push_back(&graphs[i]);

    PretrainResult res;
    res.checkpoint.config = model_cfg;
    res.checkpoint.stats = stats;
    res.checkpoint.params = init_params(model_cfg, cfg.seed, HeadSet::Pretraining);
    ParameterSet& student = res.checkpoint.params;
    res.teacher = student.subset(group::teacher);

    const auto t0 = std::chrono::steady_clock::now();
    auto seconds = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

    LrSchedule sched(cfg.lr, cfg.scheduler_factor, cfg.scheduler_patience);
    {
        const auto v = pretrain_validation(student, res.teacher, model_cfg, cfg, val);
        EpochMetrics m{0, sched.lr(), v.loss_edge, v.loss_cl, v.loss_total, seconds()};
        res.history.push_back(m);
        if (on_epoch) on_epoch(m);
    }

    AdamState adam;
    std::uint64_t step = 0;
    std::vector<double> digest_values;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng shuffle_rng = make_rng(cfg.seed, Stream::Shuffle, epoch);
        std::vector<std::size_t> order = train_idx;
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        const double lr = sched.lr();
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            std::vector<const InterferenceGraph*> batch;
            for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) batch.push_back(&graphs[order[i]]);
            const auto r = pretrain_step(batch, student, res.teacher, adam, model_cfg, cfg, lr, mix_seed(cfg.seed, ++step));
            ema_update(res.teacher, student, cfg.tau);
            digest_values.push_back(r.loss_total);
        }
        const auto v = val.empty() ? PretrainStepResult{} : pretrain_validation(student, res.teacher, model_cfg, cfg, val);
        EpochMetrics m{epoch, lr, v.loss_edge, v.loss_cl, v.loss_total, seconds()};
        if (!val.empty()) sched.step(v.loss_total);
        res.history.push_back(m);
        if (on_epoch) on_epoch(m);
    }
    res.checkpoint.metadata = TrainingMetadata{cfg.epochs, cfg.seed, loss_digest(digest_values), "pretrain"};
    return res;
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

struct FinetuneResult {
    Checkpoint checkpoint;
    std::vector<EpochMetrics> history;
};

/// Mean utility of the model's powers over graphs (no masking).
inline double mean_model_utility(ParameterSet& ps, const ModelConfig& cfg, std::span<const InterferenceGraph> graphs,
                                 double p_max, const Objective& obj) {
    double s = 0;
    for (const auto& gr : graphs) s += utility_of_powers(gr.H, infer_powers(ps, cfg, gr, p_max), gr.sigma2, obj);
    return graphs.empty() ? 0.0 : s / static_cast<double>(graphs.size());
}

/// Two-stage adaptation: head-only warmup with the backbone frozen, then
/// joint training with separate backbone and head learning rates.
/// Without a checkpoint the backbone is randomly initialized (from scratch)
/// and normalization statistics come from the training snapshots.
inline FinetuneResult finetune(const std::optional<Checkpoint>& init, const Dataset& dataset, const FinetuneConfig& cfg,
                               const ModelConfig& scratch_cfg = {}, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (dataset.size() < cfg.n_shot)
        throw DatasetTooSmall("finetune: dataset has " + std::to_string(dataset.size()) + " snapshots, n_shot is " +
                              std::to_string(cfg.n_shot));
    const std::span<const ChannelSnapshot> shots(dataset.snapshots.data(), cfg.n_shot);

    FinetuneResult res;
    Checkpoint& ck = res.checkpoint;
    if (init) {
        ck.config = init->config;
        ck.stats = init->stats;
        ck.params = init->params.subset([](const std::string& n) { return group::backbone(n) || group::head(n); });
        if (!ck.params.contains("head.w1")) {
            Rng rng = make_rng(cfg.seed, Stream::Init, 0x4ead);
            add_decision_head(ck.params, ck.config, rng);
        }
    } else {
        ck.config = scratch_cfg;
        ck.stats = compute_norm_stats(shots);
        ck.params = init_params(scratch_cfg, cfg.seed, HeadSet::Decision);
    }
    const ModelConfig& mcfg = ck.config;
    const double p_max = dataset.scenario.p_max_w();
    const double sigma2 = noise_power(dataset.scenario);
    std::vector<InterferenceGraph> graphs(shots.size());
    for (std::size_t i = 0; i < shots.size(); ++i) graphs[i] = build_graph(shots[i], ck.stats, sigma2);

    const auto t0 = std::chrono::steady_clock::now();
    AdamState adam;
    std::vector<double> digest_values;
    const std::size_t total_epochs = cfg.warmup_epochs + cfg.full_epochs;
    for (std::size_t epoch = 1; epoch <= total_epochs; ++epoch) {
        const bool warmup = epoch <= cfg.warmup_epochs;
        const auto trainable = [warmup](const std::string& n) { return !warmup || !group::backbone(n); };
        const LrFn lr_of = [&, warmup](const std::string& n) {
            if (group::head(n)) return cfg.head_lr;
            return warmup ? 0.0 : cfg.backbone_lr;
        };
        Rng shuffle_rng = make_rng(cfg.seed, Stream::Shuffle, epoch);
        std::vector<std::size_t> order(graphs.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_utility = 0;
        std::size_t n_batches = 0;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            std::vector<const InterferenceGraph*> batch;
            for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) batch.push_back(&graphs[order[i]]);
            ck.params.zero_grad();
            ad::Graph g;
            Binder binder(g, ck.params, trainable);
            const ad::Var loss = downstream_loss(binder, mcfg, batch, p_max, cfg.objective);
            g.backward(loss);
            if (cfg.grad_clip > 0) clip_grad_norm(ck.params, cfg.grad_clip);
            adam_step(ck.params, adam, lr_of);
            epoch_utility += -loss.value().item();
            digest_values.push_back(loss.value().item());
            ++n_batches;
        }
        EpochMetrics m;
        m.epoch = epoch;
        m.lr = warmup ? cfg.head_lr : cfg.backbone_lr;
        m.loss_total = epoch_utility / static_cast<double>(std::max<std::size_t>(n_batches, 1));
        m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.history.push_back(m);
        if (on_epoch) on_epoch(m);
    }
    ck.metadata = TrainingMetadata{total_epochs, cfg.seed, loss_digest(digest_values), "finetune"};
    return res;
}

} // namespace iwgt
