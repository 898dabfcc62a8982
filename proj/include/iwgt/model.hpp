#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "autodiff.hpp"
#include "error.hpp"
#include "netgraph.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace iwgt {

struct ModelConfig {
    std::size_t L = 2;
    std::size_t d_model = 32;
    std::size_t M = 4;
    std::size_t d_ffn = 64;
    std::size_t d_proj = 16;
    std::size_t d_pred_hidden = 16;
    std::size_t F_n = kNodeFeatures;
    std::size_t F_e = kEdgeFeatures;

    std::size_t d_head() const { return d_model / M; }
    std::size_t d_decision_hidden() const { return std::max<std::size_t>(1, d_model / 4); }

    void validate() const {
        if (M == 0 || d_model == 0 || d_model % M != 0)
            throw InvalidArgument("ModelConfig: d_model (" + std::to_string(d_model) + ") must be divisible by M (" +
                                  std::to_string(M) + ")");
        if (d_ffn == 0 || d_proj == 0 || d_pred_hidden == 0) throw InvalidArgument("ModelConfig: widths must be > 0");
        if (F_n != kNodeFeatures || F_e != kEdgeFeatures)
            throw InvalidArgument("ModelConfig: feature widths must be F_n=1, F_e=2");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, L, d_model, M, d_ffn, d_proj, d_pred_hidden, F_n, F_e)

/// Parameter groups, by name prefix.
namespace group {
inline bool backbone(const std::string& n) { return n.starts_with("backbone."); }
inline bool projector(const std::string& n) { return n.starts_with("projector."); }
inline bool predictor(const std::string& n) { return n.starts_with("predictor."); }
inline bool decoder(const std::string& n) { return n.starts_with("decoder."); }
inline bool head(const std::string& n) { return n.starts_with("head."); }
/// Parameters mirrored by the teacher and updated by EMA.
inline bool teacher(const std::string& n) { return backbone(n) || projector(n); }
} // namespace group

namespace detail {

inline void add_affine(ParameterSet& ps, const std::string& w, const std::string& b, std::size_t in, std::size_t out,
                       Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-limit, limit);
    Tensor W(Shape{in, out});
    for (auto& x : W.data) x = u(rng);
    ps.add(w, std::move(W));
    if (!b.empty()) ps.add(b, Tensor(Shape{out}, 0.0));
}

inline std::string layer_prefix(std::size_t l) { return "backbone.layer" + std::to_string(l) + "."; }

} // namespace detail

enum class HeadSet : unsigned {
    Decoder = 1,
    Projector = 2,
    Predictor = 4,
    Decision = 8,
    Pretraining = 1 | 2 | 4,
    All = 1 | 2 | 4 | 8,
};

inline bool has(HeadSet set, HeadSet h) { return (static_cast<unsigned>(set) & static_cast<unsigned>(h)) != 0; }

inline void add_decision_head(ParameterSet& ps, const ModelConfig& cfg, Rng& rng) {
    detail::add_affine(ps, "head.w1", "head.b1", cfg.d_model, cfg.d_decision_hidden(), rng);
    detail::add_affine(ps, "head.w2", "head.b2", cfg.d_decision_hidden(), 1, rng);
}

/// Glorot-uniform affine weights, zero biases, unit layer-norm gains, zero
/// self bias. The mask token starts at a small N(0, 0.02^2) draw. The bias projector, mask token and self bias
/// exist only when there is at least one attention layer.
inline ParameterSet init_params(const ModelConfig& cfg, std::uint64_t seed, HeadSet heads = HeadSet::All) {
    cfg.validate();
    Rng rng = make_rng(seed, Stream::Init);
    ParameterSet ps;
    const std::size_t d = cfg.d_model;
    detail::add_affine(ps, "backbone.enc.w1", "backbone.enc.b1", cfg.F_n, d, rng);
    detail::add_affine(ps, "backbone.enc.w2", "backbone.enc.b2", d, d, rng);
    if (cfg.L > 0) {
        detail::add_affine(ps, "backbone.bias.w1", "backbone.bias.b1", cfg.F_e, 2 * cfg.M, rng);
        detail::add_affine(ps, "backbone.bias.w2", "backbone.bias.b2", 2 * cfg.M, cfg.M, rng);
        Tensor token(Shape{cfg.F_e});
        std::normal_distribution<double> tok(0.0, 0.02);
        for (double& x : token.data) x = tok(rng);
        ps.add("backbone.mask_token", std::move(token));
        ps.add("backbone.self_bias", Tensor(Shape{cfg.M}, 0.0));
    }
    for (std::size_t l = 0; l < cfg.L; ++l) {
        const auto p = detail::layer_prefix(l);
        detail::add_affine(ps, p + "wq", "", d, d, rng);
        detail::add_affine(ps, p + "wk", "", d, d, rng);
        detail::add_affine(ps, p + "wv", "", d, d, rng);
        detail::add_affine(ps, p + "wo", "", d, d, rng);
        ps.add(p + "ln1.gamma", Tensor(Shape{d}, 1.0));
        ps.add(p + "ln1.beta", Tensor(Shape{d}, 0.0));
        detail::add_affine(ps, p + "ffn.w1", p + "ffn.b1", d, cfg.d_ffn, rng);
        detail::add_affine(ps, p + "ffn.w2", p + "ffn.b2", cfg.d_ffn, d, rng);
        ps.add(p + "ln2.gamma", Tensor(Shape{d}, 1.0));
        ps.add(p + "ln2.beta", Tensor(Shape{d}, 0.0));
    }
    if (has(heads, HeadSet::Decoder)) {
        detail::add_affine(ps, "decoder.w1", "decoder.b1", 2 * d, d, rng);
        detail::add_affine(ps, "decoder.w2", "decoder.b2", d, cfg.F_e, rng);
    }
    if (has(heads, HeadSet::Projector)) detail::add_affine(ps, "projector.w", "projector.b", d, cfg.d_proj, rng);
    if (has(heads, HeadSet::Predictor)) {
        detail::add_affine(ps, "predictor.w1", "predictor.b1", cfg.d_proj, cfg.d_pred_hidden, rng);
        detail::add_affine(ps, "predictor.w2", "predictor.b2", cfg.d_pred_hidden, cfg.d_proj, rng);
    }
    if (has(heads, HeadSet::Decision)) add_decision_head(ps, cfg, rng);
    return ps;
}

/// Scalar count of the inference model (backbone + decision head).
inline std::size_t param_count(const ModelConfig& cfg) {
    return init_params(cfg, 0, HeadSet::Decision).scalar_count();
}

/// Lazily binds parameters into a graph; each name is bound once per graph.
class Binder {
public:
    Binder(ad::Graph& g, ParameterSet& ps, std::function<bool(const std::string&)> trainable = {})
        : g_(g), ps_(ps), trainable_(std::move(trainable)) {}

    ad::Var operator()(const std::string& name) {
        if (auto it = cache_.find(name); it != cache_.end()) return it->second;
        const bool train = !trainable_ || trainable_(name);
        const ad::Var v = g_.param(ps_, name, train);
        cache_.emplace(name, v);
        return v;
    }

    ad::Graph& graph() { return g_; }
    ParameterSet& params() { return ps_; }

private:
    ad::Graph& g_;
    ParameterSet& ps_;
    std::function<bool(const std::string&)> trainable_;
    std::unordered_map<std::string, ad::Var> cache_;
};

inline ad::Var affine(Binder& p, ad::Var x, const std::string& w, const std::string& b) {
    return ad::add_bias(ad::matmul(x, p(w)), p(b));
}

/// Two-layer node encoder: Z0 = affine2(relu(affine1(node_feat))).
inline ad::Var encode_nodes(Binder& p, const ModelConfig& cfg, const InterferenceGraph& graph) {
    if (graph.node_feat.size() != graph.K * cfg.F_n)
        throw ShapeError("encode_nodes: node features do not match F_n=" + std::to_string(cfg.F_n));
    ad::Var x = p.graph().constant(Tensor(Shape{graph.K, cfg.F_n}, graph.node_feat));
    return affine(p, ad::relu(affine(p, x, "backbone.enc.w1", "backbone.enc.b1")), "backbone.enc.w2", "backbone.enc.b2");
}

/// Attention biases for every head, computed once and shared by all layers.
struct AttentionBias {
    std::size_t K = 0;
    std::vector<ad::Var> heads; // M tensors of shape K x K

    /// Materializes the K x K x M tensor.
    Tensor to_tensor() const {
        const std::size_t M = heads.size();
        Tensor out(Shape{K, K, M});
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t i = 0; i < K * K; ++i) out.data[i * M + m] = heads[m].value().data[i];
        return out;
    }
};

/// For j != k the bias projector sees e_kj, or the mask token where the edge
/// is masked; the diagonal takes the learnable self bias.
inline AttentionBias bias_project(Binder& p, const ModelConfig& cfg, const InterferenceGraph& graph, const MaskView& mask) {
    const std::size_t K = graph.K;
    if (mask.K != K || mask.masked.size() != K * K)
        throw ShapeError("bias_project: mask is " + std::to_string(mask.K) + "x" + std::to_string(mask.K) +
                         " for a graph with K=" + std::to_string(K));
    if (cfg.L == 0) return AttentionBias{K, {}};
    ad::Var e = p.graph().constant(Tensor(Shape{K * K, cfg.F_e}, graph.edge_feat));
    bool any_masked = false;
    for (std::size_t i = 0; i < K * K; ++i) any_masked = any_masked || mask.masked[i];
    if (any_masked) e = ad::replace_rows(e, p("backbone.mask_token"), mask.masked);
    ad::Var h = ad::relu(affine(p, e, "backbone.bias.w1", "backbone.bias.b1"));
    ad::Var flat = affine(p, h, "backbone.bias.w2", "backbone.bias.b2");
    ad::Var self = p("backbone.self_bias");
    AttentionBias out{K, {}};
    for (std::size_t m = 0; m < cfg.M; ++m) out.heads.push_back(ad::edge_bias_matrix(flat, self, K, m));
    return out;
}

/// One post-norm Transformer block with per-head additive attention bias.
inline ad::Var attention_layer(Binder& p, const ModelConfig& cfg, std::size_t layer, ad::Var Z, const AttentionBias& bias) {
    const auto pre = detail::layer_prefix(layer);
    const std::size_t dh = cfg.d_head();
    if (bias.heads.size() != cfg.M) throw ShapeError("attention_layer: expected one bias matrix per head");
    const ad::Var Q = ad::matmul(Z, p(pre + "wq"));
    const ad::Var Kx = ad::matmul(Z, p(pre + "wk"));
    const ad::Var V = ad::matmul(Z, p(pre + "wv"));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<ad::Var> heads;
    heads.reserve(cfg.M);
    for (std::size_t m = 0; m < cfg.M; ++m) {
        const ad::Var q = ad::slice_cols(Q, m * dh, dh);
        const ad::Var k = ad::slice_cols(Kx, m * dh, dh);
        const ad::Var v = ad::slice_cols(V, m * dh, dh);
        const ad::Var scores = ad::add(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt), bias.heads[m]);
        heads.push_back(ad::matmul(ad::softmax_rows(scores), v));
    }
    const ad::Var attended = ad::matmul(ad::concat_cols(std::span<const ad::Var>(heads)), p(pre + "wo"));
    const ad::Var x = ad::layer_norm(ad::add(Z, attended), p(pre + "ln1.gamma"), p(pre + "ln1.beta"));
    const ad::Var f = affine(p, ad::relu(affine(p, x, pre + "ffn.w1", pre + "ffn.b1")), pre + "ffn.w2", pre + "ffn.b2");
    return ad::layer_norm(ad::add(x, f), p(pre + "ln2.gamma"), p(pre + "ln2.beta"));
}

inline ad::Var backbone_forward(Binder& p, const ModelConfig& cfg, const InterferenceGraph& graph, const MaskView& mask) {
    ad::Var Z = encode_nodes(p, cfg, graph);
    if (cfg.L == 0) {
        if (mask.K != graph.K) throw ShapeError("backbone_forward: mask/graph size mismatch");
        return Z;
    }
    const AttentionBias bias = bias_project(p, cfg, graph, mask);
    for (std::size_t l = 0; l < cfg.L; ++l) Z = attention_layer(p, cfg, l, Z, bias);
    return Z;
}

inline ad::Var backbone_forward(Binder& p, const ModelConfig& cfg, const InterferenceGraph& graph) {
    return backbone_forward(p, cfg, graph, MaskView::none(graph.K));
}

/// Edge decoder on (receiver, transmitter) embedding pairs; one row of F_e
/// predicted features per pair.
inline ad::Var edge_decode(Binder& p, ad::Var Z, const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
    std::vector<std::size_t> rx, tx;
    for (auto [k, j] : pairs) {
        if (k == j) throw InvalidArgument("edge_decode: diagonal pair (" + std::to_string(k) + "," + std::to_string(j) + ")");
        rx.push_back(k);
        tx.push_back(j);
    }
    const ad::Var in = ad::concat_cols({ad::gather_rows(Z, rx), ad::gather_rows(Z, tx)});
    return affine(p, ad::relu(affine(p, in, "decoder.w1", "decoder.b1")), "decoder.w2", "decoder.b2");
}

enum class Role { Student, Teacher };

/// Student: predictor(projector(Z)). Teacher: projector(Z) only.
inline ad::Var project_and_predict(Binder& p, ad::Var Z, Role role) {
    const ad::Var y = affine(p, Z, "projector.w", "projector.b");
    if (role == Role::Teacher) return y;
    return affine(p, ad::relu(affine(p, y, "predictor.w1", "predictor.b1")), "predictor.w2", "predictor.b2");
}

/// p_k = p_max * sigmoid(MLP(z_k)); returns K x 1.
inline ad::Var decision_head(Binder& p, ad::Var Z, double p_max) {
    const ad::Var logits = affine(p, ad::relu(affine(p, Z, "head.w1", "head.b1")), "head.w2", "head.b2");
    return ad::scale(ad::sigmoid(logits), p_max);
}

/// Full inference path without gradient bookkeeping.
inline std::vector<double> infer_powers(ParameterSet& ps, const ModelConfig& cfg, const InterferenceGraph& graph,
                                        const MaskView& mask, double p_max) {
    ad::Graph g;
    Binder b(g, ps, [](const std::string&) { return false; });
    const ad::Var p = decision_head(b, backbone_forward(b, cfg, graph, mask), p_max);
    return p.value().data;
}

inline std::vector<double> infer_powers(ParameterSet& ps, const ModelConfig& cfg, const InterferenceGraph& graph, double p_max) {
    return infer_powers(ps, cfg, graph, MaskView::none(graph.K), p_max);
}

/// Test hook: square identity projector (d_proj = d_model) and a predictor
/// that computes relu(x) - relu(-x) = x (d_pred_hidden = 2 d_proj).
inline void set_identity_projection(ParameterSet& ps, const ModelConfig& cfg) {
    if (cfg.d_proj != cfg.d_model || cfg.d_pred_hidden != 2 * cfg.d_proj)
        throw InvalidArgument("set_identity_projection: needs d_proj == d_model and d_pred_hidden == 2 d_proj");
    const std::size_t d = cfg.d_proj;
    Tensor& pw = ps.value("projector.w");
    std::fill(pw.data.begin(), pw.data.end(), 0.0);
    for (std::size_t i = 0; i < d; ++i) pw.at(i, i) = 1.0;
    std::fill(ps.value("projector.b").data.begin(), ps.value("projector.b").data.end(), 0.0);
    Tensor& w1 = ps.value("predictor.w1");
    Tensor& w2 = ps.value("predictor.w2");
    std::fill(w1.data.begin(), w1.data.end(), 0.0);
    std::fill(w2.data.begin(), w2.data.end(), 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        w1.at(i, i) = 1.0;
        w1.at(i, d + i) = -1.0;
        w2.at(i, i) = 1.0;
        w2.at(d + i, i) = -1.0;
    }
    std::fill(ps.value("predictor.b1").data.begin(), ps.value("predictor.b1").data.end(), 0.0);
    std::fill(ps.value("predictor.b2").data.begin(), ps.value("predictor.b2").data.end(), 0.0);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointFormatVersion = 1;

struct TrainingMetadata {
    std::size_t epoch = 0;
    std::uint64_t seed = 0;
    std::string loss_digest;
    std::string stage;

    friend bool operator==(const TrainingMetadata&, const TrainingMetadata&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainingMetadata, epoch, seed, loss_digest, stage)

struct Checkpoint {
    ModelConfig config;
    NormStats stats;
    ParameterSet params;
    TrainingMetadata metadata;
};

/// FNV-1a over the bit patterns of a loss history.
inline std::string loss_digest(const std::vector<double>& history) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (double x : history) {
        const auto bits = std::bit_cast<std::uint64_t>(x);
        for (int b = 0; b < 8; ++b) {
            h ^= (bits >> (8 * b)) & 0xff;
            h *= 0x100000001b3ull;
        }
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline void save_checkpoint(const std::string& dir, const Checkpoint& ck) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw FileError("cannot create checkpoint directory " + dir + ": " + ec.message());

    nlohmann::json params = nlohmann::json::array();
    std::string blob;
    for (const auto& e : ck.params.entries()) {
        params.push_back({{"name", e.name}, {"shape", e.value.shape}});
        for (double x : e.value.data) {
            const auto bits = std::bit_cast<std::uint64_t>(x);
            for (int b = 0; b < 8; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
        }
    }
    nlohmann::json manifest = {
        {"format_version", kCheckpointFormatVersion},
        {"model_config", ck.config},
        {"norm_stats", ck.stats},
        {"params", params},
        {"metadata", ck.metadata},
    };
    std::ofstream mf(fs::path(dir) / "manifest", std::ios::trunc);
    if (!mf) throw FileError("cannot write checkpoint manifest in " + dir);
    mf << manifest.dump(2) << "\n";
    std::ofstream bf(fs::path(dir) / "params.bin", std::ios::binary | std::ios::trunc);
    if (!bf) throw FileError("cannot write checkpoint params in " + dir);
    bf.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!mf || !bf) throw FileError("write failed for checkpoint " + dir);
}

/// Loads and fully validates a checkpoint before returning it; on any error
/// nothing is returned.
inline Checkpoint load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    using Kind = CheckpointError::Kind;
    std::ifstream mf(fs::path(dir) / "manifest");
    if (!mf) throw FileError("cannot open checkpoint manifest in " + dir);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mf);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(Kind::Manifest, "checkpoint " + dir + ": unreadable manifest: " + e.what());
    }

    Checkpoint ck;
    std::vector<std::pair<std::string, Shape>> layout;
    try {
        const int version = manifest.at("format_version").get<int>();
        if (version != kCheckpointFormatVersion)
            throw CheckpointError(Kind::VersionMismatch, "checkpoint " + dir + ": format_version " + std::to_string(version) +
                                                             ", expected " + std::to_string(kCheckpointFormatVersion));
        ck.config = manifest.at("model_config").get<ModelConfig>();
        ck.stats = manifest.at("norm_stats").get<NormStats>();
        if (manifest.contains("metadata")) ck.metadata = manifest.at("metadata").get<TrainingMetadata>();
        for (const auto& p : manifest.at("params"))
            layout.emplace_back(p.at("name").get<std::string>(), p.at("shape").get<Shape>());
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(Kind::Manifest, "checkpoint " + dir + ": malformed manifest: " + e.what());
    }
    try {
        ck.config.validate();
        ck.stats.validate();
    } catch (const InvalidArgument& e) {
        throw CheckpointError(Kind::Manifest, "checkpoint " + dir + ": " + e.what());
    }

    const ParameterSet reference = init_params(ck.config, 0, HeadSet::All);
    std::size_t total = 0;
    for (const auto& [name, shape] : layout) {
        if (!reference.contains(name))
            throw CheckpointError(Kind::ShapeMismatch, "checkpoint " + dir + ": unknown parameter '" + name + "'");
        if (reference.value(name).shape != shape)
            throw CheckpointError(Kind::ShapeMismatch, "checkpoint " + dir + ": parameter '" + name + "' has shape " +
                                                           shape_str(shape) + ", config implies " +
                                                           shape_str(reference.value(name).shape));
        total += shape_size(shape);
    }

    std::ifstream bf(fs::path(dir) / "params.bin", std::ios::binary);
    if (!bf) throw FileError("cannot open checkpoint params in " + dir);
    std::ostringstream ss;
    ss << bf.rdbuf();
    const std::string blob = ss.str();
    if (blob.size() < total * 8)
        throw CheckpointError(Kind::Truncated, "checkpoint " + dir + ": params.bin has " + std::to_string(blob.size()) +
                                                   " bytes, manifest requires " + std::to_string(total * 8));
    if (blob.size() > total * 8)
        throw CheckpointError(Kind::ShapeMismatch, "checkpoint " + dir + ": params.bin has " + std::to_string(blob.size()) +
                                                       " bytes, manifest requires " + std::to_string(total * 8));
    std::size_t pos = 0;
    for (const auto& [name, shape] : layout) {
        Tensor t(shape);
        for (auto& x : t.data) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[pos + b])) << (8 * b);
            pos += 8;
            x = std::bit_cast<double>(bits);
        }
        ck.params.add(name, std::move(t));
    }
    return ck;
}

} // namespace iwgt
