#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "channelsim.hpp"
#include "error.hpp"
#include "rng.hpp"

namespace iwgt {

inline constexpr std::size_t kNodeFeatures = 1;
inline constexpr std::size_t kEdgeFeatures = 2;
inline constexpr double kStdFloor = 1e-6;

/// dB-domain standardization statistics for direct (node) and cross (edge) gains.
struct NormStats {
    double node_mean_db = 0.0;
    double node_std_db = 1.0;
    double edge_mean_db = 0.0;
    double edge_std_db = 1.0;

    void validate() const {
        if (!(node_std_db > 0) || !(edge_std_db > 0)) throw InvalidArgument("NormStats: std values must be > 0");
        if (!std::isfinite(node_mean_db) || !std::isfinite(edge_mean_db))
            throw InvalidArgument("NormStats: means must be finite");
    }

    friend bool operator==(const NormStats&, const NormStats&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(NormStats, node_mean_db, node_std_db, edge_mean_db, edge_std_db)

inline double gain_db(const std::complex<double>& h) { return 10.0 * std::log10(std::norm(h)); }

/// Population mean/std of dB gains over every snapshot (Welford accumulation).
inline NormStats compute_norm_stats(std::span<const ChannelSnapshot> snapshots) {
    if (snapshots.empty()) throw InvalidArgument("compute_norm_stats: empty dataset");
    struct Acc {
        double n = 0, mean = 0, m2 = 0;
        void add(double x) {
            n += 1;
            const double d = x - mean;
            mean += d / n;
            m2 += d * (x - mean);
        }
        double std() const { return n > 0 ? std::max(std::sqrt(m2 / n), kStdFloor) : 1.0; }
    } node, edge;
    for (const auto& s : snapshots) {
        const std::size_t K = s.K();
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t j = 0; j < K; ++j) (k == j ? node : edge).add(gain_db(s.H(k, j)));
    }
    NormStats st;
    st.node_mean_db = node.mean;
    st.node_std_db = node.std();
    st.edge_mean_db = edge.n > 0 ? edge.mean : 0.0;
    st.edge_std_db = edge.std();
    return st;
}

inline NormStats compute_norm_stats(const Dataset& ds) { return compute_norm_stats(std::span(ds.snapshots)); }

inline void write_norm_stats(const std::string& path, const NormStats& st) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FileError("cannot write norm stats: " + path);
    f << nlohmann::json(st).dump(2) << "\n";
}

inline NormStats read_norm_stats(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FileError("cannot read norm stats: " + path);
    try {
        NormStats st = nlohmann::json::parse(f).get<NormStats>();
        st.validate();
        return st;
    } catch (const nlohmann::json::exception& e) {
        throw FileError("bad norm stats file " + path + ": " + e.what());
    }
}

/// Fully connected directed interference graph of one snapshot.
struct InterferenceGraph {
    std::size_t K = 0;
    /// K x 1, standardized dB of |h_kk|^2.
    std::vector<double> node_feat;
    /// K x K x 2, row-major; entry (k, j) holds standardized dB of |h_kj|^2 and
    /// |h_jk|^2. Diagonal entries are zero and flagged absent.
    std::vector<double> edge_feat;
    /// K x K, false on the diagonal.
    std::vector<bool> edge_present;
    ChannelMatrix H;
    double sigma2 = 0.0;

    double edge(std::size_t k, std::size_t j, std::size_t f) const { return edge_feat[(k * K + j) * kEdgeFeatures + f]; }
};

inline InterferenceGraph build_graph(const ChannelSnapshot& snap, const NormStats& stats, double sigma2) {
    stats.validate();
    const std::size_t K = snap.K();
    std::vector<double> db(K * K);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t j = 0; j < K; ++j) {
            const double g = std::norm(snap.H(k, j));
            if (!(g > 0) || !std::isfinite(g))
                throw InvalidArgument("build_graph: gain h(" + std::to_string(k) + "," + std::to_string(j) +
                                      ") is zero or non-finite");
            db[k * K + j] = 10.0 * std::log10(g);
        }

    InterferenceGraph gr;
    gr.K = K;
    gr.H = snap.H;
    gr.sigma2 = sigma2;
    gr.node_feat.resize(K * kNodeFeatures);
    gr.edge_feat.assign(K * K * kEdgeFeatures, 0.0);
    gr.edge_present.assign(K * K, false);
    for (std::size_t k = 0; k < K; ++k) {
        gr.node_feat[k] = (db[k * K + k] - stats.node_mean_db) / stats.node_std_db;
        for (std::size_t j = 0; j < K; ++j) {
            if (j == k) continue;
            const std::size_t e = (k * K + j) * kEdgeFeatures;
            gr.edge_feat[e] = (db[k * K + j] - stats.edge_mean_db) / stats.edge_std_db;
            gr.edge_feat[e + 1] = (db[j * K + k] - stats.edge_mean_db) / stats.edge_std_db;
            gr.edge_present[k * K + j] = true;
        }
    }
    return gr;
}

/// Inverse of the feature encoding: recovers the K x K dB gain matrix.
inline std::vector<double> recover_gains_db(const InterferenceGraph& g, const NormStats& stats) {
    const std::size_t K = g.K;
    std::vector<double> db(K * K);
    for (std::size_t k = 0; k < K; ++k) {
        db[k * K + k] = g.node_feat[k] * stats.node_std_db + stats.node_mean_db;
        for (std::size_t j = 0; j < K; ++j)
            if (j != k) db[k * K + j] = g.edge(k, j, 0) * stats.edge_std_db + stats.edge_mean_db;
    }
    return db;
}

/// Relabels links: new link i is old link perm[i].
inline ChannelSnapshot permute_snapshot(const ChannelSnapshot& s, std::span<const std::size_t> perm) {
    const std::size_t K = s.K();
    if (perm.size() != K) throw InvalidArgument("permute_snapshot: permutation length != K");
    ChannelSnapshot out = s;
    for (std::size_t a = 0; a < K; ++a) {
        out.topology.tx_pos[a] = s.topology.tx_pos[perm[a]];
        out.topology.rx_pos[a] = s.topology.rx_pos[perm[a]];
        for (std::size_t b = 0; b < K; ++b) out.H(a, b) = s.H(perm[a], perm[b]);
    }
    return out;
}

/// Edge positions withheld from the model.
struct MaskView {
    std::size_t K = 0;
    std::vector<bool> masked; // K x K
    double ratio = 0.0;
    std::uint64_t seed = 0;

    bool is_masked(std::size_t k, std::size_t j) const { return masked[k * K + j]; }
    std::size_t count() const { return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), true)); }

    /// Masked (k, j) pairs in row-major order.
    std::vector<std::pair<std::size_t, std::size_t>> pairs() const {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t j = 0; j < K; ++j)
                if (is_masked(k, j)) out.emplace_back(k, j);
        return out;
    }

    static MaskView none(std::size_t K) { return MaskView{K, std::vector<bool>(K * K, false), 0.0, 0}; }
};

/// round(rho * K(K-1)) with halves rounded up.
inline std::size_t mask_count(std::size_t K, double rho) {
    const double m = rho * static_cast<double>(K * (K - 1));
    return static_cast<std::size_t>(std::floor(m + 0.5));
}

/// Uniformly samples exactly mask_count(K, rho) distinct off-diagonal edges.
inline MaskView mask_edges(std::size_t K, double rho, std::uint64_t seed) {
    if (K < 1) throw InvalidArgument("mask_edges: K must be >= 1");
    if (!(rho >= 0 && rho <= 1)) throw InvalidArgument("mask_edges: rho must be in [0, 1]");
    MaskView mv = MaskView::none(K);
    mv.ratio = rho;
    mv.seed = seed;
    const std::size_t m = mask_count(K, rho);
    if (m == 0) return mv;

    std::vector<std::size_t> slots;
    slots.reserve(K * (K - 1));
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t j = 0; j < K; ++j)
            if (j != k) slots.push_back(k * K + j);
    Rng rng = make_rng(seed, Stream::Mask, K);
    // Partial Fisher-Yates: the first m slots are a uniform m-subset.
    for (std::size_t i = 0; i < m; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, slots.size() - 1);
        std::swap(slots[i], slots[pick(rng)]);
        mv.masked[slots[i]] = true;
    }
    return mv;
}

} // namespace iwgt
