#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "channelsim.hpp"
#include "error.hpp"

namespace iwgt {

struct SumRate {
    friend bool operator==(const SumRate&, const SumRate&) = default;
};

/// Sum of natural-log rates, each floored at `epsilon` bps/Hz.
struct ProportionalFairness {
    double epsilon = 1e-6;
    friend bool operator==(const ProportionalFairness&, const ProportionalFairness&) = default;
};

/// Sum rate minus alpha times the total shortfall below r_min.
struct QoS {
    double r_min = 0.3;
    double alpha = 15.0;
    friend bool operator==(const QoS&, const QoS&) = default;
};

using Objective = std::variant<SumRate, ProportionalFairness, QoS>;

inline void validate(const Objective& obj) {
    if (const auto* pf = std::get_if<ProportionalFairness>(&obj); pf && !(pf->epsilon > 0))
        throw InvalidArgument("proportional fairness: epsilon must be > 0");
    if (const auto* q = std::get_if<QoS>(&obj)) {
        if (!(q->r_min > 0)) throw InvalidArgument("qos: r_min must be > 0");
        if (!(q->alpha > 1)) throw InvalidArgument("qos: alpha must be > 1");
    }
}

inline std::string objective_name(const Objective& obj) {
    struct {
        std::string operator()(const SumRate&) const { return "sumrate"; }
        std::string operator()(const ProportionalFairness&) const { return "pf"; }
        std::string operator()(const QoS&) const { return "qos"; }
    } v;
    return std::visit(v, obj);
}

/// Parses "sumrate", "pf" or "qos" with the default constants.
inline Objective parse_objective(const std::string& name) {
    if (name == "sumrate" || name == "sum-rate") return SumRate{};
    if (name == "pf" || name == "proportional-fairness") return ProportionalFairness{};
    if (name == "qos") return QoS{};
    throw ConfigError("unknown objective '" + name + "' (expected sumrate, pf or qos)");
}

/// Minimum-rate threshold used for the violated-user metric. Objectives without
/// their own threshold fall back to the QoS default.
inline double violation_threshold(const Objective& obj) {
    if (const auto* q = std::get_if<QoS>(&obj)) return q->r_min;
    return QoS{}.r_min;
}

/// SINR_k = g_kk p_k / (sum_{j!=k} g_kj p_j + sigma2), with g = |h|^2.
inline std::vector<double> sinr(const ChannelMatrix& H, std::span<const double> p, double sigma2) {
    const std::size_t K = H.K;
    if (p.size() != K) throw InvalidArgument("sinr: power vector has wrong length");
    if (!(sigma2 > 0)) throw InvalidArgument("sinr: sigma2 must be > 0");
    for (std::size_t i = 0; i < H.data.size(); ++i)
        if (!std::isfinite(H.data[i].real()) || !std::isfinite(H.data[i].imag()))
            throw InvalidArgument("sinr: non-finite channel entry (" + std::to_string(i / K) + "," +
                                  std::to_string(i % K) + ")");
    std::vector<double> out(K);
    for (std::size_t k = 0; k < K; ++k) {
        double interference = sigma2;
        for (std::size_t j = 0; j < K; ++j)
            if (j != k) interference += std::norm(H(k, j)) * p[j];
        out[k] = std::norm(H(k, k)) * p[k] / interference;
    }
    return out;
}

/// Spectral efficiency log2(1 + SINR_k) in bps/Hz.
inline std::vector<double> rates(const ChannelMatrix& H, std::span<const double> p, double sigma2) {
    auto r = sinr(H, p, sigma2);
    for (auto& x : r) x = std::log2(1.0 + x);
    return r;
}

inline double utility(std::span<const double> r, const Objective& obj) {
    struct {
        std::span<const double> r;
        double operator()(const SumRate&) const {
            double s = 0;
            for (double x : r) s += x;
            return s;
        }
        double operator()(const ProportionalFairness& pf) const {
            double s = 0;
            for (double x : r) s += std::log(std::max(x, pf.epsilon));
            return s;
        }
        double operator()(const QoS& q) const {
            double s = 0;
            for (double x : r) s += x - q.alpha * std::max(0.0, q.r_min - x);
            return s;
        }
    } v{r};
    return std::visit(v, obj);
}

inline double utility_of_powers(const ChannelMatrix& H, std::span<const double> p, double sigma2, const Objective& obj) {
    const auto r = rates(H, p, sigma2);
    return utility(r, obj);
}

/// Weighted sum rate, the quantity WMMSE ascends.
inline double weighted_sum_rate(const ChannelMatrix& H, std::span<const double> p, double sigma2,
                                std::span<const double> weights) {
    const auto r = rates(H, p, sigma2);
    double s = 0;
    for (std::size_t k = 0; k < r.size(); ++k) s += (weights.empty() ? 1.0 : weights[k]) * r[k];
    return s;
}

inline double normalized_ratio(double u_model, double u_ref) {
    if (u_ref == 0.0) throw UndefinedRatio("normalized_ratio: reference utility is zero");
    return u_model / u_ref;
}

/// Dataset-level ratio: ratio of the mean utilities.
inline double normalized_ratio(std::span<const double> u_model, std::span<const double> u_ref) {
    if (u_model.size() != u_ref.size() || u_model.empty())
        throw InvalidArgument("normalized_ratio: utility lists must be non-empty and equal length");
    double a = 0, b = 0;
    for (std::size_t i = 0; i < u_model.size(); ++i) a += u_model[i], b += u_ref[i];
    return normalized_ratio(a / static_cast<double>(u_model.size()), b / static_cast<double>(u_ref.size()));
}

} // namespace iwgt
