#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "channelsim.hpp"
#include "error.hpp"
#include "objectives.hpp"
#include "rng.hpp"

namespace iwgt {

using PowerVector = std::vector<double>;

struct WmmseConfig {
    int max_iters = 500;
    double tol = 1e-5;
    int n_starts = 100;
    double p_max = 0.01;
    /// Per-link rate weights; empty means all ones.
    std::vector<double> weights;

    void validate(std::size_t K) const {
        if (max_iters < 1) throw InvalidArgument("wmmse: max_iters must be >= 1");
        if (!(tol > 0)) throw InvalidArgument("wmmse: tol must be > 0");
        if (n_starts < 1) throw InvalidArgument("wmmse: n_starts must be >= 1");
        if (!(p_max > 0)) throw InvalidArgument("wmmse: p_max must be > 0");
        if (!weights.empty() && weights.size() != K) throw InvalidArgument("wmmse: weights length != K");
        for (double w : weights)
            if (!(w > 0)) throw InvalidArgument("wmmse: weights must be positive");
    }
};

/// Optional per-sweep observer: (iteration, weighted sum rate after the sweep).
using WmmseTrace = std::function<void(int, double)>;

/// Scalar-channel WMMSE block-coordinate ascent on the weighted sum rate.
/// Returns the best iterate seen, which is never worse than p_init.
inline PowerVector wmmse(const ChannelMatrix& H, double sigma2, const WmmseConfig& cfg, std::span<const double> p_init,
                         const WmmseTrace& trace = {}) {
    const std::size_t K = H.K;
    cfg.validate(K);
    if (p_init.size() != K) throw InvalidArgument("wmmse: p_init has wrong length");
    for (double p : p_init)
        if (!(p >= 0 && p <= cfg.p_max)) throw InvalidArgument("wmmse: p_init outside [0, p_max]");

    const auto g = H.power_gains();
    auto amp = [&](std::size_t k, std::size_t j) { return std::sqrt(g[k * K + j]); };
    auto weight = [&](std::size_t k) { return cfg.weights.empty() ? 1.0 : cfg.weights[k]; };
    const double v_max = std::sqrt(cfg.p_max);

    std::vector<double> v(K), u(K), w(K);
    for (std::size_t k = 0; k < K; ++k) v[k] = std::sqrt(p_init[k]);

    PowerVector p(p_init.begin(), p_init.end());
    PowerVector best = p;
    double best_wsr = weighted_sum_rate(H, p, sigma2, cfg.weights);
    double prev = best_wsr;

    for (int it = 0; it < cfg.max_iters; ++it) {
        for (std::size_t k = 0; k < K; ++k) {
            double denom = sigma2;
            for (std::size_t j = 0; j < K; ++j) denom += g[k * K + j] * v[j] * v[j];
            u[k] = amp(k, k) * v[k] / denom;
            const double mse = 1.0 - u[k] * amp(k, k) * v[k];
            w[k] = 1.0 / mse;
        }
        for (std::size_t k = 0; k < K; ++k) {
            double denom = 0;
            for (std::size_t j = 0; j < K; ++j) denom += weight(j) * w[j] * u[j] * u[j] * g[j * K + k];
            const double num = weight(k) * w[k] * u[k] * amp(k, k);
            // A zero denominator means the objective is flat in v_k.
            const double vk = denom > 0 ? num / denom : v_max;
            v[k] = std::clamp(vk, 0.0, v_max);
        }
        for (std::size_t k = 0; k < K; ++k) {
            p[k] = std::min(v[k] * v[k], cfg.p_max);
            if (!std::isfinite(p[k]) || !std::isfinite(w[k]))
                throw NumericalFailure("wmmse: non-finite iterate at iteration " + std::to_string(it));
        }
        const double wsr = weighted_sum_rate(H, p, sigma2, cfg.weights);
        if (trace) trace(it, wsr);
        if (wsr > best_wsr) {
            best_wsr = wsr;
            best = p;
        }
        const double rel = std::abs(wsr - prev) / std::max(std::abs(prev), 1e-12);
        prev = wsr;
        if (rel < cfg.tol) break;
    }
    return best;
}

inline PowerVector full_reuse(std::size_t K, double p_max) { return PowerVector(K, p_max); }

/// Multi-start WMMSE: start 0 is full power, the rest uniform in [0, p_max]^K.
/// The run with the highest `objective` utility wins; ties go to the lowest
/// start index.
inline PowerVector wmmse_best(const ChannelMatrix& H, double sigma2, const WmmseConfig& cfg, std::uint64_t seed,
                              const Objective& objective = SumRate{}) {
    const std::size_t K = H.K;
    cfg.validate(K);
    Rng rng = make_rng(seed, Stream::WmmseStarts);
    std::uniform_real_distribution<double> unif(0.0, cfg.p_max);

    PowerVector best;
    double best_u = -std::numeric_limits<double>::infinity();
    for (int s = 0; s < cfg.n_starts; ++s) {
        PowerVector init = full_reuse(K, cfg.p_max);
        if (s > 0)
            for (auto& x : init) x = unif(rng);
        PowerVector p = wmmse(H, sigma2, cfg, init);
        const double u = utility_of_powers(H, p, sigma2, objective);
        if (u > best_u) {
            best_u = u;
            best = std::move(p);
        }
    }
    return best;
}

/// Exhaustive search over the uniform grid {0, ..., p_max}^K. Ties resolve to
/// the lexicographically smallest power vector.
inline PowerVector brute_force(const ChannelMatrix& H, double sigma2, double p_max, int grid_points,
                               const Objective& objective = SumRate{}) {
    const std::size_t K = H.K;
    if (grid_points < 2) throw InvalidArgument("brute_force: grid_points must be >= 2");
    const double cost = std::pow(static_cast<double>(grid_points), static_cast<double>(K));
    if (K > 6 || cost > 1e8)
        throw ResourceLimit("brute_force: grid_points^K = " + std::to_string(cost) + " exceeds 1e8 (K=" +
                            std::to_string(K) + ")");

    std::vector<double> levels(grid_points);
    for (int i = 0; i < grid_points; ++i)
        levels[i] = i == grid_points - 1 ? p_max : p_max * static_cast<double>(i) / (grid_points - 1);

    const auto g = H.power_gains();
    std::vector<int> idx(K, 0);
    PowerVector p(K, 0.0), best(K, 0.0);
    std::vector<double> r(K);
    double best_u = -std::numeric_limits<double>::infinity();
    // Odometer order with the last coordinate fastest is lexicographic order,
    // so a strict improvement test keeps the smallest argmax.
    while (true) {
        for (std::size_t k = 0; k < K; ++k) p[k] = levels[idx[k]];
        for (std::size_t k = 0; k < K; ++k) {
            double den = sigma2;
            for (std::size_t j = 0; j < K; ++j)
                if (j != k) den += g[k * K + j] * p[j];
            r[k] = std::log2(1.0 + g[k * K + k] * p[k] / den);
        }
        const double u = utility(r, objective);
        if (u > best_u) {
            best_u = u;
            best = p;
        }
        std::size_t d = K;
        while (d > 0) {
            --d;
            if (++idx[d] < grid_points) break;
            idx[d] = 0;
            if (d == 0) return best;
        }
        if (K == 0) return best;
    }
}

} // namespace iwgt
