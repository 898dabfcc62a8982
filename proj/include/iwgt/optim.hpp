#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "error.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace iwgt {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First/second moment estimates and a per-parameter step count, so a
/// parameter that sat frozen for a while still gets correct bias correction.
struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::vector<std::uint64_t> steps;

    void ensure(const ParameterSet& ps) {
        if (m.size() == ps.size()) {
            for (std::size_t i = 0; i < ps.size(); ++i)
                if (m[i].shape != ps.entry(i).value.shape) throw ShapeError("adam: state shape mismatch for " + ps.entry(i).name);
            return;
        }
        if (!m.empty()) throw ShapeError("adam: state has " + std::to_string(m.size()) + " slots for " +
                                         std::to_string(ps.size()) + " parameters");
        for (const auto& e : ps.entries()) {
            m.emplace_back(e.value.shape, 0.0);
            v.emplace_back(e.value.shape, 0.0);
        }
        steps.assign(ps.size(), 0);
    }
};

/// Learning rate per parameter name; 0 leaves the parameter (and its moments) untouched.
using LrFn = std::function<double(const std::string&)>;

inline void adam_step(ParameterSet& ps, AdamState& st, const LrFn& lr_of, const AdamConfig& cfg = {}) {
    st.ensure(ps);
    for (std::size_t i = 0; i < ps.size(); ++i) {
        auto& e = ps.entry(i);
        const double lr = lr_of(e.name);
        if (lr == 0.0) continue;
        const auto t = ++st.steps[i];
        const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
        auto& m = st.m[i].data;
        auto& v = st.v[i].data;
        for (std::size_t k = 0; k < e.value.size(); ++k) {
            const double g = e.grad.data[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            e.value.data[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
        }
    }
}

inline void adam_step(ParameterSet& ps, AdamState& st, double lr, const AdamConfig& cfg = {}) {
    adam_step(ps, st, [lr](const std::string&) { return lr; }, cfg);
}

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(ParameterSet& ps, double max_norm) {
    double sq = 0;
    for (const auto& e : ps.entries())
        for (double g : e.grad.data) sq += g * g;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericalFailure("clip_grad_norm: non-finite gradient norm");
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& e : ps.entries())
            for (double& g : e.grad.data) g *= s;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

/// Builds a scalar loss on a fresh graph from the current parameter values.
using LossBuilder = std::function<ad::Var(ad::Graph&)>;

struct GradCheckOptions {
    double eps = 1e-5;
    /// Check every coordinate when the model has at most this many scalars,
    /// otherwise a random subsample of this size.
    std::size_t max_coords = 400;
    /// Subsample coverage: at least this many coordinates per parameter tensor.
    std::size_t per_param_min = 2;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

/// Compares backward() against central differences (f(t+eps) - f(t-eps)) / 2eps.
/// Relative error uses max(|a|, |n|, 1e-8) as the denominator.
inline GradCheckResult grad_check(ParameterSet& params, const LossBuilder& build, const GradCheckOptions& opt = {}) {
    if (!(opt.eps > 0)) throw InvalidArgument("grad_check: eps must be > 0");
    params.zero_grad();
    {
        ad::Graph g;
        g.backward(build(g));
    }
    std::vector<Tensor> analytic;
    for (const auto& e : params.entries()) analytic.push_back(e.grad);

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    if (params.scalar_count() <= opt.max_coords) {
        for (std::size_t p = 0; p < params.size(); ++p)
            for (std::size_t i = 0; i < params.entry(p).value.size(); ++i) coords.emplace_back(p, i);
    } else {
        Rng rng = make_rng(opt.seed, Stream::Eval, 0x67636b);
        for (std::size_t p = 0; p < params.size(); ++p) {
            const std::size_t n = params.entry(p).value.size();
            std::uniform_int_distribution<std::size_t> pick(0, n - 1);
            for (std::size_t r = 0; r < std::min(n, opt.per_param_min); ++r) coords.emplace_back(p, pick(rng));
        }
        std::uniform_int_distribution<std::size_t> pick_flat(0, params.scalar_count() - 1);
        while (coords.size() < opt.max_coords) {
            std::size_t flat = pick_flat(rng);
            std::size_t p = 0;
            while (flat >= params.entry(p).value.size()) flat -= params.entry(p++).value.size();
            coords.emplace_back(p, flat);
        }
    }

    auto eval = [&] {
        ad::Graph g;
        const double v = build(g).value().item();
        if (!std::isfinite(v)) throw NumericalFailure("grad_check: loss is not finite");
        return v;
    };

    GradCheckResult res;
    for (auto [p, i] : coords) {
        double& theta = params.entry(p).value.data[i];
        const double saved = theta;
        theta = saved + opt.eps;
        const double fp = eval();
        theta = saved - opt.eps;
        const double fm = eval();
        theta = saved;
        const double numeric = (fp - fm) / (2.0 * opt.eps);
        const double a = analytic[p].data[i];
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        ++res.coords_checked;
        if (rel > res.max_rel_error) {
            res.max_rel_error = rel;
            res.worst_param = params.entry(p).name;
            res.worst_index = i;
            res.worst_analytic = a;
            res.worst_numeric = numeric;
        }
    }
    return res;
}

} // namespace iwgt
