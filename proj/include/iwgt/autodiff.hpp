#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "tensor.hpp"

/// Tape-based reverse-mode differentiation over Tensor values.
///
/// A Graph records every operation applied to its Vars in creation order, so
/// the node list is already topologically sorted and backward is a single
/// reverse sweep. Parameters enter through Graph::param, which binds the leaf
/// to a ParameterSet slot; backward accumulates into that slot's gradient.
///
/// Broadcasting is limited to scalar scaling and last-axis bias/affine
/// operations; every other binary op requires identical shapes.
namespace iwgt::ad {

class Graph;

struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
};

using BackwardFn = std::function<void(Graph&, std::size_t self)>;

class Graph {
public:
    Var constant(Tensor t) { return push(std::move(t), false, {}); }

    /// Binds a parameter as a leaf. Frozen (non-trainable) parameters behave as
    /// constants and never receive gradient.
    Var param(ParameterSet& ps, const std::string& name, bool trainable = true) {
        const std::size_t idx = ps.index(name);
        Var v = push(ps.entry(idx).value, trainable, {});
        if (trainable) {
            nodes_[v.id].params = &ps;
            nodes_[v.id].param_index = idx;
        }
        return v;
    }

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    /// Gradient of the last backward() w.r.t. this node, or nullptr if none flowed.
    const Tensor* grad(Var v) const {
        const auto& n = nodes_[v.id];
        return n.has_grad ? &n.grad : nullptr;
    }

    /// Records a node whose inputs are `inputs`. The backward rule is kept only
    /// if some input requires gradient.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
        bool rg = false;
        for (const Var& in : inputs) rg = rg || nodes_[in.id].requires_grad;
        return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{});
    }
    Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
        bool rg = false;
        for (const Var& in : inputs) rg = rg || nodes_[in.id].requires_grad;
        return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{});
    }

    /// Gradient accumulator of a node; null when the node needs no gradient.
    Tensor* grad_slot(std::size_t id) {
        auto& n = nodes_[id];
        if (!n.requires_grad) return nullptr;
        if (!n.has_grad) {
            n.grad = Tensor(n.value.shape, 0.0);
            n.has_grad = true;
        }
        return &n.grad;
    }
    Tensor* grad_slot(Var v) { return grad_slot(v.id); }

    /// Reverse sweep from a scalar loss; adds d(loss)/d(param) into every
    /// trainable ParameterSet slot reachable from it.
    void backward(Var loss) {
        const auto& lv = nodes_[loss.id].value;
        if (lv.size() != 1) throw InvalidArgument("backward: loss must be scalar, got shape " + shape_str(lv.shape));
        if (!std::isfinite(lv.data[0])) throw NumericalFailure("backward: loss is not finite");
        for (auto& n : nodes_) n.has_grad = false;
        if (!nodes_[loss.id].requires_grad) return;
        grad_slot(loss.id)->data[0] = 1.0;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.has_grad) continue;
            if (n.backward) n.backward(*this, i);
            if (n.params) {
                Tensor& g = n.params->entry(n.param_index).grad;
                for (std::size_t k = 0; k < g.size(); ++k) g.data[k] += n.grad.data[k];
            }
        }
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool has_grad = false;
        BackwardFn backward;
        ParameterSet* params = nullptr;
        std::size_t param_index = 0;
    };

    Var push(Tensor value, bool requires_grad, BackwardFn fn) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return Var{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

namespace detail {

inline void require_same(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_rank2(const Var& a, const char* op) {
    if (a.shape().size() != 2) throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(a.shape()));
}

inline void require_last_axis_vector(const Var& a, const Var& v, const char* op) {
    if (v.shape().size() != 1 || a.shape().empty() || v.shape()[0] != a.shape().back())
        throw ShapeError(std::string(op) + ": last-axis vector " + shape_str(v.shape()) + " incompatible with " +
                         shape_str(a.shape()));
}

/// Elementwise unary op from value function f and derivative df(x, y).
template <class F, class DF>
Var unary(Var a, F f, DF df) {
    Graph& g = *a.graph;
    const Tensor& x = a.value();
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = f(x.data[i]);
    return g.record(std::move(y), {a}, [a, df](Graph& g, std::size_t self) {
        Tensor* ga = g.grad_slot(a);
        if (!ga) return;
        const Tensor& x = g.value(a.id);
        const Tensor& y = g.value(self);
        const Tensor& gy = *g.grad_slot(self);
        for (std::size_t i = 0; i < x.size(); ++i) ga->data[i] += gy.data[i] * df(x.data[i], y.data[i]);
    });
}

} // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    if (b.shape()[0] != k) throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    Tensor C(Shape{n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = A.data[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = &B.data[p * m];
            double* crow = &C.data[i * m];
            for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
        }
    return a.graph->record(std::move(C), {a, b}, [a, b, n, k, m](Graph& g, std::size_t self) {
        const Tensor& gC = *g.grad_slot(self);
        const Tensor& A = g.value(a.id);
        const Tensor& B = g.value(b.id);
        if (Tensor* gA = g.grad_slot(a)) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0;
                    for (std::size_t j = 0; j < m; ++j) s += gC.data[i * m + j] * B.data[p * m + j];
                    gA->data[i * k + p] += s;
                }
        }
        if (Tensor* gB = g.grad_slot(b)) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = A.data[i * k + p];
                    if (aip == 0.0) continue;
                    for (std::size_t j = 0; j < m; ++j) gB->data[p * m + j] += aip * gC.data[i * m + j];
                }
        }
    });
}

inline Var transpose(Var a) {
    detail::require_rank2(a, "transpose");
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    const Tensor& A = a.value();
    Tensor T(Shape{m, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) T.data[j * n + i] = A.data[i * m + j];
    return a.graph->record(std::move(T), {a}, [a, n, m](Graph& g, std::size_t self) {
        Tensor* ga = g.grad_slot(a);
        const Tensor& gt = *g.grad_slot(self);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) ga->data[i * m + j] += gt.data[j * n + i];
    });
}

inline Var reshape(Var a, Shape shape) {
    if (shape_size(shape) != a.value().size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    Tensor y(std::move(shape), a.value().data);
    return a.graph->record(std::move(y), {a}, [a](Graph& g, std::size_t self) {
        Tensor* ga = g.grad_slot(a);
        const Tensor& gy = *g.grad_slot(self);
        for (std::size_t i = 0; i < gy.size(); ++i) ga->data[i] += gy.data[i];
    });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
    detail::require_same(a, b, "add");
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += b.value().data[i];
    return a.graph->record(std::move(y), {a, b}, [a, b](Graph& g, std::size_t self) {
        const Tensor& gy = *g.grad_slot(self);
        for (Var v : {a, b})
            if (Tensor* gv = g.grad_slot(v))
                for (std::size_t i = 0; i < gy.size(); ++i) gv->data[i] += gy.data[i];
    });
}

inline Var sub(Var a, Var b) {
    detail::require_same(a, b, "sub");
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] -= b.value().data[i];
    return a.graph->record(std::move(y), {a, b}, [a, b](Graph& g, std::size_t self) {
        const Tensor& gy = *g.grad_slot(self);
        if (Tensor* ga = g.grad_slot(a))
            for (std::size_t i = 0; i < gy.size(); ++i) ga->data[i] += gy.data[i];
        if (Tensor* gb = g.grad_slot(b))
            for (std::size_t i = 0; i < gy.size(); ++i) gb->data[i] -= gy.data[i];
    });
}

inline Var mul(Var a, Var b) {
    detail::require_same(a, b, "mul");
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= b.value().data[i];
    return a.graph->record(std::move(y), {a, b}, [a, b](Graph& g, std::size_t self) {
        const Tensor& gy = *g.grad_slot(self);
        const Tensor& A = g.value(a.id);
        const Tensor& B = g.value(b.id);
        if (Tensor* ga = g.grad_slot(a))
            for (std::size_t i = 0; i < gy.size(); ++i) ga->data[i] += gy.data[i] * B.data[i];
        if (Tensor* gb = g.grad_slot(b))
            for (std::size_t i = 0; i < gy.size(); ++i) gb->data[i] += gy.data[i] * A.data[i];
    });
}

inline Var div(Var a, Var b) {
    detail::require_same(a, b, "div");
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] /= b.value().data[i];
    return a.graph->record(std::move(y), {a, b}, [a, b](Graph& g, std::size_t self) {
        const Tensor& gy = *g.grad_slot(self);
        const Tensor& B = g.value(b.id);
        const Tensor& Y = g.value(self);
        if (Tensor* ga = g.grad_slot(a))
            for (std::size_t i = 0; i < gy.size(); ++i) ga->data[i] += gy.data[i] / B.data[i];
        if (Tensor* gb = g.grad_slot(b))
            for (std::size_t i = 0; i < gy.size(); ++i) gb->data[i] -= gy.data[i] * Y.data[i] / B.data[i];
    });
}

inline Var scale(Var a, double s) {
    return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(Var a, double s) {
    return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

/// Adds vector b (shape [m]) to every last-axis row of a.
inline Var add_bias(Var a, Var b) {
    detail::require_last_axis_vector(a, b, "add_bias");
    const std::size_t m = b.shape()[0];
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += b.value().data[i % m];
    return a.graph->record(std::move(y), {a, b}, [a, b, m](Graph& g, std::size_t self) {
        const Tensor& gy = *g.grad_slot(self);
        if (Tensor* ga = g.grad_slot(a))
            for (std::size_t i = 0; i < gy.size(); ++i) ga->data[i] += gy.data[i];
        if (Tensor* gb = g.grad_slot(b))
            for (std::size_t i = 0; i < gy.size(); ++i) gb->data[i % m] += gy.data[i];
    });
}

inline Var relu(Var a) {
    return detail::unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Var sigmoid(Var a) {
    return detail::unary(
        a,
        [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(Var a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// max(a, floor) elementwise; gradient passes only where a > floor.
inline Var clamp_min(Var a, double floor) {
    return detail::unary(a, [floor](double x) { return x > floor ? x : floor; },
                         [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations
// ---------------------------------------------------------------------------

inline Var sum(Var a) {
    double s = 0;
    for (double x : a.value().data) s += x;
    return a.graph->record(Tensor::scalar(s), {a}, [a](Graph& g, std::size_t self) {
        const double gy = g.grad_slot(self)->data[0];
        Tensor* ga = g.grad_slot(a);
        for (auto& x : ga->data) x += gy;
    });
}

inline Var mean(Var a) {
    const double n = static_cast<double>(a.value().size());
    return scale(sum(a), 1.0 / n);
}

/// Mean squared error over all elements.
inline Var mse(Var a, Var b) {
    detail::require_same(a, b, "mse");
    const Var d = sub(a, b);
    return mean(mul(d, d));
}

/// Softmax over the last axis.
inline Var softmax_rows(Var a) {
    const Tensor& x = a.value();
    const std::size_t m = x.cols(), rows = x.size() / std::max<std::size_t>(m, 1);
    Tensor y(x.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = &x.data[r * m];
        double mx = xr[0];
        for (std::size_t j = 0; j < m; ++j) {
            if (std::isnan(xr[j])) throw NumericalFailure("softmax: NaN input in row " + std::to_string(r));
            mx = std::max(mx, xr[j]);
        }
        double z = 0;
        for (std::size_t j = 0; j < m; ++j) z += (y.data[r * m + j] = std::exp(xr[j] - mx));
        for (std::size_t j = 0; j < m; ++j) y.data[r * m + j] /= z;
    }
    return a.graph->record(std::move(y), {a}, [a, m, rows](Graph& g, std::size_t self) {
        Tensor* ga = g.grad_slot(a);
        const Tensor& y = g.value(self);
        const Tensor& gy = *g.grad_slot(self);
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0;
            for (std::size_t j = 0; j < m; ++j) dot += gy.data[r * m + j] * y.data[r * m + j];
            for (std::size_t j = 0; j < m; ++j)
                ga->data[r * m + j] += y.data[r * m + j] * (gy.data[r * m + j] - dot);
        }
    });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row standardization over the last axis, without affine: (x - mean) / sqrt(var + eps).
inline Var normalize_rows(Var a, double eps = kLayerNormEps) {
    const Tensor& x = a.value();
    const std::size_t m = x.cols(), rows = x.size() / std::max<std::size_t>(m, 1);
    Tensor y(x.shape);
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0;
        for (std::size_t j = 0; j < m; ++j) mu += x.data[r * m + j];
        mu /= static_cast<double>(m);
        double var = 0;
        for (std::size_t j = 0; j < m; ++j) {
            const double d = x.data[r * m + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(m);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < m; ++j) y.data[r * m + j] = (x.data[r * m + j] - mu) * inv_std[r];
    }
    return a.graph->record(std::move(y), {a}, [a, m, rows, inv_std = std::move(inv_std)](Graph& g, std::size_t self) {
        Tensor* ga = g.grad_slot(a);
        const Tensor& y = g.value(self);
        const Tensor& gy = *g.grad_slot(self);
        const double inv_m = 1.0 / static_cast<double>(m);
        for (std::size_t r = 0; r < rows; ++r) {
            double mg = 0, mgy = 0;
            for (std::size_t j = 0; j < m; ++j) {
                mg += gy.data[r * m + j];
                mgy += gy.data[r * m + j] * y.data[r * m + j];
            }
            mg *= inv_m;
            mgy *= inv_m;
            for (std::size_t j = 0; j < m; ++j)
                ga->data[r * m + j] += inv_std[r] * (gy.data[r * m + j] - mg - y.data[r * m + j] * mgy);
        }
    });
}

/// y = x * gamma + beta with gamma, beta broadcast along the last axis.
inline Var scale_shift_rows(Var a, Var gamma, Var beta) {
    detail::require_last_axis_vector(a, gamma, "scale_shift_rows");
    detail::require_last_axis_vector(a, beta, "scale_shift_rows");
    const std::size_t m = gamma.shape()[0];
    const Tensor& x = a.value();
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] * gamma.value().data[i % m] + beta.value().data[i % m];
    return a.graph->record(std::move(y), {a, gamma, beta}, [a, gamma, beta, m](Graph& g, std::size_t self) {
        const Tensor& gy = *g.grad_slot(self);
        const Tensor& x = g.value(a.id);
        const Tensor& gm = g.value(gamma.id);
        if (Tensor* ga = g.grad_slot(a))
            for (std::size_t i = 0; i < gy.size(); ++i) ga->data[i] += gy.data[i] * gm.data[i % m];
        if (Tensor* gg = g.grad_slot(gamma))
            for (std::size_t i = 0; i < gy.size(); ++i) gg->data[i % m] += gy.data[i] * x.data[i];
        if (Tensor* gb = g.grad_slot(beta))
            for (std::size_t i = 0; i < gy.size(); ++i) gb->data[i % m] += gy.data[i];
    });
}

inline Var layer_norm(Var a, Var gamma, Var beta) { return scale_shift_rows(normalize_rows(a), gamma, beta); }

/// Cosine similarity of matching rows of two [n x m] tensors; returns [n].
inline Var cosine_rows(Var a, Var b) {
    detail::require_same(a, b, "cosine_rows");
    detail::require_rank2(a, "cosine_rows");
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    constexpr double kNormFloor = 1e-12;
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    Tensor y(Shape{n});
    std::vector<double> na(n), nb(n);
    for (std::size_t r = 0; r < n; ++r) {
        double ab = 0, aa = 0, bb = 0;
        for (std::size_t j = 0; j < m; ++j) {
            ab += A.data[r * m + j] * B.data[r * m + j];
            aa += A.data[r * m + j] * A.data[r * m + j];
            bb += B.data[r * m + j] * B.data[r * m + j];
        }
        na[r] = std::max(std::sqrt(aa), kNormFloor);
        nb[r] = std::max(std::sqrt(bb), kNormFloor);
        y.data[r] = ab / (na[r] * nb[r]);
    }
    return a.graph->record(std::move(y), {a, b},
                           [a, b, n, m, na = std::move(na), nb = std::move(nb)](Graph& g, std::size_t self) {
                               const Tensor& gy = *g.grad_slot(self);
                               const Tensor& A = g.value(a.id);
                               const Tensor& B = g.value(b.id);
                               const Tensor& Y = g.value(self);
                               Tensor* ga = g.grad_slot(a);
                               Tensor* gb = g.grad_slot(b);
                               for (std::size_t r = 0; r < n; ++r) {
                                   const double c = Y.data[r], s = gy.data[r];
                                   for (std::size_t j = 0; j < m; ++j) {
                                       const double aj = A.data[r * m + j], bj = B.data[r * m + j];
                                       if (ga) ga->data[r * m + j] += s * (bj / (na[r] * nb[r]) - c * aj / (na[r] * na[r]));
                                       if (gb) gb->data[r * m + j] += s * (aj / (na[r] * nb[r]) - c * bj / (nb[r] * nb[r]));
                                   }
                               }
                           });
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

/// Concatenates 2-D tensors with equal row counts along the last axis.
inline Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    for (const Var& p : parts) detail::require_rank2(p, "concat_cols");
    const std::size_t n = parts[0].shape()[0];
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const Var& p : parts) {
        if (p.shape()[0] != n)
            throw ShapeError("concat_cols: shape mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        widths.push_back(p.shape()[1]);
        total += p.shape()[1];
    }
    Tensor y(Shape{n, total});
    std::size_t off = 0;
    for (std::size_t q = 0; q < parts.size(); ++q) {
        const Tensor& P = parts[q].value();
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < widths[q]; ++j) y.data[r * total + off + j] = P.data[r * widths[q] + j];
        off += widths[q];
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    return parts[0].graph->record(std::move(y), parts, [ins, widths, n, total](Graph& g, std::size_t self) {
        const Tensor& gy = *g.grad_slot(self);
        std::size_t off = 0;
        for (std::size_t q = 0; q < ins.size(); ++q) {
            if (Tensor* gp = g.grad_slot(ins[q]))
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < widths[q]; ++j) gp->data[r * widths[q] + j] += gy.data[r * total + off + j];
            off += widths[q];
        }
    });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
    return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

/// Columns [start, start + len) of a 2-D tensor.
inline Var slice_cols(Var a, std::size_t start, std::size_t len) {
    detail::require_rank2(a, "slice_cols");
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    if (start + len > m) throw ShapeError("slice_cols: range exceeds " + shape_str(a.shape()));
    const Tensor& A = a.value();
    Tensor y(Shape{n, len});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < len; ++j) y.data[r * len + j] = A.data[r * m + start + j];
    return a.graph->record(std::move(y), {a}, [a, n, m, start, len](Graph& g, std::size_t self) {
        Tensor* ga = g.grad_slot(a);
        const Tensor& gy = *g.grad_slot(self);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < len; ++j) ga->data[r * m + start + j] += gy.data[r * len + j];
    });
}

/// Rows idx[0], idx[1], ... of a 2-D tensor (repeats allowed).
inline Var gather_rows(Var a, std::vector<std::size_t> idx) {
    detail::require_rank2(a, "gather_rows");
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    const Tensor& A = a.value();
    Tensor y(Shape{idx.size(), m});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= n) throw ShapeError("gather_rows: index " + std::to_string(idx[r]) + " out of range " + shape_str(a.shape()));
        std::copy_n(&A.data[idx[r] * m], m, &y.data[r * m]);
    }
    return a.graph->record(std::move(y), {a}, [a, m, idx = std::move(idx)](Graph& g, std::size_t self) {
        Tensor* ga = g.grad_slot(a);
        const Tensor& gy = *g.grad_slot(self);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < m; ++j) ga->data[idx[r] * m + j] += gy.data[r * m + j];
    });
}

/// Rows of a whose mask entry is true, in order.
inline Var masked_select(Var a, const std::vector<bool>& row_mask) {
    detail::require_rank2(a, "masked_select");
    if (row_mask.size() != a.shape()[0]) throw ShapeError("masked_select: mask length != rows of " + shape_str(a.shape()));
    std::vector<std::size_t> idx;
    for (std::size_t r = 0; r < row_mask.size(); ++r)
        if (row_mask[r]) idx.push_back(r);
    return gather_rows(a, std::move(idx));
}

/// Row r of the output is `token` where replace[r] is true, else row r of a.
inline Var replace_rows(Var a, Var token, const std::vector<bool>& replace) {
    detail::require_rank2(a, "replace_rows");
    detail::require_last_axis_vector(a, token, "replace_rows");
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    if (replace.size() != n) throw ShapeError("replace_rows: mask length != rows of " + shape_str(a.shape()));
    Tensor y = a.value();
    for (std::size_t r = 0; r < n; ++r)
        if (replace[r]) std::copy_n(token.value().data.begin(), m, &y.data[r * m]);
    return a.graph->record(std::move(y), {a, token}, [a, token, n, m, replace](Graph& g, std::size_t self) {
        const Tensor& gy = *g.grad_slot(self);
        Tensor* ga = g.grad_slot(a);
        Tensor* gt = g.grad_slot(token);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < m; ++j) {
                if (replace[r]) {
                    if (gt) gt->data[j] += gy.data[r * m + j];
                } else if (ga) {
                    ga->data[r * m + j] += gy.data[r * m + j];
                }
            }
    });
}

/// Builds one head's K x K attention bias: off-diagonal (k, j) is
/// edge_bias[k*K + j, head], the diagonal is self_bias[head].
inline Var edge_bias_matrix(Var edge_bias, Var self_bias, std::size_t K, std::size_t head) {
    detail::require_rank2(edge_bias, "edge_bias_matrix");
    const std::size_t M = edge_bias.shape()[1];
    if (edge_bias.shape()[0] != K * K || self_bias.shape() != Shape{M} || head >= M)
        throw ShapeError("edge_bias_matrix: incompatible shapes " + shape_str(edge_bias.shape()) + " and " +
                         shape_str(self_bias.shape()));
    const Tensor& E = edge_bias.value();
    Tensor y(Shape{K, K});
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t j = 0; j < K; ++j)
            y.data[k * K + j] = k == j ? self_bias.value().data[head] : E.data[(k * K + j) * M + head];
    return edge_bias.graph->record(std::move(y), {edge_bias, self_bias},
                                   [edge_bias, self_bias, K, M, head](Graph& g, std::size_t self) {
                                       const Tensor& gy = *g.grad_slot(self);
                                       Tensor* ge = g.grad_slot(edge_bias);
                                       Tensor* gs = g.grad_slot(self_bias);
                                       for (std::size_t k = 0; k < K; ++k)
                                           for (std::size_t j = 0; j < K; ++j) {
                                               const double v = gy.data[k * K + j];
                                               if (k == j) {
                                                   if (gs) gs->data[head] += v;
                                               } else if (ge) {
                                                   ge->data[(k * K + j) * M + head] += v;
                                               }
                                           }
                                   });
}

/// Stops gradient: a constant copy of a's current value.
inline Var detach(Var a) { return a.graph->constant(a.value()); }

} // namespace iwgt::ad
