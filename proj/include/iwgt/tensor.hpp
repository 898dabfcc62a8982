#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "error.hpp"

namespace iwgt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

/// Dense row-major float64 array.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_size(shape), fill) {}
    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != shape_size(shape))
            throw ShapeError("Tensor: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    /// Leading extent of a 2-D tensor (1 for rank < 2).
    std::size_t rows() const { return shape.size() >= 2 ? shape[0] : 1; }
    /// Extent of the last axis (1 for a scalar).
    std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
    double item() const {
        if (data.size() != 1) throw ShapeError("Tensor::item on shape " + shape_str(shape));
        return data[0];
    }

    bool all_finite() const {
        for (double x : data)
            if (!std::isfinite(x)) return false;
        return true;
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Named parameters in insertion order, each with a gradient slot of the same shape.
class ParameterSet {
public:
    struct Entry {
        std::string name;
        Tensor value;
        Tensor grad;
    };

    Tensor& add(const std::string& name, Tensor value) {
        if (index_.contains(name)) throw InvalidArgument("ParameterSet: duplicate parameter '" + name + "'");
        index_[name] = entries_.size();
        Tensor grad(value.shape, 0.0);
        entries_.push_back(Entry{name, std::move(value), std::move(grad)});
        return entries_.back().value;
    }

    bool contains(const std::string& name) const { return index_.contains(name); }

    std::size_t index(const std::string& name) const {
        const auto it = index_.find(name);
        if (it == index_.end()) throw InvalidArgument("ParameterSet: no parameter '" + name + "'");
        return it->second;
    }

    Tensor& value(const std::string& name) { return entries_[index(name)].value; }
    const Tensor& value(const std::string& name) const { return entries_[index(name)].value; }
    Tensor& grad(const std::string& name) { return entries_[index(name)].grad; }
    const Tensor& grad(const std::string& name) const { return entries_[index(name)].grad; }

    Entry& entry(std::size_t i) { return entries_[i]; }
    const Entry& entry(std::size_t i) const { return entries_[i]; }
    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    void zero_grad() {
        for (auto& e : entries_) std::fill(e.grad.data.begin(), e.grad.data.end(), 0.0);
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

    /// Copy of the parameters whose names satisfy `keep`, with zeroed gradients.
    ParameterSet subset(const std::function<bool(const std::string&)>& keep) const {
        ParameterSet out;
        for (const auto& e : entries_)
            if (keep(e.name)) out.add(e.name, e.value);
        return out;
    }

    bool values_equal(const ParameterSet& other) const {
        if (other.size() != size()) return false;
        for (std::size_t i = 0; i < size(); ++i)
            if (entries_[i].name != other.entries_[i].name || entries_[i].value != other.entries_[i].value) return false;
        return true;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

} // namespace iwgt
