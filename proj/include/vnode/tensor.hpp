#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "vnode/errors.hpp"
#include "vnode/rng.hpp"

namespace vnode {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major n-d array. Storage is shared between copies and treated as
// immutable once a tensor has been handed to another owner (a tape node, a
// solver, a checkpoint); mutation is confined to the construction phase and
// to parameter updates between training steps, when no trace is alive.
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>);

public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(check_numel(shape_), T{})) {}

    Tensor(Shape shape, std::vector<T> values)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
        if (shape_numel(shape_) != static_cast<std::int64_t>(data_->size()))
            throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                             " does not match shape " + shape_str(shape_));
        check_numel(shape_);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), value);
        return t;
    }

    static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

    static Tensor of(Shape shape, std::initializer_list<T> values) {
        return Tensor(std::move(shape), std::vector<T>(values));
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }

    std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }

    std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

    bool defined() const { return static_cast<bool>(data_); }

    const T* data() const { return data_->data(); }
    T* data() { return data_->data(); }

    T item() const {
        if (size() != 1) throw ContractError("item() requires a single-element tensor, got " + shape_str(shape_));
        return (*data_)[0];
    }

    const std::vector<T>& vec() const { return *data_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (T v : *data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<T>>(*data_);
        return t;
    }

    // Same storage, new shape. Element count must match.
    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != size())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_->size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>((*data_)[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    bool storage_shared_with(const Tensor& o) const { return data_ == o.data_; }

    bool storage_unique() const { return data_ && data_.use_count() == 1; }

private:
    static std::int64_t check_numel(const Shape& s) {
        for (auto d : s)
            if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(s));
        return shape_numel(s);
    }

    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;
};

template <typename T>
bool tensors_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) return false;
    for (std::int64_t i = 0; i < a.size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
    double m = 0;
    for (std::int64_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
    return m;
}

// inf-norm relative error with an absolute floor for near-zero pairs
template <typename T>
double rel_error(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-12) {
    if (!a.same_shape(b)) throw ShapeError("rel_error: shape mismatch");
    double scale = floor;
    for (std::int64_t i = 0; i < a.size(); ++i)
        scale = std::max({scale, std::abs(static_cast<double>(a.data()[i])),
                          std::abs(static_cast<double>(b.data()[i]))});
    return max_abs_diff(a, b) / scale;
}

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
    for (std::int64_t i = 0; i < t.size(); ++i)
        t.data()[i] = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
    Tensor<T> t(std::move(shape));
    fill_uniform(t, rng, lo, hi);
    return t;
}

template <typename T>
std::string to_string(const Tensor<T>& t, int max_elems = 16) {
    std::ostringstream os;
    os << shape_str(t.shape()) << " {";
    const std::int64_t n = std::min<std::int64_t>(t.size(), max_elems);
    for (std::int64_t i = 0; i < n; ++i) {
        if (i) os << ", ";
        os << t.data()[i];
    }
    if (t.size() > n) os << ", ...";
    os << "}";
    return os.str();
}

} // namespace vnode
