#pragma once

#include <memory>

#include "pvf/common.hpp"

namespace pvf {

// Dense row-major tensor. Values are immutable after the forward op that
// created them; only the grad buffer is written during backward.
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until backward touches this tensor
    bool requires_grad = false;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), values(pvf::numel(shape), T(0)) {
        AllocStats::on_alloc(static_cast<int64_t>(values.size() * sizeof(T)));
    }
    ~Tensor() {
        AllocStats::on_free(
            static_cast<int64_t>((values.capacity() + grad.capacity()) * sizeof(T)));
    }
    Tensor(const Tensor&) = delete;
    Tensor& operator=(const Tensor&) = delete;

    int64_t numel() const { return static_cast<int64_t>(values.size()); }
    int64_t rank() const { return static_cast<int64_t>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T* data() { return values.data(); }
    const T* data() const { return values.data(); }

    void ensure_grad() {
        if (grad.empty()) {
            grad.assign(values.size(), T(0));
            AllocStats::on_alloc(static_cast<int64_t>(grad.size() * sizeof(T)));
        }
    }
    T* grad_data() {
        ensure_grad();
        return grad.data();
    }
    void zero_grad() {
        if (!grad.empty()) grad.assign(grad.size(), T(0));
    }
};

template <class T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <class T>
TensorPtr<T> make_tensor(Shape shape) {
    return std::make_shared<Tensor<T>>(std::move(shape));
}

template <class T>
TensorPtr<T> full(Shape shape, T v) {
    auto t = make_tensor<T>(std::move(shape));
    std::fill(t->values.begin(), t->values.end(), v);
    return t;
}

template <class T>
TensorPtr<T> zeros(Shape shape) {
    return make_tensor<T>(std::move(shape));
}

template <class T>
TensorPtr<T> ones(Shape shape) {
    return full<T>(std::move(shape), T(1));
}

template <class T>
TensorPtr<T> from_values(Shape shape, std::vector<T> v) {
    if (static_cast<int64_t>(v.size()) != numel(shape))
        throw DimensionError("from_values: data length does not match shape " + shape_str(shape));
    auto t = make_tensor<T>(std::move(shape));
    t->values = std::move(v);
    return t;
}

template <class T>
TensorPtr<T> randn(Shape shape, Rng& rng, double stddev = 1.0) {
    auto t = make_tensor<T>(std::move(shape));
    for (auto& x : t->values) x = static_cast<T>(rng.normal() * stddev);
    return t;
}

template <class T>
TensorPtr<T> rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
    auto t = make_tensor<T>(std::move(shape));
    for (auto& x : t->values) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <class T>
TensorPtr<T> clone(const TensorPtr<T>& src) {
    auto t = make_tensor<T>(src->shape);
    t->values = src->values;
    t->requires_grad = src->requires_grad;
    return t;
}

template <class T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.values)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

// Converts between f32/f64 storage.
template <class To, class From>
TensorPtr<To> cast(const TensorPtr<From>& src) {
    auto t = make_tensor<To>(src->shape);
    for (size_t i = 0; i < src->values.size(); ++i)
        t->values[i] = static_cast<To>(src->values[i]);
    return t;
}

}  // namespace pvf
