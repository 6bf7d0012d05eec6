#pragma once

#include <functional>
#include <string>

#include "pvf/tape.hpp"

namespace pvf {

// A trainable tensor plus its Adam state.
template <class T>
struct Parameter {
    std::string name;
    TensorPtr<T> value;
    std::vector<T> m, v;  // first/second moment buffers, same length as value
    int64_t step = 0;

    Parameter() = default;
    Parameter(std::string n, TensorPtr<T> t) : name(std::move(n)), value(std::move(t)) {
        value->requires_grad = true;
        m.assign(value->values.size(), T(0));
        v.assign(value->values.size(), T(0));
    }
};

template <class T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
    for (auto* p : params) p->value->zero_grad();
}

// Adam with bias correction. Parameters with an untouched grad buffer are
// treated as zero-gradient and keep their value.
template <class T>
void adam_step(const std::vector<Parameter<T>*>& params, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8) {
    for (auto* p : params) {
        p->step += 1;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(p->step));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(p->step));
        const size_t n = p->value->values.size();
        const bool has_grad = !p->value->grad.empty();
        for (size_t i = 0; i < n; ++i) {
            const double g = has_grad ? static_cast<double>(p->value->grad[i]) : 0.0;
            const double m = beta1 * p->m[i] + (1.0 - beta1) * g;
            const double v = beta2 * p->v[i] + (1.0 - beta2) * g * g;
            p->m[i] = static_cast<T>(m);
            p->v[i] = static_cast<T>(v);
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            p->value->values[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

inline double cosine_lr(double lr0, int64_t t, int64_t total) {
    if (total <= 0) return lr0;
    return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(t) /
                                       static_cast<double>(total)));
}

// Central finite differences against the tape gradient. f rebuilds the scalar
// loss from the current values of `inputs` on a fresh tape. Returns the max
// symmetric relative error over all coordinates of all inputs.
template <class T>
double grad_check(const std::function<TensorPtr<T>(Tape<T>&)>& f,
                  const std::vector<TensorPtr<T>>& inputs, double h = 1e-4) {
    for (const auto& in : inputs) in->requires_grad = true;

    Tape<T> tape;
    auto loss = f(tape);
    for (const auto& in : inputs) in->zero_grad();
    tape.backward(loss);

    std::vector<std::vector<T>> analytic;
    analytic.reserve(inputs.size());
    for (const auto& in : inputs) {
        in->ensure_grad();
        analytic.push_back(in->grad);
    }

    auto eval = [&]() -> double {
        Tape<T> t2;
        auto l = f(t2);
        return static_cast<double>(l->values[0]);
    };

    double max_rel = 0;
    for (size_t t = 0; t < inputs.size(); ++t) {
        auto& in = *inputs[t];
        for (size_t i = 0; i < in.values.size(); ++i) {
            const T saved = in.values[i];
            in.values[i] = saved + static_cast<T>(h);
            const double fp = eval();
            in.values[i] = saved - static_cast<T>(h);
            const double fm = eval();
            in.values[i] = saved;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = static_cast<double>(analytic[t][i]);
            const double rel = std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-6);
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace pvf
