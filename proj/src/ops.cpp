#include "pvf/ops.hpp"

#include <algorithm>
#include <cmath>

#include "parallel.hpp"

namespace pvf {

namespace {

template <class T>
void check_same_shape(const char* op, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape != b->shape)
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a->shape) +
                             " vs " + shape_str(b->shape));
}

template <class T>
int64_t row_size(const TensorPtr<T>& x) {
    return x->dim(0) == 0 ? 0 : x->numel() / x->dim(0);
}

}  // namespace

// ---------------------------------------------------------------------------
// linear

template <class T>
TensorPtr<T> linear(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& W,
                    const TensorPtr<T>& b) {
    if (x->rank() != 2 || W->rank() != 2 || b->rank() != 1)
        throw DimensionError("linear: expected x [N,Cin], W [Cin,Cout], b [Cout]");
    const int64_t N = x->dim(0), Cin = x->dim(1), Cout = W->dim(1);
    if (W->dim(0) != Cin || b->dim(0) != Cout)
        throw DimensionError("linear: inner dimensions disagree: x " + shape_str(x->shape) +
                             ", W " + shape_str(W->shape) + ", b " + shape_str(b->shape));

    auto y = make_tensor<T>({N, Cout});
    const T* xp = x->data();
    const T* wp = W->data();
    const T* bp = b->data();
    T* yp = y->data();
    par_for(N, 8, [&](int64_t n) {
        T* yr = yp + n * Cout;
        for (int64_t j = 0; j < Cout; ++j) yr[j] = bp[j];
        const T* xr = xp + n * Cin;
        for (int64_t i = 0; i < Cin; ++i) {
            const T xv = xr[i];
            const T* wr = wp + i * Cout;
            for (int64_t j = 0; j < Cout; ++j) yr[j] += xv * wr[j];
        }
    });

    if (any_requires_grad<T>({&x, &W, &b})) {
        y->requires_grad = true;
        tape.record("linear", [x, W, b, y, N, Cin, Cout]() {
            const T* gy = y->grad_data();
            if (x->requires_grad) {
                T* gx = x->grad_data();
                const T* wp = W->data();
                par_for(N, 8, [&](int64_t n) {
                    const T* gyr = gy + n * Cout;
                    T* gxr = gx + n * Cin;
                    for (int64_t i = 0; i < Cin; ++i) {
                        const T* wr = wp + i * Cout;
                        T acc = 0;
                        for (int64_t j = 0; j < Cout; ++j) acc += gyr[j] * wr[j];
                        gxr[i] += acc;
                    }
                });
            }
            if (W->requires_grad) {
                T* gw = W->grad_data();
                const T* xp = x->data();
                par_for(Cin, 4, [&](int64_t i) {
                    T* gwr = gw + i * Cout;
                    for (int64_t n = 0; n < N; ++n) {
                        const T xv = xp[n * Cin + i];
                        const T* gyr = gy + n * Cout;
                        for (int64_t j = 0; j < Cout; ++j) gwr[j] += xv * gyr[j];
                    }
                });
            }
            if (b->requires_grad) {
                T* gb = b->grad_data();
                for (int64_t n = 0; n < N; ++n) {
                    const T* gyr = gy + n * Cout;
                    for (int64_t j = 0; j < Cout; ++j) gb[j] += gyr[j];
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// elementwise

template <class T>
TensorPtr<T> relu(Tape<T>& tape, const TensorPtr<T>& x) {
    auto y = make_tensor<T>(x->shape);
    const int64_t n = x->numel();
    const T* xp = x->data();
    T* yp = y->data();
    for (int64_t i = 0; i < n; ++i) yp[i] = xp[i] > T(0) ? xp[i] : T(0);
    if (x->requires_grad) {
        y->requires_grad = true;
        tape.record("relu", [x, y, n]() {
            const T* gy = y->grad_data();
            const T* xp = x->data();
            T* gx = x->grad_data();
            for (int64_t i = 0; i < n; ++i)
                if (xp[i] > T(0)) gx[i] += gy[i];
        });
    }
    return y;
}

template <class T>
TensorPtr<T> gelu(Tape<T>& tape, const TensorPtr<T>& x) {
    auto y = make_tensor<T>(x->shape);
    const int64_t n = x->numel();
    const T* xp = x->data();
    T* yp = y->data();
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    for (int64_t i = 0; i < n; ++i) {
        double v = static_cast<double>(xp[i]);
        yp[i] = static_cast<T>(v * 0.5 * (1.0 + std::erf(v * kInvSqrt2)));
    }
    if (x->requires_grad) {
        y->requires_grad = true;
        tape.record("gelu", [x, y, n]() {
            const T* gy = y->grad_data();
            const T* xp = x->data();
            T* gx = x->grad_data();
            constexpr double kInvSqrt2Pi = 0.39894228040143267794;
            for (int64_t i = 0; i < n; ++i) {
                double v = static_cast<double>(xp[i]);
                double cdf = 0.5 * (1.0 + std::erf(v * 0.70710678118654752440));
                double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                gx[i] += gy[i] * static_cast<T>(cdf + v * pdf);
            }
        });
    }
    return y;
}

template <class T>
TensorPtr<T> tanh_op(Tape<T>& tape, const TensorPtr<T>& x) {
    auto y = make_tensor<T>(x->shape);
    const int64_t n = x->numel();
    const T* xp = x->data();
    T* yp = y->data();
    for (int64_t i = 0; i < n; ++i) yp[i] = std::tanh(xp[i]);
    if (x->requires_grad) {
        y->requires_grad = true;
        tape.record("tanh", [x, y, n]() {
            const T* gy = y->grad_data();
            const T* yp = y->data();
            T* gx = x->grad_data();
            for (int64_t i = 0; i < n; ++i) gx[i] += gy[i] * (T(1) - yp[i] * yp[i]);
        });
    }
    return y;
}

template <class T>
TensorPtr<T> add(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    check_same_shape("add", a, b);
    auto y = make_tensor<T>(a->shape);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) y->values[i] = a->values[i] + b->values[i];
    if (any_requires_grad<T>({&a, &b})) {
        y->requires_grad = true;
        tape.record("add", [a, b, y, n]() {
            const T* gy = y->grad_data();
            if (a->requires_grad) {
                T* ga = a->grad_data();
                for (int64_t i = 0; i < n; ++i) ga[i] += gy[i];
            }
            if (b->requires_grad) {
                T* gb = b->grad_data();
                for (int64_t i = 0; i < n; ++i) gb[i] += gy[i];
            }
        });
    }
    return y;
}

template <class T>
TensorPtr<T> sub(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    check_same_shape("sub", a, b);
    auto y = make_tensor<T>(a->shape);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) y->values[i] = a->values[i] - b->values[i];
    if (any_requires_grad<T>({&a, &b})) {
        y->requires_grad = true;
        tape.record("sub", [a, b, y, n]() {
            const T* gy = y->grad_data();
            if (a->requires_grad) {
                T* ga = a->grad_data();
                for (int64_t i = 0; i < n; ++i) ga[i] += gy[i];
            }
            if (b->requires_grad) {
                T* gb = b->grad_data();
                for (int64_t i = 0; i < n; ++i) gb[i] -= gy[i];
            }
        });
    }
    return y;
}

template <class T>
TensorPtr<T> mul(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    check_same_shape("mul", a, b);
    auto y = make_tensor<T>(a->shape);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) y->values[i] = a->values[i] * b->values[i];
    if (any_requires_grad<T>({&a, &b})) {
        y->requires_grad = true;
        tape.record("mul", [a, b, y, n]() {
            const T* gy = y->grad_data();
            if (a->requires_grad) {
                T* ga = a->grad_data();
                const T* bp = b->data();
                for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] * bp[i];
            }
            if (b->requires_grad) {
                T* gb = b->grad_data();
                const T* ap = a->data();
                for (int64_t i = 0; i < n; ++i) gb[i] += gy[i] * ap[i];
            }
        });
    }
    return y;
}

template <class T>
TensorPtr<T> scale(Tape<T>& tape, const TensorPtr<T>& a, double s) {
    auto y = make_tensor<T>(a->shape);
    const int64_t n = a->numel();
    const T sv = static_cast<T>(s);
    for (int64_t i = 0; i < n; ++i) y->values[i] = a->values[i] * sv;
    if (a->requires_grad) {
        y->requires_grad = true;
        tape.record("scale", [a, y, n, sv]() {
            const T* gy = y->grad_data();
            T* ga = a->grad_data();
            for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] * sv;
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// layer_norm

template <class T>
TensorPtr<T> layer_norm(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                        const TensorPtr<T>& beta, double eps) {
    if (x->rank() != 2) throw DimensionError("layer_norm: expected [N,C]");
    const int64_t N = x->dim(0), C = x->dim(1);
    if (gamma->numel() != C || beta->numel() != C)
        throw DimensionError("layer_norm: gamma/beta must have C elements");

    auto y = make_tensor<T>(x->shape);
    auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(N * C));
    auto istd = std::make_shared<std::vector<T>>(static_cast<size_t>(N));
    const T* xp = x->data();
    const T* gp = gamma->data();
    const T* bp = beta->data();
    T* yp = y->data();
    T* xh = xhat->data();
    T* isd = istd->data();
    par_for(N, 16, [&](int64_t n) {
        const T* xr = xp + n * C;
        double mu = 0;
        for (int64_t c = 0; c < C; ++c) mu += xr[c];
        mu /= static_cast<double>(C);
        double var = 0;
        for (int64_t c = 0; c < C; ++c) {
            double d = xr[c] - mu;
            var += d * d;
        }
        var /= static_cast<double>(C);
        const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
        isd[n] = is;
        T* xhr = xh + n * C;
        T* yr = yp + n * C;
        for (int64_t c = 0; c < C; ++c) {
            xhr[c] = (xr[c] - static_cast<T>(mu)) * is;
            yr[c] = gp[c] * xhr[c] + bp[c];
        }
    });

    if (any_requires_grad<T>({&x, &gamma, &beta})) {
        y->requires_grad = true;
        tape.record("layer_norm", [x, gamma, beta, y, xhat, istd, N, C]() {
            const T* gy = y->grad_data();
            const T* xh = xhat->data();
            const T* isd = istd->data();
            if (gamma->requires_grad) {
                T* gg = gamma->grad_data();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) gg[c] += gy[n * C + c] * xh[n * C + c];
            }
            if (beta->requires_grad) {
                T* gb = beta->grad_data();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) gb[c] += gy[n * C + c];
            }
            if (x->requires_grad) {
                T* gx = x->grad_data();
                const T* gp = gamma->data();
                par_for(N, 16, [&](int64_t n) {
                    const T* gyr = gy + n * C;
                    const T* xhr = xh + n * C;
                    T* gxr = gx + n * C;
                    double m1 = 0, m2 = 0;  // mean(dxhat), mean(dxhat*xhat)
                    for (int64_t c = 0; c < C; ++c) {
                        double dxh = static_cast<double>(gyr[c]) * gp[c];
                        m1 += dxh;
                        m2 += dxh * xhr[c];
                    }
                    m1 /= static_cast<double>(C);
                    m2 /= static_cast<double>(C);
                    for (int64_t c = 0; c < C; ++c) {
                        double dxh = static_cast<double>(gyr[c]) * gp[c];
                        gxr[c] += static_cast<T>(isd[n] * (dxh - m1 - xhr[c] * m2));
                    }
                });
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// concatenation and row ops

template <class T>
TensorPtr<T> concat_channels(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->rank() != 2 || b->rank() != 2 || a->dim(0) != b->dim(0))
        throw DimensionError("concat_channels: expected [N,Ca] and [N,Cb]");
    const int64_t N = a->dim(0), Ca = a->dim(1), Cb = b->dim(1);
    auto y = make_tensor<T>({N, Ca + Cb});
    for (int64_t n = 0; n < N; ++n) {
        std::copy_n(a->data() + n * Ca, Ca, y->data() + n * (Ca + Cb));
        std::copy_n(b->data() + n * Cb, Cb, y->data() + n * (Ca + Cb) + Ca);
    }
    if (any_requires_grad<T>({&a, &b})) {
        y->requires_grad = true;
        tape.record("concat_channels", [a, b, y, N, Ca, Cb]() {
            const T* gy = y->grad_data();
            if (a->requires_grad) {
                T* ga = a->grad_data();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < Ca; ++c) ga[n * Ca + c] += gy[n * (Ca + Cb) + c];
            }
            if (b->requires_grad) {
                T* gb = b->grad_data();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < Cb; ++c) gb[n * Cb + c] += gy[n * (Ca + Cb) + Ca + c];
            }
        });
    }
    return y;
}

template <class T>
TensorPtr<T> concat_rows(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->rank() != b->rank() || a->rank() < 1)
        throw DimensionError("concat_rows: rank mismatch");
    for (int i = 1; i < a->rank(); ++i)
        if (a->dim(i) != b->dim(i)) throw DimensionError("concat_rows: trailing dims differ");
    Shape s = a->shape;
    s[0] += b->dim(0);
    auto y = make_tensor<T>(s);
    std::copy(a->values.begin(), a->values.end(), y->values.begin());
    std::copy(b->values.begin(), b->values.end(), y->values.begin() + a->numel());
    if (any_requires_grad<T>({&a, &b})) {
        y->requires_grad = true;
        const int64_t na = a->numel(), nb = b->numel();
        tape.record("concat_rows", [a, b, y, na, nb]() {
            const T* gy = y->grad_data();
            if (a->requires_grad) {
                T* ga = a->grad_data();
                for (int64_t i = 0; i < na; ++i) ga[i] += gy[i];
            }
            if (b->requires_grad) {
                T* gb = b->grad_data();
                for (int64_t i = 0; i < nb; ++i) gb[i] += gy[na + i];
            }
        });
    }
    return y;
}

template <class T>
TensorPtr<T> take_rows(Tape<T>& tape, const TensorPtr<T>& x, int64_t offset, int64_t count) {
    if (x->rank() < 1 || offset < 0 || count < 0 || offset + count > x->dim(0))
        throw DimensionError("take_rows: slice out of range");
    const int64_t rs = row_size(x);
    Shape s = x->shape;
    s[0] = count;
    auto y = make_tensor<T>(s);
    std::copy_n(x->data() + offset * rs, count * rs, y->data());
    if (x->requires_grad) {
        y->requires_grad = true;
        tape.record("take_rows", [x, y, offset, count, rs]() {
            const T* gy = y->grad_data();
            T* gx = x->grad_data();
            for (int64_t i = 0; i < count * rs; ++i) gx[offset * rs + i] += gy[i];
        });
    }
    return y;
}

template <class T>
TensorPtr<T> transpose2d(Tape<T>& tape, const TensorPtr<T>& x) {
    if (x->rank() != 2) throw DimensionError("transpose2d: expected rank-2 tensor");
    const int64_t R = x->dim(0), C = x->dim(1);
    auto y = make_tensor<T>({C, R});
    const T* xp = x->data();
    T* yp = y->data();
    for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < C; ++c) yp[c * R + r] = xp[r * C + c];
    if (x->requires_grad) {
        y->requires_grad = true;
        tape.record("transpose2d", [x, y, R, C]() {
            const T* gy = y->grad_data();
            T* gx = x->grad_data();
            for (int64_t r = 0; r < R; ++r)
                for (int64_t c = 0; c < C; ++c) gx[r * C + c] += gy[c * R + r];
        });
    }
    return y;
}

template <class T>
TensorPtr<T> reshape(Tape<T>& tape, const TensorPtr<T>& x, Shape shape) {
    if (numel(shape) != x->numel())
        throw DimensionError("reshape: element count mismatch " + shape_str(x->shape) + " -> " +
                             shape_str(shape));
    auto y = make_tensor<T>(std::move(shape));
    y->values = x->values;
    if (x->requires_grad) {
        y->requires_grad = true;
        tape.record("reshape", [x, y]() {
            const T* gy = y->grad_data();
            T* gx = x->grad_data();
            for (int64_t i = 0; i < x->numel(); ++i) gx[i] += gy[i];
        });
    }
    return y;
}

template <class T>
TensorPtr<T> gather_rows(Tape<T>& tape, const TensorPtr<T>& x, const std::vector<int64_t>& idx) {
    if (x->rank() != 2) throw DimensionError("gather_rows: expected [N,C]");
    const int64_t N = x->dim(0), C = x->dim(1), M = static_cast<int64_t>(idx.size());
    for (int64_t i : idx)
        if (i < 0 || i >= N) throw DimensionError("gather_rows: index out of range");
    auto y = make_tensor<T>({M, C});
    par_for(M, 256, [&](int64_t m) {
        std::copy_n(x->data() + idx[static_cast<size_t>(m)] * C, C, y->data() + m * C);
    });
    if (x->requires_grad) {
        y->requires_grad = true;
        auto saved = std::make_shared<std::vector<int64_t>>(idx);
        tape.record("gather_rows", [x, y, saved, M, C]() {
            const T* gy = y->grad_data();
            T* gx = x->grad_data();
            for (int64_t m = 0; m < M; ++m) {
                T* gr = gx + (*saved)[static_cast<size_t>(m)] * C;
                const T* gyr = gy + m * C;
                for (int64_t c = 0; c < C; ++c) gr[c] += gyr[c];
            }
        });
    }
    return y;
}

template <class T>
TensorPtr<T> repeat_rows(Tape<T>& tape, const TensorPtr<T>& x, int64_t k) {
    if (x->rank() != 2 || k < 1) throw DimensionError("repeat_rows: expected [N,C], k >= 1");
    const int64_t N = x->dim(0), C = x->dim(1);
    auto y = make_tensor<T>({N * k, C});
    par_for(N, 256, [&](int64_t n) {
        for (int64_t r = 0; r < k; ++r)
            std::copy_n(x->data() + n * C, C, y->data() + (n * k + r) * C);
    });
    if (x->requires_grad) {
        y->requires_grad = true;
        tape.record("repeat_rows", [x, y, N, C, k]() {
            const T* gy = y->grad_data();
            T* gx = x->grad_data();
            par_for(N, 256, [&](int64_t n) {
                T* gr = gx + n * C;
                for (int64_t r = 0; r < k; ++r) {
                    const T* gyr = gy + (n * k + r) * C;
                    for (int64_t c = 0; c < C; ++c) gr[c] += gyr[c];
                }
            });
        });
    }
    return y;
}

template <class T>
TensorPtr<T> rowgroup_max(Tape<T>& tape, const TensorPtr<T>& x, int64_t k) {
    if (x->rank() != 2 || k < 1 || x->dim(0) % k != 0)
        throw DimensionError("rowgroup_max: first extent must be a multiple of k");
    const int64_t N = x->dim(0) / k, C = x->dim(1);
    auto y = make_tensor<T>({N, C});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * C));
    par_for(N, 64, [&](int64_t n) {
        const T* base = x->data() + n * k * C;
        T* yr = y->data() + n * C;
        int64_t* am = argmax->data() + n * C;
        for (int64_t c = 0; c < C; ++c) {
            yr[c] = base[c];
            am[c] = n * k;
        }
        for (int64_t r = 1; r < k; ++r) {
            const T* row = base + r * C;
            for (int64_t c = 0; c < C; ++c) {
                if (row[c] > yr[c]) {
                    yr[c] = row[c];
                    am[c] = n * k + r;
                }
            }
        }
    });
    if (x->requires_grad) {
        y->requires_grad = true;
        tape.record("rowgroup_max", [x, y, argmax, N, C]() {
            const T* gy = y->grad_data();
            T* gx = x->grad_data();
            const int64_t* am = argmax->data();
            for (int64_t i = 0; i < N * C; ++i) gx[am[i] * C + i % C] += gy[i];
        });
    }
    return y;
}

template <class T>
TensorPtr<T> rowgroup_mean(Tape<T>& tape, const TensorPtr<T>& x, int64_t k) {
    if (x->rank() != 2 || k < 1 || x->dim(0) % k != 0)
        throw DimensionError("rowgroup_mean: first extent must be a multiple of k");
    const int64_t N = x->dim(0) / k, C = x->dim(1);
    auto y = make_tensor<T>({N, C});
    const T inv = T(1) / static_cast<T>(k);
    par_for(N, 64, [&](int64_t n) {
        const T* base = x->data() + n * k * C;
        T* yr = y->data() + n * C;
        for (int64_t r = 0; r < k; ++r)
            for (int64_t c = 0; c < C; ++c) yr[c] += base[r * C + c];
        for (int64_t c = 0; c < C; ++c) yr[c] *= inv;
    });
    if (x->requires_grad) {
        y->requires_grad = true;
        tape.record("rowgroup_mean", [x, y, N, C, k, inv]() {
            const T* gy = y->grad_data();
            T* gx = x->grad_data();
            par_for(N, 64, [&](int64_t n) {
                const T* gyr = gy + n * C;
                T* base = gx + n * k * C;
                for (int64_t r = 0; r < k; ++r)
                    for (int64_t c = 0; c < C; ++c) base[r * C + c] += gyr[c] * inv;
            });
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// reductions and losses

template <class T>
TensorPtr<T> sum_all(Tape<T>& tape, const TensorPtr<T>& x) {
    auto y = make_tensor<T>({1});
    double acc = 0;
    for (T v : x->values) acc += v;
    y->values[0] = static_cast<T>(acc);
    if (x->requires_grad) {
        y->requires_grad = true;
        tape.record("sum_all", [x, y]() {
            const T g = y->grad_data()[0];
            T* gx = x->grad_data();
            for (int64_t i = 0; i < x->numel(); ++i) gx[i] += g;
        });
    }
    return y;
}

template <class T>
TensorPtr<T> mean_all(Tape<T>& tape, const TensorPtr<T>& x) {
    auto y = make_tensor<T>({1});
    double acc = 0;
    for (T v : x->values) acc += v;
    const int64_t n = x->numel();
    y->values[0] = static_cast<T>(acc / static_cast<double>(n));
    if (x->requires_grad) {
        y->requires_grad = true;
        tape.record("mean_all", [x, y, n]() {
            const T g = y->grad_data()[0] / static_cast<T>(n);
            T* gx = x->grad_data();
            for (int64_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return y;
}

template <class T>
TensorPtr<T> mse(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    check_same_shape("mse", a, b);
    auto y = make_tensor<T>({1});
    const int64_t n = a->numel();
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        double d = static_cast<double>(a->values[i]) - b->values[i];
        acc += d * d;
    }
    y->values[0] = static_cast<T>(acc / static_cast<double>(n));
    if (any_requires_grad<T>({&a, &b})) {
        y->requires_grad = true;
        tape.record("mse", [a, b, y, n]() {
            const T g = y->grad_data()[0] * T(2) / static_cast<T>(n);
            const T* ap = a->data();
            const T* bp = b->data();
            if (a->requires_grad) {
                T* ga = a->grad_data();
                for (int64_t i = 0; i < n; ++i) ga[i] += g * (ap[i] - bp[i]);
            }
            if (b->requires_grad) {
                T* gb = b->grad_data();
                for (int64_t i = 0; i < n; ++i) gb[i] -= g * (ap[i] - bp[i]);
            }
        });
    }
    return y;
}

template <class T>
TensorPtr<T> softmax_cross_entropy(Tape<T>& tape, const TensorPtr<T>& logits,
                                   const std::vector<int32_t>& labels,
                                   const std::vector<T>& class_weights) {
    if (logits->rank() != 2) throw DimensionError("softmax_cross_entropy: expected [N,L]");
    const int64_t N = logits->dim(0), L = logits->dim(1);
    if (static_cast<int64_t>(labels.size()) != N)
        throw DimensionError("softmax_cross_entropy: labels length mismatch");
    if (!class_weights.empty() && static_cast<int64_t>(class_weights.size()) != L)
        throw DimensionError("softmax_cross_entropy: class_weights length mismatch");
    for (int32_t l : labels)
        if (l < 0 || l >= L) throw DataError("softmax_cross_entropy: label out of range");

    auto y = make_tensor<T>({1});
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(N * L));
    const T* xp = logits->data();
    T* pp = probs->data();
    double loss = 0;
    for (int64_t n = 0; n < N; ++n) {
        const T* xr = xp + n * L;
        double m = xr[0];
        for (int64_t j = 1; j < L; ++j) m = std::max(m, static_cast<double>(xr[j]));
        double z = 0;
        for (int64_t j = 0; j < L; ++j) z += std::exp(static_cast<double>(xr[j]) - m);
        const double logz = std::log(z) + m;
        T* pr = pp + n * L;
        for (int64_t j = 0; j < L; ++j)
            pr[j] = static_cast<T>(std::exp(static_cast<double>(xr[j]) - logz));
        const double w = class_weights.empty()
                             ? 1.0
                             : static_cast<double>(class_weights[static_cast<size_t>(labels[n])]);
        loss += w * (logz - static_cast<double>(xr[labels[n]]));
    }
    y->values[0] = static_cast<T>(loss / static_cast<double>(N));

    if (logits->requires_grad) {
        y->requires_grad = true;
        auto lbl = std::make_shared<std::vector<int32_t>>(labels);
        auto cw = std::make_shared<std::vector<T>>(class_weights);
        tape.record("softmax_cross_entropy", [logits, y, probs, lbl, cw, N, L]() {
            const T g = y->grad_data()[0] / static_cast<T>(N);
            T* gx = logits->grad_data();
            const T* pp = probs->data();
            for (int64_t n = 0; n < N; ++n) {
                const int32_t t = (*lbl)[static_cast<size_t>(n)];
                const T w = cw->empty() ? T(1) : (*cw)[static_cast<size_t>(t)];
                const T* pr = pp + n * L;
                T* gr = gx + n * L;
                for (int64_t j = 0; j < L; ++j)
                    gr[j] += g * w * (pr[j] - (j == t ? T(1) : T(0)));
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// density_normalize

template <class T>
TensorPtr<T> density_normalize(Tape<T>& tape, const TensorPtr<T>& x, double eps) {
    if (x->rank() < 2 || x->dim(0) < 2)
        throw DimensionError("density_normalize: expected [C+1,...] with C >= 1");
    const int64_t C = x->dim(0) - 1;
    const int64_t M = x->numel() / x->dim(0);
    Shape s = x->shape;
    s[0] = C;
    auto y = make_tensor<T>(s);
    const T* xp = x->data();
    const T* wp = xp + C * M;
    T* yp = y->data();
    const T e = static_cast<T>(eps);
    par_for(C, 2, [&](int64_t c) {
        const T* xr = xp + c * M;
        T* yr = yp + c * M;
        for (int64_t m = 0; m < M; ++m) yr[m] = xr[m] / (wp[m] + e);
    });
    if (x->requires_grad) {
        y->requires_grad = true;
        tape.record("density_normalize", [x, y, C, M, e]() {
            const T* gy = y->grad_data();
            T* gx = x->grad_data();
            const T* xp = x->data();
            const T* wp = xp + C * M;
            T* gw = gx + C * M;
            for (int64_t c = 0; c < C; ++c) {
                const T* gyr = gy + c * M;
                const T* xr = xp + c * M;
                T* gxr = gx + c * M;
                for (int64_t m = 0; m < M; ++m) {
                    const T den = wp[m] + e;
                    gxr[m] += gyr[m] / den;
                    gw[m] -= gyr[m] * xr[m] / (den * den);
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// box smoothing (separable, zero-padded)

namespace {

// One zero-padded 1D box pass along an axis described by (lines, length,
// stride). line_base(l) gives the offset of line l's first element.
template <class T, class BaseFn>
void box_pass_axis(const T* in, T* out, int64_t lines, int64_t len, int64_t stride, int radius,
                   BaseFn base) {
    const T inv = T(1) / static_cast<T>(2 * radius + 1);
    par_for(lines, 16, [&](int64_t l) {
        const int64_t b = base(l);
        double run = 0;
        for (int64_t i = 0; i < std::min<int64_t>(radius + 1, len); ++i)
            run += in[b + i * stride];
        for (int64_t i = 0; i < len; ++i) {
            out[b + i * stride] = static_cast<T>(run) * inv;
            const int64_t enter = i + radius + 1, leave = i - radius;
            if (enter < len) run += in[b + enter * stride];
            if (leave >= 0) run -= in[b + leave * stride];
        }
    });
}

template <class T>
void box_smooth_values(const T* in, T* out, int64_t C, Dims3 g, int width, int passes,
                       std::vector<T>& scratch) {
    const int64_t vox = g.voxels();
    const int r = (width - 1) / 2;
    scratch.resize(static_cast<size_t>(C * vox));
    // Ping-pong between out and scratch; a pass must never run in place
    // because the running sum rereads positions it already wrote.
    const T* src = in;
    T* dst = out;
    T* other = scratch.data();
    for (int p = 0; p < passes; ++p) {
        for (int axis = 0; axis < 3; ++axis) {
            if (axis == 0) {
                box_pass_axis<T>(src, dst, C * g.h * g.w, g.d, g.h * g.w, r, [&](int64_t l) {
                    return (l / (g.h * g.w)) * vox + l % (g.h * g.w);
                });
            } else if (axis == 1) {
                box_pass_axis<T>(src, dst, C * g.d * g.w, g.h, g.w, r, [&](int64_t l) {
                    const int64_t c = l / (g.d * g.w);
                    const int64_t rest = l % (g.d * g.w);
                    return c * vox + (rest / g.w) * g.h * g.w + rest % g.w;
                });
            } else {
                box_pass_axis<T>(src, dst, C * g.d * g.h, g.w, 1, r,
                                 [&](int64_t l) { return l * g.w; });
            }
            src = dst;
            std::swap(dst, other);
        }
    }
    if (src != out) std::copy_n(src, C * vox, out);
}

}  // namespace

template <class T>
TensorPtr<T> box_smooth(Tape<T>& tape, const TensorPtr<T>& grid, int width, int passes) {
    if (grid->rank() != 4) throw DimensionError("box_smooth: expected [C,D,H,W]");
    if (width < 1 || width % 2 == 0) throw DimensionError("box_smooth: width must be odd");
    const int64_t C = grid->dim(0);
    const Dims3 g{grid->dim(1), grid->dim(2), grid->dim(3)};
    auto y = make_tensor<T>(grid->shape);
    std::vector<T> scratch;
    box_smooth_values(grid->data(), y->data(), C, g, width, passes, scratch);
    if (grid->requires_grad) {
        y->requires_grad = true;
        tape.record("box_smooth", [grid, y, C, g, width, passes]() {
            // zero-padded box kernels are symmetric: adjoint = same smoothing
            const int64_t n = grid->numel();
            std::vector<T> gs(static_cast<size_t>(n));
            std::vector<T> scratch;
            box_smooth_values(y->grad_data(), gs.data(), C, g, width, passes, scratch);
            T* gx = grid->grad_data();
            for (int64_t i = 0; i < n; ++i) gx[i] += gs[i];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// pooling / resize

template <class T>
TensorPtr<T> avg_pool3d_2x(Tape<T>& tape, const TensorPtr<T>& grid) {
    if (grid->rank() != 4) throw DimensionError("avg_pool3d_2x: expected [C,D,H,W]");
    const int64_t C = grid->dim(0), D = grid->dim(1), H = grid->dim(2), W = grid->dim(3);
    if (D % 2 || H % 2 || W % 2) throw DimensionError("avg_pool3d_2x: dims must be even");
    const int64_t d = D / 2, h = H / 2, w = W / 2;
    auto y = make_tensor<T>({C, d, h, w});
    const T* xp = grid->data();
    T* yp = y->data();
    par_for(C * d, 4, [&](int64_t cd) {
        const int64_t c = cd / d, i = cd % d;
        for (int64_t j = 0; j < h; ++j)
            for (int64_t k = 0; k < w; ++k) {
                double acc = 0;
                for (int64_t a = 0; a < 2; ++a)
                    for (int64_t b = 0; b < 2; ++b)
                        for (int64_t e = 0; e < 2; ++e)
                            acc += xp[((c * D + 2 * i + a) * H + 2 * j + b) * W + 2 * k + e];
                yp[((c * d + i) * h + j) * w + k] = static_cast<T>(acc * 0.125);
            }
    });
    if (grid->requires_grad) {
        y->requires_grad = true;
        tape.record("avg_pool3d_2x", [grid, y, C, D, H, W, d, h, w]() {
            const T* gy = y->grad_data();
            T* gx = grid->grad_data();
            par_for(C * d, 4, [&](int64_t cd) {
                const int64_t c = cd / d, i = cd % d;
                for (int64_t j = 0; j < h; ++j)
                    for (int64_t k = 0; k < w; ++k) {
                        const T g = gy[((c * d + i) * h + j) * w + k] * T(0.125);
                        for (int64_t a = 0; a < 2; ++a)
                            for (int64_t b = 0; b < 2; ++b)
                                for (int64_t e = 0; e < 2; ++e)
                                    gx[((c * D + 2 * i + a) * H + 2 * j + b) * W + 2 * k + e] += g;
                    }
            });
        });
    }
    return y;
}

namespace {

struct AxisLerp {
    int64_t i0, i1;
    double f;
};

inline void make_axis_lerp(int64_t out_n, int64_t in_n, std::vector<AxisLerp>& v) {
    v.resize(static_cast<size_t>(out_n));
    for (int64_t i = 0; i < out_n; ++i) {
        double src = out_n == 1 ? 0.0
                                : static_cast<double>(i) * static_cast<double>(in_n - 1) /
                                      static_cast<double>(out_n - 1);
        int64_t i0 = static_cast<int64_t>(std::floor(src));
        if (i0 > in_n - 2) i0 = in_n - 2;
        if (i0 < 0) i0 = 0;
        v[static_cast<size_t>(i)] = AxisLerp{i0, i0 + 1, src - static_cast<double>(i0)};
    }
}

}  // namespace

template <class T>
TensorPtr<T> resize_trilinear(Tape<T>& tape, const TensorPtr<T>& grid, Dims3 od) {
    if (grid->rank() != 4) throw DimensionError("resize_trilinear: expected [C,D,H,W]");
    const int64_t C = grid->dim(0), D = grid->dim(1), H = grid->dim(2), W = grid->dim(3);
    if (D < 2 || H < 2 || W < 2 || od.d < 1 || od.h < 1 || od.w < 1)
        throw DimensionError("resize_trilinear: input dims must be >= 2");
    auto lerp_d = std::make_shared<std::vector<AxisLerp>>();
    auto lerp_h = std::make_shared<std::vector<AxisLerp>>();
    auto lerp_w = std::make_shared<std::vector<AxisLerp>>();
    make_axis_lerp(od.d, D, *lerp_d);
    make_axis_lerp(od.h, H, *lerp_h);
    make_axis_lerp(od.w, W, *lerp_w);

    auto y = make_tensor<T>({C, od.d, od.h, od.w});
    const T* xp = grid->data();
    T* yp = y->data();
    par_for(C * od.d, 4, [&](int64_t cd) {
        const int64_t c = cd / od.d, i = cd % od.d;
        const AxisLerp& ld = (*lerp_d)[static_cast<size_t>(i)];
        for (int64_t j = 0; j < od.h; ++j) {
            const AxisLerp& lh = (*lerp_h)[static_cast<size_t>(j)];
            for (int64_t k = 0; k < od.w; ++k) {
                const AxisLerp& lw = (*lerp_w)[static_cast<size_t>(k)];
                double acc = 0;
                for (int a = 0; a < 2; ++a) {
                    const double wa = a ? ld.f : 1.0 - ld.f;
                    const int64_t ia = a ? ld.i1 : ld.i0;
                    for (int b = 0; b < 2; ++b) {
                        const double wb = b ? lh.f : 1.0 - lh.f;
                        const int64_t jb = b ? lh.i1 : lh.i0;
                        for (int e = 0; e < 2; ++e) {
                            const double we = e ? lw.f : 1.0 - lw.f;
                            const int64_t ke = e ? lw.i1 : lw.i0;
                            acc += wa * wb * we * xp[((c * D + ia) * H + jb) * W + ke];
                        }
                    }
                }
                yp[((c * od.d + i) * od.h + j) * od.w + k] = static_cast<T>(acc);
            }
        }
    });
    if (grid->requires_grad) {
        y->requires_grad = true;
        tape.record("resize_trilinear", [grid, y, lerp_d, lerp_h, lerp_w, C, D, H, W, od]() {
            const T* gy = y->grad_data();
            T* gx = grid->grad_data();
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < od.d; ++i) {
                    const AxisLerp& ld = (*lerp_d)[static_cast<size_t>(i)];
                    for (int64_t j = 0; j < od.h; ++j) {
                        const AxisLerp& lh = (*lerp_h)[static_cast<size_t>(j)];
                        for (int64_t k = 0; k < od.w; ++k) {
                            const AxisLerp& lw = (*lerp_w)[static_cast<size_t>(k)];
                            const T g = gy[((c * od.d + i) * od.h + j) * od.w + k];
                            for (int a = 0; a < 2; ++a) {
                                const double wa = a ? ld.f : 1.0 - ld.f;
                                const int64_t ia = a ? ld.i1 : ld.i0;
                                for (int b = 0; b < 2; ++b) {
                                    const double wb = b ? lh.f : 1.0 - lh.f;
                                    const int64_t jb = b ? lh.i1 : lh.i0;
                                    for (int e = 0; e < 2; ++e) {
                                        const double we = e ? lw.f : 1.0 - lw.f;
                                        const int64_t ke = e ? lw.i1 : lw.i0;
                                        gx[((c * D + ia) * H + jb) * W + ke] +=
                                            g * static_cast<T>(wa * wb * we);
                                    }
                                }
                            }
                        }
                    }
                }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------

#define PVF_INSTANTIATE_OPS(T)                                                                 \
    template TensorPtr<T> linear<T>(Tape<T>&, const TensorPtr<T>&, const TensorPtr<T>&,        \
                                    const TensorPtr<T>&);                                      \
    template TensorPtr<T> relu<T>(Tape<T>&, const TensorPtr<T>&);                              \
    template TensorPtr<T> gelu<T>(Tape<T>&, const TensorPtr<T>&);                              \
    template TensorPtr<T> tanh_op<T>(Tape<T>&, const TensorPtr<T>&);                           \
    template TensorPtr<T> layer_norm<T>(Tape<T>&, const TensorPtr<T>&, const TensorPtr<T>&,    \
                                        const TensorPtr<T>&, double);                          \
    template TensorPtr<T> add<T>(Tape<T>&, const TensorPtr<T>&, const TensorPtr<T>&);          \
    template TensorPtr<T> sub<T>(Tape<T>&, const TensorPtr<T>&, const TensorPtr<T>&);          \
    template TensorPtr<T> mul<T>(Tape<T>&, const TensorPtr<T>&, const TensorPtr<T>&);          \
    template TensorPtr<T> scale<T>(Tape<T>&, const TensorPtr<T>&, double);                     \
    template TensorPtr<T> concat_channels<T>(Tape<T>&, const TensorPtr<T>&,                    \
                                             const TensorPtr<T>&);                             \
    template TensorPtr<T> concat_rows<T>(Tape<T>&, const TensorPtr<T>&, const TensorPtr<T>&);  \
    template TensorPtr<T> take_rows<T>(Tape<T>&, const TensorPtr<T>&, int64_t, int64_t);       \
    template TensorPtr<T> transpose2d<T>(Tape<T>&, const TensorPtr<T>&);                       \
    template TensorPtr<T> reshape<T>(Tape<T>&, const TensorPtr<T>&, Shape);                    \
    template TensorPtr<T> gather_rows<T>(Tape<T>&, const TensorPtr<T>&,                        \
                                         const std::vector<int64_t>&);                         \
    template TensorPtr<T> repeat_rows<T>(Tape<T>&, const TensorPtr<T>&, int64_t);              \
    template TensorPtr<T> rowgroup_max<T>(Tape<T>&, const TensorPtr<T>&, int64_t);             \
    template TensorPtr<T> rowgroup_mean<T>(Tape<T>&, const TensorPtr<T>&, int64_t);            \
    template TensorPtr<T> sum_all<T>(Tape<T>&, const TensorPtr<T>&);                           \
    template TensorPtr<T> mean_all<T>(Tape<T>&, const TensorPtr<T>&);                          \
    template TensorPtr<T> mse<T>(Tape<T>&, const TensorPtr<T>&, const TensorPtr<T>&);          \
    template TensorPtr<T> softmax_cross_entropy<T>(Tape<T>&, const TensorPtr<T>&,              \
                                                   const std::vector<int32_t>&,                \
                                                   const std::vector<T>&);                     \
    template TensorPtr<T> density_normalize<T>(Tape<T>&, const TensorPtr<T>&, double);         \
    template TensorPtr<T> box_smooth<T>(Tape<T>&, const TensorPtr<T>&, int, int);              \
    template TensorPtr<T> avg_pool3d_2x<T>(Tape<T>&, const TensorPtr<T>&);                     \
    template TensorPtr<T> resize_trilinear<T>(Tape<T>&, const TensorPtr<T>&, Dims3);

PVF_INSTANTIATE_OPS(float)
PVF_INSTANTIATE_OPS(double)

}  // namespace pvf
