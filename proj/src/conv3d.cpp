#include <algorithm>

#include "parallel.hpp"
#include "pvf/ops.hpp"

namespace pvf {

namespace {

// Adds kv0*x[k-1] + kv1*x[k] + kv2*x[k+1] into y over one W row, with zero
// padding at both ends.
template <class T>
inline void row_taps(T* __restrict y, const T* __restrict x, int64_t W, T kv0, T kv1, T kv2) {
    if (W == 1) {
        y[0] += kv1 * x[0];
        return;
    }
    y[0] += kv1 * x[0] + kv2 * x[1];
    for (int64_t k = 1; k < W - 1; ++k) y[k] += kv0 * x[k - 1] + kv1 * x[k] + kv2 * x[k + 1];
    y[W - 1] += kv0 * x[W - 2] + kv1 * x[W - 1];
}

}  // namespace

template <class T>
TensorPtr<T> conv3d(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& K,
                    const TensorPtr<T>& b) {
    if (x->rank() != 4 || K->rank() != 5 || b->rank() != 1)
        throw DimensionError("conv3d: expected x [Cin,D,H,W], K [Cout,Cin,3,3,3], b [Cout]");
    const int64_t Cin = x->dim(0), D = x->dim(1), H = x->dim(2), W = x->dim(3);
    const int64_t Cout = K->dim(0);
    if (K->dim(1) != Cin)
        throw DimensionError("conv3d: channel mismatch, x has " + std::to_string(Cin) +
                             " channels, K expects " + std::to_string(K->dim(1)));
    if (K->dim(2) != 3 || K->dim(3) != 3 || K->dim(4) != 3)
        throw DimensionError("conv3d: kernel must be 3x3x3");
    if (b->dim(0) != Cout) throw DimensionError("conv3d: bias length mismatch");

    auto y = make_tensor<T>({Cout, D, H, W});
    const T* xp = x->data();
    const T* kp = K->data();
    const T* bp = b->data();
    T* yp = y->data();
    const int64_t HW = H * W;

    par_for(Cout * D, 1, [&](int64_t t) {
        const int64_t co = t / D, i = t % D;
        T* ybase = yp + (co * D + i) * HW;
        std::fill_n(ybase, HW, bp[co]);
        for (int64_t ci = 0; ci < Cin; ++ci) {
            for (int64_t da = -1; da <= 1; ++da) {
                const int64_t ia = i + da;
                if (ia < 0 || ia >= D) continue;
                const T* xplane = xp + (ci * D + ia) * HW;
                const T* kb = kp + ((co * Cin + ci) * 3 + (da + 1)) * 9;
                for (int64_t db = -1; db <= 1; ++db) {
                    const T kv0 = kb[(db + 1) * 3 + 0];
                    const T kv1 = kb[(db + 1) * 3 + 1];
                    const T kv2 = kb[(db + 1) * 3 + 2];
                    const int64_t j0 = std::max<int64_t>(0, -db);
                    const int64_t j1 = H - 1 - std::max<int64_t>(0, db);
                    for (int64_t j = j0; j <= j1; ++j)
                        row_taps(ybase + j * W, xplane + (j + db) * W, W, kv0, kv1, kv2);
                }
            }
        }
    });

    if (any_requires_grad<T>({&x, &K, &b})) {
        y->requires_grad = true;
        tape.record("conv3d", [x, K, b, y, Cin, Cout, D, H, W, HW]() {
            const T* gy = y->grad_data();
            const T* xp = x->data();
            const T* kp = K->data();
            if (x->requires_grad) {
                // dx = correlation of gy with the flipped kernel
                T* gx = x->grad_data();
                par_for(Cin * D, 1, [&](int64_t t) {
                    const int64_t ci = t / D, i = t % D;
                    T* gbase = gx + (ci * D + i) * HW;
                    for (int64_t co = 0; co < Cout; ++co) {
                        for (int64_t ea = -1; ea <= 1; ++ea) {
                            const int64_t ia = i + ea;
                            if (ia < 0 || ia >= D) continue;
                            const T* gplane = gy + (co * D + ia) * HW;
                            const T* kb = kp + ((co * Cin + ci) * 3 + (1 - ea)) * 9;
                            for (int64_t eb = -1; eb <= 1; ++eb) {
                                const T kv0 = kb[(1 - eb) * 3 + 2];
                                const T kv1 = kb[(1 - eb) * 3 + 1];
                                const T kv2 = kb[(1 - eb) * 3 + 0];
                                const int64_t j0 = std::max<int64_t>(0, -eb);
                                const int64_t j1 = H - 1 - std::max<int64_t>(0, eb);
                                for (int64_t j = j0; j <= j1; ++j)
                                    row_taps(gbase + j * W, gplane + (j + eb) * W, W, kv0, kv1,
                                             kv2);
                            }
                        }
                    }
                });
            }
            if (K->requires_grad) {
                T* gk = K->grad_data();
                par_for(Cout * Cin, 1, [&](int64_t t) {
                    const int64_t co = t / Cin, ci = t % Cin;
                    T* gkb = gk + (co * Cin + ci) * 27;
                    for (int64_t da = -1; da <= 1; ++da)
                        for (int64_t db = -1; db <= 1; ++db)
                            for (int64_t dc = -1; dc <= 1; ++dc) {
                                double acc = 0;
                                const int64_t i0 = std::max<int64_t>(0, -da);
                                const int64_t i1 = D - 1 - std::max<int64_t>(0, da);
                                const int64_t j0 = std::max<int64_t>(0, -db);
                                const int64_t j1 = H - 1 - std::max<int64_t>(0, db);
                                const int64_t k0 = std::max<int64_t>(0, -dc);
                                const int64_t k1 = W - 1 - std::max<int64_t>(0, dc);
                                for (int64_t i = i0; i <= i1; ++i)
                                    for (int64_t j = j0; j <= j1; ++j) {
                                        const T* gr = gy + (co * D + i) * HW + j * W;
                                        const T* xr = xp + (ci * D + i + da) * HW + (j + db) * W;
                                        T rowsum = 0;
                                        for (int64_t k = k0; k <= k1; ++k)
                                            rowsum += gr[k] * xr[k + dc];
                                        acc += rowsum;
                                    }
                                gkb[(da + 1) * 9 + (db + 1) * 3 + (dc + 1)] += static_cast<T>(acc);
                            }
                });
            }
            if (b->requires_grad) {
                T* gb = b->grad_data();
                for (int64_t co = 0; co < Cout; ++co) {
                    double acc = 0;
                    const T* gplane = gy + co * D * HW;
                    for (int64_t m = 0; m < D * HW; ++m) acc += gplane[m];
                    gb[co] += static_cast<T>(acc);
                }
            }
        });
    }
    return y;
}

template TensorPtr<float> conv3d<float>(Tape<float>&, const TensorPtr<float>&,
                                        const TensorPtr<float>&, const TensorPtr<float>&);
template TensorPtr<double> conv3d<double>(Tape<double>&, const TensorPtr<double>&,
                                          const TensorPtr<double>&, const TensorPtr<double>&);

}  // namespace pvf
