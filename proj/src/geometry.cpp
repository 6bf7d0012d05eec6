#include "pvf/geometry.hpp"

#include <cmath>

#include "parallel.hpp"

namespace pvf {

namespace {

struct Cell {
    int64_t i0[3];
    double f[3];
    bool live[3];  // axis contributes a coordinate derivative (not clamp-saturated)
};

// Voxel-space cell of a point under the align-corners mapping. With Clamp the
// sample position is clamped to the grid so every corner is in bounds.
inline Cell compute_cell(const double* p, Dims3 dims, Border border) {
    Cell c;
    for (int a = 0; a < 3; ++a) {
        const double dim = static_cast<double>(dims[a]);
        double v = (p[a] + 1.0) * 0.5 * (dim - 1.0);
        bool live = true;
        if (border == Border::Clamp) {
            if (v <= 0.0) {
                v = 0.0;
                live = false;  // saturated: zero coordinate derivative
            } else if (v >= dim - 1.0) {
                v = dim - 1.0;
                live = false;
            }
        }
        int64_t i0 = static_cast<int64_t>(std::floor(v));
        if (border == Border::Clamp && i0 > dims[a] - 2) i0 = dims[a] - 2;
        c.i0[a] = i0;
        c.f[a] = v - static_cast<double>(i0);
        c.live[a] = live;
    }
    return c;
}

inline void check_dims(Dims3 dims) {
    if (dims.d < 2 || dims.h < 2 || dims.w < 2)
        throw DimensionError("grid dims must be >= 2 per axis, got " + dims_str(dims));
}

template <class T>
void check_coords(const TensorPtr<T>& coords) {
    if (!coords || coords->rank() != 2 || coords->dim(1) != 3)
        throw DimensionError("coords must be [N,3]");
}

}  // namespace

std::array<CornerWeight, 8> trilinear_weights(const std::array<double, 3>& p, Dims3 dims) {
    check_dims(dims);
    Cell c = compute_cell(p.data(), dims, Border::Zero);
    std::array<CornerWeight, 8> out;
    for (int bit = 0; bit < 8; ++bit) {
        const int a = (bit >> 2) & 1, b = (bit >> 1) & 1, e = bit & 1;
        CornerWeight& cw = out[static_cast<size_t>(bit)];
        cw.i = c.i0[0] + a;
        cw.j = c.i0[1] + b;
        cw.k = c.i0[2] + e;
        cw.weight = (a ? c.f[0] : 1.0 - c.f[0]) * (b ? c.f[1] : 1.0 - c.f[1]) *
                    (e ? c.f[2] : 1.0 - c.f[2]);
        cw.in_bounds = cw.i >= 0 && cw.i < dims.d && cw.j >= 0 && cw.j < dims.h && cw.k >= 0 &&
                       cw.k < dims.w;
    }
    return out;
}

// ---------------------------------------------------------------------------
// splat

template <class T>
TensorPtr<T> splat(Tape<T>& tape, const TensorPtr<T>& features, const TensorPtr<T>& coords,
                   Dims3 dims) {
    check_dims(dims);
    check_coords(coords);
    if (!features || features->rank() != 2 || features->dim(0) != coords->dim(0))
        throw DimensionError("splat: features must be [N,C] matching coords");
    if (!all_finite(*features)) throw DataError("splat: non-finite feature value");
    if (!all_finite(*coords)) throw DataError("splat: non-finite coordinate");

    const int64_t N = coords->dim(0), C = features->dim(1);
    const int64_t vox = dims.voxels();
    auto grid = make_tensor<T>({C, dims.d, dims.h, dims.w});
    const T* fp = features->data();
    const T* cp = coords->data();
    T* gp = grid->data();

    for (int64_t n = 0; n < N; ++n) {
        const double p[3] = {static_cast<double>(cp[n * 3]), static_cast<double>(cp[n * 3 + 1]),
                             static_cast<double>(cp[n * 3 + 2])};
        const Cell cell = compute_cell(p, dims, Border::Zero);
        for (int bit = 0; bit < 8; ++bit) {
            const int a = (bit >> 2) & 1, b = (bit >> 1) & 1, e = bit & 1;
            const int64_t i = cell.i0[0] + a, j = cell.i0[1] + b, k = cell.i0[2] + e;
            if (i < 0 || i >= dims.d || j < 0 || j >= dims.h || k < 0 || k >= dims.w) continue;
            const T w = static_cast<T>((a ? cell.f[0] : 1.0 - cell.f[0]) *
                                       (b ? cell.f[1] : 1.0 - cell.f[1]) *
                                       (e ? cell.f[2] : 1.0 - cell.f[2]));
            const int64_t off = (i * dims.h + j) * dims.w + k;
            for (int64_t ch = 0; ch < C; ++ch) gp[ch * vox + off] += w * fp[n * C + ch];
        }
    }

    if (any_requires_grad<T>({&features, &coords})) {
        grid->requires_grad = true;
        tape.record("splat", [features, coords, grid, dims, N, C, vox]() {
            const T* gg = grid->grad_data();
            const T* fp = features->data();
            const T* cp = coords->data();
            const bool want_feat = features->requires_grad;
            const bool want_coord = coords->requires_grad;
            T* gf = want_feat ? features->grad_data() : nullptr;
            T* gc = want_coord ? coords->grad_data() : nullptr;
            par_for(N, 512, [&](int64_t n) {
                const double p[3] = {static_cast<double>(cp[n * 3]),
                                     static_cast<double>(cp[n * 3 + 1]),
                                     static_cast<double>(cp[n * 3 + 2])};
                const Cell cell = compute_cell(p, dims, Border::Zero);
                double dcoord[3] = {0, 0, 0};
                for (int bit = 0; bit < 8; ++bit) {
                    const int a = (bit >> 2) & 1, b = (bit >> 1) & 1, e = bit & 1;
                    const int64_t i = cell.i0[0] + a, j = cell.i0[1] + b, k = cell.i0[2] + e;
                    if (i < 0 || i >= dims.d || j < 0 || j >= dims.h || k < 0 || k >= dims.w)
                        continue;
                    const double fa = a ? cell.f[0] : 1.0 - cell.f[0];
                    const double fb = b ? cell.f[1] : 1.0 - cell.f[1];
                    const double fe = e ? cell.f[2] : 1.0 - cell.f[2];
                    const int64_t off = (i * dims.h + j) * dims.w + k;
                    double dot = 0;
                    for (int64_t ch = 0; ch < C; ++ch) {
                        const T g = gg[ch * vox + off];
                        if (want_feat) gf[n * C + ch] += static_cast<T>(fa * fb * fe) * g;
                        dot += static_cast<double>(fp[n * C + ch]) * g;
                    }
                    if (want_coord) {
                        dcoord[0] += (a ? 1.0 : -1.0) * fb * fe * dot;
                        dcoord[1] += (b ? 1.0 : -1.0) * fa * fe * dot;
                        dcoord[2] += (e ? 1.0 : -1.0) * fa * fb * dot;
                    }
                }
                if (want_coord) {
                    for (int axis = 0; axis < 3; ++axis) {
                        const double dv = 0.5 * static_cast<double>(dims[axis] - 1);
                        gc[n * 3 + axis] += static_cast<T>(dcoord[axis] * dv);
                    }
                }
            });
        });
    }
    return grid;
}

// ---------------------------------------------------------------------------
// slice

template <class T>
TensorPtr<T> slice(Tape<T>& tape, const TensorPtr<T>& grid, const TensorPtr<T>& coords,
                   Border border) {
    if (!grid || grid->rank() != 4) throw DimensionError("slice: grid must be [C,D,H,W]");
    check_coords(coords);
    const Dims3 dims{grid->dim(1), grid->dim(2), grid->dim(3)};
    check_dims(dims);
    const int64_t N = coords->dim(0), C = grid->dim(0), vox = dims.voxels();

    auto y = make_tensor<T>({N, C});
    const T* gp = grid->data();
    const T* cp = coords->data();
    T* yp = y->data();
    par_for(N, 512, [&](int64_t n) {
        const double p[3] = {static_cast<double>(cp[n * 3]), static_cast<double>(cp[n * 3 + 1]),
                             static_cast<double>(cp[n * 3 + 2])};
        const Cell cell = compute_cell(p, dims, border);
        for (int bit = 0; bit < 8; ++bit) {
            const int a = (bit >> 2) & 1, b = (bit >> 1) & 1, e = bit & 1;
            const int64_t i = cell.i0[0] + a, j = cell.i0[1] + b, k = cell.i0[2] + e;
            if (i < 0 || i >= dims.d || j < 0 || j >= dims.h || k < 0 || k >= dims.w) continue;
            const T w = static_cast<T>((a ? cell.f[0] : 1.0 - cell.f[0]) *
                                       (b ? cell.f[1] : 1.0 - cell.f[1]) *
                                       (e ? cell.f[2] : 1.0 - cell.f[2]));
            const int64_t off = (i * dims.h + j) * dims.w + k;
            for (int64_t ch = 0; ch < C; ++ch) yp[n * C + ch] += w * gp[ch * vox + off];
        }
    });

    if (any_requires_grad<T>({&grid, &coords})) {
        y->requires_grad = true;
        tape.record("slice", [grid, coords, y, dims, border, N, C, vox]() {
            const T* gy = y->grad_data();
            const T* gp = grid->data();
            const T* cp = coords->data();
            if (grid->requires_grad) {
                // adjoint of slice is splat of the output gradient
                T* gg = grid->grad_data();
                for (int64_t n = 0; n < N; ++n) {
                    const double p[3] = {static_cast<double>(cp[n * 3]),
                                         static_cast<double>(cp[n * 3 + 1]),
                                         static_cast<double>(cp[n * 3 + 2])};
                    const Cell cell = compute_cell(p, dims, border);
                    for (int bit = 0; bit < 8; ++bit) {
                        const int a = (bit >> 2) & 1, b = (bit >> 1) & 1, e = bit & 1;
                        const int64_t i = cell.i0[0] + a, j = cell.i0[1] + b, k = cell.i0[2] + e;
                        if (i < 0 || i >= dims.d || j < 0 || j >= dims.h || k < 0 ||
                            k >= dims.w)
                            continue;
                        const T w = static_cast<T>((a ? cell.f[0] : 1.0 - cell.f[0]) *
                                                   (b ? cell.f[1] : 1.0 - cell.f[1]) *
                                                   (e ? cell.f[2] : 1.0 - cell.f[2]));
                        const int64_t off = (i * dims.h + j) * dims.w + k;
                        for (int64_t ch = 0; ch < C; ++ch)
                            gg[ch * vox + off] += w * gy[n * C + ch];
                    }
                }
            }
            if (coords->requires_grad) {
                T* gc = coords->grad_data();
                par_for(N, 512, [&](int64_t n) {
                    const double p[3] = {static_cast<double>(cp[n * 3]),
                                         static_cast<double>(cp[n * 3 + 1]),
                                         static_cast<double>(cp[n * 3 + 2])};
                    const Cell cell = compute_cell(p, dims, border);
                    double dcoord[3] = {0, 0, 0};
                    for (int bit = 0; bit < 8; ++bit) {
                        const int a = (bit >> 2) & 1, b = (bit >> 1) & 1, e = bit & 1;
                        const int64_t i = cell.i0[0] + a, j = cell.i0[1] + b, k = cell.i0[2] + e;
                        if (i < 0 || i >= dims.d || j < 0 || j >= dims.h || k < 0 ||
                            k >= dims.w)
                            continue;
                        const double fa = a ? cell.f[0] : 1.0 - cell.f[0];
                        const double fb = b ? cell.f[1] : 1.0 - cell.f[1];
                        const double fe = e ? cell.f[2] : 1.0 - cell.f[2];
                        const int64_t off = (i * dims.h + j) * dims.w + k;
                        double dot = 0;
                        for (int64_t ch = 0; ch < C; ++ch)
                            dot += static_cast<double>(gy[n * C + ch]) * gp[ch * vox + off];
                        dcoord[0] += (a ? 1.0 : -1.0) * fb * fe * dot;
                        dcoord[1] += (b ? 1.0 : -1.0) * fa * fe * dot;
                        dcoord[2] += (e ? 1.0 : -1.0) * fa * fb * dot;
                    }
                    for (int axis = 0; axis < 3; ++axis) {
                        if (!cell.live[axis] && border == Border::Clamp) continue;
                        const double dv = 0.5 * static_cast<double>(dims[axis] - 1);
                        gc[n * 3 + axis] += static_cast<T>(dcoord[axis] * dv);
                    }
                });
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// splat_nearest_avg

template <class T>
TensorPtr<T> splat_nearest_avg(Tape<T>& tape, const TensorPtr<T>& features,
                               const TensorPtr<T>& coords, Dims3 dims) {
    check_dims(dims);
    check_coords(coords);
    if (!features || features->rank() != 2 || features->dim(0) != coords->dim(0))
        throw DimensionError("splat_nearest_avg: features must be [N,C] matching coords");
    if (!all_finite(*features)) throw DataError("splat_nearest_avg: non-finite feature value");

    const int64_t N = coords->dim(0), C = features->dim(1), vox = dims.voxels();
    auto grid = make_tensor<T>({C, dims.d, dims.h, dims.w});
    auto assign = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N), int64_t(-1));
    auto counts = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(vox), 0);

    const T* fp = features->data();
    const T* cp = coords->data();
    T* gp = grid->data();
    for (int64_t n = 0; n < N; ++n) {
        int64_t idx[3];
        bool ok = true;
        for (int a = 0; a < 3; ++a) {
            const double v = (static_cast<double>(cp[n * 3 + a]) + 1.0) * 0.5 *
                             static_cast<double>(dims[a] - 1);
            idx[a] = static_cast<int64_t>(std::floor(v + 0.5));
            if (idx[a] < 0 || idx[a] >= dims[a]) ok = false;
        }
        if (!ok) continue;
        const int64_t off = (idx[0] * dims.h + idx[1]) * dims.w + idx[2];
        (*assign)[static_cast<size_t>(n)] = off;
        (*counts)[static_cast<size_t>(off)] += 1;
        for (int64_t ch = 0; ch < C; ++ch) gp[ch * vox + off] += fp[n * C + ch];
    }
    for (int64_t off = 0; off < vox; ++off) {
        const int32_t c = (*counts)[static_cast<size_t>(off)];
        if (c > 1) {
            const T inv = T(1) / static_cast<T>(c);
            for (int64_t ch = 0; ch < C; ++ch) gp[ch * vox + off] *= inv;
        }
    }

    if (features->requires_grad) {
        grid->requires_grad = true;
        tape.record("splat_nearest_avg", [features, grid, assign, counts, N, C, vox]() {
            const T* gg = grid->grad_data();
            T* gf = features->grad_data();
            par_for(N, 512, [&](int64_t n) {
                const int64_t off = (*assign)[static_cast<size_t>(n)];
                if (off < 0) return;
                const T inv = T(1) / static_cast<T>((*counts)[static_cast<size_t>(off)]);
                for (int64_t ch = 0; ch < C; ++ch)
                    gf[n * C + ch] += gg[ch * vox + off] * inv;
            });
        });
    }
    return grid;
}

#define PVF_INSTANTIATE_GEOM(T)                                                               \
    template TensorPtr<T> splat<T>(Tape<T>&, const TensorPtr<T>&, const TensorPtr<T>&,        \
                                   Dims3);                                                    \
    template TensorPtr<T> slice<T>(Tape<T>&, const TensorPtr<T>&, const TensorPtr<T>&,        \
                                   Border);                                                   \
    template TensorPtr<T> splat_nearest_avg<T>(Tape<T>&, const TensorPtr<T>&,                 \
                                               const TensorPtr<T>&, Dims3);

PVF_INSTANTIATE_GEOM(float)
PVF_INSTANTIATE_GEOM(double)

}  // namespace pvf
