#include "pvf/warp.hpp"

#include <cmath>

#include "parallel.hpp"
#include "pvf/ops.hpp"

namespace pvf {

template <class T>
TensorPtr<T> voxel_center_coords(Dims3 dims) {
    auto t = make_tensor<T>({dims.voxels(), 3});
    T* p = t->data();
    int64_t n = 0;
    for (int64_t i = 0; i < dims.d; ++i)
        for (int64_t j = 0; j < dims.h; ++j)
            for (int64_t k = 0; k < dims.w; ++k) {
                p[n * 3 + 0] = static_cast<T>(2.0 * i / (dims.d - 1) - 1.0);
                p[n * 3 + 1] = static_cast<T>(2.0 * j / (dims.h - 1) - 1.0);
                p[n * 3 + 2] = static_cast<T>(2.0 * k / (dims.w - 1) - 1.0);
                ++n;
            }
    return t;
}

template <class T>
DisplacementField<T> sparse_to_dense(Tape<T>& tape, const TensorPtr<T>& coords,
                                     const TensorPtr<T>& displacements, Dims3 dims) {
    if (!coords || coords->dim(0) < 1) throw DimensionError("sparse_to_dense: empty cloud");
    if (!displacements || displacements->rank() != 2 || displacements->dim(1) != 3 ||
        displacements->dim(0) != coords->dim(0))
        throw DimensionError("sparse_to_dense: displacements must be [N,3] matching coords");
    const int64_t N = coords->dim(0);
    auto weighted = concat_channels(tape, displacements, ones<T>({N, 1}));
    auto raw = splat(tape, weighted, coords, dims);
    auto smooth = box_smooth(tape, raw, 5, 3);
    return DisplacementField<T>{dims, density_normalize(tape, smooth, 1e-5)};
}

template <class T>
DisplacementField<T> compose(Tape<T>& tape, const DisplacementField<T>& a,
                             const DisplacementField<T>& b) {
    a.validate();
    b.validate();
    if (!(a.dims == b.dims)) throw DimensionError("compose: field dims differ");
    // sample positions x + b(x), one row per voxel
    const int64_t vox = a.dims.voxels();
    auto base = voxel_center_coords<T>(a.dims);
    auto offsets = transpose2d(tape, reshape(tape, b.values, {3, vox}));  // [vox,3]
    auto pos = add(tape, base, offsets);
    auto sampled = slice(tape, a.values, pos, Border::Clamp);  // [vox,3]
    auto out = add(tape, b.values,
                   reshape(tape, transpose2d(tape, sampled), b.values->shape));
    return DisplacementField<T>{a.dims, out};
}

template <class T>
DisplacementField<T> exp_field(Tape<T>& tape, const VelocityField<T>& v, int K) {
    v.validate();
    if (K < 0) throw DimensionError("exp_field: K must be >= 0");
    auto u = DisplacementField<T>{v.dims, scale(tape, v.values, std::ldexp(1.0, -K))};
    for (int s = 0; s < K; ++s) u = compose(tape, u, u);
    return u;
}

template <class T>
TensorPtr<T> warp_points(Tape<T>& tape, const TensorPtr<T>& coords,
                         const DisplacementField<T>& field) {
    field.validate();
    return add(tape, coords, slice(tape, field.values, coords, Border::Clamp));
}

template <class T>
JacobianStats jacobian_stats(const DisplacementField<T>& field) {
    field.validate();
    const Dims3 g = field.dims;
    JacobianStats st;
    if (g.d < 3 || g.h < 3 || g.w < 3) return st;
    const int64_t vox = g.voxels();
    const T* u = field.values->data();
    // normalized offsets -> voxel units
    const double sc[3] = {0.5 * (g.d - 1), 0.5 * (g.h - 1), 0.5 * (g.w - 1)};
    auto at = [&](int axis, int64_t i, int64_t j, int64_t k) {
        return static_cast<double>(u[axis * vox + (i * g.h + j) * g.w + k]) * sc[axis];
    };
    int64_t folded = 0;
    double abs_log = 0;
    int64_t pos_count = 0;
    for (int64_t i = 1; i + 1 < g.d; ++i)
        for (int64_t j = 1; j + 1 < g.h; ++j)
            for (int64_t k = 1; k + 1 < g.w; ++k) {
                double J[3][3];
                for (int a = 0; a < 3; ++a) {
                    J[a][0] = 0.5 * (at(a, i + 1, j, k) - at(a, i - 1, j, k));
                    J[a][1] = 0.5 * (at(a, i, j + 1, k) - at(a, i, j - 1, k));
                    J[a][2] = 0.5 * (at(a, i, j, k + 1) - at(a, i, j, k - 1));
                    J[a][a] += 1.0;
                }
                const double det = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                                   J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                                   J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
                st.interior_voxels += 1;
                if (det <= 0.0) {
                    folded += 1;
                } else {
                    abs_log += std::abs(std::log(det));
                    pos_count += 1;
                }
            }
    st.folded_fraction = static_cast<double>(folded) / static_cast<double>(st.interior_voxels);
    st.mean_abs_log_det = pos_count > 0 ? abs_log / static_cast<double>(pos_count) : 0.0;
    return st;
}

#define PVF_INSTANTIATE_WARP(T)                                                              \
    template TensorPtr<T> voxel_center_coords<T>(Dims3);                                     \
    template DisplacementField<T> sparse_to_dense<T>(Tape<T>&, const TensorPtr<T>&,          \
                                                     const TensorPtr<T>&, Dims3);            \
    template DisplacementField<T> compose<T>(Tape<T>&, const DisplacementField<T>&,          \
                                             const DisplacementField<T>&);                   \
    template DisplacementField<T> exp_field<T>(Tape<T>&, const VelocityField<T>&, int);      \
    template TensorPtr<T> warp_points<T>(Tape<T>&, const TensorPtr<T>&,                      \
                                         const DisplacementField<T>&);                       \
    template JacobianStats jacobian_stats<T>(const DisplacementField<T>&);

PVF_INSTANTIATE_WARP(float)
PVF_INSTANTIATE_WARP(double)

}  // namespace pvf
