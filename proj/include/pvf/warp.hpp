#pragma once

#include "pvf/geometry.hpp"

namespace pvf {

// Dense per-voxel 3D offsets in normalized [-1,1] coordinate units, stored
// channel-first as [3,D,H,W]. A VelocityField shares the layout; it is the
// argument of exp_field rather than a displacement to apply directly.
template <class T>
struct DisplacementField {
    Dims3 dims;
    TensorPtr<T> values;  // [3,D,H,W]

    void validate() const {
        if (!values || values->rank() != 4 || values->dim(0) != 3 || values->dim(1) != dims.d ||
            values->dim(2) != dims.h || values->dim(3) != dims.w)
            throw DimensionError("DisplacementField: values must be [3,D,H,W] matching dims");
    }
};

template <class T>
using VelocityField = DisplacementField<T>;

template <class T>
DisplacementField<T> zero_field(Dims3 dims) {
    return DisplacementField<T>{dims, zeros<T>({3, dims.d, dims.h, dims.w})};
}

// Normalized coordinates of every voxel center, one row per voxel in grid
// scan order: [D*H*W, 3].
template <class T>
TensorPtr<T> voxel_center_coords(Dims3 dims);

// Densifies a sparse motion field: splat displacements plus an all-ones
// weight channel, smooth both with three 5^3 box-filter passes (approximating
// a B-spline kernel), then divide by the smoothed weights (+eps).
// Differentiable w.r.t. displacements (and coords when they require grad).
template <class T>
DisplacementField<T> sparse_to_dense(Tape<T>& tape, const TensorPtr<T>& coords,
                                     const TensorPtr<T>& displacements, Dims3 dims);

// (a o b)(x) = b(x) + a(x + b(x)): b applied first, then a, with a sampled
// trilinearly at clamped coordinates.
template <class T>
DisplacementField<T> compose(Tape<T>& tape, const DisplacementField<T>& a,
                             const DisplacementField<T>& b);

// Scaling and squaring: u = v / 2^K, then K self-compositions.
template <class T>
DisplacementField<T> exp_field(Tape<T>& tape, const VelocityField<T>& v, int K = 6);

// p' = p + field(p), sampled with clamped borders.
template <class T>
TensorPtr<T> warp_points(Tape<T>& tape, const TensorPtr<T>& coords,
                         const DisplacementField<T>& field);

// Regularity diagnostic of x -> x + u(x) via central differences on interior
// voxels (in voxel units).
struct JacobianStats {
    double folded_fraction = 0;   // voxels with det <= 0
    double mean_abs_log_det = 0;  // over voxels with det > 0
    int64_t interior_voxels = 0;
};

template <class T>
JacobianStats jacobian_stats(const DisplacementField<T>& field);

}  // namespace pvf
