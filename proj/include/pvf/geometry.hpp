#pragma once

#include <array>

#include "pvf/pointcloud.hpp"
#include "pvf/tape.hpp"

namespace pvf {

// Border policy for trilinear sampling: Zero pads with zeros outside the
// grid (feature slicing), Clamp clamps sample coordinates to the border
// (displacement-field sampling).
enum class Border { Zero, Clamp };

struct CornerWeight {
    int64_t i = 0, j = 0, k = 0;
    double weight = 0;
    bool in_bounds = false;  // off-grid corners keep their weight but are dropped by splat
};

// The 8 corners of the cell containing p under the align-corners convention
// v = (p+1)/2*(dim-1), with weights g(q,v) = prod max(0, 1-|q-v|). Weights of
// the returned corners are non-negative and sum to 1.
std::array<CornerWeight, 8> trilinear_weights(const std::array<double, 3>& p, Dims3 dims);

// Trilinear splatting: distributes each point's feature row onto the 8
// enclosing voxel corners, summed over points (pure accumulation). Off-grid
// corner contributions are dropped. Gradients w.r.t. features are exact
// (adjoint of slice); gradients w.r.t. coords flow when coords require grad.
template <class T>
TensorPtr<T> splat(Tape<T>& tape, const TensorPtr<T>& features, const TensorPtr<T>& coords,
                   Dims3 dims);

// Trilinear sampling of a [C,D,H,W] grid at continuous coordinates -> [N,C].
template <class T>
TensorPtr<T> slice(Tape<T>& tape, const TensorPtr<T>& grid, const TensorPtr<T>& coords,
                   Border border = Border::Zero);

// PVCNN-style rasterisation: each point goes to its single nearest voxel,
// voxel value = mean of assigned features (zero where empty).
template <class T>
TensorPtr<T> splat_nearest_avg(Tape<T>& tape, const TensorPtr<T>& features,
                               const TensorPtr<T>& coords, Dims3 dims);

template <class T>
KnnGraph knn_graph(const TensorPtr<T>& coords, int64_t k);

// Greedy max-min selection starting at seed_index; returns indices in
// selection order. Ties broken by lower index.
template <class T>
std::vector<int64_t> farthest_point_sampling(const TensorPtr<T>& coords, int64_t m,
                                             int64_t seed_index = 0);

// Symmetric mean squared nearest-neighbour distance; differentiable w.r.t.
// both coordinate sets (nearest assignments treated as locally constant).
template <class T>
TensorPtr<T> chamfer_distance(Tape<T>& tape, const TensorPtr<T>& coords_a,
                              const TensorPtr<T>& coords_b);

// Mean squared difference between the unit-mass splats of two clouds on a
// shared grid, each splat scaled by 1/N of its cloud.
template <class T>
TensorPtr<T> density_loss(Tape<T>& tape, const TensorPtr<T>& coords_a,
                          const TensorPtr<T>& coords_b, Dims3 dims);

}  // namespace pvf
