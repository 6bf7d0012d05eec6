#pragma once

#include "pvf/tensor.hpp"

namespace pvf {

// Coordinates live in normalized [-1,1]^3 volume space; column a of coords
// maps to grid axis a of Dims3 (0->D, 1->H, 2->W).
template <class T>
struct PointCloud {
    TensorPtr<T> coords;          // [N,3]
    TensorPtr<T> features;        // [N,C], may be null
    std::vector<int32_t> labels;  // empty, or one class id per point

    int64_t size() const { return coords ? coords->dim(0) : 0; }

    void validate() const {
        if (!coords || coords->rank() != 2 || coords->dim(1) != 3 || coords->dim(0) < 1)
            throw DimensionError("PointCloud: coords must be [N,3] with N >= 1");
        if (features && features->dim(0) != coords->dim(0))
            throw DimensionError("PointCloud: features row count != N");
        if (!labels.empty() && static_cast<int64_t>(labels.size()) != coords->dim(0))
            throw DimensionError("PointCloud: labels length != N");
    }
};

template <class T>
struct VoxelGrid {
    Dims3 dims;
    TensorPtr<T> values;  // [C,D,H,W]

    int64_t channels() const { return values ? values->dim(0) : 0; }
};

// Exact kNN by squared Euclidean distance, self excluded, rows sorted by
// ascending (distance, index).
struct KnnGraph {
    int64_t n = 0;
    int64_t k = 0;
    std::vector<int64_t> indices;  // n*k row-major

    int64_t at(int64_t i, int64_t j) const { return indices[static_cast<size_t>(i * k + j)]; }
};

}  // namespace pvf
