#pragma once

#include "pvf/tape.hpp"

namespace pvf {

// Dense tape ops. Every op computes gradients for exactly the inputs that
// have requires_grad set; outputs inherit requires_grad from their inputs.

// y[n,j] = sum_i x[n,i] W[i,j] + b[j]
template <class T>
TensorPtr<T> linear(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& W,
                    const TensorPtr<T>& b);

// 3x3x3 cross-correlation, stride 1, zero padding 1. x: [Cin,D,H,W],
// K: [Cout,Cin,3,3,3], b: [Cout] -> [Cout,D,H,W]
template <class T>
TensorPtr<T> conv3d(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& K,
                    const TensorPtr<T>& b);

template <class T>
TensorPtr<T> relu(Tape<T>& tape, const TensorPtr<T>& x);
template <class T>
TensorPtr<T> gelu(Tape<T>& tape, const TensorPtr<T>& x);
template <class T>
TensorPtr<T> tanh_op(Tape<T>& tape, const TensorPtr<T>& x);

// Per-row normalization over the channel (last) axis, then affine. x: [N,C].
template <class T>
TensorPtr<T> layer_norm(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                        const TensorPtr<T>& beta, double eps = 1e-5);

template <class T>
TensorPtr<T> add(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b);
template <class T>
TensorPtr<T> sub(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b);
template <class T>
TensorPtr<T> mul(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b);
template <class T>
TensorPtr<T> scale(Tape<T>& tape, const TensorPtr<T>& a, double s);

// Concatenation along the last axis ([N,Ca]+[N,Cb] -> [N,Ca+Cb]) and along the
// first axis ([Na,...]+[Nb,...] -> [Na+Nb,...]; also used as channel concat
// for [C,D,H,W] grids).
template <class T>
TensorPtr<T> concat_channels(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b);
template <class T>
TensorPtr<T> concat_rows(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b);

// Row slice [offset, offset+count) of the first axis.
template <class T>
TensorPtr<T> take_rows(Tape<T>& tape, const TensorPtr<T>& x, int64_t offset, int64_t count);

// [R,C] -> [C,R]; bridges channel-first grids and row-major point features.
template <class T>
TensorPtr<T> transpose2d(Tape<T>& tape, const TensorPtr<T>& x);

// Same data, new extents (element count must match); gradient passes through.
template <class T>
TensorPtr<T> reshape(Tape<T>& tape, const TensorPtr<T>& x, Shape shape);

// out[m,:] = x[idx[m],:]; backward scatter-adds.
template <class T>
TensorPtr<T> gather_rows(Tape<T>& tape, const TensorPtr<T>& x, const std::vector<int64_t>& idx);

// Each row repeated k consecutive times: [N,C] -> [N*k,C].
template <class T>
TensorPtr<T> repeat_rows(Tape<T>& tape, const TensorPtr<T>& x, int64_t k);

// Max / mean over consecutive groups of k rows: [N*k,C] -> [N,C].
template <class T>
TensorPtr<T> rowgroup_max(Tape<T>& tape, const TensorPtr<T>& x, int64_t k);
template <class T>
TensorPtr<T> rowgroup_mean(Tape<T>& tape, const TensorPtr<T>& x, int64_t k);

template <class T>
TensorPtr<T> sum_all(Tape<T>& tape, const TensorPtr<T>& x);
template <class T>
TensorPtr<T> mean_all(Tape<T>& tape, const TensorPtr<T>& x);

// mean over all elements of (a-b)^2
template <class T>
TensorPtr<T> mse(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b);

// Mean over rows of class_weight[label] * (-log softmax(logits)[label]).
// logits: [N,L]; labels in [0,L). class_weights empty means all-ones.
template <class T>
TensorPtr<T> softmax_cross_entropy(Tape<T>& tape, const TensorPtr<T>& logits,
                                   const std::vector<int32_t>& labels,
                                   const std::vector<T>& class_weights = {});

// Density normalization for splatted grids: x is [C+1,M] with the trailing
// channel a splatted all-ones weight map; returns [C,M] with
// out[c,m] = x[c,m] / (x[C,m] + eps).
template <class T>
TensorPtr<T> density_normalize(Tape<T>& tape, const TensorPtr<T>& x, double eps = 1e-5);

// Separable zero-padded box filter over the spatial axes of [C,D,H,W],
// applied `passes` times. Width must be odd. Self-adjoint, so backward is the
// same smoothing applied to the output gradient.
template <class T>
TensorPtr<T> box_smooth(Tape<T>& tape, const TensorPtr<T>& grid, int width = 5, int passes = 3);

// 2x average pooling / align-corners trilinear resize on [C,D,H,W] grids.
template <class T>
TensorPtr<T> avg_pool3d_2x(Tape<T>& tape, const TensorPtr<T>& grid);
template <class T>
TensorPtr<T> resize_trilinear(Tape<T>& tape, const TensorPtr<T>& grid, Dims3 out_dims);

}  // namespace pvf
