#pragma once

#include <span>
#include <vector>

#include "ditopt/numerics/tape.hpp"

namespace ditopt {

// Differentiable primitives. Every op validates shapes (ShapeError), records
// its backward rule on the inputs' tape, and forward matmul/conv ops report
// their multiply-accumulate count to the active MacCounter.
//
// "Row" ops act on the trailing-axis matrix view: rows = numel / last extent.

template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> scale(const Var<S>& a, S factor);
template <typename S> Var<S> add_scalar(const Var<S>& a, S offset);

/// x[R x C] + v[C] broadcast over rows.
template <typename S> Var<S> add_row(const Var<S>& x, const Var<S>& v);
/// x[R x C] * v[C] broadcast over rows.
template <typename S> Var<S> mul_row(const Var<S>& x, const Var<S>& v);
/// x[R x C] * v[R] broadcast over columns.
template <typename S> Var<S> mul_col(const Var<S>& x, const Var<S>& v);

/// op(a) * op(b) for rank-2 inputs, op = transpose when the flag is set.
template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b, bool transpose_a = false, bool transpose_b = false);

/// x[.. x in] * w[out x in]^T (+ bias[out]).
template <typename S> Var<S> linear(const Var<S>& x, const Var<S>& weight);
template <typename S> Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias);

/// Max-subtracted softmax along `axis`. Non-finite input -> NumericError.
template <typename S> Var<S> softmax(const Var<S>& x, Index axis = -1);

/// Affine-free layer norm over the last axis.
template <typename S> Var<S> layer_norm(const Var<S>& x, S eps = S(1e-6));

/// tanh-approximated GELU.
template <typename S> Var<S> gelu(const Var<S>& x);
template <typename S> Var<S> silu(const Var<S>& x);

/// Norm-preserving polynomial focusing per row: (|x| / |x^p|) x^p with a
/// sign-preserving power (or ReLU first when `rectify`). Zero rows pass
/// through unchanged.
template <typename S> Var<S> focus(const Var<S>& x, int power, bool rectify = false);

/// Mean-pools the N rows of each trailing [N x d] slab into n contiguous
/// buckets [floor(iN/n), floor((i+1)N/n)).
template <typename S> Var<S> adaptive_avg_pool_tokens(const Var<S>& x, Index n);

/// Per-channel k x k convolution of v[N x C] laid out on a height x width
/// token grid, zero padded, stride 1. kernel is [C x k x k], bias [C] optional.
template <typename S>
Var<S> depthwise_conv_tokens(const Var<S>& v, Index height, Index width, const Var<S>& kernel);
template <typename S>
Var<S> depthwise_conv_tokens(const Var<S>& v, Index height, Index width, const Var<S>& kernel, const Var<S>& bias);

template <typename S> Var<S> slice_cols(const Var<S>& x, Index start, Index width);
template <typename S> Var<S> slice_rows(const Var<S>& x, Index start, Index count);
template <typename S> Var<S> concat_cols(std::span<const Var<S>> parts);
template <typename S> Var<S> concat_rows(std::span<const Var<S>> parts);

/// out.flat[i] = x.flat[indices[i]], reshaped to `out_shape`.
template <typename S> Var<S> gather(const Var<S>& x, std::vector<Index> indices, Shape out_shape);
/// base with src.flat[i] added into base.flat[indices[i]].
template <typename S> Var<S> scatter_add(const Var<S>& base, std::vector<Index> indices, const Var<S>& src);

template <typename S> Var<S> reshape(const Var<S>& x, Shape shape);

template <typename S> Var<S> sum(const Var<S>& x);
template <typename S> Var<S> mean(const Var<S>& x);
/// Mean of squared differences.
template <typename S> Var<S> mse(const Var<S>& a, const Var<S>& b);

/// Each row divided by its own sum.
template <typename S> Var<S> div_rowsum(const Var<S>& x);
/// x[R x (d+1)] -> x[:, :d] / (x[:, d] + eps).
template <typename S> Var<S> divide_by_last_col(const Var<S>& x, S eps);

// Value-level conveniences (evaluate on a throwaway non-recording tape).

template <typename S> Tensor<S> softmax(const Tensor<S>& x, Index axis = -1);
template <typename S> Tensor<S> adaptive_avg_pool_tokens(const Tensor<S>& x, Index n);
template <typename S>
Tensor<S> depthwise_conv_tokens(const Tensor<S>& v, Index height, Index width, const Tensor<S>& kernel);
template <typename S> Tensor<S> focusing_transform(const Tensor<S>& x, int power, bool rectify = false);

}  // namespace ditopt
