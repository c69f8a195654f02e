#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "m3ad/tensor.hpp"

// Differentiable primitives. Every op validates shapes and reports both
// operands' shapes on mismatch. "Last axis" ops treat the tensor as a stack
// of rows of length shape.back().
namespace m3ad::ops {

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);

// [..., m, k] x [k, n] -> [..., m, n]; [B, m, k] x [B, k, n] -> [B, m, n];
// a rank-1 left operand is treated as a single row.
Tensor matmul(const Tensor& a, const Tensor& b);
// x [..., in] * w [in, out] + bias [out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
// Swap the last two axes (rank 2 or 3).
Tensor transpose(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
// out.flat[i] = x.flat[index[i]]. Repeated indices accumulate gradient.
Tensor gather(const Tensor& x, std::vector<std::uint32_t> index, Shape out_shape);
// Rows [begin, begin + count) of axis 0.
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
// Concatenate along the last axis; leading extents must agree.
Tensor concat_last(const Tensor& a, const Tensor& b);
// Element `i` of the flattened tensor, as shape [1].
Tensor pick(const Tensor& x, std::size_t i);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Mean over axis 0: [n, ...] -> [...].
Tensor mean_rows(const Tensor& x);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);
inline Tensor softmax(const Tensor& x) { return softmax(x, x.rank() - 1); }

// Normalizes over the last axis; gamma/beta are [d] and may be undefined
// (identity affine).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Rows divided by max(||row||, min_norm).
Tensor l2_normalize(const Tensor& x, double min_norm = 1e-12);

// 3x3 convolution, zero padding 1, stride 1, HWC layout.
// x [H, W, Cin], w [3, 3, Cin, Cout], bias [Cout] (may be undefined).
Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& bias);
// Depthwise 3x3: x [H, W, C], w [3, 3, C], bias [C] (may be undefined).
Tensor dwconv3x3(const Tensor& x, const Tensor& w, const Tensor& bias);

// Mean cross-entropy of logits [C] or [N, C] against class indices.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
// (1/|idx|) * sum_{i in idx} |pred_i - target_i|; target is a constant.
Tensor masked_l1(const Tensor& pred, const Tensor& target, std::span<const std::uint32_t> index);

}  // namespace m3ad::ops
