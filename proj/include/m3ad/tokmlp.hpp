#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "m3ad/backbone.hpp"
#include "m3ad/parameters.hpp"
#include "m3ad/tensor.hpp"

namespace m3ad {

enum class ShiftAxis { Height, Width };

// Channel-group offsets for `groups` partitions: {-g/2, ..., +g/2}
// (groups = 5 gives -2, -1, 0, +1, +2).
std::vector<int> shift_offsets(std::size_t groups);

/// Rolls channel group g of an [H, W, C] map cyclically along `axis` by
/// offsets[g] (out[i] = in[i - offset]). Groups hold ceil(C / groups)
/// channels; the last group takes the remainder.
Tensor axis_shift(const Tensor& x, ShiftAxis axis, const std::vector<int>& offsets);

/// Tokenized shifted-MLP block on an [H, W, C] map:
///   T_W = Tokenize(Shift_W(X))
///   Y   = GELU(DWConv(MLP_1(T_W)))
///   T_H = Tokenize(Shift_H(Y))
///   Z   = GELU(LN(T_W + MLP_2(GELU(T_H))))
/// Tokenize is one 3x3 convolution shared by both axes.
class TokMlpBlock {
 public:
  TokMlpBlock(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t groups, double ln_eps,
              init::Rng& rng);

  // x [H*W, C] on grid -> [H*W, C]
  Tensor forward(Binding& bind, const Tensor& x, Grid grid) const;
  // Same block with caller-chosen shift offsets (tests / ablation).
  Tensor forward_with_offsets(Binding& bind, const Tensor& x, Grid grid, const std::vector<int>& offsets) const;

  Parameter& mlp2_weight() const { return *mlp2_w_; }
  Parameter& mlp2_bias() const { return *mlp2_b_; }

 private:
  std::size_t dim_;
  std::vector<int> offsets_;
  double ln_eps_;
  Parameter* tok_w_;
  Parameter* tok_b_;
  Parameter* mlp1_w_;
  Parameter* mlp1_b_;
  Parameter* dw_w_;
  Parameter* dw_b_;
  Parameter* mlp2_w_;
  Parameter* mlp2_b_;
  Parameter* ln_g_;
  Parameter* ln_b_;
};

}  // namespace m3ad
