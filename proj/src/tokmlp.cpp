#include "m3ad/tokmlp.hpp"

#include "m3ad/errors.hpp"
#include "m3ad/ops.hpp"

namespace m3ad {

std::vector<int> shift_offsets(std::size_t groups) {
  std::vector<int> out(groups);
  const int half = static_cast<int>(groups / 2);
  for (std::size_t g = 0; g < groups; ++g) out[g] = static_cast<int>(g) - half;
  return out;
}

Tensor axis_shift(const Tensor& x, ShiftAxis axis, const std::vector<int>& offsets) {
  if (x.rank() != 3) throw DimensionError("axis_shift: expected [H, W, C], got " + shape_str(x.shape()));
  if (offsets.empty()) throw ContractError("axis_shift: no channel groups");
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  const std::size_t per_group = (C + offsets.size() - 1) / offsets.size();
  const long extent = static_cast<long>(axis == ShiftAxis::Height ? H : W);
  std::vector<std::uint32_t> idx(x.size());
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w)
      for (std::size_t c = 0; c < C; ++c) {
        const long off = offsets[std::min(c / per_group, offsets.size() - 1)];
        std::size_t sh = h, sw = w;
        if (axis == ShiftAxis::Height) {
          sh = static_cast<std::size_t>(((static_cast<long>(h) - off) % extent + extent) % extent);
        } else {
          sw = static_cast<std::size_t>(((static_cast<long>(w) - off) % extent + extent) % extent);
        }
        idx[(h * W + w) * C + c] = static_cast<std::uint32_t>((sh * W + sw) * C + c);
      }
  return ops::gather(x, std::move(idx), x.shape());
}

TokMlpBlock::TokMlpBlock(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t groups,
                         double ln_eps, init::Rng& rng)
    : dim_(dim), offsets_(shift_offsets(groups)), ln_eps_(ln_eps) {
  tok_w_ = &store.add(prefix + ".tokenize.w", ParamGroup::Backbone, {3, 3, dim, dim},
                      init::xavier_uniform(rng, 9 * dim, 9 * dim, 9 * dim * dim));
  tok_b_ = &store.add(prefix + ".tokenize.b", ParamGroup::Backbone, {dim}, init::zeros(dim));
  mlp1_w_ = &store.add(prefix + ".mlp1.w", ParamGroup::Backbone, {dim, dim}, init::xavier_uniform(rng, dim, dim, dim * dim));
  mlp1_b_ = &store.add(prefix + ".mlp1.b", ParamGroup::Backbone, {dim}, init::zeros(dim));
  dw_w_ = &store.add(prefix + ".dwconv.w", ParamGroup::Backbone, {3, 3, dim}, init::xavier_uniform(rng, 9, 9, 9 * dim));
  dw_b_ = &store.add(prefix + ".dwconv.b", ParamGroup::Backbone, {dim}, init::zeros(dim));
  mlp2_w_ = &store.add(prefix + ".mlp2.w", ParamGroup::Backbone, {dim, dim}, init::xavier_uniform(rng, dim, dim, dim * dim));
  mlp2_b_ = &store.add(prefix + ".mlp2.b", ParamGroup::Backbone, {dim}, init::zeros(dim));
  ln_g_ = &store.add(prefix + ".ln.g", ParamGroup::Backbone, {dim}, init::constant(dim, 1.0));
  ln_b_ = &store.add(prefix + ".ln.b", ParamGroup::Backbone, {dim}, init::zeros(dim));
}

Tensor TokMlpBlock::forward(Binding& bind, const Tensor& x, Grid grid) const {
  return forward_with_offsets(bind, x, grid, offsets_);
}

Tensor TokMlpBlock::forward_with_offsets(Binding& bind, const Tensor& x, Grid grid, const std::vector<int>& offsets) const {
  if (x.size() != grid.tokens() * dim_) {
    throw DimensionError("tok-mlp: input " + shape_str(x.shape()) + " does not match grid " + std::to_string(grid.h) +
                         "x" + std::to_string(grid.w) + "x" + std::to_string(dim_));
  }
  const Shape map{grid.h, grid.w, dim_};
  Tensor tok_w = bind(tok_w_), tok_b = bind(tok_b_);

  Tensor t_w = ops::conv3x3(axis_shift(ops::reshape(x, map), ShiftAxis::Width, offsets), tok_w, tok_b);
  Tensor y = ops::gelu(ops::dwconv3x3(ops::linear(t_w, bind(mlp1_w_), bind(mlp1_b_)), bind(dw_w_), bind(dw_b_)));
  Tensor t_h = ops::conv3x3(axis_shift(y, ShiftAxis::Height, offsets), tok_w, tok_b);
  Tensor z = ops::add(t_w, ops::linear(ops::gelu(t_h), bind(mlp2_w_), bind(mlp2_b_)));
  z = ops::gelu(ops::layer_norm(z, bind(ln_g_), bind(ln_b_), ln_eps_));
  return ops::reshape(z, {grid.tokens(), dim_});
}

}  // namespace m3ad
