#include "m3ad/heads.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "m3ad/errors.hpp"
#include "m3ad/ops.hpp"

namespace m3ad {

std::vector<std::uint32_t> MaskSpec::pixel_indices() const {
  std::vector<std::uint32_t> out;
  out.reserve(units.size() * unit * unit);
  const std::size_t per_row = units_per_row();
  for (auto u : units) {
    const std::size_t r0 = (u / per_row) * unit, c0 = (u % per_row) * unit;
    for (std::size_t r = 0; r < unit; ++r)
      for (std::size_t c = 0; c < unit; ++c) out.push_back(static_cast<std::uint32_t>((r0 + r) * width + c0 + c));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<double> MaskSpec::token_mask(std::size_t patch) const {
  if (patch == 0 || unit % patch != 0) {
    throw DimensionError("mask unit " + std::to_string(unit) + " is not aligned with patch size " + std::to_string(patch));
  }
  const std::size_t gw = width / patch, gh = height / patch, k = unit / patch;
  std::vector<double> out(gh * gw, 0.0);
  const std::size_t per_row = units_per_row();
  for (auto u : units) {
    const std::size_t r0 = (u / per_row) * k, c0 = (u % per_row) * k;
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t c = 0; c < k; ++c) out[(r0 + r) * gw + c0 + c] = 1.0;
  }
  return out;
}

MaskSpec sample_mask(std::mt19937_64& rng, std::size_t height, std::size_t width, std::size_t unit, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ContractError("mask ratio must lie in (0, 1), got " + std::to_string(ratio));
  if (unit == 0 || height % unit || width % unit) {
    throw DimensionError("image " + std::to_string(height) + "x" + std::to_string(width) + " not divisible by mask unit " +
                         std::to_string(unit));
  }
  MaskSpec spec{height, width, unit, {}};
  const std::size_t total = spec.total_units();
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total)));
  std::vector<std::uint32_t> all(total);
  std::iota(all.begin(), all.end(), 0u);
  // Partial Fisher-Yates: the first `count` slots are a uniform sample.
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, total - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  spec.units.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(spec.units.begin(), spec.units.end());
  return spec;
}

Tensor apply_mask(const Tensor& tokens, const MaskSpec& spec, std::size_t patch, const Tensor& mask_token) {
  const auto m = spec.token_mask(patch);
  if (tokens.rank() != 2 || tokens.dim(0) != m.size() || mask_token.size() != tokens.dim(1)) {
    throw DimensionError("apply_mask: tokens " + shape_str(tokens.shape()) + " vs " + std::to_string(m.size()) +
                         " patch positions and mask token " + shape_str(mask_token.shape()));
  }
  if (spec.units.empty()) return tokens;
  std::vector<double> keep(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) keep[i] = 1.0 - m[i];
  const Tensor keep_t = Tensor::from({m.size(), 1}, std::move(keep));
  const Tensor mask_t = Tensor::from({m.size(), 1}, m);
  return ops::add(ops::mul(tokens, keep_t), ops::mul(mask_t, ops::reshape(mask_token, {1, tokens.dim(1)})));
}

Tensor recon_loss(const Tensor& image, const Tensor& prediction, const MaskSpec& spec) {
  if (image.size() != spec.height * spec.width) {
    throw DimensionError("recon_loss: image " + shape_str(image.shape()) + " vs mask extents " +
                         std::to_string(spec.height) + "x" + std::to_string(spec.width));
  }
  if (spec.units.empty()) throw ContractError("recon_loss: empty mask");
  const auto idx = spec.pixel_indices();
  return ops::masked_l1(prediction, image, idx);
}

Tensor finetune_loss(const Tensor& diag_logits, const Tensor& change_logits, int y_diag, int y_change, double alpha,
                     double beta) {
  const int yd[1] = {y_diag};
  const int yc[1] = {y_change};
  return ops::add(ops::scale(ops::cross_entropy(diag_logits, yd), alpha),
                  ops::scale(ops::cross_entropy(change_logits, yc), beta));
}

TaskHeads::TaskHeads(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t diag_classes,
                     std::size_t change_classes, double ln_eps, init::Rng& rng)
    : change_classes_(change_classes), ln_eps_(ln_eps) {
  ln_g_ = &store.add(prefix + ".norm.g", ParamGroup::Head, {dim}, init::constant(dim, 1.0));
  ln_b_ = &store.add(prefix + ".norm.b", ParamGroup::Head, {dim}, init::zeros(dim));
  diag_w_ = &store.add(prefix + ".diagnosis.w", ParamGroup::Head, {dim, diag_classes},
                       init::xavier_uniform(rng, dim, diag_classes, dim * diag_classes));
  diag_b_ = &store.add(prefix + ".diagnosis.b", ParamGroup::Head, {diag_classes}, init::zeros(diag_classes));
  change_w_ = &store.add(prefix + ".change.w", ParamGroup::Head, {dim, change_classes},
                         init::xavier_uniform(rng, dim, change_classes, dim * change_classes));
  change_b_ = &store.add(prefix + ".change.b", ParamGroup::Head, {change_classes}, init::zeros(change_classes));
}

Tensor TaskHeads::pool(Binding& bind, const Tensor& tokens) const {
  return ops::layer_norm(ops::mean_rows(tokens), bind(ln_g_), bind(ln_b_), ln_eps_);
}

Tensor TaskHeads::logits(Binding& bind, const Tensor& tokens, bool change_task) const {
  const Tensor pooled = pool(bind, tokens);
  return change_task ? ops::linear(pooled, bind(change_w_), bind(change_b_))
                     : ops::linear(pooled, bind(diag_w_), bind(diag_b_));
}

std::pair<Tensor, Tensor> TaskHeads::forward(Binding& bind, const Tensor& tokens) const {
  const Tensor pooled = pool(bind, tokens);
  return {ops::linear(pooled, bind(diag_w_), bind(diag_b_)), ops::linear(pooled, bind(change_w_), bind(change_b_))};
}

ReconDecoder::ReconDecoder(ParameterStore& store, const std::string& prefix, std::size_t final_dim, std::size_t stride,
                           std::size_t embed_dim, init::Rng& rng)
    : final_dim_(final_dim), stride_(stride) {
  const std::size_t out = stride * stride;
  w_ = &store.add(prefix + ".w", ParamGroup::Decoder, {final_dim, out},
                  init::xavier_uniform(rng, final_dim, out, final_dim * out));
  b_ = &store.add(prefix + ".b", ParamGroup::Decoder, {out}, init::zeros(out));
  mask_token_ = &store.add(prefix + ".mask_token", ParamGroup::Decoder, {embed_dim}, init::normal(rng, embed_dim, 0.02));
}

Tensor ReconDecoder::forward(Binding& bind, const Tensor& tokens, Grid grid) const {
  if (tokens.rank() != 2 || tokens.dim(0) != grid.tokens() || tokens.dim(1) != final_dim_) {
    throw DimensionError("decoder: tokens " + shape_str(tokens.shape()) + " vs grid " + std::to_string(grid.h) + "x" +
                         std::to_string(grid.w) + "x" + std::to_string(final_dim_));
  }
  const Tensor blocks = ops::linear(tokens, bind(w_), bind(b_));  // [h*w, s*s]
  const std::size_t S = stride_, H = grid.h * S, W = grid.w * S;
  std::vector<std::uint32_t> idx(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t tok = (y / S) * grid.w + x / S;
      idx[y * W + x] = static_cast<std::uint32_t>(tok * S * S + (y % S) * S + x % S);
    }
  return ops::gather(blocks, std::move(idx), {H, W});
}

}  // namespace m3ad
