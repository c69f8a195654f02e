#include "m3ad/backbone.hpp"

#include <cmath>

#include "m3ad/errors.hpp"
#include "m3ad/ops.hpp"

namespace m3ad {

StagePlan StagePlan::build(const ModelConfig& cfg, std::size_t height, std::size_t width) {
  const std::size_t stride = cfg.final_stride();
  if (height == 0 || width == 0 || height % stride != 0 || width % stride != 0) {
    throw DimensionError("input extents " + std::to_string(height) + "x" + std::to_string(width) +
                         " must be divisible by " + std::to_string(stride));
  }
  StagePlan plan;
  plan.patch_size = cfg.patch_size;
  for (std::size_t s = 0; s < 4; ++s) {
    StageSpec spec{};
    spec.kind = s < 2 ? BlockKind::Attention : BlockKind::TokMlp;
    spec.depth = cfg.depths.at(s);
    spec.heads = cfg.heads.at(s);
    spec.dim = cfg.stage_dim(s);
    spec.grid = {height / (cfg.patch_size << s), width / (cfg.patch_size << s)};
    spec.window = std::min({cfg.window, spec.grid.h, spec.grid.w});
    if (spec.kind == BlockKind::Attention && (spec.grid.h % spec.window || spec.grid.w % spec.window)) {
      throw DimensionError("stage " + std::to_string(s) + " grid " + std::to_string(spec.grid.h) + "x" +
                           std::to_string(spec.grid.w) + " not divisible by window " + std::to_string(spec.window));
    }
    plan.stages.push_back(spec);
  }
  return plan;
}

Tensor patch_embed(const Tensor& image, const Tensor& w, const Tensor& b, std::size_t patch) {
  const bool ok_rank = image.rank() == 2 || (image.rank() == 3 && image.dim(2) == 1);
  if (!ok_rank) throw DimensionError("patch_embed: expected image [H, W] or [H, W, 1], got " + shape_str(image.shape()));
  const std::size_t H = image.dim(0), W = image.dim(1);
  if (patch == 0 || H % patch || W % patch) {
    throw DimensionError("patch_embed: image " + shape_str(image.shape()) + " not divisible by patch " +
                         std::to_string(patch));
  }
  if (w.rank() != 2 || w.dim(0) != patch * patch) {
    throw DimensionError("patch_embed: weight " + shape_str(w.shape()) + " does not match patch " + std::to_string(patch));
  }
  const std::size_t ph = H / patch, pw = W / patch, pp = patch * patch;
  std::vector<std::uint32_t> idx(ph * pw * pp);
  for (std::size_t i = 0; i < ph; ++i)
    for (std::size_t j = 0; j < pw; ++j)
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx)
          idx[((i * pw + j) * pp) + dy * patch + dx] = static_cast<std::uint32_t>((i * patch + dy) * W + j * patch + dx);
  Tensor patches = ops::gather(image, std::move(idx), {ph * pw, pp});
  return ops::linear(patches, w, b);
}

WindowPartition::WindowPartition(std::size_t height, std::size_t width, std::size_t channels, std::size_t window,
                                 std::size_t shift)
    : h_(height), w_(width), c_(channels), m_(window), shift_(shift) {
  if (m_ == 0 || h_ % m_ || w_ % m_) {
    throw DimensionError("window_partition: map " + std::to_string(h_) + "x" + std::to_string(w_) +
                         " not divisible by window " + std::to_string(m_));
  }
  const std::size_t n = h_ * w_ * c_;
  forward_.resize(n);
  inverse_.resize(n);
  const std::size_t T = m_ * m_;
  for (std::size_t win = 0; win < num_windows(); ++win) {
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t src = source_token(win, t);
      for (std::size_t c = 0; c < c_; ++c) {
        const std::size_t dst = (win * T + t) * c_ + c;
        forward_[dst] = static_cast<std::uint32_t>(src * c_ + c);
        inverse_[src * c_ + c] = static_cast<std::uint32_t>(dst);
      }
    }
  }
}

std::size_t WindowPartition::source_token(std::size_t win, std::size_t t) const {
  const std::size_t per_row = w_ / m_;
  const std::size_t r = (win / per_row) * m_ + t / m_;
  const std::size_t c = (win % per_row) * m_ + t % m_;
  return ((r + shift_) % h_) * w_ + (c + shift_) % w_;
}

Tensor WindowPartition::partition(const Tensor& x) const {
  if (x.size() != h_ * w_ * c_) {
    throw DimensionError("window_partition: input " + shape_str(x.shape()) + " does not match " + std::to_string(h_) +
                         "x" + std::to_string(w_) + "x" + std::to_string(c_));
  }
  return ops::gather(x, forward_, {num_windows(), m_ * m_, c_});
}

Tensor WindowPartition::reverse(const Tensor& windows) const {
  if (windows.size() != h_ * w_ * c_) {
    throw DimensionError("window_reverse: input " + shape_str(windows.shape()) + " does not match partition");
  }
  return ops::gather(windows, inverse_, {h_ * w_, c_});
}

Tensor effective_tau(const Tensor& tau_raw) { return ops::add_scalar(ops::softplus(tau_raw), 0.01); }

double tau_raw_for(double tau) { return std::log(std::expm1(tau - 0.01)); }

AttentionResult cosine_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& tau_raw,
                                 const Tensor& bias) {
  if (q.shape() != k.shape() || q.rank() != v.rank() || (q.rank() != 2 && q.rank() != 3)) {
    throw DimensionError("cosine_attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()));
  }
  const bool single = q.rank() == 2;
  Tensor q3 = single ? ops::reshape(q, {1, q.dim(0), q.dim(1)}) : q;
  Tensor k3 = single ? ops::reshape(k, {1, k.dim(0), k.dim(1)}) : k;
  Tensor v3 = single ? ops::reshape(v, {1, v.dim(0), v.dim(1)}) : v;
  const std::size_t B = q3.dim(0), n = q3.dim(1), heads = tau_raw.size();
  if (v3.dim(0) != B || v3.dim(1) != n || B % heads != 0) {
    throw DimensionError("cosine_attention: batch " + shape_str(q3.shape()) + " vs v " + shape_str(v3.shape()) +
                         " with " + std::to_string(heads) + " heads");
  }
  Tensor cos = ops::matmul(ops::l2_normalize(q3), ops::transpose(ops::l2_normalize(k3)));
  Tensor logits = ops::div(ops::reshape(cos, {B / heads, heads, n, n}), ops::reshape(effective_tau(tau_raw), {heads, 1, 1}));
  if (bias.defined()) {
    if (bias.shape() != Shape{heads, n, n}) {
      throw DimensionError("cosine_attention: bias " + shape_str(bias.shape()) + " expected " +
                           shape_str({heads, n, n}));
    }
    logits = ops::add(logits, bias);
  }
  Tensor weights = ops::reshape(ops::softmax(logits), {B, n, n});
  Tensor out = ops::matmul(weights, v3);
  if (single) out = ops::reshape(out, v.shape());
  return {out, weights};
}

std::size_t relative_position_index(std::size_t i, std::size_t j, std::size_t window) {
  const std::size_t span = 2 * window - 1;
  const std::size_t dr = i / window + window - 1 - j / window;
  const std::size_t dc = i % window + window - 1 - j % window;
  return dr * span + dc;
}

WindowAttention::WindowAttention(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t heads,
                                 std::size_t window, init::Rng& rng)
    : dim_(dim), heads_(heads), window_(window) {
  if (heads == 0 || dim % heads) {
    throw DimensionError("attention dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
  }
  qkv_w_ = &store.add(prefix + ".qkv.w", ParamGroup::Backbone, {dim, 3 * dim},
                      init::xavier_uniform(rng, dim, dim, 3 * dim * dim));
  qkv_b_ = &store.add(prefix + ".qkv.b", ParamGroup::Backbone, {3 * dim}, init::zeros(3 * dim));
  proj_w_ = &store.add(prefix + ".proj.w", ParamGroup::Backbone, {dim, dim}, init::xavier_uniform(rng, dim, dim, dim * dim));
  proj_b_ = &store.add(prefix + ".proj.b", ParamGroup::Backbone, {dim}, init::zeros(dim));
  tau_raw_ = &store.add(prefix + ".tau_raw", ParamGroup::Backbone, {heads}, init::constant(heads, tau_raw_for(1.0)));
  const std::size_t span = 2 * window - 1;
  bias_table_ = &store.add(prefix + ".rel_bias", ParamGroup::Backbone, {span * span, heads}, init::zeros(span * span * heads));
}

Tensor WindowAttention::forward(Binding& bind, const Tensor& x, Grid grid, std::size_t shift, Tensor* weights_out) const {
  if (x.rank() != 2 || x.dim(0) != grid.tokens() || x.dim(1) != dim_) {
    throw DimensionError("window attention: tokens " + shape_str(x.shape()) + " do not match grid " +
                         std::to_string(grid.h) + "x" + std::to_string(grid.w) + "x" + std::to_string(dim_));
  }
  const WindowPartition part(grid.h, grid.w, 1, window_, shift);
  const std::size_t nW = part.num_windows(), T = part.window_tokens(), hd = dim_ / heads_, C = dim_;

  Tensor qkv = ops::linear(x, bind(qkv_w_), bind(qkv_b_));
  std::vector<std::uint32_t> split(3 * nW * heads_ * T * hd);
  std::vector<std::uint32_t> merge(grid.tokens() * C);
  std::size_t o = 0;
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t win = 0; win < nW; ++win)
      for (std::size_t h = 0; h < heads_; ++h)
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t tok = part.source_token(win, t);
          for (std::size_t j = 0; j < hd; ++j) {
            split[o] = static_cast<std::uint32_t>(tok * 3 * C + p * C + h * hd + j);
            if (p == 0) merge[tok * C + h * hd + j] = static_cast<std::uint32_t>(o);
            ++o;
          }
        }
  Tensor heads = ops::gather(qkv, std::move(split), {3, nW * heads_, T, hd});
  auto part_of = [&](std::size_t p) { return ops::reshape(ops::slice_rows(heads, p, 1), {nW * heads_, T, hd}); };

  std::vector<std::uint32_t> rel(heads_ * T * T);
  for (std::size_t h = 0; h < heads_; ++h)
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j)
        rel[(h * T + i) * T + j] = static_cast<std::uint32_t>(relative_position_index(i, j, window_) * heads_ + h);
  Tensor bias = ops::gather(bind(bias_table_), std::move(rel), {heads_, T, T});

  auto attn = cosine_attention(part_of(0), part_of(1), part_of(2), bind(tau_raw_), bias);
  if (weights_out) *weights_out = attn.weights;
  Tensor merged = ops::gather(attn.output, std::move(merge), {grid.tokens(), C});
  return ops::linear(merged, bind(proj_w_), bind(proj_b_));
}

M3adBlock::M3adBlock(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t heads,
                     std::size_t window, std::size_t shift, const ModelConfig& cfg, std::size_t moe_index,
                     init::Rng& rng)
    : shift_(shift),
      ln_eps_(cfg.ln_eps),
      ln1_g_(&store.add(prefix + ".ln1.g", ParamGroup::Backbone, {dim}, init::constant(dim, 1.0))),
      ln1_b_(&store.add(prefix + ".ln1.b", ParamGroup::Backbone, {dim}, init::zeros(dim))),
      ln2_g_(&store.add(prefix + ".ln2.g", ParamGroup::Backbone, {dim}, init::constant(dim, 1.0))),
      ln2_b_(&store.add(prefix + ".ln2.b", ParamGroup::Backbone, {dim}, init::zeros(dim))),
      attention_(store, prefix + ".attn", dim, heads, window, rng),
      moe_(store, prefix + ".mmoe", dim, cfg, moe_index, rng) {}

Tensor M3adBlock::forward(ForwardContext& ctx, const Tensor& z, Grid grid) const {
  Binding& bind = ctx.bind;
  Tensor mid = ops::add(attention_.forward(bind, ops::layer_norm(z, bind(ln1_g_), bind(ln1_b_), ln_eps_), grid, shift_), z);
  return ops::add(moe_.forward(ctx, ops::layer_norm(mid, bind(ln2_g_), bind(ln2_b_), ln_eps_)), mid);
}

Tensor gather_2x2(const Tensor& x, Grid grid) {
  if (x.rank() != 2 || x.dim(0) != grid.tokens()) {
    throw DimensionError("patch_merge: tokens " + shape_str(x.shape()) + " do not match grid " + std::to_string(grid.h) +
                         "x" + std::to_string(grid.w));
  }
  if (grid.h % 2 || grid.w % 2) {
    throw DimensionError("patch_merge: odd grid " + std::to_string(grid.h) + "x" + std::to_string(grid.w));
  }
  const std::size_t C = x.dim(1), oh = grid.h / 2, ow = grid.w / 2;
  constexpr std::size_t dr[4] = {0, 1, 0, 1};
  constexpr std::size_t dc[4] = {0, 0, 1, 1};
  std::vector<std::uint32_t> idx(oh * ow * 4 * C);
  std::size_t o = 0;
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j)
      for (std::size_t q = 0; q < 4; ++q) {
        const std::size_t tok = (2 * i + dr[q]) * grid.w + 2 * j + dc[q];
        for (std::size_t c = 0; c < C; ++c) idx[o++] = static_cast<std::uint32_t>(tok * C + c);
      }
  return ops::gather(x, std::move(idx), {oh * ow, 4 * C});
}

PatchMerge::PatchMerge(ParameterStore& store, const std::string& prefix, std::size_t dim, init::Rng& rng)
    : dim_(dim),
      w_(&store.add(prefix + ".reduce.w", ParamGroup::Backbone, {4 * dim, 2 * dim},
                    init::xavier_uniform(rng, 4 * dim, 2 * dim, 8 * dim * dim))) {}

Tensor PatchMerge::forward(Binding& bind, const Tensor& x, Grid grid) const {
  if (x.rank() != 2 || x.dim(1) != dim_) {
    throw DimensionError("patch_merge: expected [*, " + std::to_string(dim_) + "], got " + shape_str(x.shape()));
  }
  return ops::linear(gather_2x2(x, grid), bind(w_), Tensor());
}

}  // namespace m3ad
