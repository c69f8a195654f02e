#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "m3ad/config.hpp"
#include "m3ad/moe.hpp"
#include "m3ad/parameters.hpp"
#include "m3ad/tensor.hpp"

namespace m3ad {

struct Grid {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t tokens() const { return h * w; }
  bool operator==(const Grid&) const = default;
};

enum class BlockKind { Attention, TokMlp };

struct StageSpec {
  BlockKind kind;
  std::size_t depth;
  std::size_t heads;   // attention stages only
  std::size_t dim;     // C, 2C, 4C, 8C
  Grid grid;           // H/4, H/8, H/16, H/32
  std::size_t window;  // min(M, grid extent)
};

struct StagePlan {
  std::size_t patch_size = 4;
  std::vector<StageSpec> stages;

  // Stages 0-1 attention, 2-3 Tok-MLP; throws DimensionError unless the
  // input extents are divisible by patch * 8.
  static StagePlan build(const ModelConfig& cfg, std::size_t height, std::size_t width);
};

// --- Patch embedding -------------------------------------------------------

// image [H, W] or [H, W, 1]; w [p*p, C]; b [C] -> tokens [(H/p)(W/p), C],
// patches in row-major grid order.
Tensor patch_embed(const Tensor& image, const Tensor& w, const Tensor& b, std::size_t patch);

// --- Windows -----------------------------------------------------------------

/// Cyclic shift by `shift` (towards the origin) followed by partition of an
/// [H, W, C] map into M x M windows. Both directions are pure permutations,
/// so reverse(partition(x)) == x bit-for-bit.
class WindowPartition {
 public:
  WindowPartition(std::size_t height, std::size_t width, std::size_t channels, std::size_t window, std::size_t shift);

  std::size_t num_windows() const { return (h_ / m_) * (w_ / m_); }
  std::size_t window_tokens() const { return m_ * m_; }

  // [H, W, C] or [H*W, C] -> [nW, M*M, C]
  Tensor partition(const Tensor& x) const;
  // [nW, M*M, C] -> [H*W, C]
  Tensor reverse(const Tensor& windows) const;

  // Source token (row-major over the H x W grid) for window slot (win, t).
  std::size_t source_token(std::size_t win, std::size_t t) const;

 private:
  std::size_t h_, w_, c_, m_, shift_;
  std::vector<std::uint32_t> forward_;
  std::vector<std::uint32_t> inverse_;
};

// --- Scaled cosine attention ------------------------------------------------

// tau = 0.01 + softplus(tau_raw), elementwise.
Tensor effective_tau(const Tensor& tau_raw);
// softplus^{-1}(tau - 0.01), the raw value giving temperature tau.
double tau_raw_for(double tau);

struct AttentionResult {
  Tensor output;   // same shape as v
  Tensor weights;  // [B, n, n], rows on the simplex
};

/// SoftMax(cos(Q, K) / tau + B) V.
///
/// q, k, v are [n, d] (one head) or [G * heads, n, d] with heads innermost;
/// tau_raw is [heads]; bias is [heads, n, n] or undefined. Query and key
/// norms are clamped at 1e-12.
AttentionResult cosine_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& tau_raw,
                                 const Tensor& bias);

// Index of the relative-offset table entry for window slots i, j.
std::size_t relative_position_index(std::size_t i, std::size_t j, std::size_t window);

class WindowAttention {
 public:
  WindowAttention(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t heads,
                  std::size_t window, init::Rng& rng);

  // x [H*W, C] on `grid` -> [H*W, C]. `weights_out`, when set, receives the
  // attention matrices [nW * heads, M*M, M*M].
  Tensor forward(Binding& bind, const Tensor& x, Grid grid, std::size_t shift, Tensor* weights_out = nullptr) const;

  const Parameter& tau_raw() const { return *tau_raw_; }
  const Parameter& bias_table() const { return *bias_table_; }

 private:
  std::size_t dim_, heads_, window_;
  Parameter* qkv_w_;
  Parameter* qkv_b_;
  Parameter* proj_w_;
  Parameter* proj_b_;
  Parameter* tau_raw_;
  Parameter* bias_table_;
};

/// Pre-norm block: z~ = MSA(LN(z)) + z;  out = MMoE(LN(z~)) + z~.
class M3adBlock {
 public:
  M3adBlock(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t heads,
            std::size_t window, std::size_t shift, const ModelConfig& cfg, std::size_t moe_index, init::Rng& rng);

  Tensor forward(ForwardContext& ctx, const Tensor& z, Grid grid) const;

  const WindowAttention& attention() const { return attention_; }
  const MoeLayer& moe() const { return moe_; }
  std::size_t shift() const { return shift_; }

 private:
  std::size_t shift_;
  double ln_eps_;
  Parameter* ln1_g_;
  Parameter* ln1_b_;
  Parameter* ln2_g_;
  Parameter* ln2_b_;
  WindowAttention attention_;
  MoeLayer moe_;
};

// --- Patch merging ---------------------------------------------------------

// [H*W, C] on grid -> [(H/2)(W/2), 4C]: 2x2 neighbourhoods concatenated in
// the order (0,0), (1,0), (0,1), (1,1).
Tensor gather_2x2(const Tensor& x, Grid grid);

class PatchMerge {
 public:
  PatchMerge(ParameterStore& store, const std::string& prefix, std::size_t dim, init::Rng& rng);
  // [H*W, C] -> [(H/2)(W/2), 2C]
  Tensor forward(Binding& bind, const Tensor& x, Grid grid) const;

 private:
  std::size_t dim_;
  Parameter* w_;
};

}  // namespace m3ad
