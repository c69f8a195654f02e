#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>

#include "m3ad/config.hpp"
#include "m3ad/parameters.hpp"
#include "m3ad/tensor.hpp"

namespace m3ad {

struct ClinicalPriors {
  double age = 0.0;   // years
  int gender = 0;     // 0 or 1
  double etiv = 0.0;  // millilitres
};

// Training-set statistics used to standardize age and eTIV.
struct PriorStats {
  double age_mean = 0.0;
  double age_std = 1.0;
  double etiv_mean = 0.0;
  double etiv_std = 1.0;

  static PriorStats fit(std::span<const ClinicalPriors> priors);
};

// [z(age), gender, z(etiv)]. Throws DataError when a std is below 1e-8 or
// a raw value is out of its domain.
std::array<double, 3> normalize_priors(const ClinicalPriors& raw, const PriorStats& stats);

// Channel count at fusion stage s: embed * 2^s for s = 3, embed * 2^(s+1)
// otherwise.
std::size_t c_fusion_dim(std::size_t embed_dim, std::size_t stage);

/// Three-layer prior MLP: 3 -> h1 -> h2 -> C_fusion, each layer followed by
/// layer norm; ReLU after the first two.
class PriorEncoder {
 public:
  PriorEncoder(ParameterStore& store, const std::string& prefix, const ModelConfig& cfg, init::Rng& rng);

  // p [3] -> [C_fusion]
  Tensor forward(Binding& bind, const Tensor& p) const;
  std::size_t out_dim() const { return out_dim_; }

 private:
  std::size_t out_dim_;
  double ln_eps_;
  struct Layer {
    Parameter* w;
    Parameter* b;
    Parameter* ln_g;
    Parameter* ln_b;
  };
  Layer layers_[3];
};

/// Clinical/imaging fusion applied to the token stream [L, C_fusion].
///   adaptive: w = Softmax(W_g AvgPool([X | Xc])), out = W_proj(w0 X + w1 Xc)
///   concat:   out = Proj([X | Xc])
///   add:      out = a_img X + a_clin Xc
///   hadamard: out = X + W_proj(X * Xc)      (W_proj without bias)
/// Xc is the encoded prior broadcast to all L positions.
class Fusion {
 public:
  Fusion(ParameterStore& store, const std::string& prefix, FusionType type, std::size_t dim, init::Rng& rng);

  // `weights_out` (adaptive only) receives the (w0, w1) used.
  Tensor forward(Binding& bind, const Tensor& x, const Tensor& p_encoded, Tensor* weights_out = nullptr) const;

  // Adaptive only: replaces the learned weights (w0, w1) by constants.
  void force_weights(std::optional<std::array<double, 2>> w) { forced_ = w; }

  FusionType type() const { return type_; }
  std::size_t dim() const { return dim_; }

 private:
  FusionType type_;
  std::size_t dim_;
  Parameter* gate_w_ = nullptr;
  Parameter* proj_w_ = nullptr;
  Parameter* proj_b_ = nullptr;
  Parameter* alpha_image_ = nullptr;
  Parameter* alpha_clinical_ = nullptr;
  std::optional<std::array<double, 2>> forced_;
};

// Repeats p [C] into [L, C].
Tensor broadcast_rows(const Tensor& p, std::size_t rows);

}  // namespace m3ad
