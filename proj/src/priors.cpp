#include "m3ad/priors.hpp"

#include <cmath>

#include "m3ad/errors.hpp"
#include "m3ad/ops.hpp"

namespace m3ad {

PriorStats PriorStats::fit(std::span<const ClinicalPriors> priors) {
  if (priors.empty()) throw DataError("cannot fit prior statistics on an empty set");
  PriorStats s;
  const double n = static_cast<double>(priors.size());
  s.age_mean = s.etiv_mean = 0.0;
  for (const auto& p : priors) {
    s.age_mean += p.age;
    s.etiv_mean += p.etiv;
  }
  s.age_mean /= n;
  s.etiv_mean /= n;
  double va = 0.0, ve = 0.0;
  for (const auto& p : priors) {
    va += (p.age - s.age_mean) * (p.age - s.age_mean);
    ve += (p.etiv - s.etiv_mean) * (p.etiv - s.etiv_mean);
  }
  s.age_std = std::sqrt(va / n);
  s.etiv_std = std::sqrt(ve / n);
  return s;
}

std::array<double, 3> normalize_priors(const ClinicalPriors& raw, const PriorStats& stats) {
  if (stats.age_std < 1e-8 || stats.etiv_std < 1e-8) {
    throw DataError("degenerate prior statistics (std below 1e-8)");
  }
  if (!(raw.age >= 0.0) || !std::isfinite(raw.age)) throw DataError("age must be finite and non-negative");
  if (!(raw.etiv > 0.0) || !std::isfinite(raw.etiv)) throw DataError("eTIV must be finite and positive");
  if (raw.gender != 0 && raw.gender != 1) throw DataError("gender must be 0 or 1");
  return {(raw.age - stats.age_mean) / stats.age_std, static_cast<double>(raw.gender),
          (raw.etiv - stats.etiv_mean) / stats.etiv_std};
}

std::size_t c_fusion_dim(std::size_t embed_dim, std::size_t stage) {
  if (stage > 3) throw ContractError("fusion stage " + std::to_string(stage) + " out of range {0,1,2,3}");
  return stage == 3 ? embed_dim << stage : embed_dim << (stage + 1);
}

PriorEncoder::PriorEncoder(ParameterStore& store, const std::string& prefix, const ModelConfig& cfg, init::Rng& rng)
    : out_dim_(c_fusion_dim(cfg.embed_dim, cfg.fusion_stage)), ln_eps_(cfg.ln_eps) {
  const std::size_t dims[4] = {3, cfg.prior_hidden.at(0), cfg.prior_hidden.at(1), out_dim_};
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string p = prefix + ".fc" + std::to_string(i + 1);
    const std::size_t in = dims[i], out = dims[i + 1];
    layers_[i].w = &store.add(p + ".w", ParamGroup::Prior, {in, out}, init::xavier_uniform(rng, in, out, in * out));
    layers_[i].b = &store.add(p + ".b", ParamGroup::Prior, {out}, init::zeros(out));
    layers_[i].ln_g = &store.add(p + ".ln.g", ParamGroup::Prior, {out}, init::constant(out, 1.0));
    layers_[i].ln_b = &store.add(p + ".ln.b", ParamGroup::Prior, {out}, init::zeros(out));
  }
}

Tensor PriorEncoder::forward(Binding& bind, const Tensor& p) const {
  if (p.size() != 3) throw DimensionError("prior encoder expects 3 priors, got " + shape_str(p.shape()));
  Tensor h = ops::reshape(p, {3});
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& l = layers_[i];
    h = ops::layer_norm(ops::linear(h, bind(l.w), bind(l.b)), bind(l.ln_g), bind(l.ln_b), ln_eps_);
    if (i < 2) h = ops::relu(h);
  }
  return h;
}

Tensor broadcast_rows(const Tensor& p, std::size_t rows) {
  const std::size_t C = p.size();
  std::vector<std::uint32_t> idx(rows * C);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) idx[r * C + c] = static_cast<std::uint32_t>(c);
  return ops::gather(p, std::move(idx), {rows, C});
}

Fusion::Fusion(ParameterStore& store, const std::string& prefix, FusionType type, std::size_t dim, init::Rng& rng)
    : type_(type), dim_(dim) {
  const std::string p = prefix + "." + to_string(type);
  switch (type) {
    case FusionType::Adaptive:
      gate_w_ = &store.add(p + ".gate.w", ParamGroup::Fusion, {2 * dim, 2}, init::normal(rng, 4 * dim, 0.02));
      proj_w_ = &store.add(p + ".proj.w", ParamGroup::Fusion, {dim, dim}, init::xavier_uniform(rng, dim, dim, dim * dim));
      proj_b_ = &store.add(p + ".proj.b", ParamGroup::Fusion, {dim}, init::zeros(dim));
      break;
    case FusionType::Concat:
      proj_w_ = &store.add(p + ".proj.w", ParamGroup::Fusion, {2 * dim, dim},
                           init::xavier_uniform(rng, 2 * dim, dim, 2 * dim * dim));
      proj_b_ = &store.add(p + ".proj.b", ParamGroup::Fusion, {dim}, init::zeros(dim));
      break;
    case FusionType::Add:
      alpha_image_ = &store.add(p + ".alpha_image", ParamGroup::Fusion, {1}, {1.0});
      alpha_clinical_ = &store.add(p + ".alpha_clinical", ParamGroup::Fusion, {1}, {0.1});
      break;
    case FusionType::Hadamard:
      proj_w_ = &store.add(p + ".proj.w", ParamGroup::Fusion, {dim, dim}, init::xavier_uniform(rng, dim, dim, dim * dim));
      break;
  }
}

Tensor Fusion::forward(Binding& bind, const Tensor& x, const Tensor& p_encoded, Tensor* weights_out) const {
  if (x.rank() != 2 || x.dim(1) != dim_ || p_encoded.size() != dim_) {
    throw DimensionError("fusion: stream " + shape_str(x.shape()) + " / prior " + shape_str(p_encoded.shape()) +
                         " do not match C_fusion " + std::to_string(dim_));
  }
  const Tensor xc = broadcast_rows(p_encoded, x.dim(0));
  switch (type_) {
    case FusionType::Adaptive: {
      Tensor w;
      if (forced_) {
        w = Tensor::from({2}, {(*forced_)[0], (*forced_)[1]});
      } else {
        Tensor pooled = ops::mean_rows(ops::concat_last(x, xc));
        w = ops::softmax(ops::linear(pooled, bind(gate_w_), Tensor()));
      }
      if (weights_out) *weights_out = w;
      Tensor mixed = ops::add(ops::mul(x, ops::pick(w, 0)), ops::mul(xc, ops::pick(w, 1)));
      return ops::linear(mixed, bind(proj_w_), bind(proj_b_));
    }
    case FusionType::Concat:
      return ops::linear(ops::concat_last(x, xc), bind(proj_w_), bind(proj_b_));
    case FusionType::Add:
      return ops::add(ops::mul(x, bind(alpha_image_)), ops::mul(xc, bind(alpha_clinical_)));
    case FusionType::Hadamard:
      return ops::add(x, ops::linear(ops::mul(x, xc), bind(proj_w_), Tensor()));
  }
  throw ContractError("unreachable fusion type");
}

}  // namespace m3ad
