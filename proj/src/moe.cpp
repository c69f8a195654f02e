#include "m3ad/moe.hpp"

#include <cmath>

#include "m3ad/errors.hpp"
#include "m3ad/ops.hpp"

namespace m3ad {

const char* task_name(Task t) { return t == Task::Diagnosis ? "diagnosis" : "change"; }

std::vector<std::size_t> class_experts(const ModelConfig& cfg, int diag) {
  if (diag < 0 || static_cast<std::size_t>(diag) >= cfg.num_diag_classes) {
    throw ContractError("unknown diagnosis label " + std::to_string(diag));
  }
  const std::size_t first = cfg.shared_experts + 2 * static_cast<std::size_t>(diag);
  return {first, first + 1};
}

GateWeights label_guided_weights(int diag, const ModelConfig& cfg) {
  const auto pair = class_experts(cfg, diag);
  GateWeights g{Task::Diagnosis, std::vector<double>(cfg.num_experts, 0.0)};
  for (std::size_t e = 0; e < cfg.shared_experts; ++e) g.weights[e] = cfg.w_shared / static_cast<double>(cfg.shared_experts);
  for (auto e : pair) g.weights[e] = (1.0 - cfg.w_shared) / 2.0;
  return g;
}

GateWeights class_only_weights(int diag, const ModelConfig& cfg) {
  const auto pair = class_experts(cfg, diag);
  GateWeights g{Task::Diagnosis, std::vector<double>(cfg.num_experts, 0.0)};
  for (auto e : pair) g.weights[e] = 0.5;
  return g;
}

Tensor expert_mlp(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2) {
  return ops::linear(ops::gelu(ops::linear(x, w1, b1)), w2, b2);
}

Tensor feature_level_attention(const Tensor& x, const Tensor& w_a, const Tensor& b_a) {
  if (x.rank() != 2) throw DimensionError("feature_level_attention: expected tokens [n, d], got " + shape_str(x.shape()));
  Tensor pooled = ops::mean_rows(x);
  Tensor a = ops::sigmoid(ops::linear(pooled, w_a, b_a));
  return ops::mul(a, pooled);
}

Tensor gate_probabilities(const Tensor& x, const Tensor& w_a, const Tensor& b_a, const Tensor& w_g, double tau) {
  if (!(tau > 0)) throw ContractError("gate temperature must be positive");
  Tensor logits = ops::linear(feature_level_attention(x, w_a, b_a), w_g, Tensor());
  return ops::softmax(ops::scale(logits, 1.0 / tau));
}

Tensor mmoe_combine(std::span<const Tensor> outputs, const Tensor& weights) {
  if (outputs.empty() || weights.size() != outputs.size()) {
    throw DimensionError("mmoe_combine: " + std::to_string(outputs.size()) + " expert outputs vs weights " +
                         shape_str(weights.shape()));
  }
  Tensor acc;
  for (std::size_t e = 0; e < outputs.size(); ++e) {
    Tensor term = ops::mul(outputs[e], ops::pick(weights, e));
    acc = acc.defined() ? ops::add(acc, term) : term;
  }
  return acc;
}

MoeLayer::MoeLayer(ParameterStore& store, const std::string& prefix, std::size_t dim, const ModelConfig& cfg,
                   std::size_t layer_index, init::Rng& rng)
    : cfg_(cfg), layer_index_(layer_index) {
  const std::size_t hidden = dim * cfg.expert_hidden_ratio;
  for (std::size_t e = 0; e < cfg.num_experts; ++e) {
    const std::string p = prefix + ".expert" + std::to_string(e);
    ExpertParams ep{};
    ep.w1 = &store.add(p + ".w1", ParamGroup::Expert, {dim, hidden}, init::xavier_uniform(rng, dim, hidden, dim * hidden));
    ep.b1 = &store.add(p + ".b1", ParamGroup::Expert, {hidden}, init::zeros(hidden));
    ep.w2 = &store.add(p + ".w2", ParamGroup::Expert, {hidden, dim}, init::xavier_uniform(rng, hidden, dim, dim * hidden));
    ep.b2 = &store.add(p + ".b2", ParamGroup::Expert, {dim}, init::zeros(dim));
    experts_.push_back(ep);
  }
  for (std::size_t t = 0; t < kNumTasks; ++t) {
    const std::string p = prefix + ".gate_" + task_name(static_cast<Task>(t));
    gates_[t].w_a = &store.add(p + ".w_a", ParamGroup::Gate, {dim, dim}, init::xavier_uniform(rng, dim, dim, dim * dim));
    gates_[t].b_a = &store.add(p + ".b_a", ParamGroup::Gate, {dim}, init::zeros(dim));
    gates_[t].w_g = &store.add(p + ".w_g", ParamGroup::Gate, {dim, cfg.num_experts},
                               init::normal(rng, dim * cfg.num_experts, 0.02));
  }
}

Tensor MoeLayer::expert_forward(Binding& bind, std::size_t e, const Tensor& x) const {
  if (e >= experts_.size()) {
    throw ContractError("expert index " + std::to_string(e) + " out of range (" + std::to_string(experts_.size()) +
                        " experts)");
  }
  const auto& ep = experts_[e];
  return expert_mlp(x, bind(ep.w1), bind(ep.b1), bind(ep.w2), bind(ep.b2));
}

Tensor MoeLayer::gate_forward(Binding& bind, Task task, const Tensor& x) const {
  const auto& g = gates_[static_cast<std::size_t>(task)];
  return gate_probabilities(x, bind(g.w_a), bind(g.b_a), bind(g.w_g), cfg_.tau_gate);
}

Tensor MoeLayer::combine(Binding& bind, const Tensor& x, const Tensor& weights) const {
  std::vector<Tensor> outs;
  outs.reserve(experts_.size());
  for (std::size_t e = 0; e < experts_.size(); ++e) outs.push_back(expert_forward(bind, e, x));
  return mmoe_combine(outs, weights);
}

Tensor MoeLayer::combine_fixed(Binding& bind, const Tensor& x, std::span<const double> weights) const {
  if (weights.size() != experts_.size()) {
    throw DimensionError("combine_fixed: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(experts_.size()) + " experts");
  }
  Tensor acc;
  for (std::size_t e = 0; e < experts_.size(); ++e) {
    if (weights[e] == 0.0) continue;
    Tensor term = ops::scale(expert_forward(bind, e, x), weights[e]);
    acc = acc.defined() ? ops::add(acc, term) : term;
  }
  if (!acc.defined()) throw ContractError("combine_fixed: all expert weights are zero");
  return acc;
}

Tensor MoeLayer::forward(ForwardContext& ctx, const Tensor& x) const {
  switch (ctx.routing.mode) {
    case Routing::Mode::LabelGuided:
      return combine_fixed(ctx.bind, x, label_guided_weights(ctx.routing.label, cfg_).weights);
    case Routing::Mode::ClassOnly:
      return combine_fixed(ctx.bind, x, class_only_weights(ctx.routing.label, cfg_).weights);
    case Routing::Mode::Fixed:
      return combine_fixed(ctx.bind, x, ctx.routing.fixed);
    case Routing::Mode::TaskGate: {
      Tensor w = gate_forward(ctx.bind, ctx.routing.task, x);
      if (ctx.trace) {
        ctx.trace->records.push_back({layer_index_, ctx.routing.task, std::vector<double>(w.data().begin(), w.data().end())});
      }
      return combine(ctx.bind, x, w);
    }
  }
  throw ContractError("unreachable routing mode");
}

const Parameter& MoeLayer::gate_param(Task t, const char* which) const {
  const auto& g = gates_[static_cast<std::size_t>(t)];
  const std::string w(which);
  if (w == "w_a") return *g.w_a;
  if (w == "b_a") return *g.b_a;
  if (w == "w_g") return *g.w_g;
  throw ContractError("unknown gate parameter " + w);
}

}  // namespace m3ad
