#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "m3ad/config.hpp"
#include "m3ad/parameters.hpp"
#include "m3ad/tensor.hpp"

namespace m3ad {

enum class Task { Diagnosis = 0, Change = 1 };
inline constexpr std::size_t kNumTasks = 2;
const char* task_name(Task t);

// Diagnosis classes; also index the class-specific expert pairs.
enum Diagnosis : int { kNC = 0, kMCI = 1, kAD = 2 };

struct GateWeights {
  Task task = Task::Diagnosis;
  std::vector<double> weights;  // probability vector over experts
};

/// How an MMoE layer weights its experts for one forward pass.
struct Routing {
  enum class Mode {
    LabelGuided,  // shared experts + the diagnosis' pair, gates bypassed
    ClassOnly,    // only the diagnosis' pair, split evenly
    TaskGate,     // learned gate of one task
    Fixed,        // caller-supplied weights
  };
  Mode mode = Mode::TaskGate;
  int label = 0;
  Task task = Task::Diagnosis;
  std::vector<double> fixed;

  static Routing label_guided(int diag) { return {Mode::LabelGuided, diag, Task::Diagnosis, {}}; }
  static Routing class_only(int diag) { return {Mode::ClassOnly, diag, Task::Diagnosis, {}}; }
  static Routing gated(Task t) { return {Mode::TaskGate, 0, t, {}}; }
  static Routing fixed_weights(std::vector<double> w) { return {Mode::Fixed, 0, Task::Diagnosis, std::move(w)}; }
};

// Experts [0, shared) are shared; class k owns shared + 2k and shared + 2k + 1.
std::vector<std::size_t> class_experts(const ModelConfig& cfg, int diag);

// Pretraining weights: w_shared / E_s per shared expert, (1 - w_shared) / 2
// per expert of the label's pair, zero elsewhere.
GateWeights label_guided_weights(int diag, const ModelConfig& cfg);
// Weights used by the expert-specialization term: 1/2 on each expert of
// the class pair.
GateWeights class_only_weights(int diag, const ModelConfig& cfg);

// Collects gate outputs per layer during a forward pass (inspect-gates).
struct GateTrace {
  struct Record {
    std::size_t layer;
    Task task;
    std::vector<double> weights;
  };
  std::vector<Record> records;
};

struct ForwardContext {
  Binding& bind;
  Routing routing;
  GateTrace* trace = nullptr;
};

// --- Tensor-level primitives ---------------------------------------------

// Two-layer GELU MLP applied tokenwise: x [n, d] -> [n, d].
Tensor expert_mlp(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2);

// Mean over tokens, reweighted by a sigmoid feature gate:
// a = sigmoid(mean(x) W_a + b_a), returns a * mean(x). x [n, d] -> [d].
Tensor feature_level_attention(const Tensor& x, const Tensor& w_a, const Tensor& b_a);

// Softmax(feature_level_attention(x) W_g / tau) -> [E].
Tensor gate_probabilities(const Tensor& x, const Tensor& w_a, const Tensor& b_a, const Tensor& w_g, double tau);

// sum_e weights[e] * outputs[e]; weights is [E].
Tensor mmoe_combine(std::span<const Tensor> outputs, const Tensor& weights);

// --- Layer ------------------------------------------------------------------

class MoeLayer {
 public:
  MoeLayer(ParameterStore& store, const std::string& prefix, std::size_t dim, const ModelConfig& cfg,
           std::size_t layer_index, init::Rng& rng);

  std::size_t num_experts() const { return experts_.size(); }
  std::size_t layer_index() const { return layer_index_; }

  Tensor expert_forward(Binding& bind, std::size_t e, const Tensor& x) const;
  Tensor gate_forward(Binding& bind, Task task, const Tensor& x) const;
  // Differentiable weights [E].
  Tensor combine(Binding& bind, const Tensor& x, const Tensor& weights) const;
  // Constant weights; experts with weight exactly zero are not evaluated.
  Tensor combine_fixed(Binding& bind, const Tensor& x, std::span<const double> weights) const;

  Tensor forward(ForwardContext& ctx, const Tensor& x) const;

  const Parameter& gate_param(Task t, const char* which) const;

 private:
  struct ExpertParams {
    Parameter* w1;
    Parameter* b1;
    Parameter* w2;
    Parameter* b2;
  };
  struct GateParams {
    Parameter* w_a;
    Parameter* b_a;
    Parameter* w_g;
  };
  ModelConfig cfg_;
  std::size_t layer_index_;
  std::vector<ExpertParams> experts_;
  GateParams gates_[kNumTasks];
};

}  // namespace m3ad
