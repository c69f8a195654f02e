#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "m3ad/backbone.hpp"
#include "m3ad/config.hpp"
#include "m3ad/heads.hpp"
#include "m3ad/moe.hpp"
#include "m3ad/parameters.hpp"
#include "m3ad/priors.hpp"
#include "m3ad/tensor.hpp"
#include "m3ad/tokmlp.hpp"

namespace m3ad {

/// One preprocessed training example.
struct Example {
  Tensor image;   // [H, W], intensity-normalized
  Tensor priors;  // [3], standardized
  int diag = 0;
  int change = 0;
};

// Token count, channel count and grid after each stage (post-merge for
// stages 0-2), as observed during a forward pass.
struct StageShape {
  Grid grid;
  std::size_t tokens;
  std::size_t channels;
};

class M3adModel {
 public:
  M3adModel(const ModelConfig& cfg, std::uint64_t seed);
  M3adModel(const M3adModel&) = delete;
  M3adModel& operator=(const M3adModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const StagePlan& plan() const { return plan_; }

  struct Encoded {
    Tensor tokens;  // [h*w, 8C]
    Grid grid;
  };

  // Image (+ optional mask) through every stage, with prior fusion after
  // the configured stage. `shapes`, when set, receives per-stage outputs.
  Encoded encode(ForwardContext& ctx, const Tensor& image, const Tensor& priors, const MaskSpec* mask = nullptr,
                 std::vector<StageShape>* shapes = nullptr) const;

  Tensor reconstruct(Binding& bind, const Encoded& enc) const;
  Tensor logits(Binding& bind, const Encoded& enc, Task task) const;

  std::vector<const MoeLayer*> moe_layers() const;
  std::vector<const M3adBlock*> attention_blocks() const;
  Fusion& fusion() { return *fusion_; }
  const TaskHeads& heads() const { return *heads_; }
  const ReconDecoder& decoder() const { return *decoder_; }

 private:
  ModelConfig cfg_;
  StagePlan plan_;
  ParameterStore store_;
  Parameter* embed_w_;
  Parameter* embed_b_;
  std::vector<std::vector<M3adBlock>> attn_stages_;
  std::vector<std::vector<TokMlpBlock>> tok_stages_;
  std::vector<PatchMerge> merges_;
  std::unique_ptr<PriorEncoder> prior_encoder_;
  std::unique_ptr<Fusion> fusion_;
  std::unique_ptr<TaskHeads> heads_;
  std::unique_ptr<ReconDecoder> decoder_;
};

// --- Objectives on single examples ---------------------------------------

// Masked L1 of the reconstruction under label-guided routing.
Tensor recon_term(const M3adModel& model, Binding& bind, const Example& ex, const MaskSpec& mask);
// Masked L1 of the reconstruction when only the experts of class `diag`
// are active (the two split evenly, shared experts excluded).
Tensor class_routed_recon(const M3adModel& model, Binding& bind, const Example& ex, const MaskSpec& mask, int diag);

// Specialization term over a batch: per class k present, the mean of the
// class-routed masked L1 over its samples; summed over classes.
Tensor expert_specialization_loss(const M3adModel& model, Binding& bind, std::span<const Example> batch,
                                  std::span<const MaskSpec> masks);
// mean recon_term + lambda * expert_specialization_loss.
Tensor pretrain_loss(const M3adModel& model, Binding& bind, std::span<const Example> batch,
                     std::span<const MaskSpec> masks);

struct TaskLogits {
  Tensor diag;
  Tensor change;
};

// Two gated passes, one per task, each feeding its own head. With
// `single_task` only the diagnosis pass runs and `change` is undefined.
TaskLogits task_forward(const M3adModel& model, Binding& bind, const Example& ex, bool single_task = false,
                        GateTrace* trace = nullptr);

// Mean over the batch of alpha * CE(diag) + beta * CE(change).
Tensor finetune_batch_loss(const M3adModel& model, Binding& bind, std::span<const Example> batch);

}  // namespace m3ad
