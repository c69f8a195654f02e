#include "m3ad/model.hpp"

#include <array>
#include <string>

#include "m3ad/errors.hpp"
#include "m3ad/ops.hpp"

namespace m3ad {

M3adModel::M3adModel(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), plan_(StagePlan::build(cfg, cfg.image_size, cfg.image_size)) {
  cfg_.validate();
  init::Rng rng(derive_seed(seed, 0x4d33414444ULL));
  const std::size_t C = cfg.embed_dim, p = cfg.patch_size;
  embed_w_ = &store_.add("patch_embed.w", ParamGroup::Backbone, {p * p, C},
                         init::xavier_uniform(rng, p * p, C, p * p * C));
  embed_b_ = &store_.add("patch_embed.b", ParamGroup::Backbone, {C}, init::zeros(C));

  std::size_t moe_index = 0;
  for (std::size_t s = 0; s < plan_.stages.size(); ++s) {
    const StageSpec& st = plan_.stages[s];
    const std::string prefix = "stage" + std::to_string(s);
    if (st.kind == BlockKind::Attention) {
      auto& blocks = attn_stages_.emplace_back();
      blocks.reserve(st.depth);
      for (std::size_t b = 0; b < st.depth; ++b) {
        const bool can_shift = st.grid.h > st.window || st.grid.w > st.window;
        const std::size_t shift = (b % 2 == 1 && can_shift) ? st.window / 2 : 0;
        blocks.emplace_back(store_, prefix + ".block" + std::to_string(b), st.dim, st.heads, st.window, shift, cfg_,
                            moe_index++, rng);
      }
    } else {
      auto& blocks = tok_stages_.emplace_back();
      blocks.reserve(st.depth);
      for (std::size_t b = 0; b < st.depth; ++b) {
        blocks.emplace_back(store_, prefix + ".block" + std::to_string(b), st.dim, cfg.tokmlp_groups, cfg.ln_eps, rng);
      }
    }
    if (s + 1 < plan_.stages.size()) merges_.emplace_back(store_, prefix + ".merge", st.dim, rng);
  }

  prior_encoder_ = std::make_unique<PriorEncoder>(store_, "prior", cfg_, rng);
  fusion_ = std::make_unique<Fusion>(store_, "fusion", cfg.fusion_type, prior_encoder_->out_dim(), rng);
  const std::size_t final_dim = plan_.stages.back().dim;
  heads_ = std::make_unique<TaskHeads>(store_, "head", final_dim, cfg.num_diag_classes, cfg.num_change_classes,
                                       cfg.ln_eps, rng);
  decoder_ = std::make_unique<ReconDecoder>(store_, "decoder", final_dim, cfg.final_stride(), C, rng);
}

M3adModel::Encoded M3adModel::encode(ForwardContext& ctx, const Tensor& image, const Tensor& priors,
                                     const MaskSpec* mask, std::vector<StageShape>* shapes) const {
  Binding& bind = ctx.bind;
  if (image.rank() < 2 || image.dim(0) != cfg_.image_size || image.dim(1) != cfg_.image_size) {
    throw DimensionError("model expects a " + std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_size) +
                         " image, got " + shape_str(image.shape()));
  }
  Tensor x = patch_embed(image, bind(embed_w_), bind(embed_b_), cfg_.patch_size);
  if (mask) x = apply_mask(x, *mask, cfg_.patch_size, bind(decoder_->mask_token()));
  if (shapes) shapes->clear();

  std::size_t attn = 0, tok = 0;
  Grid grid = plan_.stages.front().grid;
  for (std::size_t s = 0; s < plan_.stages.size(); ++s) {
    if (plan_.stages[s].kind == BlockKind::Attention) {
      for (const auto& block : attn_stages_[attn]) x = block.forward(ctx, x, grid);
      ++attn;
    } else {
      for (const auto& block : tok_stages_[tok]) x = block.forward(bind, x, grid);
      ++tok;
    }
    if (s < merges_.size()) {
      x = merges_[s].forward(bind, x, grid);
      grid = {grid.h / 2, grid.w / 2};
    }
    if (s == cfg_.fusion_stage) x = fusion_->forward(bind, x, prior_encoder_->forward(bind, priors));
    if (shapes) shapes->push_back({grid, x.dim(0), x.dim(1)});
  }
  return {x, grid};
}

Tensor M3adModel::reconstruct(Binding& bind, const Encoded& enc) const {
  return decoder_->forward(bind, enc.tokens, enc.grid);
}

Tensor M3adModel::logits(Binding& bind, const Encoded& enc, Task task) const {
  return heads_->logits(bind, enc.tokens, task == Task::Change);
}

std::vector<const MoeLayer*> M3adModel::moe_layers() const {
  std::vector<const MoeLayer*> out;
  for (const auto& stage : attn_stages_)
    for (const auto& block : stage) out.push_back(&block.moe());
  return out;
}

std::vector<const M3adBlock*> M3adModel::attention_blocks() const {
  std::vector<const M3adBlock*> out;
  for (const auto& stage : attn_stages_)
    for (const auto& block : stage) out.push_back(&block);
  return out;
}

Tensor recon_term(const M3adModel& model, Binding& bind, const Example& ex, const MaskSpec& mask) {
  ForwardContext ctx{bind, Routing::label_guided(ex.diag)};
  auto enc = model.encode(ctx, ex.image, ex.priors, &mask);
  return recon_loss(ex.image, model.reconstruct(bind, enc), mask);
}

Tensor class_routed_recon(const M3adModel& model, Binding& bind, const Example& ex, const MaskSpec& mask, int diag) {
  ForwardContext ctx{bind, Routing::class_only(diag)};
  auto enc = model.encode(ctx, ex.image, ex.priors, &mask);
  return recon_loss(ex.image, model.reconstruct(bind, enc), mask);
}

Tensor expert_specialization_loss(const M3adModel& model, Binding& bind, std::span<const Example> batch,
                                  std::span<const MaskSpec> masks) {
  if (batch.size() != masks.size()) throw ContractError("one mask per example required");
  const std::size_t K = model.config().num_diag_classes;
  std::vector<std::size_t> counts(K, 0);
  for (const auto& ex : batch) counts.at(static_cast<std::size_t>(ex.diag))++;
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double w = 1.0 / static_cast<double>(counts[static_cast<std::size_t>(batch[i].diag)]);
    total = ops::add(total, ops::scale(class_routed_recon(model, bind, batch[i], masks[i], batch[i].diag), w));
  }
  return total;
}

Tensor pretrain_loss(const M3adModel& model, Binding& bind, std::span<const Example> batch,
                     std::span<const MaskSpec> masks) {
  if (batch.empty() || batch.size() != masks.size()) throw ContractError("pretrain_loss: empty batch or mask mismatch");
  Tensor recon = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) recon = ops::add(recon, recon_term(model, bind, batch[i], masks[i]));
  recon = ops::scale(recon, 1.0 / static_cast<double>(batch.size()));
  const double lambda = model.config().lambda_expert;
  if (lambda == 0.0) return recon;
  return ops::add(recon, ops::scale(expert_specialization_loss(model, bind, batch, masks), lambda));
}

TaskLogits task_forward(const M3adModel& model, Binding& bind, const Example& ex, bool single_task, GateTrace* trace) {
  TaskLogits out;
  ForwardContext diag_ctx{bind, Routing::gated(Task::Diagnosis), trace};
  out.diag = model.logits(bind, model.encode(diag_ctx, ex.image, ex.priors), Task::Diagnosis);
  if (!single_task) {
    ForwardContext change_ctx{bind, Routing::gated(Task::Change), trace};
    out.change = model.logits(bind, model.encode(change_ctx, ex.image, ex.priors), Task::Change);
  }
  return out;
}

Tensor finetune_batch_loss(const M3adModel& model, Binding& bind, std::span<const Example> batch) {
  if (batch.empty()) throw ContractError("finetune_batch_loss: empty batch");
  const auto& cfg = model.config();
  Tensor total = Tensor::scalar(0.0);
  for (const auto& ex : batch) {
    auto lg = task_forward(model, bind, ex);
    total = ops::add(total, finetune_loss(lg.diag, lg.change, ex.diag, ex.change, cfg.alpha, cfg.beta));
  }
  return ops::scale(total, 1.0 / static_cast<double>(batch.size()));
}

}  // namespace m3ad
