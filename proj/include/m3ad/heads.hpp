#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "m3ad/backbone.hpp"
#include "m3ad/config.hpp"
#include "m3ad/parameters.hpp"
#include "m3ad/tensor.hpp"

namespace m3ad {

/// Set of masked square units over an image.
struct MaskSpec {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t unit = 0;
  std::vector<std::uint32_t> units;  // sorted, unique, row-major unit index

  std::size_t units_per_row() const { return width / unit; }
  std::size_t total_units() const { return (height / unit) * (width / unit); }
  // Flat pixel indices covered by masked units (row-major, sorted).
  std::vector<std::uint32_t> pixel_indices() const;
  // 1 for patch tokens inside a masked unit, row-major over the patch grid.
  std::vector<double> token_mask(std::size_t patch) const;
};

// Uniform sample without replacement of round(ratio * units) units.
// Throws ContractError unless 0 < ratio < 1 and the extents are divisible
// by unit.
MaskSpec sample_mask(std::mt19937_64& rng, std::size_t height, std::size_t width, std::size_t unit, double ratio);

// tokens [L, C] on the patch grid; masked tokens become mask_token [C].
Tensor apply_mask(const Tensor& tokens, const MaskSpec& spec, std::size_t patch, const Tensor& mask_token);

// Mean absolute error over pixels inside masked units only.
Tensor recon_loss(const Tensor& image, const Tensor& prediction, const MaskSpec& spec);

// alpha * CE(diag) + beta * CE(change).
Tensor finetune_loss(const Tensor& diag_logits, const Tensor& change_logits, int y_diag, int y_change, double alpha,
                     double beta);

/// Global average pool -> layer norm -> per-task linear head.
class TaskHeads {
 public:
  TaskHeads(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t diag_classes,
            std::size_t change_classes, double ln_eps, init::Rng& rng);

  // tokens [L, dim] -> pooled & normalized [dim]
  Tensor pool(Binding& bind, const Tensor& tokens) const;
  // tokens [L, dim] -> logits of one task
  Tensor logits(Binding& bind, const Tensor& tokens, bool change_task) const;
  std::pair<Tensor, Tensor> forward(Binding& bind, const Tensor& tokens) const;

  std::size_t change_classes() const { return change_classes_; }
  const Parameter& change_weight() const { return *change_w_; }
  const Parameter& change_bias() const { return *change_b_; }

 private:
  std::size_t change_classes_;
  double ln_eps_;
  Parameter* ln_g_;
  Parameter* ln_b_;
  Parameter* diag_w_;
  Parameter* diag_b_;
  Parameter* change_w_;
  Parameter* change_b_;
};

/// Linear decoder from each final-stage position to its stride x stride
/// pixel block; the learnable mask token lives here too.
class ReconDecoder {
 public:
  ReconDecoder(ParameterStore& store, const std::string& prefix, std::size_t final_dim, std::size_t stride,
               std::size_t embed_dim, init::Rng& rng);

  // tokens [h*w, final_dim] on grid -> image [h*stride, w*stride]
  Tensor forward(Binding& bind, const Tensor& tokens, Grid grid) const;
  const Parameter& mask_token() const { return *mask_token_; }

 private:
  std::size_t final_dim_, stride_;
  Parameter* w_;
  Parameter* b_;
  Parameter* mask_token_;
};

}  // namespace m3ad
