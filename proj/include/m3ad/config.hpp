#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace m3ad {

enum class FusionType { Adaptive, Concat, Add, Hadamard };
enum class LabelScheme { C3, C9 };

std::string to_string(FusionType t);
FusionType parse_fusion_type(const std::string& s);
std::string to_string(LabelScheme s);
LabelScheme parse_label_scheme(const std::string& s);

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 16;
  std::vector<std::size_t> depths{2, 2, 2, 2};
  std::vector<std::size_t> heads{2, 4, 8, 16};
  std::size_t window = 8;

  std::size_t num_experts = 8;
  std::size_t shared_experts = 2;
  std::size_t expert_hidden_ratio = 4;
  double w_shared = 0.3;
  double tau_gate = 1.0;

  std::size_t tokmlp_groups = 5;

  std::size_t fusion_stage = 2;
  FusionType fusion_type = FusionType::Adaptive;
  std::vector<std::size_t> prior_hidden{128, 256};

  std::size_t num_diag_classes = 3;
  std::size_t num_change_classes = 3;

  double mask_ratio = 0.6;
  std::size_t mask_unit = 8;
  double lambda_expert = 0.5;
  double alpha = 1.0;
  double beta = 1.0;
  double ln_eps = 1e-5;

  // Architecture of the published model: C=96, depths [2,2,6,2],
  // heads [3,6,12,24], window 8, 256x256 inputs.
  static ModelConfig reference();

  // Throws ConfigError on any inconsistent combination.
  void validate() const;
  // Channel count of stage s (0..3): embed * 2^s.
  std::size_t stage_dim(std::size_t s) const;
  // Total downsampling of the final stage (patch * 8).
  std::size_t final_stride() const { return patch_size * 8; }
};

struct TrainConfig {
  double lr = 1e-4;
  double min_lr_ratio = 0.01;
  double weight_decay = 0.05;
  double clip_norm = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  bool deterministic = true;
  // Fine-tune only the diagnosis task with a single gated pass.
  bool single_task = false;
  // Stop once the monitored validation metric reaches this value (0 = off).
  double target_metric = 0.0;

  void validate() const;
};

struct GenConfig {
  std::size_t n = 64;
  std::size_t size = 64;
  LabelScheme scheme = LabelScheme::C3;
  double train_frac = 0.7;
  double val_frac = 0.15;
  double test_frac = 0.15;
  // Relative label frequencies for Stable / Conversion / Reversion.
  std::vector<double> change_priors{0.653, 0.330, 0.017};
  double noise = 0.05;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  GenConfig gen;

  // Applies one `key = value` setting. Unknown keys and unparsable values
  // throw ConfigError naming the key.
  void set(const std::string& key, const std::string& value);
  void validate() const;
};

// Parses `key = value` lines (UTF-8, '#' comments, blank lines ignored).
// Later keys override earlier ones; order is preserved otherwise.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text);
std::vector<std::pair<std::string, std::string>> read_key_value_file(const std::filesystem::path& path);

RunConfig load_run_config(const std::filesystem::path& path);
// "key=value" as given on the command line.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Lossless round trip through parse_key_values + RunConfig::set.
std::string serialize(const ModelConfig& cfg);
ModelConfig deserialize_model_config(const std::string& text);

}  // namespace m3ad
