#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "m3ad/config.hpp"
#include "m3ad/model.hpp"
#include "m3ad/train.hpp"

namespace m3ad {

// "M3CK", u32 version, then (little-endian): model config text, stage,
// epoch, best metric, best epoch, prior statistics, parameters as
// (name, rank, extents, f64 values), optimizer step count and moments.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<double> values;
  };
  std::string config_text;
  Stage stage = Stage::Pretrain;
  std::uint64_t epoch = 0;
  double best_metric = 0.0;
  std::uint64_t best_epoch = 0;
  PriorStats prior_stats;
  std::vector<Entry> params;
  std::uint64_t adam_steps = 0;
  std::vector<Entry> adam_m;
  std::vector<Entry> adam_v;

  ModelConfig model_config() const { return deserialize_model_config(config_text); }
};

Checkpoint make_checkpoint(const M3adModel& model, const TrainState& state);

// Writes to a temporary sibling, then renames over `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Parses the whole file before returning; FormatError on bad magic,
// unsupported version, truncation or trailing bytes.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies parameters by name. Missing names or shape mismatches throw
// FormatError and leave the model untouched. With `reinit_heads`, task-head
// parameters whose shape differs (another change scheme) keep their fresh
// initialization instead; their names are returned.
std::vector<std::string> restore_parameters(M3adModel& model, const Checkpoint& ckpt, bool reinit_heads = false);
TrainState restore_state(const Checkpoint& ckpt);

}  // namespace m3ad
