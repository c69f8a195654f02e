#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "m3ad/config.hpp"
#include "m3ad/heads.hpp"
#include "m3ad/model.hpp"
#include "m3ad/parameters.hpp"
#include "m3ad/priors.hpp"

namespace m3ad {

enum class Stage : std::uint32_t { Pretrain = 0, Finetune = 1 };
const char* stage_name(Stage s);

// --- Optimizer pieces --------------------------------------------------------

// One AdamW step on a flat buffer (t >= 1 is the step number after
// increment). Weight decay is decoupled: theta -= lr * wd * theta.
void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> m, std::span<double> v,
                  std::uint64_t t, double lr, const TrainConfig& cfg);

// min_lr + (base - min_lr)(1 + cos(pi t / T)) / 2, t clamped to [0, T].
double cosine_lr(double t, double T, double base, double min_lr);

// Global L2 norm over every gradient; scales all of them by max_norm / norm
// when the norm exceeds max_norm. Returns the pre-clip norm.
double clip_gradients(std::span<Parameter* const> params, double max_norm);

class AdamW {
 public:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };

  // Updates `params` in place; the step counter advances once per call.
  // Throws NumericError naming the first parameter with a non-finite
  // gradient, before anything is modified.
  void step(std::span<Parameter* const> params, double lr, const TrainConfig& cfg);

  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

 private:
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

/// Tracks the best validation value; stops `patience` epochs after it.
class EarlyStopping {
 public:
  EarlyStopping(std::size_t patience, bool maximize) : patience_(patience), maximize_(maximize) {}

  // Returns true when `value` improves on the best so far.
  bool update(std::size_t epoch, double value);
  bool should_stop(std::size_t epoch) const { return has_best_ && epoch >= best_epoch_ + patience_; }
  bool has_best() const { return has_best_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  std::size_t patience_;
  bool maximize_;
  bool has_best_ = false;
  double best_ = 0.0;
  std::size_t best_epoch_ = 0;
};

// --- Loops ---------------------------------------------------------------

struct TrainState {
  Stage stage = Stage::Pretrain;
  std::size_t epoch = 0;  // completed epochs
  double best_metric = 0.0;
  std::size_t best_epoch = 0;
  AdamW optimizer;
  PriorStats prior_stats;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;        // at the epoch's last step
  double train_loss = 0.0;
  double val_metric = 0.0;      // masked L1 (pretrain) or mean accuracy (fine-tune)
  double val_diag_acc = 0.0;    // fine-tune only
  double val_change_acc = 0.0;  // fine-tune only
  double seconds = 0.0;         // optimization time, excluding validation
};

std::string epoch_log_csv(std::span<const EpochLog> log);

struct TrainHooks {
  // Called for every training example with the gradients it produced, in
  // batch order.
  std::function<void(const Example&, const std::vector<Binding::Grad>&)> sample_gradients;
  std::function<void(const EpochLog&)> epoch_end;
};

// Parameter groups updated by each stage.
std::vector<Parameter*> stage_parameters(ParameterStore& store, Stage stage);

// Masked-image pretraining with label-guided routing. Early-stops on the
// validation masked L1 and restores the best parameters at the end.
std::vector<EpochLog> pretrain_loop(M3adModel& model, std::span<const Example> train, std::span<const Example> val,
                                    const TrainConfig& cfg, TrainState& state, const TrainHooks& hooks = {});

// Dual-gate multi-task fine-tuning (diagnosis only with single_task).
// Early-stops on the mean validation accuracy and restores the best
// parameters; stops early once every monitored accuracy reaches
// cfg.target_metric (when positive).
std::vector<EpochLog> finetune_loop(M3adModel& model, std::span<const Example> train, std::span<const Example> val,
                                    const TrainConfig& cfg, TrainState& state, const TrainHooks& hooks = {});

// --- Evaluation --------------------------------------------------------------

// Fixed evaluation mask for example `index`.
MaskSpec eval_mask(const ModelConfig& cfg, std::uint64_t seed, std::size_t index);

// Mean masked L1 under label-guided routing with eval masks.
double validation_recon(const M3adModel& model, std::span<const Example> examples, std::uint64_t seed);

// Masked L1 of every example under class-only routing of class k (k < 3),
// using eval masks: result[i][k].
std::vector<std::array<double, 3>> class_routed_errors(const M3adModel& model, std::span<const Example> examples,
                                                       std::uint64_t seed);

struct TaskPredictions {
  std::vector<int> diag_true, diag_pred;
  std::vector<int> change_true, change_pred;  // empty with single_task
};

TaskPredictions predict(const M3adModel& model, std::span<const Example> examples, bool single_task = false);

double accuracy(std::span<const int> truth, std::span<const int> pred);

struct GateSummary {
  std::size_t layer;
  Task task;
  std::vector<double> mean;
};

// Mean gate weights per MMoE layer and task over the examples.
std::vector<GateSummary> mean_gate_weights(const M3adModel& model, std::span<const Example> examples);

}  // namespace m3ad
