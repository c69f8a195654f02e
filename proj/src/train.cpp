#include "m3ad/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "m3ad/errors.hpp"
#include "m3ad/format.hpp"
#include "m3ad/ops.hpp"
#include "m3ad/parallel.hpp"

namespace m3ad {

const char* stage_name(Stage s) { return s == Stage::Pretrain ? "pretrain" : "finetune"; }

void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> m, std::span<double> v,
                  std::uint64_t t, double lr, const TrainConfig& cfg) {
  if (t == 0) throw ContractError("adamw step number must be >= 1");
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  const double decay = lr * cfg.weight_decay;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = grad[i];
    m[i] = b1 * m[i] + (1.0 - b1) * g;
    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
    const double m_hat = m[i] / c1, v_hat = v[i] / c2;
    theta[i] -= decay * theta[i];
    theta[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
  }
}

double cosine_lr(double t, double T, double base, double min_lr) {
  if (T <= 0.0 || t >= T) return min_lr;
  t = std::max(t, 0.0);
  return min_lr + 0.5 * (base - min_lr) * (1.0 + std::cos(std::numbers::pi * t / T));
}

double clip_gradients(std::span<Parameter* const> params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params)
    for (double g : p->grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Parameter* p : params)
      for (double& g : p->grad) g *= s;
  }
  return norm;
}

void AdamW::step(std::span<Parameter* const> params, double lr, const TrainConfig& cfg) {
  for (const Parameter* p : params)
    for (double g : p->grad)
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p->name);
  ++t_;
  for (Parameter* p : params) {
    auto& mo = moments_[p->name];
    if (mo.m.size() != p->size()) {
      mo.m.assign(p->size(), 0.0);
      mo.v.assign(p->size(), 0.0);
    }
    adamw_update(p->value, p->grad, mo.m, mo.v, t_, lr, cfg);
  }
}

bool EarlyStopping::update(std::size_t epoch, double value) {
  const bool better = !has_best_ || (maximize_ ? value > best_ : value < best_);
  if (better) {
    has_best_ = true;
    best_ = value;
    best_epoch_ = epoch;
  }
  return better;
}

std::string epoch_log_csv(std::span<const EpochLog> log) {
  const auto num = format_double;
  std::string out = "epoch,lr,train_loss,val_metric,val_diag_acc,val_change_acc,seconds\n";
  for (const auto& e : log) {
    out += std::to_string(e.epoch) + "," + num(e.lr) + "," + num(e.train_loss) + "," + num(e.val_metric) + "," +
           num(e.val_diag_acc) + "," + num(e.val_change_acc) + "," + num(e.seconds) + "\n";
  }
  return out;
}

std::vector<Parameter*> stage_parameters(ParameterStore& store, Stage stage) {
  if (stage == Stage::Pretrain) {
    return store.in_groups(
        {ParamGroup::Backbone, ParamGroup::Expert, ParamGroup::Prior, ParamGroup::Fusion, ParamGroup::Decoder});
  }
  return store.in_groups(
      {ParamGroup::Backbone, ParamGroup::Expert, ParamGroup::Gate, ParamGroup::Prior, ParamGroup::Fusion, ParamGroup::Head});
}

namespace {

enum SeedTag : std::uint64_t { kShuffle = 11, kTrainMask = 12, kEvalMask = 13 };

struct SampleResult {
  double loss = 0.0;
  std::vector<Binding::Grad> grads;
};

using SampleLoss = std::function<Tensor(Binding&, std::size_t position)>;

std::vector<std::vector<double>> snapshot(const ParameterStore& store) {
  std::vector<std::vector<double>> out;
  out.reserve(store.count());
  for (const auto& p : store.all()) out.push_back(p->value);
  return out;
}

void restore(ParameterStore& store, const std::vector<std::vector<double>>& values) {
  for (std::size_t i = 0; i < store.count(); ++i) store.all()[i]->value = values[i];
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>((rng() >> 11) * 0x1.0p-53 * static_cast<double>(i));
    std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
  }
  return idx;
}

// Gradients of one batch, accumulated into the store in batch order no
// matter how many workers evaluate it. Returns the batch loss.
double batch_gradients(std::span<const std::size_t> batch, std::span<const Example> data, const SampleLoss& loss_of,
                       const TrainHooks& hooks) {
  const std::size_t chunk = std::max<std::size_t>(1, worker_count());
  double total = 0.0;
  for (std::size_t begin = 0; begin < batch.size(); begin += chunk) {
    const std::size_t n = std::min(chunk, batch.size() - begin);
    std::vector<SampleResult> results(n);
    parallel_for(n, [&](std::size_t j) {
      Binding bind;
      Tensor loss = loss_of(bind, begin + j);
      backward(loss);
      results[j].loss = loss.item();
      results[j].grads = bind.take_gradients();
    });
    for (std::size_t j = 0; j < n; ++j) {
      if (hooks.sample_gradients) hooks.sample_gradients(data[batch[begin + j]], results[j].grads);
      accumulate(results[j].grads);
      total += results[j].loss;
    }
  }
  return total;
}

struct LoopSpec {
  Stage stage;
  bool maximize;
  // Builds the per-position loss closure for one batch.
  std::function<SampleLoss(std::span<const std::size_t> batch, std::size_t epoch)> make_loss;
  // Returns (monitored value, diag acc, change acc, stop-now).
  std::function<std::array<double, 4>()> validate;
};

std::vector<EpochLog> run_loop(M3adModel& model, std::span<const Example> train, const TrainConfig& cfg,
                               TrainState& state, const TrainHooks& hooks, const LoopSpec& spec) {
  cfg.validate();
  if (train.empty()) throw DataError("no training examples");
  if (state.stage != spec.stage) {
    state = TrainState{spec.stage, 0, 0.0, 0, AdamW{}, state.prior_stats};
  }
  ParameterStore& store = model.params();
  const auto params = stage_parameters(store, spec.stage);
  const std::size_t B = cfg.batch_size;
  const std::size_t batches = (train.size() + B - 1) / B;
  const double total_steps = static_cast<double>(cfg.epochs * batches);
  const double min_lr = cfg.lr * cfg.min_lr_ratio;
  const std::uint64_t stage_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(spec.stage) + 1);

  EarlyStopping stopper(cfg.patience, spec.maximize);
  if (state.epoch > 0) stopper.update(state.best_epoch, state.best_metric);
  auto best_params = snapshot(store);
  std::vector<EpochLog> log;

  for (std::size_t epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = permutation(train.size(), derive_seed(stage_seed, kShuffle * 1000003ULL + epoch));
    EpochLog entry;
    entry.epoch = epoch + 1;
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::span<const std::size_t> batch(order.data() + b * B, std::min(B, train.size() - b * B));
      store.zero_grad();
      loss_sum += batch_gradients(batch, train, spec.make_loss(batch, epoch), hooks);
      clip_gradients(params, cfg.clip_norm);
      const double step = static_cast<double>(epoch * batches + b);
      entry.lr = cosine_lr(step, total_steps, cfg.lr, min_lr);
      state.optimizer.step(params, entry.lr, cfg);
    }
    store.zero_grad();
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    entry.train_loss = loss_sum / static_cast<double>(batches);
    const auto v = spec.validate();
    entry.val_metric = v[0];
    entry.val_diag_acc = v[1];
    entry.val_change_acc = v[2];
    state.epoch = epoch + 1;
    if (stopper.update(epoch + 1, entry.val_metric)) best_params = snapshot(store);
    state.best_metric = stopper.best();
    state.best_epoch = stopper.best_epoch();
    log.push_back(entry);
    if (hooks.epoch_end) hooks.epoch_end(entry);
    if (v[3] != 0.0 || stopper.should_stop(epoch + 1)) break;
  }
  if (stopper.has_best()) restore(store, best_params);
  return log;
}

int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

MaskSpec eval_mask(const ModelConfig& cfg, std::uint64_t seed, std::size_t index) {
  std::mt19937_64 rng(derive_seed(derive_seed(seed, kEvalMask), index));
  return sample_mask(rng, cfg.image_size, cfg.image_size, cfg.mask_unit, cfg.mask_ratio);
}

std::vector<EpochLog> pretrain_loop(M3adModel& model, std::span<const Example> train, std::span<const Example> val,
                                    const TrainConfig& cfg, TrainState& state, const TrainHooks& hooks) {
  const ModelConfig& mc = model.config();
  const std::span<const Example> monitor = val.empty() ? train : val;
  const std::uint64_t mask_seed = derive_seed(cfg.seed, kTrainMask);
  LoopSpec spec;
  spec.stage = Stage::Pretrain;
  spec.maximize = false;
  spec.make_loss = [&](std::span<const std::size_t> batch, std::size_t epoch) -> SampleLoss {
    std::array<std::size_t, 3> counts{};
    for (auto i : batch) counts.at(static_cast<std::size_t>(train[i].diag))++;
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    return [&, batch, epoch, counts, inv_b](Binding& bind, std::size_t pos) {
      const std::size_t i = batch[pos];
      const Example& ex = train[i];
      std::mt19937_64 rng(derive_seed(derive_seed(mask_seed, epoch), i));
      const MaskSpec mask = sample_mask(rng, mc.image_size, mc.image_size, mc.mask_unit, mc.mask_ratio);
      Tensor loss = ops::scale(recon_term(model, bind, ex, mask), inv_b);
      if (mc.lambda_expert != 0.0) {
        const double w = mc.lambda_expert / static_cast<double>(counts[static_cast<std::size_t>(ex.diag)]);
        loss = ops::add(loss, ops::scale(class_routed_recon(model, bind, ex, mask, ex.diag), w));
      }
      return loss;
    };
  };
  spec.validate = [&]() -> std::array<double, 4> {
    return {validation_recon(model, monitor, cfg.seed), 0.0, 0.0, 0.0};
  };
  return run_loop(model, train, cfg, state, hooks, spec);
}

std::vector<EpochLog> finetune_loop(M3adModel& model, std::span<const Example> train, std::span<const Example> val,
                                    const TrainConfig& cfg, TrainState& state, const TrainHooks& hooks) {
  const ModelConfig& mc = model.config();
  const std::span<const Example> monitor = val.empty() ? train : val;
  LoopSpec spec;
  spec.stage = Stage::Finetune;
  spec.maximize = true;
  spec.make_loss = [&](std::span<const std::size_t> batch, std::size_t) -> SampleLoss {
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    return [&, batch, inv_b](Binding& bind, std::size_t pos) {
      const Example& ex = train[batch[pos]];
      const auto lg = task_forward(model, bind, ex, cfg.single_task);
      const int yd[1] = {ex.diag};
      Tensor loss = ops::scale(ops::cross_entropy(lg.diag, yd), mc.alpha);
      if (!cfg.single_task) {
        const int yc[1] = {ex.change};
        loss = ops::add(loss, ops::scale(ops::cross_entropy(lg.change, yc), mc.beta));
      }
      return ops::scale(loss, inv_b);
    };
  };
  spec.validate = [&]() -> std::array<double, 4> {
    const auto p = predict(model, monitor, cfg.single_task);
    const double da = accuracy(p.diag_true, p.diag_pred);
    if (cfg.single_task) return {da, da, 0.0, cfg.target_metric > 0.0 && da >= cfg.target_metric ? 1.0 : 0.0};
    const double ca = accuracy(p.change_true, p.change_pred);
    const bool reached = cfg.target_metric > 0.0 && std::min(da, ca) >= cfg.target_metric;
    return {0.5 * (da + ca), da, ca, reached ? 1.0 : 0.0};
  };
  return run_loop(model, train, cfg, state, hooks, spec);
}

double validation_recon(const M3adModel& model, std::span<const Example> examples, std::uint64_t seed) {
  if (examples.empty()) throw DataError("no examples to evaluate");
  std::vector<double> err(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    Binding bind(false);
    err[i] = recon_term(model, bind, examples[i], eval_mask(model.config(), seed, i)).item();
  });
  double s = 0.0;
  for (double e : err) s += e;
  return s / static_cast<double>(err.size());
}

std::vector<std::array<double, 3>> class_routed_errors(const M3adModel& model, std::span<const Example> examples,
                                                       std::uint64_t seed) {
  std::vector<std::array<double, 3>> out(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    const MaskSpec mask = eval_mask(model.config(), seed, i);
    for (int k = 0; k < 3; ++k) {
      Binding bind(false);
      out[i][static_cast<std::size_t>(k)] = class_routed_recon(model, bind, examples[i], mask, k).item();
    }
  });
  return out;
}

TaskPredictions predict(const M3adModel& model, std::span<const Example> examples, bool single_task) {
  const std::size_t n = examples.size();
  TaskPredictions out;
  out.diag_true.resize(n);
  out.diag_pred.resize(n);
  if (!single_task) {
    out.change_true.resize(n);
    out.change_pred.resize(n);
  }
  parallel_for(n, [&](std::size_t i) {
    Binding bind(false);
    const auto lg = task_forward(model, bind, examples[i], single_task);
    out.diag_true[i] = examples[i].diag;
    out.diag_pred[i] = argmax(lg.diag.data());
    if (!single_task) {
      out.change_true[i] = examples[i].change;
      out.change_pred[i] = argmax(lg.change.data());
    }
  });
  return out;
}

double accuracy(std::span<const int> truth, std::span<const int> pred) {
  if (truth.empty() || truth.size() != pred.size()) throw DataError("accuracy needs equal, non-empty label vectors");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += truth[i] == pred[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

std::vector<GateSummary> mean_gate_weights(const M3adModel& model, std::span<const Example> examples) {
  if (examples.empty()) throw DataError("no examples to inspect");
  std::vector<GateTrace> traces(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    Binding bind(false);
    task_forward(model, bind, examples[i], false, &traces[i]);
  });
  const std::size_t layers = model.moe_layers().size();
  const std::size_t E = model.config().num_experts;
  std::vector<GateSummary> out;
  for (std::size_t l = 0; l < layers; ++l)
    for (Task t : {Task::Diagnosis, Task::Change}) out.push_back({l, t, std::vector<double>(E, 0.0)});
  for (const auto& trace : traces)
    for (const auto& rec : trace.records) {
      auto& dst = out[rec.layer * kNumTasks + static_cast<std::size_t>(rec.task)].mean;
      for (std::size_t e = 0; e < E; ++e) dst[e] += rec.weights[e];
    }
  for (auto& s : out)
    for (double& w : s.mean) w /= static_cast<double>(examples.size());
  return out;
}

}  // namespace m3ad
