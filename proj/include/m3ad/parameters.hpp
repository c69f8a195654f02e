#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "m3ad/tensor.hpp"

namespace m3ad {

// Optimizer-visible parameter groups. Training stages select which groups
// are updated (pretraining never touches gates or task heads).
enum class ParamGroup { Backbone, Expert, Gate, Prior, Fusion, Head, Decoder };

const char* group_name(ParamGroup g);

struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::Backbone;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // same size as value; zeroed by zero_grad()

  std::size_t size() const { return value.size(); }
};

class ParameterStore {
 public:
  Parameter& add(std::string name, ParamGroup group, Shape shape, std::vector<double> init);

  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& at(const std::string& name);

  // Registration order; stable across runs for a given config.
  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }
  std::vector<Parameter*> in_groups(std::initializer_list<ParamGroup> groups) const;
  std::size_t count() const { return params_.size(); }
  std::size_t total_elements() const;

  void zero_grad();
  double grad_norm() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Binds parameters to graph leaves for one forward/backward evaluation.
///
/// Each bound parameter becomes a leaf holding a copy of its value, so
/// several bindings may evaluate the same store concurrently. Gradients
/// stay on the leaves until exported.
class Binding {
 public:
  explicit Binding(bool track_grad = true) : track_grad_(track_grad) {}

  Tensor operator()(const Parameter& p);
  Tensor operator()(const Parameter* p) { return (*this)(*p); }
  bool tracking() const { return track_grad_; }

  // Adds every bound leaf's gradient into the owning Parameter::grad.
  void accumulate_into_params() const;

  struct Grad {
    const Parameter* param;
    std::vector<double> values;
  };
  // Moves leaf gradients out (bound params with no gradient are skipped).
  std::vector<Grad> take_gradients();

 private:
  bool track_grad_;
  std::vector<std::pair<const Parameter*, Tensor>> bound_;
  std::unordered_map<const Parameter*, std::size_t> lookup_;
};

// Adds exported gradients into their parameters. Parameters are owned by
// the caller's store; the const in Grad is only about the binding's view.
void accumulate(const std::vector<Binding::Grad>& grads);

namespace init {

using Rng = std::mt19937_64;

std::vector<double> zeros(std::size_t n);
std::vector<double> constant(std::size_t n, double v);
std::vector<double> normal(Rng& rng, std::size_t n, double stddev);
// Glorot/Xavier uniform over (fan_in + fan_out).
std::vector<double> xavier_uniform(Rng& rng, std::size_t fan_in, std::size_t fan_out, std::size_t n);

}  // namespace init

// splitmix64 mix of (seed, stream) for independent per-item RNG streams.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace m3ad
