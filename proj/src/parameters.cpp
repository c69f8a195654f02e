#include "m3ad/parameters.hpp"

#include <cmath>

#include "m3ad/errors.hpp"

namespace m3ad {

const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Backbone: return "backbone";
    case ParamGroup::Expert: return "expert";
    case ParamGroup::Gate: return "gate";
    case ParamGroup::Prior: return "prior";
    case ParamGroup::Fusion: return "fusion";
    case ParamGroup::Head: return "head";
    case ParamGroup::Decoder: return "decoder";
  }
  return "?";
}

Parameter& ParameterStore::add(std::string name, ParamGroup group, Shape shape, std::vector<double> init) {
  if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
  if (shape_size(shape) != init.size()) {
    throw DimensionError("parameter " + name + ": shape " + shape_str(shape) + " vs " + std::to_string(init.size()) +
                         " initial values");
  }
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->group = group;
  p->shape = std::move(shape);
  p->grad.assign(init.size(), 0.0);
  p->value = std::move(init);
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

Parameter& ParameterStore::at(const std::string& name) {
  auto* p = find(name);
  if (!p) throw ContractError("unknown parameter: " + name);
  return *p;
}

std::vector<Parameter*> ParameterStore::in_groups(std::initializer_list<ParamGroup> groups) const {
  std::vector<Parameter*> out;
  for (const auto& p : params_) {
    for (auto g : groups) {
      if (p->group == g) {
        out.push_back(p.get());
        break;
      }
    }
  }
  return out;
}

std::size_t ParameterStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

double ParameterStore::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_)
    for (double g : p->grad) s += g * g;
  return std::sqrt(s);
}

Tensor Binding::operator()(const Parameter& p) {
  auto it = lookup_.find(&p);
  if (it != lookup_.end()) return bound_[it->second].second;
  Tensor leaf = Tensor::from(p.shape, p.value, track_grad_);
  lookup_[&p] = bound_.size();
  bound_.emplace_back(&p, leaf);
  return leaf;
}

void Binding::accumulate_into_params() const {
  for (const auto& [param, leaf] : bound_) {
    if (!leaf.has_grad()) continue;
    auto* target = const_cast<Parameter*>(param);
    auto g = leaf.grad();
    for (std::size_t i = 0; i < g.size(); ++i) target->grad[i] += g[i];
  }
}

std::vector<Binding::Grad> Binding::take_gradients() {
  std::vector<Grad> out;
  for (auto& [param, leaf] : bound_) {
    if (!leaf.has_grad()) continue;
    out.push_back({param, std::vector<double>(leaf.grad().begin(), leaf.grad().end())});
    leaf.zero_grad();
  }
  return out;
}

void accumulate(const std::vector<Binding::Grad>& grads) {
  for (const auto& g : grads) {
    auto* target = const_cast<Parameter*>(g.param);
    for (std::size_t i = 0; i < g.values.size(); ++i) target->grad[i] += g.values[i];
  }
}

namespace init {

std::vector<double> zeros(std::size_t n) { return std::vector<double>(n, 0.0); }

std::vector<double> constant(std::size_t n, double v) { return std::vector<double>(n, v); }

std::vector<double> normal(Rng& rng, std::size_t n, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> out(n);
  for (auto& v : out) v = dist(rng);
  return out;
}

std::vector<double> xavier_uniform(Rng& rng, std::size_t fan_in, std::size_t fan_out, std::size_t n) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  std::vector<double> out(n);
  for (auto& v : out) v = dist(rng);
  return out;
}

}  // namespace init

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace m3ad
