#include "m3ad/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "m3ad/errors.hpp"

namespace m3ad {

GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double eps,
                           std::size_t max_coords, std::uint64_t seed) {
  for (auto& t : inputs) t.zero_grad();
  Tensor loss = f();
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: f is non-finite at the base point");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.size(), 0.0);
    }
    t.zero_grad();
  }

  std::mt19937_64 rng(seed);
  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_data();
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (auto i : coords) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double fp = f().item();
      values[i] = saved - eps;
      const double fm = f().item();
      values[i] = saved;
      ++result.coordinates_checked;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        result.non_finite = {k, i};
        result.max_rel_error = std::numeric_limits<double>::infinity();
        return result;
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[k][i];
      const double err = std::fabs(a - numeric) / (std::fabs(a) + std::fabs(numeric) + 1e-8);
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_input = k;
        result.worst_element = i;
      }
    }
  }
  return result;
}

GradCheckResult grad_check_params(const std::function<Tensor(Binding&)>& f, const std::vector<Parameter*>& params,
                                  double eps, std::size_t max_coords, std::uint64_t seed) {
  std::vector<std::vector<double>> analytic;
  for (const Parameter* p : params) analytic.emplace_back(p->size(), 0.0);
  {
    Binding bind;
    Tensor loss = f(bind);
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: f is non-finite at the base point");
    backward(loss);
    for (auto& g : bind.take_gradients()) {
      const auto it = std::find(params.begin(), params.end(), g.param);
      if (it != params.end()) analytic[static_cast<std::size_t>(it - params.begin())] = std::move(g.values);
    }
  }
  auto eval = [&] {
    Binding bind(false);
    return f(bind).item();
  };

  std::mt19937_64 rng(seed);
  GradCheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& values = params[k]->value;
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (auto i : coords) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double fp = eval();
      values[i] = saved - eps;
      const double fm = eval();
      values[i] = saved;
      ++result.coordinates_checked;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        result.non_finite = {k, i};
        result.max_rel_error = std::numeric_limits<double>::infinity();
        return result;
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[k][i];
      const double err = std::fabs(a - numeric) / (std::fabs(a) + std::fabs(numeric) + 1e-8);
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_input = k;
        result.worst_element = i;
      }
    }
  }
  return result;
}

}  // namespace m3ad
