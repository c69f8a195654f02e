#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "m3ad/parameters.hpp"
#include "m3ad/tensor.hpp"

namespace m3ad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates_checked = 0;
  // (input index, flat element) of the worst coordinate.
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  // Set when f was non-finite at a perturbed point; max_rel_error is then +inf.
  std::optional<std::pair<std::size_t, std::size_t>> non_finite;
};

/// Compares backward() of a scalar function against central differences.
///
/// `f` must rebuild its graph from `inputs` on every call (the leaves are
/// perturbed in place). Gradients of `inputs` are cleared before and after.
/// At most `max_coords` coordinates per input are probed, chosen by `seed`;
/// pass 0 to probe all of them.
/// Error per coordinate: |a - n| / (|a| + |n| + 1e-8).
GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double eps = 1e-6,
                           std::size_t max_coords = 0, std::uint64_t seed = 0);

// Same check over store parameters: `f` binds what it needs through the
// given Binding and returns a scalar; Parameter::value is perturbed in place.
// worst_input indexes `params`.
GradCheckResult grad_check_params(const std::function<Tensor(Binding&)>& f, const std::vector<Parameter*>& params,
                                  double eps = 1e-6, std::size_t max_coords = 0, std::uint64_t seed = 0);

}  // namespace m3ad
