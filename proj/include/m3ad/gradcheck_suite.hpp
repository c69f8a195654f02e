#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "m3ad/config.hpp"

namespace m3ad {

inline constexpr double kPrimitiveGradTolerance = 1e-5;
inline constexpr double kModuleGradTolerance = 1e-3;

struct GradCheckReport {
  std::string name;
  bool primitive = false;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  double threshold = kModuleGradTolerance;

  bool passed() const { return max_rel_error < threshold; }
};

// Small f64 model used for whole-network checks: 32x32 input, C = 4,
// window 4, prior MLP 3 -> 8 -> 8.
ModelConfig gradcheck_toy_config();

// Every differentiable primitive, each at `points` random inputs.
std::vector<GradCheckReport> primitive_gradchecks(std::uint64_t seed, std::size_t points = 20);

// Blocks, prior encoder, each fusion type and the full objectives on a
// 2-sample batch of `toy`. At most `coords_per_param` coordinates are probed
// per parameter tensor of the full model (0 = all).
std::vector<GradCheckReport> module_gradchecks(std::uint64_t seed, const ModelConfig& toy,
                                               std::size_t coords_per_param = 6);

std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed);

}  // namespace m3ad
