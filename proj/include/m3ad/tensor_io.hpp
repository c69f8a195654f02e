#pragma once

#include <filesystem>
#include <vector>

#include "m3ad/tensor.hpp"

namespace m3ad {

// ".m3t" image/tensor file: "M3TD", u32 version (1), u32 rank,
// rank x u64 extents, then row-major little-endian f32 payload.
inline constexpr std::uint32_t kM3tVersion = 1;

struct FloatArray {
  Shape shape;
  std::vector<float> values;
};

void write_m3t(const std::filesystem::path& path, const FloatArray& array);
FloatArray read_m3t(const std::filesystem::path& path);

// Tensor convenience wrappers (values narrowed to / widened from f32).
void write_m3t(const std::filesystem::path& path, const Tensor& t);
Tensor read_m3t_tensor(const std::filesystem::path& path);

}  // namespace m3ad
