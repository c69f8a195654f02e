#include "m3ad/tensor_io.hpp"

#include <fstream>

#include "binary_io.hpp"
#include "m3ad/errors.hpp"

namespace m3ad {

namespace {
constexpr char kMagic[4] = {'M', '3', 'T', 'D'};
constexpr std::uint32_t kMaxRank = 8;
}  // namespace

void write_m3t(const std::filesystem::path& path, const FloatArray& array) {
  if (shape_size(array.shape) != array.values.size()) {
    throw DimensionError("write_m3t: shape " + shape_str(array.shape) + " does not match " +
                         std::to_string(array.values.size()) + " values");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  detail::LeWriter w(os);
  w.bytes(kMagic, 4);
  w.u32(kM3tVersion);
  w.u32(static_cast<std::uint32_t>(array.shape.size()));
  for (auto e : array.shape) w.u64(e);
  for (float v : array.values) w.f32(v);
  if (!os) throw FormatError("write failed: " + path.string());
}

FloatArray read_m3t(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  detail::LeReader r(is, path.string());
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path.string() + ": not an .m3t file (bad magic)");
  const auto version = r.u32();
  if (version != kM3tVersion) {
    throw FormatError(path.string() + ": unsupported .m3t version " + std::to_string(version));
  }
  const auto rank = r.u32();
  if (rank == 0 || rank > kMaxRank) throw FormatError(path.string() + ": invalid rank " + std::to_string(rank));
  FloatArray out;
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto e = r.u64();
    if (e == 0 || e > (1ull << 32)) throw FormatError(path.string() + ": invalid extent");
    out.shape.push_back(static_cast<std::size_t>(e));
    n *= static_cast<std::size_t>(e);
  }
  if (n > (1ull << 31)) throw FormatError(path.string() + ": payload too large");
  out.values.resize(n);
  for (auto& v : out.values) v = r.f32();
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes after payload");
  return out;
}

void write_m3t(const std::filesystem::path& path, const Tensor& t) {
  FloatArray a{t.shape(), {}};
  a.values.reserve(t.size());
  for (double v : t.data()) a.values.push_back(static_cast<float>(v));
  write_m3t(path, a);
}

Tensor read_m3t_tensor(const std::filesystem::path& path) {
  auto a = read_m3t(path);
  return Tensor::from(a.shape, std::vector<double>(a.values.begin(), a.values.end()));
}

}  // namespace m3ad
