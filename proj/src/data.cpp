#include "m3ad/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

#include "m3ad/errors.hpp"
#include "m3ad/format.hpp"
#include "m3ad/tensor_io.hpp"

namespace m3ad {

namespace fs = std::filesystem;

namespace {

// Platform-independent draws (the std distributions are not).
double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double standard_normal(std::mt19937_64& rng) {
  double u1 = unit_uniform(rng);
  while (u1 <= 0.0) u1 = unit_uniform(rng);
  const double u2 = unit_uniform(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::min(n - 1, static_cast<std::size_t>(unit_uniform(rng) * static_cast<double>(n)));
}

template <class It>
void shuffle(It first, It last, std::mt19937_64& rng) {
  for (auto n = last - first; n > 1; --n) std::iter_swap(first + (n - 1), first + uniform_index(rng, n));
}

enum Stream : std::uint64_t { kLabels = 1, kPriors = 2, kImage = 3, kSplits = 4 };

std::mt19937_64 sample_rng(std::uint64_t seed, std::size_t index, Stream s) {
  return std::mt19937_64(derive_seed(derive_seed(seed, index), s));
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, std::size_t row, const char* field) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw DataError("manifest row " + std::to_string(row) + ": bad " + field + " '" + s + "'");
  }
  return v;
}

int parse_int(const std::string& s, std::size_t row, const char* field) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw DataError("manifest row " + std::to_string(row) + ": bad " + field + " '" + s + "'");
  }
  return v;
}

}  // namespace

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw DataError("unknown split '" + s + "'");
}

int transition_code(int from, int to) {
  if (from < 0 || from > 2 || to < 0 || to > 2) {
    throw DataError("transition " + std::to_string(from) + "->" + std::to_string(to) + " out of range");
  }
  if (from == kAD && to != kAD) throw DataError("transition AD->" + std::to_string(to) + " is not a realized class");
  return from == kAD ? 6 : from * 3 + to;
}

std::pair<int, int> transition_of(int code) {
  if (code < 0 || code >= kNumTransitionCodes) throw DataError("transition code " + std::to_string(code) + " out of range");
  if (code == 6) return {kAD, kAD};
  return {code / 3, code % 3};
}

int transition_to_change3(int code) {
  auto [from, to] = transition_of(code);
  if (to == from) return kStable;
  return to > from ? kConversion : kReversion;
}

// --- Manifest ------------------------------------------------------------------

void write_manifest(const fs::path& path, std::span<const SampleRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << kManifestHeader << '\n';
  for (const auto& r : records) {
    if (r.path.find(',') != std::string::npos) throw DataError("image path contains a comma: " + r.path);
    out << r.path << ',' << format_double(r.priors.age) << ',' << r.priors.gender << ',' << format_double(r.priors.etiv)
        << ',' << r.diag << ',' << r.change << ',' << split_name(r.split) << '\n';
  }
  if (!out) throw DataError("failed writing manifest " + path.string());
}

std::vector<SampleRecord> load_manifest(const fs::path& path, LabelScheme scheme, bool check_files) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("manifest " + path.string() + " is empty (missing header)");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) throw DataError("manifest header must be '" + std::string(kManifestHeader) + "'");

  const int change_classes = scheme == LabelScheme::C3 ? 3 : kNumTransitionCodes;
  const fs::path base = path.parent_path();
  std::vector<SampleRecord> out;
  std::unordered_set<std::string> seen;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 7) {
      throw DataError("manifest row " + std::to_string(row) + ": expected 7 fields, got " + std::to_string(f.size()));
    }
    SampleRecord r;
    r.path = f[0];
    r.priors.age = parse_double(f[1], row, "age");
    r.priors.gender = parse_int(f[2], row, "gender");
    r.priors.etiv = parse_double(f[3], row, "etiv");
    r.diag = parse_int(f[4], row, "diag");
    r.change = parse_int(f[5], row, "change");
    try {
      r.split = parse_split(f[6]);
    } catch (const DataError& e) {
      throw DataError("manifest row " + std::to_string(row) + ": " + e.what());
    }
    const auto bad = [&](const std::string& what) { throw DataError("manifest row " + std::to_string(row) + ": " + what); };
    if (r.path.empty()) bad("empty path");
    if (r.diag < 0 || r.diag > 2) bad("diag " + std::to_string(r.diag) + " outside {0,1,2}");
    if (r.change < 0 || r.change >= change_classes) {
      bad("change " + std::to_string(r.change) + " outside [0," + std::to_string(change_classes) + ")");
    }
    if (r.priors.gender != 0 && r.priors.gender != 1) bad("gender must be 0 or 1");
    if (!(r.priors.age >= 0.0) || !std::isfinite(r.priors.age)) bad("age must be finite and non-negative");
    if (!(r.priors.etiv > 0.0) || !std::isfinite(r.priors.etiv)) bad("etiv must be finite and positive");
    if (!seen.insert(r.path).second) bad("duplicate path " + r.path);
    if (check_files && !fs::exists(base / r.path)) bad("image file not found: " + (base / r.path).string());
    out.push_back(std::move(r));
  }
  return out;
}

// --- Synthetic generation ---------------------------------------------------

namespace {

struct Coords {
  double u, v;  // [-1, 1], u along width, v along height
};

Coords pixel_coords(std::size_t size, std::size_t y, std::size_t x) {
  const double s = static_cast<double>(size);
  return {(static_cast<double>(x) + 0.5) / s * 2.0 - 1.0, (static_cast<double>(y) + 0.5) / s * 2.0 - 1.0};
}

bool in_ellipse(Coords c, double cu, double cv, double ru, double rv) {
  const double du = (c.u - cu) / ru, dv = (c.v - cv) / rv;
  return du * du + dv * dv < 1.0;
}

bool in_brain(Coords c) { return in_ellipse(c, 0.0, 0.0, 0.85, 0.95); }
bool in_ventricles(Coords c) { return in_ellipse(c, 0.0, 0.0, 0.3, 0.22); }

}  // namespace

std::vector<std::uint8_t> atrophy_region(std::size_t size) {
  std::vector<std::uint8_t> out(size * size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) out[y * size + x] = in_ventricles(pixel_coords(size, y, x)) ? 1 : 0;
  return out;
}

SyntheticLabels draw_labels(std::uint64_t seed, std::size_t index, const GenConfig& cfg) {
  auto rng = sample_rng(seed, index, kLabels);
  const auto& pr = cfg.change_priors;
  const double total = std::accumulate(pr.begin(), pr.end(), 0.0);
  double u = unit_uniform(rng) * total;
  int c3 = 2;
  for (int c = 0; c < 3; ++c) {
    if (u < pr[static_cast<std::size_t>(c)]) {
      c3 = c;
      break;
    }
    u -= pr[static_cast<std::size_t>(c)];
  }
  int from = 0, to = 0;
  if (c3 == kStable) {
    from = to = static_cast<int>(uniform_index(rng, 3));
  } else if (c3 == kConversion) {
    static constexpr std::pair<int, int> kUp[3] = {{kNC, kMCI}, {kNC, kAD}, {kMCI, kAD}};
    std::tie(from, to) = kUp[uniform_index(rng, 3)];
  } else {
    from = kMCI;
    to = kNC;
  }
  return {to, cfg.scheme == LabelScheme::C3 ? c3 : transition_code(from, to)};
}

ClinicalPriors draw_priors(std::uint64_t seed, std::size_t index, int diag) {
  static constexpr double kAgeMean[3] = {72.0, 74.0, 76.3};
  auto rng = sample_rng(seed, index, kPriors);
  ClinicalPriors p;
  p.age = std::max(40.0, kAgeMean[diag] + 7.1 * standard_normal(rng));
  p.gender = unit_uniform(rng) < 0.5 ? 0 : 1;
  p.etiv = std::max(900.0, 1450.0 + (p.gender == 1 ? 60.0 : -60.0) + 150.0 * standard_normal(rng));
  return p;
}

std::vector<float> render_synthetic(std::uint64_t seed, std::size_t index, std::size_t size, int diag, int change,
                                    LabelScheme scheme, double noise) {
  if (size == 0 || size % 32 != 0) throw DataError("synthetic image size must be a positive multiple of 32");
  if (diag < 0 || diag > 2) throw DataError("diag out of range");
  auto rng = sample_rng(seed, index, kImage);

  struct Wave {
    double fu, fv, phase, amp;
  };
  Wave waves[3];
  for (auto& w : waves) {
    w.fu = 1.0 + 2.0 * unit_uniform(rng);
    w.fv = 1.0 + 2.0 * unit_uniform(rng);
    w.phase = 2.0 * std::numbers::pi * unit_uniform(rng);
    w.amp = 0.04 + 0.04 * unit_uniform(rng);
  }
  const double gain = 0.9 + 0.2 * unit_uniform(rng);

  const std::size_t positions = scheme == LabelScheme::C3 ? 3 : kNumTransitionCodes;
  const double angle = -0.5 * std::numbers::pi + 2.0 * std::numbers::pi * change / static_cast<double>(positions);
  const double bu = 0.6 * std::cos(angle), bv = 0.6 * std::sin(angle);
  const double hippo_r = 0.1 + 0.04 * diag;

  std::vector<float> img(size * size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const Coords c = pixel_coords(size, y, x);
      double v = 0.0;
      if (in_brain(c)) {
        v = 1.0;
        for (const auto& w : waves) v += w.amp * std::sin(std::numbers::pi * (w.fu * c.u + w.fv * c.v) + w.phase);
        if (in_ventricles(c)) v -= kAtrophyDepth[static_cast<std::size_t>(diag)];
        if (in_ellipse(c, -0.45, 0.35, hippo_r, hippo_r) || in_ellipse(c, 0.45, 0.35, hippo_r, hippo_r)) {
          v -= 0.25 * diag;
        }
        const double du = c.u - bu, dv = c.v - bv;
        v += 0.8 * std::exp(-(du * du + dv * dv) / (2.0 * 0.09 * 0.09));
      }
      v = gain * v + noise * standard_normal(rng);
      img[y * size + x] = static_cast<float>(v);
    }
  return img;
}

std::vector<SampleRecord> gen_synthetic(const GenConfig& cfg, std::uint64_t seed, const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir / "images");
  std::vector<SampleRecord> records(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const auto labels = draw_labels(seed, i, cfg);
    auto& r = records[i];
    char name[48];
    std::snprintf(name, sizeof name, "images/sample_%05zu.m3t", i);
    r.path = name;
    r.diag = labels.diag;
    r.change = labels.change;
    r.priors = draw_priors(seed, i, labels.diag);
    write_m3t(out_dir / r.path,
              FloatArray{{cfg.size, cfg.size}, render_synthetic(seed, i, cfg.size, r.diag, r.change, cfg.scheme, cfg.noise)});
  }
  assign_splits(records, {cfg.train_frac, cfg.val_frac, cfg.test_frac}, seed);
  write_manifest(out_dir / "manifest.csv", records);
  return records;
}

// --- Preprocessing ---------------------------------------------------------

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw DataError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double rank = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (rank - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::vector<double> robust_zscore(std::span<const double> image) {
  if (image.empty()) throw DataError("robust_zscore: empty image");
  std::vector<double> v(image.begin(), image.end());
  const double lo = percentile(v, 1.0), hi = percentile(v, 99.0);
  double mean = 0.0;
  for (auto& x : v) {
    x = std::clamp(x, lo, hi);
    mean += x;
  }
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::max(std::sqrt(var / static_cast<double>(v.size())), 1e-8);
  for (auto& x : v) x = (x - mean) / sd;
  return v;
}

// --- Splits --------------------------------------------------------------

void assign_splits(std::vector<SampleRecord>& records, std::array<double, 3> fractions, std::uint64_t seed) {
  for (double f : fractions)
    if (f < 0.0) throw DataError("split fractions must be non-negative");
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9) throw DataError("split fractions must sum to 1");
  std::mt19937_64 rng(derive_seed(seed, kSplits));
  for (int k = 0; k < 3; ++k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].diag == k) idx.push_back(i);
    shuffle(idx.begin(), idx.end(), rng);
    const double n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * n));
    const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(fractions[1] * n)));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      records[idx[j]].split = j < n_train ? Split::Train : j < n_train + n_val ? Split::Val : Split::Test;
    }
  }
}

std::vector<std::size_t> kfold_assign(std::span<const SampleRecord> records, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw DataError("k-fold needs at least 2 folds");
  std::mt19937_64 rng(derive_seed(seed, kSplits));
  std::vector<std::size_t> fold(records.size(), 0);
  for (int c = 0; c < 3; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].diag == c) idx.push_back(i);
    if (!idx.empty() && idx.size() < k) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) + " samples, fewer than " +
                      std::to_string(k) + " folds");
    }
    shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t j = 0; j < idx.size(); ++j) fold[idx[j]] = j % k;
  }
  return fold;
}

std::vector<SampleRecord> filter_split(std::span<const SampleRecord> records, Split s) {
  std::vector<SampleRecord> out;
  for (const auto& r : records)
    if (r.split == s) out.push_back(r);
  return out;
}

PriorStats fit_prior_stats(std::span<const SampleRecord> records) {
  std::vector<ClinicalPriors> p;
  p.reserve(records.size());
  for (const auto& r : records) p.push_back(r.priors);
  return PriorStats::fit(p);
}

std::vector<Example> load_examples(std::span<const SampleRecord> records, const fs::path& base_dir,
                                   const PriorStats& stats) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    const FloatArray raw = read_m3t(base_dir / r.path);
    if (raw.shape.size() != 2) throw DataError(r.path + ": expected a 2-D image, got " + shape_str(raw.shape));
    std::vector<double> px(raw.values.begin(), raw.values.end());
    Example ex;
    ex.image = Tensor::from(raw.shape, robust_zscore(px));
    const auto p = normalize_priors(r.priors, stats);
    ex.priors = Tensor::from({3}, {p[0], p[1], p[2]});
    ex.diag = r.diag;
    ex.change = r.change;
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace m3ad
