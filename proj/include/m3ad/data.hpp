#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "m3ad/config.hpp"
#include "m3ad/model.hpp"
#include "m3ad/priors.hpp"

namespace m3ad {

enum class Split { Train, Val, Test };
const char* split_name(Split s);
Split parse_split(const std::string& s);

// Three-class conversion labels.
enum Change3 : int { kStable = 0, kConversion = 1, kReversion = 2 };

// Seven realized transitions (from -> to) of the 3x3 scheme; AD -> MCI and
// AD -> NC do not occur. Codes are row-major over the remaining pairs:
// 0 NC>NC, 1 NC>MCI, 2 NC>AD, 3 MCI>NC, 4 MCI>MCI, 5 MCI>AD, 6 AD>AD.
inline constexpr int kNumTransitionCodes = 7;
int transition_code(int from, int to);  // throws DataError for excluded pairs
std::pair<int, int> transition_of(int code);
int transition_to_change3(int code);

struct SampleRecord {
  std::string path;  // as written in the manifest (relative to it)
  ClinicalPriors priors;
  int diag = 0;
  int change = 0;
  Split split = Split::Train;
};

inline constexpr const char* kManifestHeader = "path,age,gender,etiv,diag,change,split";

// Writes header + rows, LF line endings, shortest round-trip numbers.
void write_manifest(const std::filesystem::path& path, std::span<const SampleRecord> records);
// Validates labels against the scheme, duplicate paths and (when
// `check_files`) the existence of each image next to the manifest. Errors
// name the 1-based data row.
std::vector<SampleRecord> load_manifest(const std::filesystem::path& path, LabelScheme scheme = LabelScheme::C3,
                                        bool check_files = true);

// --- Synthetic pseudo-MRI ----------------------------------------------------

// Per-class darkening of the ventricle region (NC, MCI, AD).
inline constexpr std::array<double, 3> kAtrophyDepth{0.0, 0.35, 0.7};

// Pixel membership of the ventricle region graded by diagnosis.
std::vector<std::uint8_t> atrophy_region(std::size_t size);

// Labels of one synthetic subject: change drawn from the configured priors,
// diagnosis (the endpoint of the transition) drawn among compatible states.
struct SyntheticLabels {
  int diag;
  int change;  // C3 class or transition code, per scheme
};
SyntheticLabels draw_labels(std::uint64_t seed, std::size_t index, const GenConfig& cfg);

// Raw image [size, size]: brain ellipse + smooth field, graded atrophy,
// a bright blob whose position encodes the change label, Gaussian noise.
std::vector<float> render_synthetic(std::uint64_t seed, std::size_t index, std::size_t size, int diag, int change,
                                    LabelScheme scheme, double noise);

ClinicalPriors draw_priors(std::uint64_t seed, std::size_t index, int diag);

// Writes `out_dir/images/*.m3t` and `out_dir/manifest.csv`; splits are
// assigned with `assign_splits` using the config fractions.
std::vector<SampleRecord> gen_synthetic(const GenConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir);

// --- Preprocessing ---------------------------------------------------------

// Linear-interpolated percentile (q in [0, 100]) of unsorted values.
double percentile(std::vector<double> values, double q);
// Clip to [p1, p99], then z-score with the clipped mean / max(std, 1e-8).
std::vector<double> robust_zscore(std::span<const double> image);

// --- Splits --------------------------------------------------------------

// Stratified by diagnosis; per class round(f * n) go to train and val, the
// rest to test. Fractions must sum to 1.
void assign_splits(std::vector<SampleRecord>& records, std::array<double, 3> fractions, std::uint64_t seed);
// Stratified k-fold assignment: fold index per record.
std::vector<std::size_t> kfold_assign(std::span<const SampleRecord> records, std::size_t k, std::uint64_t seed);

std::vector<SampleRecord> filter_split(std::span<const SampleRecord> records, Split s);
PriorStats fit_prior_stats(std::span<const SampleRecord> records);

// Reads, normalizes and tensorizes records (paths relative to `base_dir`).
std::vector<Example> load_examples(std::span<const SampleRecord> records, const std::filesystem::path& base_dir,
                                   const PriorStats& stats);

}  // namespace m3ad
