#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace m3ad {

/// C x C counts; rows are true classes, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);

  void add(int truth, int pred);
  std::size_t classes() const { return c_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * c_ + pred]; }
  std::uint64_t total() const;

  std::uint64_t tp(std::size_t i) const;
  std::uint64_t fp(std::size_t i) const;
  std::uint64_t fn(std::size_t i) const;
  std::uint64_t tn(std::size_t i) const;

 private:
  std::size_t c_;
  std::vector<std::uint64_t> counts_;
};

// Throws DataError for labels outside [0, classes).
ConfusionMatrix confusion(std::span<const int> y_true, std::span<const int> y_pred, std::size_t classes);

struct ClassMetrics {
  // nullopt where the denominator is zero.
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> specificity;
  std::optional<double> f1;
};

struct MetricsReport {
  double accuracy = 0.0;  // sum of TP over N
  std::vector<ClassMetrics> per_class;
  double macro_f1 = 0.0;  // over classes with a defined F1
  std::vector<std::size_t> undefined_f1;  // classes excluded from macro_f1
};

// Throws DataError on an empty matrix.
MetricsReport report(const ConfusionMatrix& cm);

// CSV with header `metric,class,value`; class is "all" for global values,
// undefined metrics are written as "nan".
std::string report_csv(const MetricsReport& r);
// Header `true\pred,0,..,C-1`, one row per true class.
std::string confusion_csv(const ConfusionMatrix& cm);

}  // namespace m3ad
