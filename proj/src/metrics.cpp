#include "m3ad/metrics.hpp"

#include "m3ad/errors.hpp"
#include "m3ad/format.hpp"

namespace m3ad {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : c_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw DataError("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(int truth, int pred) {
  const auto C = static_cast<int>(c_);
  if (truth < 0 || truth >= C || pred < 0 || pred >= C) {
    throw DataError("label pair (" + std::to_string(truth) + ", " + std::to_string(pred) + ") outside [0, " +
                    std::to_string(c_) + ")");
  }
  ++counts_[static_cast<std::size_t>(truth) * c_ + static_cast<std::size_t>(pred)];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (auto v : counts_) n += v;
  return n;
}

std::uint64_t ConfusionMatrix::tp(std::size_t i) const { return at(i, i); }

std::uint64_t ConfusionMatrix::fp(std::size_t i) const {
  std::uint64_t s = 0;
  for (std::size_t t = 0; t < c_; ++t)
    if (t != i) s += at(t, i);
  return s;
}

std::uint64_t ConfusionMatrix::fn(std::size_t i) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < c_; ++p)
    if (p != i) s += at(i, p);
  return s;
}

std::uint64_t ConfusionMatrix::tn(std::size_t i) const { return total() - tp(i) - fp(i) - fn(i); }

ConfusionMatrix confusion(std::span<const int> y_true, std::span<const int> y_pred, std::size_t classes) {
  if (y_true.size() != y_pred.size()) {
    throw DataError("confusion: " + std::to_string(y_true.size()) + " labels vs " + std::to_string(y_pred.size()) +
                    " predictions");
  }
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < y_true.size(); ++i) cm.add(y_true[i], y_pred[i]);
  return cm;
}

namespace {

std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::string fmt(std::optional<double> v) {
  return v ? format_double(*v) : "nan";
}

}  // namespace

MetricsReport report(const ConfusionMatrix& cm) {
  const std::uint64_t n = cm.total();
  if (n == 0) throw DataError("cannot report metrics of an empty confusion matrix");
  MetricsReport r;
  std::uint64_t correct = 0;
  double f1_sum = 0.0;
  std::size_t f1_count = 0;
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    const auto tp = cm.tp(i), fp = cm.fp(i), fn = cm.fn(i), tn = cm.tn(i);
    correct += tp;
    ClassMetrics m;
    m.precision = ratio(tp, tp + fp);
    m.recall = ratio(tp, tp + fn);
    m.specificity = ratio(tn, tn + fp);
    if (m.precision && m.recall) {
      const double s = *m.precision + *m.recall;
      m.f1 = s > 0.0 ? 2.0 * *m.precision * *m.recall / s : 0.0;
    }
    if (m.f1) {
      f1_sum += *m.f1;
      ++f1_count;
    } else {
      r.undefined_f1.push_back(i);
    }
    r.per_class.push_back(m);
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  r.macro_f1 = f1_count ? f1_sum / static_cast<double>(f1_count) : 0.0;
  return r;
}

std::string report_csv(const MetricsReport& r) {
  std::string out = "metric,class,value\n";
  out += "accuracy,all," + fmt(r.accuracy) + "\n";
  out += "macro_f1,all," + fmt(r.macro_f1) + "\n";
  for (std::size_t i = 0; i < r.per_class.size(); ++i) {
    const auto& m = r.per_class[i];
    const std::string c = std::to_string(i);
    out += "precision," + c + "," + fmt(m.precision) + "\n";
    out += "recall," + c + "," + fmt(m.recall) + "\n";
    out += "specificity," + c + "," + fmt(m.specificity) + "\n";
    out += "f1," + c + "," + fmt(m.f1) + "\n";
  }
  return out;
}

std::string confusion_csv(const ConfusionMatrix& cm) {
  std::string out = "true\\pred";
  for (std::size_t p = 0; p < cm.classes(); ++p) out += "," + std::to_string(p);
  out += "\n";
  for (std::size_t t = 0; t < cm.classes(); ++t) {
    out += std::to_string(t);
    for (std::size_t p = 0; p < cm.classes(); ++p) out += "," + std::to_string(cm.at(t, p));
    out += "\n";
  }
  return out;
}

}  // namespace m3ad
