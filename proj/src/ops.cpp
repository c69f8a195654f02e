#include "m3ad/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "m3ad/errors.hpp"

namespace m3ad::ops {

using detail::Node;

namespace {

// Grad buffer of parent i, or an empty span when that parent is a constant.
std::span<double> pgrad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return {};
  return p.grad_buffer();
}

const std::vector<double>& pval(Node& self, std::size_t i) { return self.parents[i]->value; }

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

struct BroadcastPlan {
  Shape out;
  enum class Kind { Same, SuffixB, SuffixA, General } kind = Kind::Same;
  std::vector<std::uint32_t> ia, ib;
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

BroadcastPlan plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    return plan;
  }
  const std::size_t sa = shape_size(a), sb = shape_size(b);
  if (sb == 1 || is_suffix(b, a)) {
    plan.out = a;
    plan.kind = BroadcastPlan::Kind::SuffixB;
    return plan;
  }
  if (sa == 1 || is_suffix(a, b)) {
    plan.out = b;
    plan.kind = BroadcastPlan::Kind::SuffixA;
    return plan;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + (r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + (r - b.size()));
  plan.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) shape_error(op, a, b);
    plan.out[i] = std::max(pa[i], pb[i]);
  }
  std::vector<std::size_t> stride_a(r), stride_b(r);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t i = r; i-- > 0;) {
    stride_a[i] = pa[i] == 1 ? 0 : acc_a;
    stride_b[i] = pb[i] == 1 ? 0 : acc_b;
    acc_a *= pa[i];
    acc_b *= pb[i];
  }
  const std::size_t n = shape_size(plan.out);
  plan.kind = BroadcastPlan::Kind::General;
  plan.ia.resize(n);
  plan.ib.resize(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    plan.ia[i] = static_cast<std::uint32_t>(oa);
    plan.ib[i] = static_cast<std::uint32_t>(ob);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += stride_a[d];
      ob += stride_b[d];
      if (idx[d] < plan.out[d]) break;
      oa -= stride_a[d] * idx[d];
      ob -= stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
  return plan;
}

// f(a, b) -> value; df(a, b, g, ga&, gb&) accumulates partials.
template <class F, class DF>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DF df) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(op, a.shape(), b.shape()));
  const std::size_t n = shape_size(plan->out);
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t na = av.size(), nb = bv.size();
  std::vector<double> out(n);
  auto index = [plan, na, nb](std::size_t i, std::size_t& ia, std::size_t& ib) {
    switch (plan->kind) {
      case BroadcastPlan::Kind::Same: ia = ib = i; break;
      case BroadcastPlan::Kind::SuffixB: ia = i; ib = i % nb; break;
      case BroadcastPlan::Kind::SuffixA: ia = i % na; ib = i; break;
      case BroadcastPlan::Kind::General: ia = plan->ia[i]; ib = plan->ib[i]; break;
    }
  };
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ia, ib;
    index(i, ia, ib);
    out[i] = f(av[ia], bv[ib]);
  }
  return Tensor::make(plan->out, std::move(out), {a, b},
                      [index, df, n](Node& self) {
                        const auto& A = pval(self, 0);
                        const auto& B = pval(self, 1);
                        auto ga = pgrad(self, 0);
                        auto gb = pgrad(self, 1);
                        double dummy_a = 0, dummy_b = 0;
                        for (std::size_t i = 0; i < n; ++i) {
                          std::size_t ia, ib;
                          index(i, ia, ib);
                          double& ra = ga.empty() ? dummy_a : ga[ia];
                          double& rb = gb.empty() ? dummy_b : gb[ib];
                          df(A[ia], B[ib], self.grad[i], ra, rb);
                        }
                      },
                      op);
}

// f(x) -> y; dfdx(x, y) -> local derivative.
template <class F, class DF>
Tensor unary(const char* op, const Tensor& x, F f, DF dfdx) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return Tensor::make(x.shape(), std::move(out), {x},
                      [dfdx](Node& self) {
                        const auto& X = pval(self, 0);
                        auto gx = pgrad(self, 0);
                        for (std::size_t i = 0; i < X.size(); ++i) gx[i] += self.grad[i] * dfdx(X[i], self.value[i]);
                      },
                      op);
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) * 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return cdf + x * pdf;
}
double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
double softplus_value(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MutMap(c, M, N).noalias() += ConstMap(a, M, K) * ConstMap(b, K, N);
}

// ga[m x k] += g[m x n] * b[k x n]^T
void gemm_nt(const double* g, const double* b, double* ga, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MutMap(ga, M, K).noalias() += ConstMap(g, M, N) * ConstMap(b, K, N).transpose();
}

// gb[k x n] += a[m x k]^T * g[m x n]
void gemm_tn(const double* a, const double* g, double* gb, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MutMap(gb, K, N).noalias() += ConstMap(a, M, K).transpose() * ConstMap(g, M, N);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& ga, double& gb) {
        ga += g;
        gb += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& ga, double& gb) {
        ga += g;
        gb -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& ga, double& gb) {
        ga += g * y;
        gb += g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double g, double& ga, double& gb) {
        ga += g / y;
        gb -= g * x / (y * y);
      });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double c) {
  return unary("scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary("add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary("gelu", x, gelu_value, [](double v, double) { return gelu_grad(v); });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
  return unary("softplus", x, softplus_value, [](double v, double) { return sigmoid_value(v); });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() == 3 && b.rank() == 3) {
    const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    if (b.dim(0) != B || b.dim(1) != k) shape_error("matmul", a.shape(), b.shape());
    std::vector<double> out(B * m * n, 0.0);
    for (std::size_t s = 0; s < B; ++s) {
      gemm_nn(a.data().data() + s * m * k, b.data().data() + s * k * n, out.data() + s * m * n, m, k, n);
    }
    return Tensor::make({B, m, n}, std::move(out), {a, b},
                        [B, m, k, n](Node& self) {
                          auto ga = pgrad(self, 0);
                          auto gb = pgrad(self, 1);
                          const double* A = pval(self, 0).data();
                          const double* Bv = pval(self, 1).data();
                          const double* g = self.grad.data();
                          for (std::size_t s = 0; s < B; ++s) {
                            if (!ga.empty()) gemm_nt(g + s * m * n, Bv + s * k * n, ga.data() + s * m * k, m, k, n);
                            if (!gb.empty()) gemm_tn(A + s * m * k, g + s * m * n, gb.data() + s * k * n, m, k, n);
                          }
                        },
                        "bmm");
  }
  if (b.rank() != 2 || a.rank() == 0) shape_error("matmul", a.shape(), b.shape());
  const std::size_t k = a.shape().back();
  if (b.dim(0) != k) shape_error("matmul", a.shape(), b.shape());
  const std::size_t n = b.dim(1);
  const std::size_t m = a.size() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor::make(std::move(out_shape), std::move(out), {a, b},
                      [m, k, n](Node& self) {
                        auto ga = pgrad(self, 0);
                        auto gb = pgrad(self, 1);
                        if (!ga.empty()) gemm_nt(self.grad.data(), pval(self, 1).data(), ga.data(), m, k, n);
                        if (!gb.empty()) gemm_tn(pval(self, 0).data(), self.grad.data(), gb.data(), m, k, n);
                      },
                      "matmul");
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.rank() != 2 || x.rank() == 0 || x.shape().back() != w.dim(0)) shape_error("linear", x.shape(), w.shape());
  const std::size_t k = w.dim(0), n = w.dim(1), m = x.size() / k;
  if (bias.defined() && (bias.size() != n)) shape_error("linear(bias)", w.shape(), bias.shape());
  Shape out_shape = x.shape();
  out_shape.back() = n;
  std::vector<double> out(m * n, 0.0);
  if (bias.defined()) {
    for (std::size_t i = 0; i < m; ++i) std::copy(bias.data().begin(), bias.data().end(), out.begin() + i * n);
  }
  gemm_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
  std::vector<Tensor> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  return Tensor::make(std::move(out_shape), std::move(out), std::move(parents),
                      [m, k, n](Node& self) {
                        auto gx = pgrad(self, 0);
                        auto gw = pgrad(self, 1);
                        if (!gx.empty()) gemm_nt(self.grad.data(), pval(self, 1).data(), gx.data(), m, k, n);
                        if (!gw.empty()) gemm_tn(pval(self, 0).data(), self.grad.data(), gw.data(), m, k, n);
                        if (self.parents.size() > 2) {
                          auto gb = pgrad(self, 2);
                          if (!gb.empty()) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
                          }
                        }
                      },
                      "linear");
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2 && x.rank() != 3) throw DimensionError("transpose: expected rank 2 or 3, got " + shape_str(x.shape()));
  const std::size_t B = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t r = x.shape()[x.rank() - 2], c = x.shape().back();
  std::vector<std::uint32_t> index(x.size());
  for (std::size_t s = 0; s < B; ++s)
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = 0; j < r; ++j) index[s * r * c + i * r + j] = static_cast<std::uint32_t>(s * r * c + j * c + i);
  Shape out = x.shape();
  std::swap(out[out.size() - 1], out[out.size() - 2]);
  return gather(x, std::move(index), std::move(out));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::make(std::move(shape), std::move(out), {x},
                      [](Node& self) {
                        auto gx = pgrad(self, 0);
                        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                      },
                      "reshape");
}

Tensor gather(const Tensor& x, std::vector<std::uint32_t> index, Shape out_shape) {
  if (shape_size(out_shape) != index.size()) {
    throw DimensionError("gather: index count " + std::to_string(index.size()) + " does not fill " + shape_str(out_shape));
  }
  const auto xv = x.data();
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xv.size()) {
      throw DimensionError("gather: index " + std::to_string(index[i]) + " out of range for " + shape_str(x.shape()));
    }
    out[i] = xv[index[i]];
  }
  return Tensor::make(std::move(out_shape), std::move(out), {x},
                      [index = std::move(index)](Node& self) {
                        auto gx = pgrad(self, 0);
                        for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += self.grad[i];
                      },
                      "gather");
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  if (x.rank() == 0 || count == 0 || begin + count > x.dim(0)) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_str(x.shape()));
  }
  const std::size_t row = x.size() / x.dim(0);
  Shape out_shape = x.shape();
  out_shape[0] = count;
  std::vector<double> out(x.data().begin() + begin * row, x.data().begin() + (begin + count) * row);
  const std::size_t off = begin * row;
  return Tensor::make(std::move(out_shape), std::move(out), {x},
                      [off](Node& self) {
                        auto gx = pgrad(self, 0);
                        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[off + i] += self.grad[i];
                      },
                      "slice_rows");
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() == 0 ||
      !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
    shape_error("concat_last", a.shape(), b.shape());
  }
  const std::size_t ca = a.shape().back(), cb = b.shape().back(), rows = a.size() / ca;
  Shape out_shape = a.shape();
  out_shape.back() = ca + cb;
  std::vector<double> out(rows * (ca + cb));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().begin() + r * ca, ca, out.begin() + r * (ca + cb));
    std::copy_n(b.data().begin() + r * cb, cb, out.begin() + r * (ca + cb) + ca);
  }
  return Tensor::make(std::move(out_shape), std::move(out), {a, b},
                      [rows, ca, cb](Node& self) {
                        auto ga = pgrad(self, 0);
                        auto gb = pgrad(self, 1);
                        for (std::size_t r = 0; r < rows; ++r) {
                          const double* g = self.grad.data() + r * (ca + cb);
                          if (!ga.empty())
                            for (std::size_t j = 0; j < ca; ++j) ga[r * ca + j] += g[j];
                          if (!gb.empty())
                            for (std::size_t j = 0; j < cb; ++j) gb[r * cb + j] += g[ca + j];
                        }
                      },
                      "concat_last");
}

Tensor pick(const Tensor& x, std::size_t i) {
  return gather(x, {static_cast<std::uint32_t>(i)}, {1});
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make({1}, {s}, {x},
                      [](Node& self) {
                        auto gx = pgrad(self, 0);
                        for (auto& g : gx) g += self.grad[0];
                      },
                      "sum");
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor mean_rows(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("mean_rows: expected rank >= 2, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), row = x.size() / n;
  std::vector<double> out(row, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < row; ++j) out[j] += x.data()[i * row + j];
  const double inv = 1.0 / static_cast<double>(n);
  for (auto& v : out) v *= inv;
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  return Tensor::make(std::move(out_shape), std::move(out), {x},
                      [n, row, inv](Node& self) {
                        auto gx = pgrad(self, 0);
                        for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < row; ++j) gx[i * row + j] += self.grad[j] * inv;
                      },
                      "mean_rows");
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  const auto xv = x.data();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        s += e;
      }
      const double inv = 1.0 / s;
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] *= inv;
    }
  }
  return Tensor::make(x.shape(), std::move(out), {x},
                      [outer, inner, n](Node& self) {
                        auto gx = pgrad(self, 0);
                        const auto& y = self.value;
                        const auto& g = self.grad;
                        for (std::size_t o = 0; o < outer; ++o) {
                          for (std::size_t in = 0; in < inner; ++in) {
                            const std::size_t base = o * n * inner + in;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
                            for (std::size_t j = 0; j < n; ++j) {
                              const std::size_t k = base + j * inner;
                              gx[k] += y[k] * (g[k] - dot);
                            }
                          }
                        }
                      },
                      "softmax");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back(), rows = x.size() / d;
  if (gamma.defined() && gamma.size() != d) shape_error("layer_norm(gamma)", x.shape(), gamma.shape());
  if (beta.defined() && beta.size() != d) shape_error("layer_norm(beta)", x.shape(), beta.shape());
  if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
  const auto xv = x.data();
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      double y = h;
      if (gamma.defined()) y *= gamma.data()[j];
      if (beta.defined()) y += beta.data()[j];
      out[r * d + j] = y;
    }
  }
  const bool has_gamma = gamma.defined(), has_beta = beta.defined();
  std::vector<Tensor> parents{x};
  parents.push_back(has_gamma ? gamma : Tensor::zeros({d}));
  parents.push_back(has_beta ? beta : Tensor::zeros({d}));
  return Tensor::make(x.shape(), std::move(out), std::move(parents),
                      [xhat, rstd, d, rows, has_gamma](Node& self) {
                        auto gx = pgrad(self, 0);
                        auto gg = pgrad(self, 1);
                        auto gbeta = pgrad(self, 2);
                        const auto& gamma_v = pval(self, 1);
                        const auto& g = self.grad;
                        std::vector<double> dh(d);
                        for (std::size_t r = 0; r < rows; ++r) {
                          const double* hr = xhat->data() + r * d;
                          const double* gr = g.data() + r * d;
                          double s1 = 0.0, s2 = 0.0;
                          for (std::size_t j = 0; j < d; ++j) {
                            dh[j] = gr[j] * (has_gamma ? gamma_v[j] : 1.0);
                            s1 += dh[j];
                            s2 += dh[j] * hr[j];
                            if (!gg.empty()) gg[j] += gr[j] * hr[j];
                            if (!gbeta.empty()) gbeta[j] += gr[j];
                          }
                          if (!gx.empty()) {
                            const double k = (*rstd)[r] / static_cast<double>(d);
                            for (std::size_t j = 0; j < d; ++j)
                              gx[r * d + j] += k * (static_cast<double>(d) * dh[j] - s1 - hr[j] * s2);
                          }
                        }
                      },
                      "layer_norm");
}

Tensor l2_normalize(const Tensor& x, double min_norm) {
  const std::size_t d = x.shape().back(), rows = x.size() / d;
  const auto xv = x.data();
  auto norms = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xv[r * d + j] * xv[r * d + j];
    const double nrm = std::sqrt(s);
    (*norms)[r] = nrm;
    const double den = std::max(nrm, min_norm);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / den;
  }
  return Tensor::make(x.shape(), std::move(out), {x},
                      [norms, d, rows, min_norm](Node& self) {
                        auto gx = pgrad(self, 0);
                        const auto& y = self.value;
                        const auto& g = self.grad;
                        for (std::size_t r = 0; r < rows; ++r) {
                          const double nrm = (*norms)[r];
                          if (nrm > min_norm) {
                            double dot = 0.0;
                            for (std::size_t j = 0; j < d; ++j) dot += y[r * d + j] * g[r * d + j];
                            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / nrm;
                          } else {
                            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] / min_norm;
                          }
                        }
                      },
                      "l2_normalize");
}

Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(0) != 3 || w.dim(1) != 3 || w.dim(2) != x.dim(2)) {
    shape_error("conv3x3", x.shape(), w.shape());
  }
  const std::size_t H = x.dim(0), W = x.dim(1), ci = x.dim(2), co = w.dim(3);
  if (bias.defined() && bias.size() != co) shape_error("conv3x3(bias)", w.shape(), bias.shape());
  const double* xv = x.data().data();
  const double* wv = w.data().data();
  std::vector<double> out(H * W * co, 0.0);
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t c = 0; c < W; ++c) {
      double* o = out.data() + (h * W + c) * co;
      if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), o);
      for (int dy = 0; dy < 3; ++dy) {
        const long yy = static_cast<long>(h) + dy - 1;
        if (yy < 0 || yy >= static_cast<long>(H)) continue;
        for (int dx = 0; dx < 3; ++dx) {
          const long xx = static_cast<long>(c) + dx - 1;
          if (xx < 0 || xx >= static_cast<long>(W)) continue;
          const double* xi = xv + (static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)) * ci;
          const double* wk = wv + (static_cast<std::size_t>(dy) * 3 + static_cast<std::size_t>(dx)) * ci * co;
          gemm_nn(xi, wk, o, 1, ci, co);
        }
      }
    }
  }
  std::vector<Tensor> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  return Tensor::make({H, W, co}, std::move(out), std::move(parents),
                      [H, W, ci, co](Node& self) {
                        auto gx = pgrad(self, 0);
                        auto gw = pgrad(self, 1);
                        const double* xv = pval(self, 0).data();
                        const double* wv = pval(self, 1).data();
                        for (std::size_t h = 0; h < H; ++h) {
                          for (std::size_t c = 0; c < W; ++c) {
                            const double* g = self.grad.data() + (h * W + c) * co;
                            for (int dy = 0; dy < 3; ++dy) {
                              const long yy = static_cast<long>(h) + dy - 1;
                              if (yy < 0 || yy >= static_cast<long>(H)) continue;
                              for (int dx = 0; dx < 3; ++dx) {
                                const long xx = static_cast<long>(c) + dx - 1;
                                if (xx < 0 || xx >= static_cast<long>(W)) continue;
                                const std::size_t xo = (static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)) * ci;
                                const std::size_t wo = (static_cast<std::size_t>(dy) * 3 + static_cast<std::size_t>(dx)) * ci * co;
                                if (!gx.empty()) gemm_nt(g, wv + wo, gx.data() + xo, 1, ci, co);
                                if (!gw.empty()) gemm_tn(xv + xo, g, gw.data() + wo, 1, ci, co);
                              }
                            }
                          }
                        }
                        if (self.parents.size() > 2) {
                          auto gb = pgrad(self, 2);
                          if (!gb.empty())
                            for (std::size_t p = 0; p < H * W; ++p)
                              for (std::size_t o = 0; o < co; ++o) gb[o] += self.grad[p * co + o];
                        }
                      },
                      "conv3x3");
}

Tensor dwconv3x3(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 3 || w.rank() != 3 || w.dim(0) != 3 || w.dim(1) != 3 || w.dim(2) != x.dim(2)) {
    shape_error("dwconv3x3", x.shape(), w.shape());
  }
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  if (bias.defined() && bias.size() != C) shape_error("dwconv3x3(bias)", w.shape(), bias.shape());
  const double* xv = x.data().data();
  const double* wv = w.data().data();
  std::vector<double> out(H * W * C, 0.0);
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t c = 0; c < W; ++c) {
      double* o = out.data() + (h * W + c) * C;
      if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), o);
      for (int dy = 0; dy < 3; ++dy) {
        const long yy = static_cast<long>(h) + dy - 1;
        if (yy < 0 || yy >= static_cast<long>(H)) continue;
        for (int dx = 0; dx < 3; ++dx) {
          const long xx = static_cast<long>(c) + dx - 1;
          if (xx < 0 || xx >= static_cast<long>(W)) continue;
          const double* xi = xv + (static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)) * C;
          const double* wk = wv + (static_cast<std::size_t>(dy) * 3 + static_cast<std::size_t>(dx)) * C;
          for (std::size_t k = 0; k < C; ++k) o[k] += xi[k] * wk[k];
        }
      }
    }
  }
  std::vector<Tensor> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  return Tensor::make({H, W, C}, std::move(out), std::move(parents),
                      [H, W, C](Node& self) {
                        auto gx = pgrad(self, 0);
                        auto gw = pgrad(self, 1);
                        const double* xv = pval(self, 0).data();
                        const double* wv = pval(self, 1).data();
                        for (std::size_t h = 0; h < H; ++h) {
                          for (std::size_t c = 0; c < W; ++c) {
                            const double* g = self.grad.data() + (h * W + c) * C;
                            for (int dy = 0; dy < 3; ++dy) {
                              const long yy = static_cast<long>(h) + dy - 1;
                              if (yy < 0 || yy >= static_cast<long>(H)) continue;
                              for (int dx = 0; dx < 3; ++dx) {
                                const long xx = static_cast<long>(c) + dx - 1;
                                if (xx < 0 || xx >= static_cast<long>(W)) continue;
                                const std::size_t xo = (static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)) * C;
                                const std::size_t wo = (static_cast<std::size_t>(dy) * 3 + static_cast<std::size_t>(dx)) * C;
                                for (std::size_t k = 0; k < C; ++k) {
                                  if (!gx.empty()) gx[xo + k] += g[k] * wv[wo + k];
                                  if (!gw.empty()) gw[wo + k] += g[k] * xv[xo + k];
                                }
                              }
                            }
                          }
                        }
                        if (self.parents.size() > 2) {
                          auto gb = pgrad(self, 2);
                          if (!gb.empty())
                            for (std::size_t p = 0; p < H * W; ++p)
                              for (std::size_t k = 0; k < C; ++k) gb[k] += self.grad[p * C + k];
                        }
                      },
                      "dwconv3x3");
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t C = logits.shape().back();
  const std::size_t N = logits.size() / C;
  if (logits.rank() > 2 || labels.size() != N) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                         " labels");
  }
  auto probs = std::make_shared<std::vector<double>>(logits.size());
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double loss = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw ContractError("cross_entropy: label " + std::to_string(y) + " out of range for " + std::to_string(C) +
                          " classes");
    }
    const double* z = logits.data().data() + i * C;
    double mx = z[0];
    for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, z[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < C; ++j) s += std::exp(z[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < C; ++j) (*probs)[i * C + j] = std::exp(z[j] - lse);
    loss += lse - z[y];
  }
  loss /= static_cast<double>(N);
  return Tensor::make({1}, {loss}, {logits},
                      [probs, lab, N, C](Node& self) {
                        auto gx = pgrad(self, 0);
                        const double g = self.grad[0] / static_cast<double>(N);
                        for (std::size_t i = 0; i < N; ++i) {
                          for (std::size_t j = 0; j < C; ++j) {
                            const double onehot = static_cast<int>(j) == (*lab)[i] ? 1.0 : 0.0;
                            gx[i * C + j] += g * ((*probs)[i * C + j] - onehot);
                          }
                        }
                      },
                      "cross_entropy");
}

Tensor masked_l1(const Tensor& pred, const Tensor& target, std::span<const std::uint32_t> index) {
  if (pred.shape() != target.shape()) shape_error("masked_l1", pred.shape(), target.shape());
  if (index.empty()) throw ContractError("masked_l1: empty mask");
  auto idx = std::make_shared<std::vector<std::uint32_t>>(index.begin(), index.end());
  const auto p = pred.data();
  const auto t = target.data();
  double s = 0.0;
  for (auto i : *idx) {
    if (i >= p.size()) throw DimensionError("masked_l1: index out of range for " + shape_str(pred.shape()));
    s += std::fabs(p[i] - t[i]);
  }
  const double inv = 1.0 / static_cast<double>(idx->size());
  return Tensor::make({1}, {s * inv}, {pred, target.detach()},
                      [idx, inv](Node& self) {
                        auto gp = pgrad(self, 0);
                        const auto& P = pval(self, 0);
                        const auto& T = pval(self, 1);
                        const double g = self.grad[0] * inv;
                        for (auto i : *idx) {
                          const double d = P[i] - T[i];
                          gp[i] += d > 0 ? g : (d < 0 ? -g : 0.0);
                        }
                      },
                      "masked_l1");
}

}  // namespace m3ad::ops
