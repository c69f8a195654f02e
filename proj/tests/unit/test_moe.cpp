#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "helpers.hpp"
#include "m3ad/errors.hpp"
#include "m3ad/grad_check.hpp"
#include "m3ad/moe.hpp"
#include "m3ad/ops.hpp"

using namespace m3ad;
using m3ad::test::random_tensor;
using m3ad::test::to_vec;

namespace {

void check_simplex(std::span<const double> w) {
  double s = 0.0;
  for (double v : w) {
    CHECK(v >= 0.0);
    s += v;
  }
  CHECK(std::abs(s - 1.0) < 1e-6);
}

struct LayerFixture {
  ModelConfig cfg;
  ParameterStore store;
  init::Rng rng;
  MoeLayer layer;
  explicit LayerFixture(std::size_t dim, std::uint64_t seed = 1) : rng(seed), layer(store, "moe", dim, cfg, 0, rng) {}
};

}  // namespace

TEST_CASE("expert role map") {
  ModelConfig cfg;
  CHECK(class_experts(cfg, kNC) == std::vector<std::size_t>{2, 3});
  CHECK(class_experts(cfg, kMCI) == std::vector<std::size_t>{4, 5});
  CHECK(class_experts(cfg, kAD) == std::vector<std::size_t>{6, 7});
  std::set<std::size_t> all{0, 1};
  for (int k = 0; k < 3; ++k)
    for (auto e : class_experts(cfg, k)) CHECK(all.insert(e).second);
  CHECK(all.size() == cfg.num_experts);
  CHECK_THROWS_AS(class_experts(cfg, 3), ContractError);
  CHECK_THROWS_AS(class_experts(cfg, -1), ContractError);
}

TEST_CASE("expert forward") {
  std::mt19937_64 rng(2);
  SUBCASE("zero weights give zero output, shape preserved") {
    auto y = expert_mlp(random_tensor(rng, {5, 6}), Tensor::zeros({6, 24}), Tensor::zeros({24}), Tensor::zeros({24, 6}),
                        Tensor::zeros({6}));
    CHECK(y.shape() == Shape{5, 6});
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("d=6 gradients match finite differences") {
    std::vector<Tensor> in{random_tensor(rng, {3, 6}, true), random_tensor(rng, {6, 24}, true),
                           random_tensor(rng, {24}, true), random_tensor(rng, {24, 6}, true),
                           random_tensor(rng, {6}, true)};
    auto w = random_tensor(rng, {3, 6});
    auto f = [&] { return ops::sum(ops::mul(expert_mlp(in[0], in[1], in[2], in[3], in[4]), w)); };
    CHECK(grad_check(f, in, 1e-5).max_rel_error < 1e-5);
  }
  SUBCASE("index out of range") {
    LayerFixture f(6);
    Binding bind(false);
    CHECK(f.layer.expert_forward(bind, 7, random_tensor(rng, {2, 6})).shape() == Shape{2, 6});
    CHECK_THROWS_AS(f.layer.expert_forward(bind, 8, random_tensor(rng, {2, 6})), ContractError);
  }
}

TEST_CASE("feature-level attention") {
  std::mt19937_64 rng(3);
  auto wa = random_tensor(rng, {4, 4});
  auto ba = random_tensor(rng, {4});
  SUBCASE("single token pools to itself") {
    auto x = random_tensor(rng, {1, 4});
    auto y = feature_level_attention(x, Tensor::zeros({4, 4}), Tensor::zeros({4}));
    for (std::size_t i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(0.5 * x[i]).epsilon(1e-15));
  }
  SUBCASE("zero projection halves the mean") {
    auto x = random_tensor(rng, {5, 4});
    auto y = feature_level_attention(x, Tensor::zeros({4, 4}), Tensor::zeros({4}));
    for (std::size_t c = 0; c < 4; ++c) {
      double m = 0;
      for (std::size_t t = 0; t < 5; ++t) m += x[t * 4 + c];
      CHECK(y[c] == doctest::Approx(0.5 * m / 5).epsilon(1e-12));
    }
  }
  SUBCASE("token permutation invariance") {
    auto x = random_tensor(rng, {6, 4});
    std::vector<std::uint32_t> perm{3, 0, 5, 1, 4, 2}, idx;
    for (auto t : perm)
      for (std::uint32_t c = 0; c < 4; ++c) idx.push_back(t * 4 + c);
    auto xp = ops::gather(x, idx, {6, 4});
    CHECK(test::max_abs_diff(feature_level_attention(x, wa, ba).data(), feature_level_attention(xp, wa, ba).data()) <
          1e-15);
  }
}

TEST_CASE("gate") {
  std::mt19937_64 rng(4);
  SUBCASE("equal logits give uniform weights") {
    auto g = gate_probabilities(random_tensor(rng, {3, 6}), random_tensor(rng, {6, 6}), random_tensor(rng, {6}),
                                Tensor::zeros({6, 8}), 1.0);
    for (double v : g.data()) CHECK(v == doctest::Approx(0.125).epsilon(1e-14));
  }
  SUBCASE("always on the simplex") {
    for (int i = 0; i < 200; ++i) {
      auto g = gate_probabilities(random_tensor(rng, {3, 6}, false, -5, 5), random_tensor(rng, {6, 6}),
                                  random_tensor(rng, {6}), random_tensor(rng, {6, 8}, false, -4, 4), 0.5);
      check_simplex(g.data());
    }
  }
  SUBCASE("halving the temperature keeps the argmax and sharpens") {
    for (int i = 0; i < 50; ++i) {
      auto x = random_tensor(rng, {3, 6});
      auto wa = random_tensor(rng, {6, 6});
      auto ba = random_tensor(rng, {6});
      auto wg = random_tensor(rng, {6, 8});
      auto g1 = to_vec(gate_probabilities(x, wa, ba, wg, 1.0));
      auto g2 = to_vec(gate_probabilities(x, wa, ba, wg, 0.5));
      const auto a1 = std::max_element(g1.begin(), g1.end()) - g1.begin();
      const auto a2 = std::max_element(g2.begin(), g2.end()) - g2.begin();
      CHECK(a1 == a2);
      CHECK(g2[a2] >= g1[a1]);
    }
  }
  SUBCASE("non-positive temperature") {
    CHECK_THROWS_AS(gate_probabilities(Tensor::zeros({1, 2}), Tensor::zeros({2, 2}), Tensor(), Tensor::zeros({2, 8}), 0.0),
                    ContractError);
  }
}

TEST_CASE("mmoe combine") {
  std::mt19937_64 rng(5);
  std::vector<Tensor> outs;
  for (int e = 0; e < 8; ++e) outs.push_back(random_tensor(rng, {3, 4}));
  SUBCASE("one-hot weight selects one expert") {
    std::vector<double> w(8, 0.0);
    w[5] = 1.0;
    CHECK(to_vec(mmoe_combine(outs, Tensor::from({8}, w))) == to_vec(outs[5]));
  }
  SUBCASE("identical experts ignore the weights") {
    std::vector<Tensor> same(8, outs[0]);
    auto w = ops::softmax(random_tensor(rng, {8}));
    CHECK(test::max_abs_diff(mmoe_combine(same, w).data(), outs[0].data()) < 1e-15);
  }
  SUBCASE("explicit-sum oracle") {
    auto w = ops::softmax(random_tensor(rng, {8}));
    auto y = mmoe_combine(outs, w);
    for (std::size_t i = 0; i < 12; ++i) {
      double s = 0.0;
      for (std::size_t e = 0; e < 8; ++e) s += w[e] * outs[e][i];
      CHECK(std::abs(y[i] - s) < 1e-12);
    }
  }
  SUBCASE("weight count mismatch") { CHECK_THROWS_AS(mmoe_combine(outs, Tensor::zeros({7})), DimensionError); }
}

TEST_CASE("label-guided routing weights") {
  ModelConfig cfg;
  CHECK(label_guided_weights(kAD, cfg).weights == std::vector<double>{0.15, 0.15, 0, 0, 0, 0, 0.35, 0.35});
  CHECK(label_guided_weights(kNC, cfg).weights == std::vector<double>{0.15, 0.15, 0.35, 0.35, 0, 0, 0, 0});
  CHECK(label_guided_weights(kMCI, cfg).weights == std::vector<double>{0.15, 0.15, 0, 0, 0.35, 0.35, 0, 0});
  CHECK(class_only_weights(kMCI, cfg).weights == std::vector<double>{0, 0, 0, 0, 0.5, 0.5, 0, 0});
  for (int k = 0; k < 3; ++k) {
    check_simplex(label_guided_weights(k, cfg).weights);
    check_simplex(class_only_weights(k, cfg).weights);
  }
  cfg.w_shared = 0.5;
  CHECK(label_guided_weights(kNC, cfg).weights[0] == 0.25);
  CHECK_THROWS_AS(label_guided_weights(5, cfg), ContractError);
}

TEST_CASE("label-guided forward leaves gates and other classes' experts without gradient") {
  LayerFixture f(6);
  std::mt19937_64 rng(6);
  for (int label = 0; label < 3; ++label) {
    Binding bind;
    ForwardContext ctx{bind, Routing::label_guided(label)};
    backward(ops::sum(f.layer.forward(ctx, random_tensor(rng, {4, 6}))));
    const auto active = class_experts(f.cfg, label);
    for (const auto& g : bind.take_gradients()) {
      const auto& n = g.param->name;
      CAPTURE(n);
      CHECK(g.param->group != ParamGroup::Gate);
      for (std::size_t e = 0; e < 8; ++e) {
        const bool used = e < 2 || e == active[0] || e == active[1];
        if (!used) CHECK(n.find(".expert" + std::to_string(e) + ".") == std::string::npos);
      }
    }
  }
}

TEST_CASE("task gates are independent") {
  LayerFixture f(6);
  std::mt19937_64 rng(7);
  auto x = random_tensor(rng, {4, 6});
  Binding bind(false);
  auto before = to_vec(f.layer.gate_forward(bind, Task::Change, x));
  auto diag_before = to_vec(f.layer.gate_forward(bind, Task::Diagnosis, x));
  auto& wg = f.store.at("moe.gate_diagnosis.w_g");
  for (double& v : wg.value) v += 0.5;
  wg.value[3] -= 2.0;
  Binding bind2(false);
  CHECK(to_vec(f.layer.gate_forward(bind2, Task::Change, x)) == before);
  CHECK(to_vec(f.layer.gate_forward(bind2, Task::Diagnosis, x)) != diag_before);
}

TEST_CASE("gate load at initialization is balanced") {
  LayerFixture f(16, 8);
  std::mt19937_64 rng(8);
  std::vector<double> mean(8, 0.0);
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    Binding bind(false);
    auto g = f.layer.gate_forward(bind, i % 2 ? Task::Change : Task::Diagnosis, random_tensor(rng, {4, 16}, false, 0, 1));
    check_simplex(g.data());
    for (std::size_t e = 0; e < 8; ++e) mean[e] += g[e] / n;
  }
  for (double m : mean) CHECK(std::abs(m - 0.125) < 0.05);
}

TEST_CASE("gated combine matches the explicit mixture") {
  LayerFixture f(6);
  std::mt19937_64 rng(9);
  auto x = random_tensor(rng, {3, 6});
  Binding bind(false);
  ForwardContext ctx{bind, Routing::gated(Task::Change)};
  auto y = f.layer.forward(ctx, x);
  auto w = f.layer.gate_forward(bind, Task::Change, x);
  std::vector<double> expect(18, 0.0);
  for (std::size_t e = 0; e < 8; ++e) {
    auto o = f.layer.expert_forward(bind, e, x);
    for (std::size_t i = 0; i < 18; ++i) expect[i] += w[e] * o[i];
  }
  CHECK(test::max_abs_diff(y.data(), expect) < 1e-12);

  GateTrace trace;
  ForwardContext traced{bind, Routing::gated(Task::Diagnosis), &trace};
  f.layer.forward(traced, x);
  REQUIRE(trace.records.size() == 1);
  CHECK(trace.records[0].task == Task::Diagnosis);
  check_simplex(trace.records[0].weights);
}
