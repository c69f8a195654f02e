#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "helpers.hpp"
#include "m3ad/errors.hpp"
#include "m3ad/gradcheck_suite.hpp"
#include "m3ad/heads.hpp"
#include "m3ad/model.hpp"
#include "m3ad/ops.hpp"

using namespace m3ad;
using m3ad::test::random_tensor;
using m3ad::test::to_vec;

TEST_CASE("mask sampling") {
  std::mt19937_64 rng(1);
  SUBCASE("64x64 with unit 8 masks 38 of 64 units") {
    auto m = sample_mask(rng, 64, 64, 8, 0.6);
    CHECK(m.total_units() == 64);
    CHECK(m.units.size() == 38);
  }
  SUBCASE("256 units at 0.6 masks 154") {
    CHECK(sample_mask(rng, 128, 128, 8, 0.6).units.size() == 154);
  }
  SUBCASE("indices are unique, sorted and in range") {
    for (int t = 0; t < 50; ++t) {
      auto m = sample_mask(rng, 64, 32, 8, 0.3);
      std::set<std::uint32_t> s(m.units.begin(), m.units.end());
      CHECK(s.size() == m.units.size());
      CHECK(std::is_sorted(m.units.begin(), m.units.end()));
      CHECK(*s.rbegin() < m.total_units());
    }
  }
  SUBCASE("same seed gives the same mask") {
    std::mt19937_64 a(9), b(9);
    CHECK(sample_mask(a, 64, 64, 8, 0.6).units == sample_mask(b, 64, 64, 8, 0.6).units);
  }
  SUBCASE("every unit is eventually picked") {
    std::vector<int> hits(16, 0);
    for (int t = 0; t < 400; ++t)
      for (auto u : sample_mask(rng, 32, 32, 8, 0.5).units) hits[u]++;
    for (int h : hits) CHECK(h > 100);
  }
  SUBCASE("bad ratio or extents") {
    CHECK_THROWS_AS(sample_mask(rng, 64, 64, 8, 0.0), ContractError);
    CHECK_THROWS_AS(sample_mask(rng, 64, 64, 8, 1.0), ContractError);
    CHECK_THROWS_AS(sample_mask(rng, 60, 64, 8, 0.6), DimensionError);
  }
  SUBCASE("pixel indices cover exactly the masked units") {
    MaskSpec m{16, 16, 8, {1, 2}};
    auto px = m.pixel_indices();
    CHECK(px.size() == 128);
    for (auto p : px) {
      const auto r = p / 16, c = p % 16;
      const auto u = (r / 8) * 2 + c / 8;
      CHECK((u == 1 || u == 2));
    }
  }
}

TEST_CASE("apply mask") {
  std::mt19937_64 rng(2);
  auto tokens = random_tensor(rng, {16, 3});
  auto token = Tensor::from({3}, {7, 8, 9});
  SUBCASE("empty mask leaves tokens unchanged") {
    CHECK(to_vec(apply_mask(tokens, MaskSpec{16, 16, 8, {}}, 4, token)) == to_vec(tokens));
  }
  SUBCASE("all units masked gives the mask token everywhere") {
    auto y = apply_mask(tokens, MaskSpec{16, 16, 8, {0, 1, 2, 3}}, 4, token);
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t c = 0; c < 3; ++c) CHECK(y[i * 3 + c] == token[c]);
  }
  SUBCASE("masked token fraction equals the unit fraction") {
    auto spec = MaskSpec{16, 16, 8, {0, 3}};
    auto y = apply_mask(tokens, spec, 4, token);
    std::size_t masked = 0;
    for (std::size_t i = 0; i < 16; ++i) {
      const bool is_token = y[i * 3] == 7 && y[i * 3 + 1] == 8 && y[i * 3 + 2] == 9;
      masked += is_token;
      if (!is_token)
        for (std::size_t c = 0; c < 3; ++c) CHECK(y[i * 3 + c] == tokens[i * 3 + c]);
    }
    CHECK(masked * spec.total_units() == spec.units.size() * 16);
  }
  SUBCASE("unit not aligned with the patch") {
    CHECK_THROWS_AS(apply_mask(tokens, MaskSpec{16, 16, 6, {0}}, 4, token), DimensionError);
  }
}

TEST_CASE("reconstruction loss") {
  std::mt19937_64 rng(3);
  auto image = random_tensor(rng, {16, 16});
  SUBCASE("perfect prediction gives zero") {
    CHECK(recon_loss(image, image, MaskSpec{16, 16, 8, {0, 3}}).item() == 0.0);
  }
  SUBCASE("one pixel off by d in one 8x8 unit gives d/64") {
    auto v = to_vec(image);
    v[2 * 16 + 10] += 0.25;  // row 2, col 10 lies in unit 1
    auto pred = Tensor::from({16, 16}, v);
    CHECK(recon_loss(image, pred, MaskSpec{16, 16, 8, {1}}).item() == doctest::Approx(0.25 / 64).epsilon(1e-12));
  }
  SUBCASE("predictions outside the mask do not matter") {
    MaskSpec m{16, 16, 8, {0, 3}};
    auto pred = random_tensor(rng, {16, 16});
    const double base = recon_loss(image, pred, m).item();
    auto v = to_vec(pred);
    v[0 * 16 + 12] += 5.0;  // unit 1
    v[12 * 16 + 1] -= 3.0;  // unit 2
    CHECK(recon_loss(image, Tensor::from({16, 16}, v), m).item() == base);
  }
  SUBCASE("gradient is zero outside the mask") {
    MaskSpec m{16, 16, 8, {1, 2}};
    auto pred = random_tensor(rng, {16, 16}, true);
    backward(recon_loss(image, pred, m));
    const auto px = m.pixel_indices();
    std::set<std::uint32_t> in(px.begin(), px.end());
    for (std::uint32_t i = 0; i < 256; ++i) {
      if (in.count(i))
        CHECK(std::abs(pred.grad()[i]) == doctest::Approx(1.0 / 128));
      else
        CHECK(pred.grad()[i] == 0.0);
    }
  }
  SUBCASE("empty mask") {
    CHECK_THROWS_AS(recon_loss(image, image, MaskSpec{16, 16, 8, {}}), ContractError);
  }
}

TEST_CASE("fine-tune loss") {
  SUBCASE("confident correct predictions give ~0") {
    auto d = Tensor::from({3}, {100, 0, 0});
    auto c = Tensor::from({3}, {0, 0, 100});
    CHECK(finetune_loss(d, c, 0, 2, 1, 1).item() < 1e-40);
  }
  SUBCASE("uniform logits on both tasks give 2 ln 3") {
    CHECK(finetune_loss(Tensor::zeros({3}), Tensor::zeros({3}), 1, 2, 1, 1).item() ==
          doctest::Approx(2 * std::log(3.0)).epsilon(1e-12));
  }
  SUBCASE("alpha 2, beta 0 is twice the diagnosis term") {
    std::mt19937_64 rng(4);
    auto d = random_tensor(rng, {3}), c = random_tensor(rng, {7});
    const int y[1] = {1};
    CHECK(finetune_loss(d, c, 1, 5, 2, 0).item() == 2 * ops::cross_entropy(d, y).item());
  }
  SUBCASE("cross entropy matches -log softmax") {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 100; ++t) {
      auto z = random_tensor(rng, {7}, false, -5, 5);
      const int y[1] = {t % 7};
      double s = 0;
      for (double v : z.data()) s += std::exp(v);
      CHECK(std::abs(ops::cross_entropy(z, y).item() - (std::log(s) - z[t % 7])) < 1e-10);
      CHECK(finetune_loss(z, z, t % 7, t % 7, 1, 1).item() >= 0.0);
    }
  }
  SUBCASE("label out of range") {
    CHECK_THROWS_AS(finetune_loss(Tensor::zeros({3}), Tensor::zeros({3}), 3, 0, 1, 1), ContractError);
    CHECK_THROWS_AS(finetune_loss(Tensor::zeros({3}), Tensor::zeros({7}), 0, 7, 1, 1), ContractError);
  }
}

TEST_CASE("task heads") {
  ParameterStore store;
  init::Rng rng(6);
  Binding bind(false);
  SUBCASE("constant features pool to the constant") {
    TaskHeads h(store, "head", 4, 3, 3, 1e-5, rng);
    std::vector<double> v(20);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 4; ++c) v[i * 4 + c] = static_cast<double>(c);
    auto pooled = ops::mean_rows(Tensor::from({5, 4}, v));
    for (std::size_t c = 0; c < 4; ++c) CHECK(pooled[c] == static_cast<double>(c));
    auto normed = h.pool(bind, Tensor::from({5, 4}, v));
    CHECK(normed.shape() == Shape{4});
  }
  SUBCASE("arity follows the label scheme") {
    TaskHeads h3(store, "h3", 4, 3, 3, 1e-5, rng);
    TaskHeads h7(store, "h7", 4, 3, 7, 1e-5, rng);
    std::mt19937_64 r(7);
    auto t = random_tensor(r, {6, 4});
    auto [d3, c3] = h3.forward(bind, t);
    auto [d7, c7] = h7.forward(bind, t);
    CHECK(d3.size() == 3);
    CHECK(c3.size() == 3);
    CHECK(d7.size() == 3);
    CHECK(c7.size() == 7);
    CHECK(to_vec(h7.logits(bind, t, true)) == to_vec(c7));
  }
  SUBCASE("zero heads give zero logits") {
    TaskHeads h(store, "h0", 4, 3, 3, 1e-5, rng);
    for (const auto& p : store.all())
      if (p->name.find(".w") != std::string::npos || p->name.find(".b") != std::string::npos)
        std::fill(p->value.begin(), p->value.end(), 0.0);
    std::mt19937_64 r(8);
    auto [d, c] = h.forward(bind, random_tensor(r, {6, 4}));
    for (double v : to_vec(d)) CHECK(v == 0.0);
    for (double v : to_vec(c)) CHECK(v == 0.0);
  }
}

TEST_CASE("reconstruction decoder") {
  ParameterStore store;
  init::Rng rng(9);
  ReconDecoder dec(store, "dec", 3, 4, 2, rng);
  Binding bind(false);
  std::mt19937_64 r(10);
  auto tokens = random_tensor(r, {6, 3});
  auto img = dec.forward(bind, tokens, {2, 3});
  CHECK(img.shape() == Shape{8, 12});
  auto blocks = ops::linear(tokens, Tensor::from({3, 16}, store.at("dec.w").value), Tensor::from({16}, store.at("dec.b").value));
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 12; ++x) CHECK(img[y * 12 + x] == blocks[((y / 4) * 3 + x / 4) * 16 + (y % 4) * 4 + x % 4]);
  CHECK(dec.mask_token().shape == Shape{2});
  CHECK_THROWS_AS(dec.forward(bind, tokens, {3, 3}), DimensionError);
}

namespace {

struct ToyModel {
  ModelConfig cfg;
  M3adModel model;
  std::vector<Example> batch;
  std::vector<MaskSpec> masks;

  explicit ToyModel(std::vector<int> diags, double lambda = 0.5) : cfg(make_cfg(lambda)), model(cfg, 11) {
    std::mt19937_64 rng(12);
    for (int d : diags) {
      Example ex;
      ex.image = random_tensor(rng, {32, 32});
      ex.priors = random_tensor(rng, {3});
      ex.diag = d;
      ex.change = 0;
      batch.push_back(ex);
      masks.push_back(sample_mask(rng, 32, 32, 8, 0.6));
    }
  }
  static ModelConfig make_cfg(double lambda) {
    auto c = gradcheck_toy_config();
    c.lambda_expert = lambda;
    return c;
  }

  // Class-only routing through explicit fixed weights, decoded, then masked
  // L1 summed by hand over the unit pixels.
  double class_recon_oracle(std::size_t i, int k) const {
    std::vector<double> w(cfg.num_experts, 0.0);
    w[cfg.shared_experts + 2 * k] = w[cfg.shared_experts + 2 * k + 1] = 0.5;
    Binding bind(false);
    ForwardContext ctx{bind, Routing::fixed_weights(w)};
    auto enc = model.encode(ctx, batch[i].image, batch[i].priors, &masks[i]);
    auto pred = model.reconstruct(bind, enc);
    double s = 0;
    std::size_t n = 0;
    for (auto u : masks[i].units) {
      const std::size_t r0 = (u / 4) * 8, c0 = (u % 4) * 8;
      for (std::size_t r = r0; r < r0 + 8; ++r)
        for (std::size_t c = c0; c < c0 + 8; ++c, ++n) s += std::abs(pred[r * 32 + c] - batch[i].image[r * 32 + c]);
    }
    return s / static_cast<double>(n);
  }
};

}  // namespace

TEST_CASE("expert specialization loss") {
  SUBCASE("two-class batch equals the per-class oracle") {
    ToyModel t({0, 2, 0});
    Binding bind(false);
    const double got = expert_specialization_loss(t.model, bind, t.batch, t.masks).item();
    const double want = (t.class_recon_oracle(0, 0) + t.class_recon_oracle(2, 0)) / 2 + t.class_recon_oracle(1, 2);
    CHECK(std::abs(got - want) < 1e-10);
  }
  SUBCASE("single-class batch is one term") {
    ToyModel t({1, 1});
    Binding bind(false);
    const double got = expert_specialization_loss(t.model, bind, t.batch, t.masks).item();
    CHECK(std::abs(got - (t.class_recon_oracle(0, 1) + t.class_recon_oracle(1, 1)) / 2) < 1e-10);
  }
}

TEST_CASE("pretraining loss") {
  SUBCASE("lambda 0 equals the reconstruction mean") {
    ToyModel t({0, 1}, 0.0);
    Binding bind(false);
    const double r = (recon_term(t.model, bind, t.batch[0], t.masks[0]).item() +
                      recon_term(t.model, bind, t.batch[1], t.masks[1]).item()) / 2;
    CHECK(pretrain_loss(t.model, bind, t.batch, t.masks).item() == r);
  }
  SUBCASE("lambda 0.5 is a + 0.5 b") {
    ToyModel t({0, 1, 2}, 0.5);
    Binding bind(false);
    double a = 0;
    for (std::size_t i = 0; i < 3; ++i) a += recon_term(t.model, bind, t.batch[i], t.masks[i]).item();
    a /= 3;
    const double b = expert_specialization_loss(t.model, bind, t.batch, t.masks).item();
    CHECK(std::abs(pretrain_loss(t.model, bind, t.batch, t.masks).item() - (a + 0.5 * b)) < 1e-12);
  }
  SUBCASE("gradient reaches only shared and own-class experts, never gates") {
    for (int k = 0; k < 3; ++k) {
      ToyModel t({k}, 0.5);
      Binding bind;
      backward(pretrain_loss(t.model, bind, t.batch, t.masks));
      bool own_nonzero = false, shared_nonzero = false;
      for (const auto& g : bind.take_gradients()) {
        const auto& name = g.param->name;
        double mx = 0;
        for (double v : g.values) mx = std::max(mx, std::abs(v));
        if (g.param->group == ParamGroup::Gate) CHECK(mx == 0.0);
        if (g.param->group != ParamGroup::Expert) continue;
        const auto pos = name.find(".expert");
        const int e = std::stoi(name.substr(pos + 7));
        if (e < 2) shared_nonzero |= mx > 0;
        else if ((e - 2) / 2 == k) own_nonzero |= mx > 0;
        else CHECK(mx == 0.0);
      }
      CHECK(own_nonzero);
      CHECK(shared_nonzero);
    }
  }
}
