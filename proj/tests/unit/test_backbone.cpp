#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "helpers.hpp"
#include "m3ad/backbone.hpp"
#include "m3ad/errors.hpp"
#include "m3ad/grad_check.hpp"
#include "m3ad/model.hpp"
#include "m3ad/ops.hpp"

using namespace m3ad;
using m3ad::test::random_tensor;
using m3ad::test::to_vec;

TEST_CASE("patch_embed") {
  std::mt19937_64 rng(1);
  SUBCASE("64x64, patch 4, C=96 gives 256 tokens of width 96") {
    auto y = patch_embed(random_tensor(rng, {64, 64}), random_tensor(rng, {16, 96}), random_tensor(rng, {96}), 4);
    CHECK(y.shape() == Shape{256, 96});
  }
  SUBCASE("8x8 gives 4 tokens") {
    auto y = patch_embed(random_tensor(rng, {8, 8, 1}), random_tensor(rng, {16, 5}), Tensor(), 4);
    CHECK(y.shape() == Shape{4, 5});
  }
  SUBCASE("zero image with zero bias gives zero tokens") {
    auto y = patch_embed(Tensor::zeros({8, 8}), random_tensor(rng, {16, 3}), Tensor::zeros({3}), 4);
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("each token is the linear map of its own patch") {
    auto img = random_tensor(rng, {8, 12});
    auto w = random_tensor(rng, {16, 3});
    auto b = random_tensor(rng, {3});
    auto y = patch_embed(img, w, b, 4);
    REQUIRE(y.shape() == Shape{6, 3});
    for (std::size_t pi = 0; pi < 2; ++pi)
      for (std::size_t pj = 0; pj < 3; ++pj)
        for (std::size_t c = 0; c < 3; ++c) {
          double s = b[c];
          for (std::size_t dy = 0; dy < 4; ++dy)
            for (std::size_t dx = 0; dx < 4; ++dx) s += img[(pi * 4 + dy) * 12 + pj * 4 + dx] * w[(dy * 4 + dx) * 3 + c];
          CHECK(std::abs(y[(pi * 3 + pj) * 3 + c] - s) < 1e-12);
        }
  }
  SUBCASE("non-divisible extents") {
    CHECK_THROWS_AS(patch_embed(Tensor::zeros({10, 8}), Tensor::zeros({16, 2}), Tensor(), 4), DimensionError);
  }
}

TEST_CASE("window partition") {
  std::mt19937_64 rng(2);
  SUBCASE("8x8 map, M=8 is one window") { CHECK(WindowPartition(8, 8, 3, 8, 0).num_windows() == 1); }
  SUBCASE("16x16 map, M=8 is four windows and round-trips") {
    WindowPartition wp(16, 16, 3, 8, 0);
    CHECK(wp.num_windows() == 4);
    auto x = random_tensor(rng, {16, 16, 3});
    auto w = wp.partition(x);
    CHECK(w.shape() == Shape{4, 64, 3});
    CHECK(to_vec(wp.reverse(w)) == to_vec(x));
  }
  SUBCASE("shift by M/2 then unshift is the identity") {
    for (std::size_t m : {2u, 4u, 8u}) {
      WindowPartition wp(16, 8, 2, m, m / 2);
      auto x = random_tensor(rng, {16 * 8, 2});
      CHECK(to_vec(wp.reverse(wp.partition(x))) == to_vec(x));
    }
  }
  SUBCASE("cyclic shift moves content towards the origin") {
    const std::size_t H = 8, W = 8, M = 4, S = 2;
    WindowPartition wp(H, W, 1, M, S);
    std::vector<double> ids(H * W);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<double>(i);
    auto w = wp.partition(Tensor::from({H * W, 1}, ids));
    for (std::size_t win = 0; win < wp.num_windows(); ++win)
      for (std::size_t t = 0; t < M * M; ++t) {
        const std::size_t r = (win / (W / M)) * M + t / M, c = (win % (W / M)) * M + t % M;
        CHECK(w[win * M * M + t] == static_cast<double>(((r + S) % H) * W + (c + S) % W));
      }
  }
  SUBCASE("non-divisible extents") { CHECK_THROWS_AS(WindowPartition(12, 8, 1, 8, 0), DimensionError); }
}

TEST_CASE("scaled cosine attention") {
  std::mt19937_64 rng(3);
  const auto tau1 = Tensor::from({1}, {tau_raw_for(1.0)});
  SUBCASE("single token returns v") {
    auto q = random_tensor(rng, {1, 4});
    auto v = random_tensor(rng, {1, 4});
    auto r = cosine_attention(q, q, v, tau1, Tensor());
    CHECK(r.weights[0] == doctest::Approx(1.0));
    CHECK(test::max_abs_diff(r.output.data(), v.data()) < 1e-15);
  }
  SUBCASE("keys orthogonal to the query split evenly") {
    auto q = Tensor::from({2, 3}, {0, 0, 1, 0, 0, 2});
    auto k = Tensor::from({2, 3}, {1, 0, 0, 0, 1, 0});
    auto r = cosine_attention(q, k, random_tensor(rng, {2, 3}), tau1, Tensor::zeros({1, 2, 2}));
    for (std::size_t i = 0; i < 4; ++i) CHECK(r.weights[i] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("temperature floor") {
    auto tau = effective_tau(Tensor::from({3}, {-1000.0, -30.0, 5.0}));
    CHECK(tau[0] >= 0.01);
    CHECK(tau[1] > 0.01);
    CHECK(tau[2] > 0.01);
    CHECK(effective_tau(Tensor::from({1}, {tau_raw_for(1.0)})).item() == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("weights match the direct formula and lie on the simplex") {
    const std::size_t heads = 2, G = 3, n = 5, d = 4;
    for (int trial = 0; trial < 20; ++trial) {
      auto q = random_tensor(rng, {G * heads, n, d});
      auto k = random_tensor(rng, {G * heads, n, d});
      auto v = random_tensor(rng, {G * heads, n, d});
      auto tr = random_tensor(rng, {heads}, false, -3, 1);
      auto bias = random_tensor(rng, {heads, n, n});
      auto r = cosine_attention(q, k, v, tr, bias);
      for (std::size_t b = 0; b < G * heads; ++b) {
        const std::size_t h = b % heads;
        const double tau = 0.01 + std::log1p(std::exp(tr[h]));
        for (std::size_t i = 0; i < n; ++i) {
          std::vector<double> logit(n);
          double mx = -1e300;
          for (std::size_t j = 0; j < n; ++j) {
            double dot = 0, nq = 0, nk = 0;
            for (std::size_t c = 0; c < d; ++c) {
              const double a = q[(b * n + i) * d + c], e = k[(b * n + j) * d + c];
              dot += a * e;
              nq += a * a;
              nk += e * e;
            }
            const double cos = dot / (std::sqrt(nq) * std::sqrt(nk));
            CHECK(cos >= -1 - 1e-6);
            CHECK(cos <= 1 + 1e-6);
            logit[j] = cos / tau + bias[(h * n + i) * n + j];
            mx = std::max(mx, logit[j]);
          }
          double z = 0;
          for (double& l : logit) z += (l = std::exp(l - mx));
          double row = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const double w = r.weights[(b * n + i) * n + j];
            CHECK(w >= 0.0);
            CHECK(std::abs(w - logit[j] / z) < 1e-12);
            row += w;
          }
          CHECK(std::abs(row - 1.0) < 1e-6);
        }
      }
    }
  }
  SUBCASE("zero query is guarded") {
    auto r = cosine_attention(Tensor::zeros({3, 2}), random_tensor(rng, {3, 2}), random_tensor(rng, {3, 2}), tau1,
                              Tensor());
    for (double w : r.weights.data()) CHECK(std::isfinite(w));
  }
}

TEST_CASE("relative position table covers every intra-window pair") {
  for (std::size_t M : {2u, 4u, 8u}) {
    std::set<std::size_t> used;
    for (std::size_t i = 0; i < M * M; ++i)
      for (std::size_t j = 0; j < M * M; ++j) {
        const auto idx = relative_position_index(i, j, M);
        CHECK(idx < (2 * M - 1) * (2 * M - 1));
        used.insert(idx);
        // same offset, same entry
        const long dr = static_cast<long>(i / M) - static_cast<long>(j / M);
        const long dc = static_cast<long>(i % M) - static_cast<long>(j % M);
        CHECK(idx == static_cast<std::size_t>((dr + static_cast<long>(M) - 1) * (2 * static_cast<long>(M) - 1) + dc +
                                              static_cast<long>(M) - 1));
      }
    CHECK(used.size() == (2 * M - 1) * (2 * M - 1));
  }
}

namespace {

struct BlockFixture {
  ModelConfig cfg;
  ParameterStore store;
  init::Rng rng{11};
  M3adBlock block;
  BlockFixture(std::size_t window, std::size_t shift) : block(store, "b", 8, 2, window, shift, cfg, 0, rng) {}
};

}  // namespace

TEST_CASE("M3AD block") {
  std::mt19937_64 rng(4);
  SUBCASE("zeroed residual branches give the identity") {
    BlockFixture f(4, 0);
    for (const auto& p : f.store.all()) {
      const auto& n = p->name;
      if (n.ends_with(".proj.w") || n.ends_with(".proj.b") || n.ends_with(".w2") || n.ends_with(".b2"))
        std::fill(p->value.begin(), p->value.end(), 0.0);
    }
    auto z = random_tensor(rng, {16, 8});
    Binding bind(false);
    ForwardContext ctx{bind, Routing::gated(Task::Diagnosis)};
    CHECK(to_vec(f.block.forward(ctx, z, Grid{4, 4})) == to_vec(z));
  }
  SUBCASE("shape is preserved through a stack of blocks") {
    BlockFixture a(2, 0), b(2, 1);
    auto z = random_tensor(rng, {16, 8});
    Binding bind(false);
    ForwardContext ctx{bind, Routing::label_guided(kAD)};
    auto y = b.block.forward(ctx, a.block.forward(ctx, z, {4, 4}), {4, 4});
    CHECK(y.shape() == z.shape());
  }
  SUBCASE("16 tokens, dim 8: parameter gradients match finite differences") {
    for (std::size_t shift : {0u, 1u}) {
      BlockFixture f(shift ? 2 : 4, shift);
      std::normal_distribution<double> jitter(0.0, 0.05);
      for (const auto& p : f.store.all())
        for (double& v : p->value) v += jitter(rng);
      auto z = random_tensor(rng, {16, 8});
      std::vector<Parameter*> params;
      for (const auto& p : f.store.all()) params.push_back(p.get());
      auto fn = [&](Binding& bind) {
        ForwardContext ctx{bind, Routing::gated(Task::Change)};
        return ops::sum(f.block.forward(ctx, z, {4, 4}));
      };
      CHECK(grad_check_params(fn, params, 1e-5, 0, 3).max_rel_error < 1e-3);
    }
  }
}

TEST_CASE("patch merge") {
  std::mt19937_64 rng(5);
  init::Rng irng(5);
  SUBCASE("2x2 neighbourhood order") {
    auto x = random_tensor(rng, {4 * 4, 3});
    auto g = gather_2x2(x, {4, 4});
    REQUIRE(g.shape() == Shape{4, 12});
    const std::size_t off[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t q = 0; q < 4; ++q)
          for (std::size_t c = 0; c < 3; ++c)
            CHECK(g[(i * 2 + j) * 12 + q * 3 + c] == x[((2 * i + off[q][0]) * 4 + 2 * j + off[q][1]) * 3 + c]);
  }
  SUBCASE("16x16x96 to 8x8x192") {
    ParameterStore store;
    PatchMerge pm(store, "m", 96, irng);
    Binding bind(false);
    CHECK(pm.forward(bind, random_tensor(rng, {256, 96}), {16, 16}).shape() == Shape{64, 192});
  }
  SUBCASE("2x2xC to 1x1x2C") {
    ParameterStore store;
    PatchMerge pm(store, "m", 5, irng);
    Binding bind(false);
    CHECK(pm.forward(bind, random_tensor(rng, {4, 5}), {2, 2}).shape() == Shape{1, 10});
  }
  SUBCASE("odd extents") { CHECK_THROWS_AS(gather_2x2(Tensor::zeros({9, 2}), {3, 3}), DimensionError); }
}

TEST_CASE("stage plan and the end-to-end shape schedule") {
  ModelConfig cfg;
  for (std::size_t size : {32u, 64u, 128u}) {
    cfg.image_size = size;
    const auto plan = StagePlan::build(cfg, size, size);
    REQUIRE(plan.stages.size() == 4);
    for (std::size_t s = 0; s < 4; ++s) {
      CHECK(plan.stages[s].dim == (cfg.embed_dim << s));
      CHECK(plan.stages[s].grid.h == size / (4u << s));
      CHECK(plan.stages[s].kind == (s < 2 ? BlockKind::Attention : BlockKind::TokMlp));
    }
  }
  CHECK_THROWS_AS(StagePlan::build(cfg, 48, 48), DimensionError);

  cfg.image_size = 64;
  M3adModel model(cfg, 1);
  std::mt19937_64 rng(6);
  Binding bind(false);
  ForwardContext ctx{bind, Routing::gated(Task::Diagnosis)};
  std::vector<StageShape> shapes;
  auto enc = model.encode(ctx, random_tensor(rng, {64, 64}), random_tensor(rng, {3}), nullptr, &shapes);
  CHECK(enc.grid == Grid{2, 2});
  CHECK(enc.tokens.shape() == Shape{4, 8 * cfg.embed_dim});

  // Paired blocks alternate shift 0 / M/2 when the map is larger than the window.
  const auto blocks = model.attention_blocks();
  REQUIRE(blocks.size() == 4);
  CHECK(blocks[0]->shift() == 0);
  CHECK(blocks[1]->shift() == cfg.window / 2);
  CHECK(blocks[2]->shift() == 0);
  CHECK(blocks[3]->shift() == 0);  // stage-1 grid 8x8 equals the window
}
