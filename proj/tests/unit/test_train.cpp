#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <numbers>
#include <random>

#include "helpers.hpp"
#include "m3ad/checkpoint.hpp"
#include "m3ad/data.hpp"
#include "m3ad/errors.hpp"
#include "m3ad/gradcheck_suite.hpp"
#include "m3ad/ops.hpp"
#include "m3ad/train.hpp"

using namespace m3ad;
using m3ad::test::slurp;
using m3ad::test::spit;
using m3ad::test::TempDir;
using m3ad::test::to_vec;

TEST_CASE("adamw update") {
  TrainConfig cfg;
  SUBCASE("zero gradient and zero decay leave parameters unchanged") {
    cfg.weight_decay = 0.0;
    std::vector<double> th{0.3, -1.2}, g{0, 0}, m{0, 0}, v{0, 0};
    adamw_update(th, g, m, v, 1, 1e-3, cfg);
    CHECK(th == std::vector<double>{0.3, -1.2});
  }
  SUBCASE("zero gradient with decay is a pure multiplicative shrink") {
    std::vector<double> th{0.3, -1.2}, g{0, 0}, m{0, 0}, v{0, 0};
    adamw_update(th, g, m, v, 1, 1e-2, cfg);
    CHECK(th[0] == doctest::Approx(0.3 * (1 - 1e-2 * 0.05)).epsilon(1e-15));
    CHECK(th[1] == doctest::Approx(-1.2 * (1 - 1e-2 * 0.05)).epsilon(1e-15));
  }
  SUBCASE("one scalar step matches the hand formula") {
    std::vector<double> th{0.7}, g{0.4}, m{0.1}, v{0.02};
    const std::uint64_t t = 3;
    const double lr = 2e-3;
    const double m1 = 0.9 * 0.1 + 0.1 * 0.4, v1 = 0.999 * 0.02 + 0.001 * 0.16;
    const double mh = m1 / (1 - std::pow(0.9, 3)), vh = v1 / (1 - std::pow(0.999, 3));
    const double want = 0.7 - lr * 0.05 * 0.7 - lr * mh / (std::sqrt(vh) + 1e-8);
    adamw_update(th, g, m, v, t, lr, cfg);
    CHECK(std::abs(th[0] - want) < 1e-15);
    CHECK(std::abs(m[0] - m1) < 1e-15);
    CHECK(std::abs(v[0] - v1) < 1e-15);
  }
  SUBCASE("step zero is rejected") {
    std::vector<double> th{1}, g{1}, m{0}, v{0};
    CHECK_THROWS_AS(adamw_update(th, g, m, v, 0, 1e-3, cfg), ContractError);
  }
  SUBCASE("non-finite gradient aborts naming the parameter, nothing modified") {
    ParameterStore store;
    auto& a = store.add("layer.a", ParamGroup::Backbone, {2}, {1.0, 2.0});
    auto& b = store.add("layer.b", ParamGroup::Backbone, {1}, {3.0});
    a.grad = {0.1, 0.2};
    b.grad = {NAN};
    std::vector<Parameter*> ps{&a, &b};
    AdamW opt;
    CHECK_THROWS_WITH_AS(opt.step(ps, 1e-3, cfg), doctest::Contains("layer.b"), NumericError);
    CHECK(a.value == std::vector<double>{1.0, 2.0});
    CHECK(opt.steps() == 0);
  }
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 100, 1e-3, 1e-5) == 1e-3);
  CHECK(cosine_lr(100, 100, 1e-3, 1e-5) == 1e-5);
  CHECK(cosine_lr(50, 100, 1e-3, 1e-5) == doctest::Approx((1e-3 + 1e-5) / 2).epsilon(1e-12));
  CHECK(cosine_lr(250, 100, 1e-3, 1e-5) == 1e-5);
  double prev = 1.0;
  for (int t = 0; t <= 100; ++t) {
    const double lr = cosine_lr(t, 100, 1e-3, 1e-5);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("gradient clipping") {
  ParameterStore store;
  auto& a = store.add("a", ParamGroup::Backbone, {2}, {0, 0});
  auto& b = store.add("b", ParamGroup::Backbone, {1}, {0});
  std::vector<Parameter*> ps{&a, &b};
  SUBCASE("below the limit nothing changes") {
    a.grad = {0.3, 0.0};
    b.grad = {0.4};
    CHECK(clip_gradients(ps, 1.0) == doctest::Approx(0.5));
    CHECK(a.grad == std::vector<double>{0.3, 0.0});
    CHECK(b.grad == std::vector<double>{0.4});
  }
  SUBCASE("above the limit the norm becomes the limit, direction kept") {
    a.grad = {1.2, 0.0};
    b.grad = {1.6};
    const std::vector<double> before{1.2, 0.0, 1.6};
    CHECK(clip_gradients(ps, 1.0) == doctest::Approx(2.0));
    const std::vector<double> after{a.grad[0], a.grad[1], b.grad[0]};
    double n = 0, dot = 0, nb = 0;
    for (int i = 0; i < 3; ++i) {
      n += after[i] * after[i];
      nb += before[i] * before[i];
      dot += before[i] * after[i];
    }
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-9);
    CHECK(dot / std::sqrt(n * nb) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("early stopping") {
  SUBCASE("stops exactly patience epochs after the best") {
    EarlyStopping s(3, false);
    const double vals[] = {1.0, 0.8, 0.9, 0.85, 0.81, 0.95};
    std::size_t stopped = 0;
    for (std::size_t e = 1; e <= 6 && !stopped; ++e) {
      s.update(e, vals[e - 1]);
      if (s.should_stop(e)) stopped = e;
    }
    CHECK(s.best_epoch() == 2);
    CHECK(stopped == 5);
  }
  SUBCASE("maximizing resets on improvement") {
    EarlyStopping s(2, true);
    CHECK(s.update(1, 0.5));
    CHECK_FALSE(s.update(2, 0.5));
    CHECK(s.update(3, 0.6));
    CHECK_FALSE(s.should_stop(4));
    CHECK(s.should_stop(5));
  }
}

namespace {

// Separable toy examples on the 32x32 toy architecture.
std::vector<Example> toy_examples(std::size_t n, std::uint64_t seed) {
  GenConfig gc;
  gc.size = 32;
  std::vector<ClinicalPriors> pri;
  std::vector<SyntheticLabels> lab;
  for (std::size_t i = 0; i < n; ++i) {
    lab.push_back(draw_labels(seed, i, gc));
    lab.back().diag = static_cast<int>(i % 3);
    pri.push_back(draw_priors(seed, i, lab.back().diag));
  }
  const auto stats = PriorStats::fit(pri);
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto raw = render_synthetic(seed, i, 32, lab[i].diag, lab[i].change, LabelScheme::C3, 0.05);
    Example ex;
    ex.image = Tensor::from({32, 32}, robust_zscore(std::vector<double>(raw.begin(), raw.end())));
    const auto p = normalize_priors(pri[i], stats);
    ex.priors = Tensor::from({3}, {p[0], p[1], p[2]});
    ex.diag = lab[i].diag;
    ex.change = lab[i].change;
    out.push_back(ex);
  }
  return out;
}

TrainConfig toy_train(std::size_t epochs) {
  TrainConfig c;
  c.lr = 1e-3;
  c.epochs = epochs;
  c.batch_size = 4;
  c.seed = 3;
  return c;
}

std::vector<std::vector<double>> values_of(const ParameterStore& s, ParamGroup g) {
  std::vector<std::vector<double>> out;
  for (const auto& p : s.all())
    if (p->group == g) out.push_back(p->value);
  return out;
}

std::vector<double> forward_outputs(const M3adModel& m, const std::vector<Example>& ex) {
  std::vector<double> out;
  for (const auto& e : ex) {
    Binding bind(false);
    const auto lg = task_forward(m, bind, e);
    for (double v : to_vec(lg.diag)) out.push_back(v);
    for (double v : to_vec(lg.change)) out.push_back(v);
    const auto mask = eval_mask(m.config(), 1, 0);
    out.push_back(recon_term(m, bind, e, mask).item());
  }
  return out;
}

}  // namespace

TEST_CASE("pretraining loop") {
  const auto train = toy_examples(12, 1);
  const auto val = toy_examples(6, 2);
  SUBCASE("one epoch on 8 samples gives a loadable checkpoint; gates untouched") {
    M3adModel model(gradcheck_toy_config(), 4);
    const auto gates = values_of(model.params(), ParamGroup::Gate);
    const auto heads = values_of(model.params(), ParamGroup::Head);
    const auto experts = values_of(model.params(), ParamGroup::Expert);
    TrainState st;
    const auto log = pretrain_loop(model, std::span(train).first(8), val, toy_train(1), st);
    CHECK(log.size() == 1);
    CHECK(std::isfinite(log[0].train_loss));
    CHECK(values_of(model.params(), ParamGroup::Gate) == gates);
    CHECK(values_of(model.params(), ParamGroup::Head) == heads);
    CHECK(values_of(model.params(), ParamGroup::Expert) != experts);
    TempDir d("ckpt_pre");
    save_checkpoint(d / "c.m3ck", make_checkpoint(model, st));
    const auto ck = load_checkpoint(d / "c.m3ck");
    M3adModel again(ck.model_config(), 99);
    restore_parameters(again, ck);
    CHECK(forward_outputs(again, val) == forward_outputs(model, val));
    CHECK(ck.stage == Stage::Pretrain);
    CHECK(ck.epoch == 1);
  }
  SUBCASE("training loss decreases over the first five epochs") {
    M3adModel model(gradcheck_toy_config(), 5);
    TrainState st;
    auto cfg = toy_train(5);
    cfg.patience = 10;
    const auto log = pretrain_loop(model, train, val, cfg, st);
    REQUIRE(log.size() == 5);
    int non_decreasing = 0;
    for (std::size_t e = 1; e < 5; ++e) non_decreasing += log[e].train_loss >= log[e - 1].train_loss;
    CHECK(non_decreasing <= 1);
    CHECK(log[4].train_loss < log[0].train_loss);
  }
  SUBCASE("every sample only touches shared and own-class experts") {
    M3adModel model(gradcheck_toy_config(), 6);
    TrainState st;
    TrainHooks hooks;
    std::size_t checked = 0;
    hooks.sample_gradients = [&](const Example& ex, const std::vector<Binding::Grad>& grads) {
      for (const auto& g : grads) {
        if (g.param->group == ParamGroup::Gate)
          for (double v : g.values) REQUIRE(v == 0.0);
        if (g.param->group != ParamGroup::Expert) continue;
        const auto& n = g.param->name;
        const int e = std::stoi(n.substr(n.find(".expert") + 7));
        if (e >= 2 && (e - 2) / 2 != ex.diag)
          for (double v : g.values) REQUIRE(v == 0.0);
      }
      ++checked;
    };
    pretrain_loop(model, train, val, toy_train(1), st, hooks);
    CHECK(checked == train.size());
  }
  SUBCASE("same seed, same result; thread count does not matter") {
    auto run = [&](const char* threads) {
      setenv("M3AD_THREADS", threads, 1);
      M3adModel model(gradcheck_toy_config(), 7);
      TrainState st;
      pretrain_loop(model, train, val, toy_train(2), st);
      unsetenv("M3AD_THREADS");
      std::vector<std::vector<double>> all;
      for (const auto& p : model.params().all()) all.push_back(p->value);
      return all;
    };
    const auto a = run("1");
    CHECK(run("1") == a);
    CHECK(run("3") == a);
  }
}

TEST_CASE("fine-tuning loop") {
  const auto train = toy_examples(12, 3);
  const auto val = toy_examples(6, 4);
  SUBCASE("from a pretrained checkpoint one epoch runs and moves the gates") {
    M3adModel model(gradcheck_toy_config(), 8);
    TrainState st;
    pretrain_loop(model, train, val, toy_train(1), st);
    const auto ck = make_checkpoint(model, st);
    M3adModel tuned(ck.model_config(), 9);
    restore_parameters(tuned, ck);
    auto st2 = restore_state(ck);
    const auto gates = values_of(tuned.params(), ParamGroup::Gate);
    const auto log = finetune_loop(tuned, train, val, toy_train(1), st2);
    REQUIRE(log.size() == 1);
    CHECK(log[0].val_diag_acc >= 0.0);
    CHECK(log[0].val_diag_acc <= 1.0);
    double delta = 0;
    const auto after = values_of(tuned.params(), ParamGroup::Gate);
    for (std::size_t i = 0; i < gates.size(); ++i)
      for (std::size_t j = 0; j < gates[i].size(); ++j) delta += std::abs(after[i][j] - gates[i][j]);
    CHECK(delta > 0.0);
    CHECK(st2.stage == Stage::Finetune);
  }
  SUBCASE("with beta 0 the change head gets no gradient") {
    auto mc = gradcheck_toy_config();
    mc.beta = 0.0;
    M3adModel model(mc, 10);
    Binding bind;
    backward(finetune_batch_loss(model, bind, std::span(train).first(3)));
    bool diag_seen = false;
    for (const auto& g : bind.take_gradients()) {
      if (g.param->name.find("head.change") != std::string::npos)
        for (double v : g.values) CHECK(v == 0.0);
      if (g.param->name.find("head.diagnosis.w") != std::string::npos)
        for (double v : g.values) diag_seen |= v != 0.0;
    }
    CHECK(diag_seen);
  }
  SUBCASE("with all loss weights zero only weight decay acts") {
    auto mc = gradcheck_toy_config();
    mc.alpha = mc.beta = 0.0;
    M3adModel model(mc, 11);
    const auto params = stage_parameters(model.params(), Stage::Finetune);
    std::vector<std::vector<double>> before;
    for (const auto* p : params) before.push_back(p->value);
    TrainState st;
    auto cfg = toy_train(1);
    finetune_loop(model, train, val, cfg, st);
    const std::size_t steps = 3;
    double shrink = 1.0;
    for (std::size_t s = 0; s < steps; ++s)
      shrink *= 1.0 - cosine_lr(static_cast<double>(s), steps, cfg.lr, cfg.lr * cfg.min_lr_ratio) * cfg.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i)
      for (std::size_t j = 0; j < before[i].size(); ++j)
        CHECK(std::abs(params[i]->value[j] - before[i][j] * shrink) <= 1e-14 * (1 + std::abs(before[i][j])));
  }
}

TEST_CASE("checkpoint") {
  TempDir d("ckpt");
  M3adModel model(gradcheck_toy_config(), 12);
  TrainState st;
  st.prior_stats = {71.0, 6.0, 1440.0, 140.0};
  st.optimizer.set_steps(4);
  st.optimizer.moments()["stage0.block0.attn.qkv.w"] = {{1, 2}, {3, 4}};
  const auto path = d / "m.m3ck";
  save_checkpoint(path, make_checkpoint(model, st));
  const auto val = toy_examples(3, 5);

  SUBCASE("round trip restores parameters, moments, statistics and outputs") {
    const auto ck = load_checkpoint(path);
    M3adModel back(ck.model_config(), 77);
    restore_parameters(back, ck);
    CHECK(forward_outputs(back, val) == forward_outputs(model, val));
    const auto st2 = restore_state(ck);
    CHECK(st2.optimizer.steps() == 4);
    CHECK(st2.optimizer.moments().at("stage0.block0.attn.qkv.w").v == std::vector<double>{3, 4});
    CHECK(st2.prior_stats.etiv_std == 140.0);
    CHECK(serialize(ck.model_config()) == serialize(model.config()));
  }
  SUBCASE("truncated file is refused") {
    const auto bytes = slurp(path);
    spit(d / "t.m3ck", bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(d / "t.m3ck"), FormatError);
    spit(d / "x.m3ck", bytes + "x");
    CHECK_THROWS_AS(load_checkpoint(d / "x.m3ck"), FormatError);
  }
  SUBCASE("bad magic and version bump are refused") {
    auto bytes = slurp(path);
    auto v = bytes;
    v[4] = static_cast<char>(2);
    spit(d / "v.m3ck", v);
    CHECK_THROWS_WITH_AS(load_checkpoint(d / "v.m3ck"), doctest::Contains("version"), FormatError);
    bytes[0] = 'X';
    spit(d / "b.m3ck", bytes);
    CHECK_THROWS_AS(load_checkpoint(d / "b.m3ck"), FormatError);
  }
  SUBCASE("inconsistent entries are refused before anything is written") {
    auto ck = make_checkpoint(model, st);
    ck.params[0].values.pop_back();
    CHECK_THROWS_AS(save_checkpoint(d / "bad.m3ck", ck), ContractError);
    CHECK_FALSE(std::filesystem::exists(d / "bad.m3ck"));
    CHECK_FALSE(std::filesystem::exists(d / "bad.m3ck.tmp"));
  }
  SUBCASE("mismatched architecture leaves the model untouched") {
    auto other = gradcheck_toy_config();
    other.embed_dim = 8;
    M3adModel m2(other, 3);
    std::vector<std::vector<double>> before;
    for (const auto& p : m2.params().all()) before.push_back(p->value);
    CHECK_THROWS_AS(restore_parameters(m2, load_checkpoint(path)), FormatError);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(m2.params().all()[i]->value == before[i]);
  }
  SUBCASE("another change scheme keeps fresh heads when asked") {
    auto c9 = gradcheck_toy_config();
    c9.num_change_classes = 7;
    M3adModel m9(c9, 3);
    CHECK_THROWS_AS(restore_parameters(m9, load_checkpoint(path)), FormatError);
    const auto skipped = restore_parameters(m9, load_checkpoint(path), true);
    CHECK(skipped.size() == 2);
    CHECK(m9.params().at("stage0.block0.attn.qkv.w").value == model.params().at("stage0.block0.attn.qkv.w").value);
  }
}
