#include "m3ad/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>
#include <random>
#include <utility>

#include "m3ad/backbone.hpp"
#include "m3ad/grad_check.hpp"
#include "m3ad/model.hpp"
#include "m3ad/moe.hpp"
#include "m3ad/ops.hpp"
#include "m3ad/priors.hpp"
#include "m3ad/tokmlp.hpp"

namespace m3ad {

namespace {

constexpr double kEps = 1e-5;

using Rng = std::mt19937_64;

std::vector<double> uniform(Rng& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

Tensor leaf(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  const auto n = numel(shape);
  return Tensor::from(std::move(shape), uniform(rng, n, lo, hi), true);
}

// Magnitudes in [lo, hi] with random sign, keeping kinks out of reach of eps.
Tensor signed_leaf(Rng& rng, Shape shape, double lo, double hi) {
  const auto n = numel(shape);
  auto v = uniform(rng, n, lo, hi);
  std::bernoulli_distribution flip(0.5);
  for (double& x : v)
    if (flip(rng)) x = -x;
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Random linear functional of `y`: sum(w * y) with fixed w.
Tensor project(const Tensor& y, const std::vector<double>& w) {
  return ops::sum(ops::mul(y, Tensor::from(y.shape(), w)));
}

struct Case {
  std::vector<Tensor> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> op;
};

using CaseBuilder = std::function<Case(Rng&)>;

std::vector<std::pair<std::string, CaseBuilder>> primitive_cases() {
  using In = const std::vector<Tensor>&;
  std::vector<std::pair<std::string, CaseBuilder>> c;
  auto unary = [&](std::string name, std::function<Tensor(const Tensor&)> f, double lo, double hi, bool sign) {
    c.emplace_back(std::move(name), [f, lo, hi, sign](Rng& r) {
      Tensor x = sign ? signed_leaf(r, {3, 4}, lo, hi) : leaf(r, {3, 4}, lo, hi);
      return Case{{x}, [f](In in) { return f(in[0]); }};
    });
  };
  c.emplace_back("add", [](Rng& r) { return Case{{leaf(r, {3, 4}), leaf(r, {4})}, [](In in) { return ops::add(in[0], in[1]); }}; });
  c.emplace_back("sub", [](Rng& r) { return Case{{leaf(r, {3, 4}), leaf(r, {3, 1})}, [](In in) { return ops::sub(in[0], in[1]); }}; });
  c.emplace_back("mul", [](Rng& r) { return Case{{leaf(r, {2, 3, 4}), leaf(r, {3, 4})}, [](In in) { return ops::mul(in[0], in[1]); }}; });
  c.emplace_back("div", [](Rng& r) {
    return Case{{leaf(r, {3, 4}), signed_leaf(r, {4}, 0.5, 2.0)}, [](In in) { return ops::div(in[0], in[1]); }};
  });
  unary("neg", [](const Tensor& x) { return ops::neg(x); }, -1, 1, false);
  unary("scale", [](const Tensor& x) { return ops::scale(x, -1.7); }, -1, 1, false);
  unary("add_scalar", [](const Tensor& x) { return ops::add_scalar(x, 0.3); }, -1, 1, false);
  unary("relu", [](const Tensor& x) { return ops::relu(x); }, 0.01, 2.0, true);
  unary("gelu", [](const Tensor& x) { return ops::gelu(x); }, -3, 3, false);
  unary("sigmoid", [](const Tensor& x) { return ops::sigmoid(x); }, -4, 4, false);
  unary("softplus", [](const Tensor& x) { return ops::softplus(x); }, -4, 4, false);
  unary("exp", [](const Tensor& x) { return ops::exp(x); }, -2, 2, false);
  unary("log", [](const Tensor& x) { return ops::log(x); }, 0.2, 3.0, false);
  unary("abs", [](const Tensor& x) { return ops::abs(x); }, 0.01, 2.0, true);
  c.emplace_back("matmul", [](Rng& r) { return Case{{leaf(r, {3, 4}), leaf(r, {4, 5})}, [](In in) { return ops::matmul(in[0], in[1]); }}; });
  c.emplace_back("matmul_batched", [](Rng& r) {
    return Case{{leaf(r, {2, 3, 4}), leaf(r, {2, 4, 5})}, [](In in) { return ops::matmul(in[0], in[1]); }};
  });
  c.emplace_back("matmul_broadcast", [](Rng& r) {
    return Case{{leaf(r, {2, 3, 4}), leaf(r, {4, 2})}, [](In in) { return ops::matmul(in[0], in[1]); }};
  });
  c.emplace_back("linear", [](Rng& r) {
    return Case{{leaf(r, {3, 4}), leaf(r, {4, 5}), leaf(r, {5})}, [](In in) { return ops::linear(in[0], in[1], in[2]); }};
  });
  c.emplace_back("transpose", [](Rng& r) { return Case{{leaf(r, {2, 3, 4})}, [](In in) { return ops::transpose(in[0]); }}; });
  c.emplace_back("reshape", [](Rng& r) { return Case{{leaf(r, {3, 4})}, [](In in) { return ops::reshape(in[0], {2, 6}); }}; });
  c.emplace_back("gather", [](Rng& r) {
    return Case{{leaf(r, {6})}, [](In in) { return ops::gather(in[0], {0, 3, 3, 5, 1, 3}, {2, 3}); }};
  });
  c.emplace_back("slice_rows", [](Rng& r) { return Case{{leaf(r, {5, 3})}, [](In in) { return ops::slice_rows(in[0], 1, 3); }}; });
  c.emplace_back("concat_last", [](Rng& r) {
    return Case{{leaf(r, {3, 2}), leaf(r, {3, 4})}, [](In in) { return ops::concat_last(in[0], in[1]); }};
  });
  c.emplace_back("pick", [](Rng& r) { return Case{{leaf(r, {3, 4})}, [](In in) { return ops::pick(in[0], 7); }}; });
  c.emplace_back("sum", [](Rng& r) { return Case{{leaf(r, {3, 4})}, [](In in) { return ops::sum(in[0]); }}; });
  c.emplace_back("mean", [](Rng& r) { return Case{{leaf(r, {3, 4})}, [](In in) { return ops::mean(in[0]); }}; });
  c.emplace_back("mean_rows", [](Rng& r) { return Case{{leaf(r, {5, 3})}, [](In in) { return ops::mean_rows(in[0]); }}; });
  c.emplace_back("softmax_last", [](Rng& r) { return Case{{leaf(r, {3, 5}, -2, 2)}, [](In in) { return ops::softmax(in[0]); }}; });
  c.emplace_back("softmax_axis0", [](Rng& r) {
    return Case{{leaf(r, {4, 2, 3}, -2, 2)}, [](In in) { return ops::softmax(in[0], 0); }};
  });
  c.emplace_back("layer_norm", [](Rng& r) {
    return Case{{leaf(r, {3, 6}, -2, 2), leaf(r, {6}, 0.5, 1.5), leaf(r, {6})},
                [](In in) { return ops::layer_norm(in[0], in[1], in[2]); }};
  });
  c.emplace_back("l2_normalize", [](Rng& r) { return Case{{leaf(r, {3, 4})}, [](In in) { return ops::l2_normalize(in[0]); }}; });
  c.emplace_back("conv3x3", [](Rng& r) {
    return Case{{leaf(r, {4, 5, 2}), leaf(r, {3, 3, 2, 3}), leaf(r, {3})},
                [](In in) { return ops::conv3x3(in[0], in[1], in[2]); }};
  });
  c.emplace_back("dwconv3x3", [](Rng& r) {
    return Case{{leaf(r, {4, 5, 3}), leaf(r, {3, 3, 3}), leaf(r, {3})},
                [](In in) { return ops::dwconv3x3(in[0], in[1], in[2]); }};
  });
  c.emplace_back("cross_entropy", [](Rng& r) {
    std::vector<int> labels(4);
    std::uniform_int_distribution<int> d(0, 4);
    for (int& y : labels) y = d(r);
    return Case{{leaf(r, {4, 5}, -2, 2)}, [labels](In in) { return ops::cross_entropy(in[0], labels); }};
  });
  c.emplace_back("masked_l1", [](Rng& r) {
    Tensor target = Tensor::from({12}, uniform(r, 12, -1, 1));
    // pred = target + offset with |offset| >= 0.01
    Tensor offset = signed_leaf(r, {12}, 0.01, 1.0);
    std::vector<std::uint32_t> idx{0, 2, 3, 7, 8, 11};
    return Case{{offset}, [target, idx](In in) { return ops::masked_l1(ops::add(target, in[0]), target, idx); }};
  });
  return c;
}

GradCheckReport check_primitive(const std::string& name, const CaseBuilder& build, std::uint64_t seed,
                                std::size_t points) {
  GradCheckReport rep{name, true, 0.0, 0, kPrimitiveGradTolerance};
  for (std::size_t p = 0; p < points; ++p) {
    Rng rng(derive_seed(seed, p));
    Case cs = build(rng);
    Tensor probe = cs.op(cs.inputs);
    const auto w = uniform(rng, probe.size(), -1.0, 1.0);
    auto f = [&] { return project(cs.op(cs.inputs), w); };
    const auto res = grad_check(f, cs.inputs, kEps, 0, seed + p);
    rep.max_rel_error = std::max(rep.max_rel_error, res.max_rel_error);
    rep.coordinates += res.coordinates_checked;
  }
  return rep;
}

// Adds a trainable stand-in for an input tensor so that grad_check_params
// covers input gradients as well.
Parameter& input_param(ParameterStore& store, const std::string& name, Shape shape, Rng& rng) {
  const auto n = numel(shape);
  return store.add(name, ParamGroup::Backbone, std::move(shape), uniform(rng, n, -1.0, 1.0));
}

// Nudges every parameter off its initializer so that zero-initialized
// biases and unit gains do not hide gradient terms.
void jitter(ParameterStore& store, Rng& rng, double scale) {
  std::normal_distribution<double> d(0.0, scale);
  for (const auto& p : store.all())
    for (double& v : p->value) v += d(rng);
}

std::vector<Parameter*> all_params(ParameterStore& store) {
  std::vector<Parameter*> out;
  for (const auto& p : store.all()) out.push_back(p.get());
  return out;
}

GradCheckReport module_report(std::string name, const GradCheckResult& r) {
  return {std::move(name), false, r.max_rel_error, r.coordinates_checked, kModuleGradTolerance};
}

GradCheckReport check_m3ad_block(std::uint64_t seed, std::size_t window, std::size_t shift, Routing routing,
                                 const std::string& name) {
  Rng rng(seed);
  ModelConfig cfg;
  cfg.embed_dim = 8;
  ParameterStore store;
  M3adBlock block(store, "block", 8, 2, window, shift, cfg, 0, rng);
  jitter(store, rng, 0.05);
  Parameter& z = input_param(store, "input.z", {16, 8}, rng);
  const auto w = uniform(rng, 16 * 8, -1.0, 1.0);
  auto f = [&](Binding& bind) {
    ForwardContext ctx{bind, routing};
    return project(block.forward(ctx, bind(z), Grid{4, 4}), w);
  };
  return module_report(name, grad_check_params(f, all_params(store), kEps, 0, seed));
}

GradCheckReport check_tokmlp_block(std::uint64_t seed) {
  Rng rng(seed);
  ParameterStore store;
  TokMlpBlock block(store, "tok", 8, 5, 1e-5, rng);
  jitter(store, rng, 0.05);
  Parameter& x = input_param(store, "input.x", {16, 8}, rng);
  const auto w = uniform(rng, 16 * 8, -1.0, 1.0);
  auto f = [&](Binding& bind) { return project(block.forward(bind, bind(x), Grid{4, 4}), w); };
  return module_report("tokmlp_block", grad_check_params(f, all_params(store), kEps, 0, seed));
}

GradCheckReport check_prior_encoder(std::uint64_t seed) {
  Rng rng(seed);
  ModelConfig cfg;
  cfg.embed_dim = 2;
  cfg.fusion_stage = 1;
  cfg.prior_hidden = {8, 8};
  ParameterStore store;
  PriorEncoder enc(store, "prior", cfg, rng);
  jitter(store, rng, 0.05);
  Parameter& p = input_param(store, "input.p", {3}, rng);
  const auto w = uniform(rng, enc.out_dim(), -1.0, 1.0);
  auto f = [&](Binding& bind) { return project(enc.forward(bind, bind(p)), w); };
  return module_report("prior_encoder", grad_check_params(f, all_params(store), kEps, 0, seed));
}

GradCheckReport check_fusion(std::uint64_t seed, FusionType type) {
  Rng rng(seed);
  ParameterStore store;
  Fusion fusion(store, "fusion", type, 8, rng);
  jitter(store, rng, 0.1);
  Parameter& x = input_param(store, "input.x", {6, 8}, rng);
  Parameter& pc = input_param(store, "input.p", {8}, rng);
  const auto w = uniform(rng, 6 * 8, -1.0, 1.0);
  auto f = [&](Binding& bind) { return project(fusion.forward(bind, bind(x), bind(pc)), w); };
  return module_report("fusion_" + to_string(type), grad_check_params(f, all_params(store), kEps, 0, seed));
}

GradCheckReport check_moe_pieces(std::uint64_t seed) {
  Rng rng(seed);
  ModelConfig cfg;
  ParameterStore store;
  MoeLayer layer(store, "moe", 6, cfg, 0, rng);
  jitter(store, rng, 0.05);
  Parameter& x = input_param(store, "input.x", {5, 6}, rng);
  const auto w = uniform(rng, 5 * 6, -1.0, 1.0);
  auto f = [&](Binding& bind) {
    ForwardContext ctx{bind, Routing::gated(Task::Change)};
    return project(layer.forward(ctx, bind(x)), w);
  };
  return module_report("mmoe_layer", grad_check_params(f, all_params(store), kEps, 0, seed));
}

GradCheckReport check_attention(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor> in{leaf(rng, {4, 9, 3}), leaf(rng, {4, 9, 3}), leaf(rng, {4, 9, 3}), leaf(rng, {2}, -0.5, 0.5),
                         leaf(rng, {2, 9, 9}, -0.5, 0.5)};
  const auto w = uniform(rng, 4 * 9 * 3, -1.0, 1.0);
  auto f = [&] { return project(cosine_attention(in[0], in[1], in[2], in[3], in[4]).output, w); };
  return module_report("cosine_attention", grad_check(f, in, kEps, 0, seed));
}

std::vector<Example> toy_batch(const ModelConfig& cfg, Rng& rng) {
  const std::size_t s = cfg.image_size;
  std::vector<Example> batch;
  const int diags[2] = {0, 2};
  for (int i = 0; i < 2; ++i) {
    Example ex;
    ex.image = Tensor::from({s, s}, uniform(rng, s * s, 0.0, 1.0));
    ex.priors = Tensor::from({3}, {uniform(rng, 1, -1.5, 1.5)[0], static_cast<double>(i), uniform(rng, 1, -1.5, 1.5)[0]});
    ex.diag = diags[i];
    ex.change = i;
    batch.push_back(std::move(ex));
  }
  return batch;
}

}  // namespace

ModelConfig gradcheck_toy_config() {
  ModelConfig cfg;
  cfg.image_size = 32;
  cfg.embed_dim = 4;
  cfg.depths = {2, 2, 1, 1};
  cfg.heads = {1, 2, 4, 8};
  cfg.window = 4;
  cfg.expert_hidden_ratio = 2;
  cfg.prior_hidden = {8, 8};
  cfg.fusion_stage = 1;
  return cfg;
}

std::vector<GradCheckReport> primitive_gradchecks(std::uint64_t seed, std::size_t points) {
  std::vector<GradCheckReport> out;
  std::uint64_t k = 0;
  for (const auto& [name, build] : primitive_cases()) out.push_back(check_primitive(name, build, derive_seed(seed, ++k), points));
  return out;
}

std::vector<GradCheckReport> module_gradchecks(std::uint64_t seed, const ModelConfig& toy, std::size_t coords_per_param) {
  std::vector<GradCheckReport> out;
  out.push_back(check_attention(derive_seed(seed, 101)));
  out.push_back(check_moe_pieces(derive_seed(seed, 102)));
  out.push_back(check_m3ad_block(derive_seed(seed, 103), 4, 0, Routing::gated(Task::Diagnosis), "m3ad_block"));
  out.push_back(check_m3ad_block(derive_seed(seed, 104), 2, 1, Routing::gated(Task::Change), "m3ad_block_shifted"));
  out.push_back(check_m3ad_block(derive_seed(seed, 105), 4, 0, Routing::label_guided(kMCI), "m3ad_block_label_guided"));
  out.push_back(check_tokmlp_block(derive_seed(seed, 106)));
  out.push_back(check_prior_encoder(derive_seed(seed, 107)));
  for (auto t : {FusionType::Adaptive, FusionType::Concat, FusionType::Add, FusionType::Hadamard})
    out.push_back(check_fusion(derive_seed(seed, 108 + static_cast<std::uint64_t>(t)), t));

  M3adModel model(toy, seed);
  Rng rng(derive_seed(seed, 120));
  jitter(model.params(), rng, 0.02);
  const auto batch = toy_batch(toy, rng);
  auto params = all_params(model.params());

  auto finetune = [&](Binding& bind) { return finetune_batch_loss(model, bind, batch); };
  out.push_back(module_report("finetune_loss", grad_check_params(finetune, params, kEps, coords_per_param, seed)));

  std::vector<MaskSpec> masks;
  for (std::size_t i = 0; i < batch.size(); ++i)
    masks.push_back(sample_mask(rng, toy.image_size, toy.image_size, toy.mask_unit, toy.mask_ratio));
  auto pretrain = [&](Binding& bind) { return pretrain_loss(model, bind, batch, masks); };
  out.push_back(module_report("pretrain_loss", grad_check_params(pretrain, params, kEps, coords_per_param, seed + 1)));
  return out;
}

std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed) {
  auto out = primitive_gradchecks(seed);
  auto mods = module_gradchecks(seed, gradcheck_toy_config());
  out.insert(out.end(), mods.begin(), mods.end());
  return out;
}

}  // namespace m3ad
