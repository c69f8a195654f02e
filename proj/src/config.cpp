#include "m3ad/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "m3ad/errors.hpp"
#include "m3ad/format.hpp"

namespace m3ad {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("invalid number for '" + key + "': '" + v + "'");
  }
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("invalid non-negative integer for '" + key + "': '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("invalid boolean for '" + key + "': '" + v + "'");
}

template <class T, class F>
std::vector<T> parse_list(const std::string& key, const std::string& v, F parse_one) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_one(key, trim(item)));
  if (out.empty()) throw ConfigError("empty list for '" + key + "'");
  return out;
}

template <class T>
std::string fmt_list(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>) {
      out += format_double(xs[i]);
    } else {
      out += std::to_string(xs[i]);
    }
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

#define SIZE_KEY(name, field) \
  {name, [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_uint(k, v); }}
#define DOUBLE_KEY(name, field) \
  {name, [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_double(k, v); }}
#define BOOL_KEY(name, field) \
  {name, [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_bool(k, v); }}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"image_size",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.model.image_size = c.gen.size = parse_uint(k, v); }},
      SIZE_KEY("patch_size", model.patch_size),
      SIZE_KEY("embed_dim", model.embed_dim),
      {"depths",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.depths = parse_list<std::size_t>(k, v, parse_uint);
       }},
      {"heads",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.heads = parse_list<std::size_t>(k, v, parse_uint);
       }},
      SIZE_KEY("window", model.window),
      SIZE_KEY("num_experts", model.num_experts),
      SIZE_KEY("shared_experts", model.shared_experts),
      SIZE_KEY("expert_hidden_ratio", model.expert_hidden_ratio),
      DOUBLE_KEY("w_shared", model.w_shared),
      DOUBLE_KEY("tau_gate", model.tau_gate),
      SIZE_KEY("tokmlp_groups", model.tokmlp_groups),
      SIZE_KEY("fusion_stage", model.fusion_stage),
      {"fusion_type",
       [](RunConfig& c, const std::string&, const std::string& v) { c.model.fusion_type = parse_fusion_type(v); }},
      {"prior_hidden",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.prior_hidden = parse_list<std::size_t>(k, v, parse_uint);
       }},
      SIZE_KEY("num_change_classes", model.num_change_classes),
      DOUBLE_KEY("mask_ratio", model.mask_ratio),
      SIZE_KEY("mask_unit", model.mask_unit),
      DOUBLE_KEY("lambda_expert", model.lambda_expert),
      DOUBLE_KEY("alpha", model.alpha),
      DOUBLE_KEY("beta", model.beta),
      DOUBLE_KEY("ln_eps", model.ln_eps),

      DOUBLE_KEY("lr", train.lr),
      DOUBLE_KEY("min_lr_ratio", train.min_lr_ratio),
      DOUBLE_KEY("weight_decay", train.weight_decay),
      DOUBLE_KEY("clip_norm", train.clip_norm),
      DOUBLE_KEY("adam_beta1", train.adam_beta1),
      DOUBLE_KEY("adam_beta2", train.adam_beta2),
      DOUBLE_KEY("adam_eps", train.adam_eps),
      SIZE_KEY("epochs", train.epochs),
      SIZE_KEY("batch_size", train.batch_size),
      SIZE_KEY("patience", train.patience),
      SIZE_KEY("seed", train.seed),
      BOOL_KEY("deterministic", train.deterministic),
      BOOL_KEY("single_task", train.single_task),
      DOUBLE_KEY("target_metric", train.target_metric),

      SIZE_KEY("n", gen.n),
      {"size",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.gen.size = c.model.image_size = parse_uint(k, v); }},
      {"scheme",
       [](RunConfig& c, const std::string&, const std::string& v) {
         c.gen.scheme = parse_label_scheme(v);
         c.model.num_change_classes = c.gen.scheme == LabelScheme::C3 ? 3 : 7;
       }},
      DOUBLE_KEY("train_frac", gen.train_frac),
      DOUBLE_KEY("val_frac", gen.val_frac),
      DOUBLE_KEY("test_frac", gen.test_frac),
      {"change_priors",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.gen.change_priors = parse_list<double>(k, v, parse_double);
       }},
      DOUBLE_KEY("noise", gen.noise),
  };
  return table;
}

#undef SIZE_KEY
#undef DOUBLE_KEY
#undef BOOL_KEY

}  // namespace

std::string to_string(FusionType t) {
  switch (t) {
    case FusionType::Adaptive: return "adaptive";
    case FusionType::Concat: return "concat";
    case FusionType::Add: return "add";
    case FusionType::Hadamard: return "hadamard";
  }
  return "?";
}

FusionType parse_fusion_type(const std::string& s) {
  if (s == "adaptive") return FusionType::Adaptive;
  if (s == "concat") return FusionType::Concat;
  if (s == "add") return FusionType::Add;
  if (s == "hadamard") return FusionType::Hadamard;
  throw ConfigError("unknown fusion_type '" + s + "' (expected adaptive|concat|add|hadamard)");
}

std::string to_string(LabelScheme s) { return s == LabelScheme::C3 ? "C3" : "C9"; }

LabelScheme parse_label_scheme(const std::string& s) {
  if (s == "C3" || s == "c3") return LabelScheme::C3;
  if (s == "C9" || s == "c9") return LabelScheme::C9;
  throw ConfigError("unknown label scheme '" + s + "' (expected C3|C9)");
}

ModelConfig ModelConfig::reference() {
  ModelConfig c;
  c.image_size = 256;
  c.embed_dim = 96;
  c.depths = {2, 2, 6, 2};
  c.heads = {3, 6, 12, 24};
  return c;
}

std::size_t ModelConfig::stage_dim(std::size_t s) const { return embed_dim << s; }

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (patch_size == 0 || embed_dim == 0 || window == 0) fail("patch_size, embed_dim and window must be positive");
  if (image_size == 0 || image_size % final_stride() != 0) {
    fail("image_size " + std::to_string(image_size) + " must be a positive multiple of " +
         std::to_string(final_stride()));
  }
  if (depths.size() != 4 || heads.size() != 4) fail("depths and heads must list 4 stages");
  for (std::size_t s = 0; s < 2; ++s) {
    const std::size_t grid = image_size / (patch_size << s);
    if (depths[s] == 0 || depths[s] % 2 != 0) fail("attention stage depths must be positive and even");
    if (heads[s] == 0 || stage_dim(s) % heads[s] != 0) {
      fail("stage " + std::to_string(s) + " dim " + std::to_string(stage_dim(s)) + " not divisible by heads");
    }
    if (grid % std::min(window, grid) != 0) fail("stage grid not divisible by window");
  }
  if (depths[2] == 0 || depths[3] == 0) fail("tok-mlp stage depths must be positive");
  if (num_experts == 0 || shared_experts >= num_experts || (num_experts - shared_experts) != 2 * num_diag_classes) {
    fail("expert bank must hold shared experts plus two per diagnosis class");
  }
  if (expert_hidden_ratio == 0) fail("expert_hidden_ratio must be positive");
  if (!(w_shared >= 0.0 && w_shared <= 1.0)) fail("w_shared must lie in [0,1]");
  if (!(tau_gate > 0.0)) fail("tau_gate must be positive");
  if (tokmlp_groups == 0) fail("tokmlp_groups must be positive");
  if (fusion_stage > 3) fail("fusion_stage must be in {0,1,2,3}");
  if (prior_hidden.size() != 2) fail("prior_hidden must list two widths");
  if (num_diag_classes != 3) fail("num_diag_classes is fixed at 3");
  if (num_change_classes != 3 && num_change_classes != 7) fail("num_change_classes must be 3 or 7");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) fail("mask_ratio must lie in (0,1)");
  if (mask_unit == 0 || mask_unit % patch_size != 0 || image_size % mask_unit != 0) {
    fail("mask_unit must be a multiple of patch_size that divides image_size");
  }
  if (lambda_expert < 0 || alpha < 0 || beta < 0) fail("loss weights must be non-negative");
  if (!(ln_eps > 0)) fail("ln_eps must be positive");
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (!(clip_norm > 0)) throw ConfigError("clip_norm must be positive");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (!(min_lr_ratio >= 0 && min_lr_ratio <= 1)) throw ConfigError("min_lr_ratio must lie in [0,1]");
}

void GenConfig::validate() const {
  if (size == 0 || size % 32 != 0) throw ConfigError("size must be a positive multiple of 32");
  const double total = train_frac + val_frac + test_frac;
  if (train_frac < 0 || val_frac < 0 || test_frac < 0 || std::fabs(total - 1.0) > 1e-9) {
    throw ConfigError("train/val/test fractions must be non-negative and sum to 1");
  }
  if (change_priors.size() != 3) throw ConfigError("change_priors must list three frequencies");
  for (double p : change_priors)
    if (p < 0) throw ConfigError("change_priors must be non-negative");
  if (change_priors[0] + change_priors[1] + change_priors[2] <= 0) throw ConfigError("change_priors sum to zero");
  if (noise < 0) throw ConfigError("noise must be non-negative");
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& table = setters();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key: " + key);
  it->second(*this, key, value);
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  gen.validate();
  if (model.num_change_classes != (gen.scheme == LabelScheme::C3 ? 3u : 7u)) {
    throw ConfigError("num_change_classes " + std::to_string(model.num_change_classes) + " does not match scheme " +
                      to_string(gen.scheme));
  }
  if (gen.size != model.image_size) {
    throw ConfigError("generated image size " + std::to_string(gen.size) + " differs from image_size " +
                      std::to_string(model.image_size));
  }
}

std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    auto existing = std::find_if(out.begin(), out.end(), [&](const auto& kv) { return kv.first == key; });
    if (existing != out.end()) {
      existing->second = value;
    } else {
      out.emplace_back(std::move(key), std::move(value));
    }
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> read_key_value_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_key_values(ss.str());
}

RunConfig load_run_config(const std::filesystem::path& path) {
  RunConfig cfg;
  for (const auto& [k, v] : read_key_value_file(path)) cfg.set(k, v);
  return cfg;
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override must be key=value, got '" + assignment + "'");
  cfg.set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string serialize(const ModelConfig& c) {
  std::ostringstream os;
  os << "image_size = " << c.image_size << '\n'
     << "patch_size = " << c.patch_size << '\n'
     << "embed_dim = " << c.embed_dim << '\n'
     << "depths = " << fmt_list(c.depths) << '\n'
     << "heads = " << fmt_list(c.heads) << '\n'
     << "window = " << c.window << '\n'
     << "num_experts = " << c.num_experts << '\n'
     << "shared_experts = " << c.shared_experts << '\n'
     << "expert_hidden_ratio = " << c.expert_hidden_ratio << '\n'
     << "w_shared = " << format_double(c.w_shared) << '\n'
     << "tau_gate = " << format_double(c.tau_gate) << '\n'
     << "tokmlp_groups = " << c.tokmlp_groups << '\n'
     << "fusion_stage = " << c.fusion_stage << '\n'
     << "fusion_type = " << to_string(c.fusion_type) << '\n'
     << "prior_hidden = " << fmt_list(c.prior_hidden) << '\n'
     << "num_change_classes = " << c.num_change_classes << '\n'
     << "mask_ratio = " << format_double(c.mask_ratio) << '\n'
     << "mask_unit = " << c.mask_unit << '\n'
     << "lambda_expert = " << format_double(c.lambda_expert) << '\n'
     << "alpha = " << format_double(c.alpha) << '\n'
     << "beta = " << format_double(c.beta) << '\n'
     << "ln_eps = " << format_double(c.ln_eps) << '\n';
  return os.str();
}

ModelConfig deserialize_model_config(const std::string& text) {
  RunConfig rc;
  for (const auto& [k, v] : parse_key_values(text)) rc.set(k, v);
  return rc.model;
}

}  // namespace m3ad
