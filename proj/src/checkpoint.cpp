#include "m3ad/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "binary_io.hpp"
#include "m3ad/errors.hpp"

namespace m3ad {

namespace {

constexpr char kMagic[4] = {'M', '3', 'C', 'K'};

void check_entries(const std::vector<Checkpoint::Entry>& entries) {
  for (const auto& e : entries) {
    if (shape_size(e.shape) != e.values.size()) {
      throw ContractError("checkpoint entry " + e.name + ": " + std::to_string(e.values.size()) + " values for shape " +
                          shape_str(e.shape));
    }
  }
}

void write_entries(detail::LeWriter& w, const std::vector<Checkpoint::Entry>& entries) {
  w.u64(entries.size());
  for (const auto& e : entries) {
    w.str(e.name);
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.u64(d);
    for (double v : e.values) w.f64(v);
  }
}

std::vector<Checkpoint::Entry> read_entries(detail::LeReader& r, const std::string& what) {
  const auto n = r.u64();
  if (n > (1u << 20)) throw FormatError(what + ": implausible entry count");
  std::vector<Checkpoint::Entry> out(n);
  for (auto& e : out) {
    e.name = r.str(4096);
    const auto rank = r.u32();
    if (rank > 8) throw FormatError(what + ": implausible rank for " + e.name);
    e.shape.resize(rank);
    std::size_t size = 1;
    for (auto& d : e.shape) {
      d = r.u64();
      if (d == 0 || d > (1ULL << 32)) throw FormatError(what + ": bad extent for " + e.name);
      size *= d;
    }
    if (size > (1ULL << 31)) throw FormatError(what + ": implausible size for " + e.name);
    e.values.resize(size);
    for (double& v : e.values) v = r.f64();
  }
  return out;
}

}  // namespace

Checkpoint make_checkpoint(const M3adModel& model, const TrainState& state) {
  Checkpoint c;
  c.config_text = serialize(model.config());
  c.stage = state.stage;
  c.epoch = state.epoch;
  c.best_metric = state.best_metric;
  c.best_epoch = state.best_epoch;
  c.prior_stats = state.prior_stats;
  for (const auto& p : model.params().all()) c.params.push_back({p->name, p->shape, p->value});
  c.adam_steps = state.optimizer.steps();
  for (const auto& [name, mo] : state.optimizer.moments()) {
    const Parameter* p = model.params().find(name);
    const Shape shape = p && p->size() == mo.m.size() ? p->shape : Shape{mo.m.size()};
    c.adam_m.push_back({name, shape, mo.m});
    c.adam_v.push_back({name, shape, mo.v});
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  for (const auto* entries : {&c.params, &c.adam_m, &c.adam_v}) check_entries(*entries);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + tmp.string() + " for writing");
    detail::LeWriter w(os);
    w.bytes(kMagic, 4);
    w.u32(kCheckpointVersion);
    w.str(c.config_text);
    w.u32(static_cast<std::uint32_t>(c.stage));
    w.u64(c.epoch);
    w.f64(c.best_metric);
    w.u64(c.best_epoch);
    w.f64(c.prior_stats.age_mean);
    w.f64(c.prior_stats.age_std);
    w.f64(c.prior_stats.etiv_mean);
    w.f64(c.prior_stats.etiv_std);
    write_entries(w, c.params);
    w.u64(c.adam_steps);
    write_entries(w, c.adam_m);
    write_entries(w, c.adam_v);
    if (!os) throw FormatError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  const std::string what = path.string();
  detail::LeReader r(is, what);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(what + ": not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(what + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint c;
  c.config_text = r.str();
  const auto stage = r.u32();
  if (stage > 1) throw FormatError(what + ": unknown stage " + std::to_string(stage));
  c.stage = static_cast<Stage>(stage);
  c.epoch = r.u64();
  c.best_metric = r.f64();
  c.best_epoch = r.u64();
  c.prior_stats.age_mean = r.f64();
  c.prior_stats.age_std = r.f64();
  c.prior_stats.etiv_mean = r.f64();
  c.prior_stats.etiv_std = r.f64();
  c.params = read_entries(r, what);
  c.adam_steps = r.u64();
  c.adam_m = read_entries(r, what);
  c.adam_v = read_entries(r, what);
  if (!r.at_end()) throw FormatError(what + ": trailing bytes after checkpoint");
  return c;
}

std::vector<std::string> restore_parameters(M3adModel& model, const Checkpoint& ckpt, bool reinit_heads) {
  ParameterStore& store = model.params();
  std::vector<std::pair<Parameter*, const Checkpoint::Entry*>> plan;
  std::vector<std::string> skipped;
  for (const auto& e : ckpt.params) {
    Parameter* p = store.find(e.name);
    if (!p) throw FormatError("checkpoint parameter " + e.name + " does not exist in the model");
    if (p->shape != e.shape && reinit_heads && p->group == ParamGroup::Head) {
      skipped.push_back(e.name);
      continue;
    }
    if (p->shape != e.shape) {
      throw FormatError("checkpoint parameter " + e.name + " has shape " + shape_str(e.shape) + ", model expects " +
                        shape_str(p->shape));
    }
    plan.emplace_back(p, &e);
  }
  if (plan.size() + skipped.size() != store.count()) {
    throw FormatError("checkpoint holds " + std::to_string(ckpt.params.size()) + " parameters, model has " +
                      std::to_string(store.count()));
  }
  for (auto& [p, e] : plan) p->value = e->values;
  return skipped;
}

TrainState restore_state(const Checkpoint& ckpt) {
  TrainState s;
  s.stage = ckpt.stage;
  s.epoch = ckpt.epoch;
  s.best_metric = ckpt.best_metric;
  s.best_epoch = ckpt.best_epoch;
  s.prior_stats = ckpt.prior_stats;
  s.optimizer.set_steps(ckpt.adam_steps);
  if (ckpt.adam_m.size() != ckpt.adam_v.size()) throw FormatError("checkpoint moment tables differ in length");
  for (std::size_t i = 0; i < ckpt.adam_m.size(); ++i) {
    auto& mo = s.optimizer.moments()[ckpt.adam_m[i].name];
    mo.m = ckpt.adam_m[i].values;
    mo.v = ckpt.adam_v[i].values;
  }
  return s;
}

}  // namespace m3ad
