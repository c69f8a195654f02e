#include "m3ad/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "m3ad/checkpoint.hpp"
#include "m3ad/config.hpp"
#include "m3ad/data.hpp"
#include "m3ad/errors.hpp"
#include "m3ad/format.hpp"
#include "m3ad/gradcheck_suite.hpp"
#include "m3ad/metrics.hpp"
#include "m3ad/parallel.hpp"
#include "m3ad/train.hpp"

namespace m3ad {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

void add_common(CLI::App& cmd, Common& c) {
  cmd.add_option("--config", c.config, "key = value config file")->check(CLI::ExistingFile);
  cmd.add_option("--set", c.sets, "override one setting (key=value), repeatable")->take_all();
  cmd.add_option("--seed", c.seed, "master seed");
  cmd.add_option("-o,--out", c.out, "output directory");
}

// Config file, then --set in order, then --seed.
void apply_settings(RunConfig& rc, const Common& c) {
  if (!c.config.empty())
    for (const auto& [k, v] : read_key_value_file(c.config)) rc.set(k, v);
  for (const auto& s : c.sets) apply_override(rc, s);
  if (c.seed) rc.train.seed = *c.seed;
  rc.validate();
}

RunConfig settings_for_model(const ModelConfig& model, const Common& c) {
  RunConfig rc;
  rc.model = model;
  rc.gen.scheme = model.num_change_classes == 7 ? LabelScheme::C9 : LabelScheme::C3;
  rc.gen.size = model.image_size;
  apply_settings(rc, c);
  return rc;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw FormatError("write failed: " + path.string());
}

fs::path prepare_out(const Common& c) {
  fs::path out(c.out);
  fs::create_directories(out);
  return out;
}

struct Dataset {
  std::vector<SampleRecord> records;
  fs::path dir;
};

Dataset open_dataset(const std::string& dir, LabelScheme scheme) {
  Dataset d{{}, fs::path(dir)};
  d.records = load_manifest(d.dir / "manifest.csv", scheme);
  return d;
}

std::vector<Example> split_examples(const Dataset& d, Split s, const PriorStats& stats) {
  const auto recs = filter_split(d.records, s);
  if (recs.empty()) throw DataError(std::string("split '") + split_name(s) + "' of " + d.dir.string() + " is empty");
  return load_examples(recs, d.dir, stats);
}

TrainHooks log_hooks(std::ostream& err, Stage stage, std::size_t epochs) {
  TrainHooks h;
  h.epoch_end = [&err, stage, epochs](const EpochLog& e) {
    char line[256];
    if (stage == Stage::Pretrain) {
      std::snprintf(line, sizeof line, "[pretrain] epoch %zu/%zu lr %.3e loss %.5f val_l1 %.5f (%.1fs)", e.epoch,
                    epochs, e.lr, e.train_loss, e.val_metric, e.seconds);
    } else {
      std::snprintf(line, sizeof line, "[finetune] epoch %zu/%zu lr %.3e loss %.5f val_diag %.4f val_change %.4f (%.1fs)",
                    e.epoch, epochs, e.lr, e.train_loss, e.val_diag_acc, e.val_change_acc, e.seconds);
    }
    err << line << '\n' << std::flush;
  };
  return h;
}

int cmd_gen_data(const Common& c, std::ostream& err) {
  RunConfig rc;
  apply_settings(rc, c);
  const auto out = prepare_out(c);
  const auto recs = gen_synthetic(rc.gen, rc.train.seed, out);
  err << "[gen-data] wrote " << recs.size() << " samples to " << out.string() << '\n';
  return kExitOk;
}

int cmd_pretrain(const Common& c, const std::string& data, std::ostream& err) {
  RunConfig rc;
  apply_settings(rc, c);
  const auto ds = open_dataset(data, rc.gen.scheme);
  const auto stats = fit_prior_stats(filter_split(ds.records, Split::Train));
  const auto train = split_examples(ds, Split::Train, stats);
  const auto val = split_examples(ds, Split::Val, stats);
  const auto out = prepare_out(c);

  M3adModel model(rc.model, rc.train.seed);
  TrainState state;
  state.prior_stats = stats;
  err << "[pretrain] " << train.size() << " train / " << val.size() << " val, " << worker_count() << " worker(s)\n";
  const auto log = pretrain_loop(model, train, val, rc.train, state, log_hooks(err, Stage::Pretrain, rc.train.epochs));
  write_text(out / "pretrain_log.csv", epoch_log_csv(log));
  save_checkpoint(out / "checkpoint.m3ck", make_checkpoint(model, state));
  err << "[pretrain] best val_l1 " << state.best_metric << " at epoch " << state.best_epoch << '\n';
  return kExitOk;
}

int cmd_finetune(const Common& c, const std::string& data, const std::string& init, std::ostream& err) {
  std::optional<Checkpoint> ckpt;
  RunConfig rc;
  if (!init.empty()) {
    ckpt = load_checkpoint(init);
    rc = settings_for_model(ckpt->model_config(), c);
  } else {
    apply_settings(rc, c);
  }
  const auto ds = open_dataset(data, rc.gen.scheme);
  const auto stats = fit_prior_stats(filter_split(ds.records, Split::Train));
  const auto train = split_examples(ds, Split::Train, stats);
  const auto val = split_examples(ds, Split::Val, stats);
  const auto out = prepare_out(c);

  M3adModel model(rc.model, rc.train.seed);
  if (ckpt) {
    for (const auto& name : restore_parameters(model, *ckpt, true))
      err << "[finetune] " << name << " re-initialized (shape differs from " << init << ")\n";
  }
  TrainState state;
  state.prior_stats = stats;
  err << "[finetune] " << train.size() << " train / " << val.size() << " val, " << worker_count() << " worker(s)\n";
  const auto log = finetune_loop(model, train, val, rc.train, state, log_hooks(err, Stage::Finetune, rc.train.epochs));
  write_text(out / "finetune_log.csv", epoch_log_csv(log));
  save_checkpoint(out / "checkpoint.m3ck", make_checkpoint(model, state));
  err << "[finetune] best val accuracy " << state.best_metric << " at epoch " << state.best_epoch << '\n';
  return kExitOk;
}

struct Loaded {
  Checkpoint ckpt;
  RunConfig rc;
  std::unique_ptr<M3adModel> model;
};

Loaded load_model(const std::string& path, const Common& c) {
  Loaded l{load_checkpoint(path), {}, nullptr};
  l.rc = settings_for_model(l.ckpt.model_config(), c);
  l.model = std::make_unique<M3adModel>(l.ckpt.model_config(), l.rc.train.seed);
  restore_parameters(*l.model, l.ckpt);
  return l;
}

int cmd_eval(const Common& c, const std::string& data, const std::string& checkpoint, const std::string& split,
             std::ostream& err) {
  const auto l = load_model(checkpoint, c);
  const auto ds = open_dataset(data, l.rc.gen.scheme);
  const auto examples = split_examples(ds, parse_split(split), l.ckpt.prior_stats);
  const auto out = prepare_out(c);

  const auto pred = predict(*l.model, examples);
  const auto& mc = l.model->config();
  const auto cm_d = confusion(pred.diag_true, pred.diag_pred, mc.num_diag_classes);
  const auto cm_c = confusion(pred.change_true, pred.change_pred, mc.num_change_classes);
  const auto rep_d = report(cm_d);
  const auto rep_c = report(cm_c);
  write_text(out / "metrics_diagnosis.csv", report_csv(rep_d));
  write_text(out / "confusion_diagnosis.csv", confusion_csv(cm_d));
  write_text(out / "metrics_change.csv", report_csv(rep_c));
  write_text(out / "confusion_change.csv", confusion_csv(cm_c));
  for (const auto& [task, rep] : {std::pair{"diagnosis", &rep_d}, std::pair{"change", &rep_c}})
    for (auto k : rep->undefined_f1)
      err << "[eval] warning: " << task << " class " << k << " has undefined F1, excluded from macro-F1\n";
  err << "[eval] " << examples.size() << " " << split << " samples: diagnosis acc " << rep_d.accuracy
      << ", change acc " << rep_c.accuracy << '\n';
  return kExitOk;
}

int cmd_inspect_gates(const Common& c, const std::string& data, const std::string& checkpoint,
                      const std::string& split, std::ostream& err) {
  const auto l = load_model(checkpoint, c);
  const auto ds = open_dataset(data, l.rc.gen.scheme);
  const auto examples = split_examples(ds, parse_split(split), l.ckpt.prior_stats);
  const auto out = prepare_out(c);

  std::ostringstream csv;
  csv << "layer,task";
  for (std::size_t e = 0; e < l.model->config().num_experts; ++e) csv << ",expert" << e;
  csv << '\n';
  for (const auto& g : mean_gate_weights(*l.model, examples)) {
    csv << g.layer << ',' << task_name(g.task);
    for (double w : g.mean) csv << ',' << format_double(w);
    csv << '\n';
  }
  write_text(out / "gates.csv", csv.str());
  err << "[inspect-gates] wrote " << (out / "gates.csv").string() << '\n';
  return kExitOk;
}

int cmd_gradcheck(const Common& c, std::size_t points, std::size_t coords, std::ostream& out, std::ostream& err) {
  RunConfig rc;
  rc.model = gradcheck_toy_config();
  rc.gen.size = rc.model.image_size;
  apply_settings(rc, c);
  const auto t0 = std::chrono::steady_clock::now();
  auto reports = primitive_gradchecks(rc.train.seed, points);
  const auto mods = module_gradchecks(rc.train.seed, rc.model, coords);
  reports.insert(reports.end(), mods.begin(), mods.end());

  std::ostringstream csv;
  csv << "name,kind,max_rel_error,threshold,coordinates,passed\n";
  bool ok = true;
  for (const auto& r : reports) {
    char line[160];
    std::snprintf(line, sizeof line, "%-26s %-9s max_rel_error %.3e (< %.0e) %s", r.name.c_str(),
                  r.primitive ? "primitive" : "module", r.max_rel_error, r.threshold, r.passed() ? "ok" : "FAIL");
    out << line << '\n';
    csv << r.name << ',' << (r.primitive ? "primitive" : "module") << ',' << format_double(r.max_rel_error) << ','
        << format_double(r.threshold) << ',' << r.coordinates << ',' << (r.passed() ? 1 : 0) << '\n';
    ok = ok && r.passed();
  }
  if (c.out != ".") write_text(prepare_out(c) / "gradcheck.csv", csv.str());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  err << "[gradcheck] " << reports.size() << " checks in " << secs << "s: " << (ok ? "all passed" : "FAILED") << '\n';
  return ok ? kExitOk : kExitRuntime;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"M3AD: mixture-of-experts multi-task model for synthetic Alzheimer's MRI", "m3ad"};
  app.require_subcommand(1);

  Common c;
  std::string data, init, checkpoint, split = "test";
  std::size_t points = 20, coords = 6;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset (images + manifest)");
  add_common(*gen, c);
  auto* pre = app.add_subcommand("pretrain", "masked-image pretraining with label-guided routing");
  add_common(*pre, c);
  pre->add_option("--data", data, "dataset directory holding manifest.csv")->required();
  auto* fine = app.add_subcommand("finetune", "dual-gate multi-task fine-tuning");
  add_common(*fine, c);
  fine->add_option("--data", data, "dataset directory holding manifest.csv")->required();
  fine->add_option("--init", init, "pretrained checkpoint")->check(CLI::ExistingFile);
  auto* ev = app.add_subcommand("eval", "metrics and confusion matrices for both tasks");
  add_common(*ev, c);
  ev->add_option("--data", data, "dataset directory holding manifest.csv")->required();
  ev->add_option("--checkpoint", checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every primitive and module");
  add_common(*gc, c);
  gc->add_option("--points", points, "random points per primitive")->check(CLI::PositiveNumber);
  gc->add_option("--coords", coords, "coordinates probed per parameter of the full model (0 = all)");
  auto* ig = app.add_subcommand("inspect-gates", "mean gate weights per layer and task");
  add_common(*ig, c);
  ig->add_option("--data", data, "dataset directory holding manifest.csv")->required();
  ig->add_option("--checkpoint", checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  ig->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*gen) return cmd_gen_data(c, err);
    if (*pre) return cmd_pretrain(c, data, err);
    if (*fine) return cmd_finetune(c, data, init, err);
    if (*ev) return cmd_eval(c, data, checkpoint, split, err);
    if (*gc) return cmd_gradcheck(c, points, coords, out, err);
    if (*ig) return cmd_inspect_gates(c, data, checkpoint, split, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitRuntime;
}

}  // namespace m3ad
