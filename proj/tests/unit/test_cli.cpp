#include <doctest.h>

#include <sstream>

#include "helpers.hpp"
#include "m3ad/cli.hpp"
#include "m3ad/data.hpp"

using namespace m3ad;
using m3ad::test::slurp;
using m3ad::test::spit;
using m3ad::test::TempDir;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "m3ad");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

const std::vector<std::string> kToy{"--set", "image_size=32", "--set", "size=32", "--set", "embed_dim=4",
                                    "--set", "depths=2,2,1,1", "--set", "heads=1,2,4,8", "--set", "window=4",
                                    "--set", "prior_hidden=8,8", "--set", "fusion_stage=1", "--set",
                                    "expert_hidden_ratio=2", "--set", "epochs=1", "--set", "batch_size=4"};

std::vector<std::string> with_toy(std::vector<std::string> args) {
  args.insert(args.end(), kToy.begin(), kToy.end());
  return args;
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

}  // namespace

TEST_CASE("gen-data writes images and a manifest") {
  TempDir d("cli_gen");
  const auto r = cli({"gen-data", "--set", "n=32", "--set", "size=64", "-o", d.path().string()});
  CHECK(r.code == kExitOk);
  CHECK(r.out.empty());
  const auto recs = load_manifest(d / "manifest.csv");
  CHECK(recs.size() == 32);
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(d / "images")) files += e.path().extension() == ".m3t";
  CHECK(files == 32);
}

TEST_CASE("validation errors exit 1") {
  TempDir d("cli_err");
  SUBCASE("unknown config key lists the key") {
    spit(d / "bad.cfg", "n = 4\nbogus = 1\n");
    const auto r = cli({"gen-data", "--config", (d / "bad.cfg").string(), "-o", d.path().string()});
    CHECK(r.code == kExitValidation);
    CHECK(r.err.find("bogus") != std::string::npos);
  }
  SUBCASE("unknown --set key") {
    const auto r = cli({"gen-data", "--set", "nope=3", "-o", d.path().string()});
    CHECK(r.code == kExitValidation);
    CHECK(r.err.find("nope") != std::string::npos);
  }
  SUBCASE("eval without a checkpoint") {
    const auto r = cli({"eval", "--data", d.path().string()});
    CHECK(r.code == kExitValidation);
    CHECK(r.err.find("checkpoint") != std::string::npos);
  }
  SUBCASE("missing subcommand and unknown flag") {
    CHECK(cli({}).code == kExitValidation);
    CHECK(cli({"gen-data", "--frobnicate"}).code == kExitValidation);
  }
  SUBCASE("missing manifest is a data error") {
    const auto r = cli(with_toy({"pretrain", "--data", (d / "nowhere").string(), "-o", d.path().string()}));
    CHECK(r.code == kExitValidation);
  }
}

TEST_CASE("pipeline runs end to end and is reproducible") {
  auto pipeline = [](const TempDir& d) {
    const std::string data = (d / "data").string(), pre = (d / "pre").string(), fine = (d / "fine").string(),
                      ev = (d / "eval").string();
    REQUIRE(cli(with_toy({"gen-data", "--set", "n=36", "--seed", "5", "-o", data})).code == kExitOk);
    const auto p = cli(with_toy({"pretrain", "--data", data, "--seed", "5", "-o", pre}));
    REQUIRE(p.code == kExitOk);
    CHECK(p.out.empty());
    CHECK_FALSE(p.err.empty());
    REQUIRE(cli(with_toy({"finetune", "--data", data, "--init", pre + "/checkpoint.m3ck", "--seed", "5", "-o", fine}))
                .code == kExitOk);
    REQUIRE(cli({"eval", "--data", data, "--checkpoint", fine + "/checkpoint.m3ck", "-o", ev}).code == kExitOk);
    REQUIRE(cli({"inspect-gates", "--data", data, "--checkpoint", fine + "/checkpoint.m3ck", "-o", ev}).code == kExitOk);
  };
  TempDir a("cli_pipe_a"), b("cli_pipe_b");
  pipeline(a);
  pipeline(b);
  CHECK(first_line(slurp(a / "pre/pretrain_log.csv")) == "epoch,lr,train_loss,val_metric,val_diag_acc,val_change_acc,seconds");
  CHECK(first_line(slurp(a / "fine/finetune_log.csv")).rfind("epoch,", 0) == 0);
  for (const char* f : {"metrics_diagnosis.csv", "metrics_change.csv"}) {
    CHECK(first_line(slurp(a / (std::string("eval/") + f))) == "metric,class,value");
    CHECK(slurp(a / (std::string("eval/") + f)) == slurp(b / (std::string("eval/") + f)));
  }
  for (const char* f : {"confusion_diagnosis.csv", "confusion_change.csv"}) {
    CHECK(first_line(slurp(a / (std::string("eval/") + f))) == "true\\pred,0,1,2");
    CHECK(slurp(a / (std::string("eval/") + f)) == slurp(b / (std::string("eval/") + f)));
  }
  const auto gates = slurp(a / "eval/gates.csv");
  CHECK(first_line(gates) == "layer,task,expert0,expert1,expert2,expert3,expert4,expert5,expert6,expert7");
  CHECK(slurp(a / "data/manifest.csv") == slurp(b / "data/manifest.csv"));
}

TEST_CASE("gradcheck on the toy configuration passes") {
  TempDir d("cli_gc");
  const auto r = cli({"gradcheck", "-o", d.path().string()});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("m3ad_block") != std::string::npos);
  CHECK(r.out.find("fusion_hadamard") != std::string::npos);
  CHECK(first_line(slurp(d / "gradcheck.csv")).rfind("name,", 0) == 0);
}
