#include "doctest.h"

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vqprompt/commands.hpp"
#include "vqprompt/config.hpp"
#include "vqprompt/errors.hpp"

using namespace vqp;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ExperimentConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

const char* kTinyConfig = R"(seed = 5

[data]
tasks = 2
samples_per_class = 10
pretrain_classes = 2
pretrain_samples_per_class = 10
tokens = 4
token_dim = 4

[backbone]
depth = 2
dim = 8
heads = 2
ff_dim = 8
prompt_blocks = 0,1
pretrain_epochs = 1

[prompt]
pool_size = 4
prompt_length = 4

[train]
epochs = 1
calibration_epochs = 1
pseudo_per_class = 4

[ablation]
sweep_lambda_q = 0,0.4
sweep_lambda_c = 0.1
sweep_pool_size = 2
sweep_prompt_length = 2,4
)";

struct CliResult {
  int status;
  std::string err;
};

CliResult run_cli(const std::string& args, const fs::path& scratch) {
  const fs::path err = scratch / "stderr.txt";
  const std::string cmd = std::string(VQPROMPT_CLI) + " " + args + " > /dev/null 2> " + err.string();
  const int raw = std::system(cmd.c_str());
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(err)};
}

}  // namespace

TEST_CASE("config defaults and overrides") {
  ExperimentConfig c = parse("seed = 3\n[train]\nepochs = 7\n[prompt]\nlambda_q = 0.25\n[backbone]\nprompt_blocks = 1, 2\n");
  CHECK(c.seed == 3u);
  CHECK(c.epochs == 7);
  CHECK(c.lambda_q == 0.25);
  CHECK(c.prompt_blocks == std::vector<int>{1, 2});
  CHECK(c.learning_rate == 0.0025);
  CHECK(c.pool_size == 10);
  CHECK(c.prompt_length == 8);
  CHECK(c.lambda_c == 0.1);
  CHECK(c.calibration_epochs == 10);
  CHECK(c.mode == "vq");
  CHECK_NOTHROW(c.validate());
  CHECK(ExperimentConfig{}.prompt_blocks == std::vector<int>{0, 1});
}

TEST_CASE("config parsing fails closed") {
  CHECK_THROWS_AS(parse("seed = 1\n[train]\nepoch = 3\n"), ContractError);
  CHECK_THROWS_AS(parse("seed = 1\n[training]\nepochs = 3\n"), ContractError);
  CHECK_THROWS_AS(parse("colour = red\n"), ContractError);
  CHECK_THROWS_AS(parse("seed = 1\n[train]\nepochs = three\n"), ContractError);
  CHECK_THROWS_AS(parse("seed = 1\n[ablation]\nmode = fancy\n").validate(), ContractError);
  CHECK_THROWS_AS(parse("seed = 1\n[prompt]\nprompt_length = 3\n").validate(), ContractError);
  CHECK_THROWS_AS(parse("[train]\nepochs = 3\n").require_seed(), ContractError);
  CHECK_NOTHROW(parse("seed = 1\n[data]\n"));
}

TEST_CASE("config snapshot round trip") {
  ExperimentConfig c = parse(kTinyConfig);
  c.mode = "soft";
  std::ostringstream first;
  write_config(first, c);
  std::istringstream in(first.str());
  ExperimentConfig back = parse_config(in);
  std::ostringstream second;
  write_config(second, back);
  CHECK(first.str() == second.str());
  CHECK(back.mode == "soft");
  CHECK(back.sweep_lambda_q == std::vector<double>{0.0, 0.4});
}

TEST_CASE("pipeline: generate, pretrain, run, report, sweep") {
  TempDir dir("vqp_test_cli_pipeline");
  const ExperimentConfig cfg = parse(kTinyConfig);
  cmd_generate(cfg, dir.path / "data");
  const auto pre = cmd_pretrain(cfg, dir.path / "data", dir.path / "bb.ckpt");
  CHECK(pre.backbone.frozen());

  auto a = cmd_run(cfg, dir.path / "data", dir.path / "bb.ckpt", dir.path / "run_a");
  auto b = cmd_run(cfg, dir.path / "data", dir.path / "bb.ckpt", dir.path / "run_b");
  CHECK(a.accuracy.tasks() == 2);
  for (const char* f : {"config.ini", "task_1.ckpt", "task_2.ckpt", "loss_task_1.csv", "loss_task_2.csv",
                        "accuracy_matrix.csv", "metrics.csv", "forgetting.csv"}) {
    CHECK(fs::exists(dir.path / "run_a" / f));
  }
  for (const char* f : {"metrics.csv", "accuracy_matrix.csv", "loss_task_2.csv", "task_2.ckpt"}) {
    CHECK(slurp(dir.path / "run_a" / f) == slurp(dir.path / "run_b" / f));
  }
  CHECK(slurp(dir.path / "run_a" / "loss_task_1.csv").rfind("epoch,ce,vq,commit,total\n", 0) == 0);

  // The snapshot alone reproduces the run.
  auto c = cmd_run(load_config(dir.path / "run_a" / "config.ini"), dir.path / "data", dir.path / "bb.ckpt",
                   dir.path / "run_c");
  CHECK(slurp(dir.path / "run_a" / "metrics.csv") == slurp(dir.path / "run_c" / "metrics.csv"));

  ExperimentConfig none = cfg;
  none.mode = "none";
  cmd_run(none, dir.path / "data", dir.path / "bb.ckpt", dir.path / "run_none");

  const std::vector<fs::path> runs{dir.path / "run_a", dir.path / "run_b", dir.path / "run_none"};
  std::ostringstream table;
  auto rows = cmd_report(runs, table);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].mode == "vq");
  CHECK(rows[0].runs == 2);
  CHECK(rows[0].faa_std == 0.0);
  CHECK(rows[0].caa_std == 0.0);
  CHECK(rows[0].faa_mean == doctest::Approx(a.faa));
  CHECK(rows[1].mode == "none");
  CHECK(table.str().rfind("mode,runs,faa_mean,faa_std,caa_mean,caa_std\n", 0) == 0);

  cmd_sweep(cfg, dir.path / "data", dir.path / "bb.ckpt", dir.path / "sweep");
  std::istringstream weights(slurp(dir.path / "sweep" / "sweep_loss_weights.csv"));
  std::string line;
  int n = 0;
  while (std::getline(weights, line)) ++n;
  CHECK(n == 1 + 2);
  std::istringstream pool(slurp(dir.path / "sweep" / "sweep_pool.csv"));
  n = 0;
  while (std::getline(pool, line)) ++n;
  CHECK(n == 1 + 2);
}

TEST_CASE("runs reject overlapping task label sets") {
  TempDir dir("vqp_test_cli_overlap");
  const ExperimentConfig cfg = parse(kTinyConfig);
  cmd_generate(cfg, dir.path / "data");
  cmd_pretrain(cfg, dir.path / "data", dir.path / "bb.ckpt");
  TaskDataset t2 = read_dataset(dir.path / "data" / "task_2_train.bin");
  for (auto& s : t2.samples) s.label -= 2;
  write_dataset(dir.path / "data" / "task_2_train.bin", t2);
  CHECK_THROWS_AS(cmd_run(cfg, dir.path / "data", dir.path / "bb.ckpt", dir.path / "run"), ProtocolError);
}

TEST_CASE("executable: exit status and one-line diagnostics") {
  TempDir dir("vqp_test_cli_exe");
  {
    std::ofstream(dir.path / "tiny.ini") << kTinyConfig;
    std::ofstream(dir.path / "bad.ini") << "seed = 1\n[train]\nspeed = 9\n";
    std::ofstream(dir.path / "noseed.ini") << "[train]\nepochs = 1\n";
  }
  const std::string d = dir.path.string();
  CHECK(run_cli("generate --config " + d + "/tiny.ini --out " + d + "/data", dir.path).status == 0);
  CHECK(run_cli("pretrain --config " + d + "/tiny.ini --data " + d + "/data --out " + d + "/bb.ckpt", dir.path)
            .status == 0);
  CHECK(run_cli("run --config " + d + "/tiny.ini --seed 9 --mode vq-s --data " + d + "/data --backbone " + d +
                    "/bb.ckpt --out " + d + "/run",
                dir.path)
            .status == 0);
  CHECK(load_config(dir.path / "run" / "config.ini").mode == "vq-s");
  CHECK(load_config(dir.path / "run" / "config.ini").seed == 9u);
  CHECK(run_cli("report " + d + "/run --out " + d + "/report.csv", dir.path).status == 0);
  CHECK(slurp(dir.path / "report.csv").find("vq-s,1,") != std::string::npos);

  for (const std::string args : {"generate --config " + d + "/bad.ini --out " + d + "/x",
                                 "generate --config " + d + "/noseed.ini --out " + d + "/x",
                                 "pretrain --config " + d + "/tiny.ini --data " + d + "/run --out " + d + "/x.ckpt",
                                 "report " + d + "/data"}) {
    auto r = run_cli(args, dir.path);
    CHECK(r.status != 0);
    CHECK(r.err.rfind("error: ", 0) == 0);
    CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  }
  CHECK(run_cli("run --mode sideways", dir.path).status != 0);
}

TEST_CASE("a single-task run on the default config finishes within a minute") {
  TempDir dir("vqp_test_cli_smoke");
  ExperimentConfig cfg;
  cfg.seed = 11;
  cfg.tasks = 1;
  cfg.pretrain_epochs = 1;
  cmd_generate(cfg, dir.path / "data");
  cmd_pretrain(cfg, dir.path / "data", dir.path / "bb.ckpt");
  const auto start = std::chrono::steady_clock::now();
  auto r = cmd_run(cfg, dir.path / "data", dir.path / "bb.ckpt", dir.path / "run");
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  MESSAGE("T=1 run took " << seconds << " s");
  CHECK(r.accuracy.tasks() == 1);
  CHECK(seconds < 60.0);
}
