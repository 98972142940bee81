// vqprompt: synthetic class-incremental experiments with quantized prompts.
//
//   vqprompt generate --config exp.ini --out data/
//   vqprompt pretrain --config exp.ini --data data/ --out backbone.ckpt
//   vqprompt run      --config exp.ini --data data/ --backbone backbone.ckpt --mode vq --out runs/vq
//   vqprompt report   runs/vq runs/none
//   vqprompt sweep    --config exp.ini --data data/ --backbone backbone.ckpt --out sweep/

#include <CLI11.hpp>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "vqprompt/commands.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::string out;
  std::string data;
  std::string backbone;
  std::vector<std::string> runs;
};

vqp::ExperimentConfig resolve(const Options& o) {
  vqp::ExperimentConfig c = o.config.empty() ? vqp::ExperimentConfig{} : vqp::load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.mode.empty()) c.mode = o.mode;
  c.validate();
  c.require_seed();
  return c;
}

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "INI experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "override the config seed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-incremental learning with vector-quantized prompts"};
  app.require_subcommand(1);
  Options o;

  auto* generate = app.add_subcommand("generate", "write the synthetic benchmark");
  add_common(generate, o);
  generate->add_option("--out", o.out, "output directory")->required();

  auto* pretrain = app.add_subcommand("pretrain", "pretrain and freeze the backbone");
  add_common(pretrain, o);
  pretrain->add_option("--data", o.data, "benchmark directory")->required()->check(CLI::ExistingDirectory);
  pretrain->add_option("--out", o.out, "backbone checkpoint path")->required();

  auto* run = app.add_subcommand("run", "continual run over every task");
  add_common(run, o);
  run->add_option("--data", o.data, "benchmark directory")->required()->check(CLI::ExistingDirectory);
  run->add_option("--backbone", o.backbone, "frozen backbone checkpoint")->required()->check(CLI::ExistingFile);
  run->add_option("--mode", o.mode, "vq | vq-s | soft | none")
      ->check(CLI::IsMember({"vq", "vq-s", "soft", "none"}));
  run->add_option("--out", o.out, "run directory")->required();

  auto* report = app.add_subcommand("report", "mean and std of FAA/CAA per mode");
  report->add_option("runs", o.runs, "run directories")->required()->check(CLI::ExistingDirectory);
  report->add_option("--out", o.out, "also write the table to this CSV");

  auto* sweep = app.add_subcommand("sweep", "loss-weight and pool-shape grids");
  add_common(sweep, o);
  sweep->add_option("--data", o.data, "benchmark directory")->required()->check(CLI::ExistingDirectory);
  sweep->add_option("--backbone", o.backbone, "frozen backbone checkpoint")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", o.out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*generate) {
      vqp::cmd_generate(resolve(o), o.out);
    } else if (*pretrain) {
      vqp::cmd_pretrain(resolve(o), o.data, o.out, &std::cerr);
    } else if (*run) {
      const auto s = vqp::cmd_run(resolve(o), o.data, o.backbone, o.out, &std::cerr);
      std::cout << s.mode << " FAA " << s.faa << " CAA " << s.caa << '\n';
    } else if (*report) {
      std::vector<vqp::fs::path> dirs(o.runs.begin(), o.runs.end());
      const auto rows = vqp::aggregate_runs(dirs);
      vqp::write_report(std::cout, rows);
      if (!o.out.empty()) {
        std::ofstream out(o.out);
        vqp::write_report(out, rows);
        if (!out) throw std::runtime_error("cannot write " + o.out);
      }
    } else if (*sweep) {
      vqp::cmd_sweep(resolve(o), o.data, o.backbone, o.out, &std::cerr);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
