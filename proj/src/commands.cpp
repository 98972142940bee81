#include "vqprompt/commands.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <ostream>

#include "vqprompt/checkpoint.hpp"
#include "vqprompt/errors.hpp"

namespace vqp {

namespace {

std::shared_ptr<const Backbone> load_frozen_backbone(const fs::path& path) {
  auto backbone = std::make_shared<Backbone>(backbone_from_checkpoint(read_checkpoint(path)));
  if (!backbone->frozen()) throw ContractError("backbone checkpoint " + path.string() + " is not frozen");
  return backbone;
}

void write_trace_csv(const fs::path& path, const std::vector<LossTraceRow>& trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17) << "epoch,ce,vq,commit,total\n";
  for (const auto& r : trace) out << r.epoch << ',' << r.ce << ',' << r.vq << ',' << r.commit << ',' << r.total << '\n';
}

Checkpoint state_checkpoint(const ContinualState& state) {
  Checkpoint ckpt = make_checkpoint(*state.backbone);
  if (state.mode != PromptMode::none) store_pool(ckpt, state.pool);
  ckpt.put("head.weight", state.head.weight);
  ckpt.put("head.bias", state.head.bias);
  for (const auto& [label, s] : state.stats) {
    const std::string prefix = "stats." + std::to_string(label);
    ckpt.put(prefix + ".mean", Tensor(Matrix(s.mean)));
    ckpt.put(prefix + ".variance", Tensor(Matrix(s.variance)));
  }
  return ckpt;
}

struct Experiment {
  Benchmark bench;
  std::shared_ptr<const Backbone> backbone;
};

Experiment load_experiment(const fs::path& data_dir, const fs::path& backbone_checkpoint) {
  Experiment e{read_benchmark(data_dir), load_frozen_backbone(backbone_checkpoint)};
  check_disjoint_labels(e.bench.sequence, &e.bench.pretrain_train);
  return e;
}

ContinualResult run_in_memory(const ExperimentConfig& config, const Experiment& e, const TaskObserver& observer) {
  config.validate();
  TrainConfig train = config.train_config();
  train.seed = config.require_seed();
  return run_continual(e.backbone, e.bench.sequence, train, config.pool_shape(), observer);
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string run_mode(const fs::path& run_dir) {
  const auto path = run_dir / "config.ini";
  if (!fs::exists(path)) throw ContractError("run directory " + run_dir.string() + " has no config.ini");
  return load_config(path).mode;
}

}  // namespace

void cmd_generate(const ExperimentConfig& config, const fs::path& out_dir) {
  config.validate();
  fs::create_directories(out_dir);
  write_benchmark(out_dir, generate_benchmark(config.benchmark_options()));
}

PretrainResult cmd_pretrain(const ExperimentConfig& config, const fs::path& data_dir, const fs::path& out_checkpoint,
                            std::ostream* log) {
  config.validate();
  const Benchmark bench = read_benchmark(data_dir);
  check_disjoint_labels(bench.sequence, &bench.pretrain_train);
  PretrainResult result = pretrain_backbone(bench.pretrain_train, &bench.pretrain_test, config.backbone_config(),
                                            config.pretrain_options());
  if (out_checkpoint.has_parent_path()) fs::create_directories(out_checkpoint.parent_path());
  write_checkpoint(out_checkpoint, make_checkpoint(result.backbone));
  if (log) {
    *log << "pretrain: train accuracy " << result.train_accuracy;
    if (result.heldout_accuracy) *log << ", held-out accuracy " << *result.heldout_accuracy;
    *log << '\n';
  }
  return result;
}

RunSummary cmd_run(const ExperimentConfig& config, const fs::path& data_dir, const fs::path& backbone_checkpoint,
                   const fs::path& out_dir, std::ostream* log) {
  config.validate();
  config.require_seed();
  const Experiment e = load_experiment(data_dir, backbone_checkpoint);
  fs::create_directories(out_dir);
  save_config(out_dir / "config.ini", config);

  ContinualResult result = run_in_memory(config, e, [&](const TaskReport& report, const ContinualState& state) {
    write_trace_csv(out_dir / ("loss_task_" + std::to_string(report.task) + ".csv"), report.trace);
    write_checkpoint(out_dir / ("task_" + std::to_string(report.task) + ".ckpt"), state_checkpoint(state));
    if (log) {
      *log << config.mode << " task " << report.task << ":";
      for (double a : report.accuracies) *log << ' ' << std::fixed << std::setprecision(3) << a;
      *log << std::defaultfloat << '\n';
    }
  });

  write_accuracy_csv(out_dir / "accuracy_matrix.csv", result.accuracy);
  write_metrics_csv(out_dir / "metrics.csv", result.accuracy);
  write_forgetting_csv(out_dir / "forgetting.csv", result.accuracy);
  return {config.mode, result.accuracy, faa(result.accuracy), caa(result.accuracy)};
}

std::vector<ReportRow> aggregate_runs(std::span<const fs::path> run_dirs) {
  if (run_dirs.empty()) throw ContractError("report: no run directories given");
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_mode;
  std::vector<std::string> order;
  for (const auto& dir : run_dirs) {
    const std::string mode = run_mode(dir);
    const AccuracyMatrix a = read_accuracy_csv(dir / "accuracy_matrix.csv");
    if (!by_mode.count(mode)) order.push_back(mode);
    by_mode[mode].first.push_back(faa(a));
    by_mode[mode].second.push_back(caa(a));
  }
  std::vector<ReportRow> rows;
  for (const auto& mode : order) {
    const auto& [f, c] = by_mode.at(mode);
    rows.push_back({mode, f.size(), mean_of(f), std_of(f), mean_of(c), std_of(c)});
  }
  return rows;
}

void write_report(std::ostream& out, std::span<const ReportRow> rows) {
  out << "mode,runs,faa_mean,faa_std,caa_mean,caa_std\n" << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    out << r.mode << ',' << r.runs << ',' << 100.0 * r.faa_mean << ',' << 100.0 * r.faa_std << ','
        << 100.0 * r.caa_mean << ',' << 100.0 * r.caa_std << '\n';
  }
  out << std::defaultfloat;
}

std::vector<ReportRow> cmd_report(std::span<const fs::path> run_dirs, std::ostream& out) {
  auto rows = aggregate_runs(run_dirs);
  write_report(out, rows);
  return rows;
}

void cmd_sweep(const ExperimentConfig& config, const fs::path& data_dir, const fs::path& backbone_checkpoint,
               const fs::path& out_dir, std::ostream* log) {
  config.validate();
  config.require_seed();
  const Experiment e = load_experiment(data_dir, backbone_checkpoint);
  fs::create_directories(out_dir);
  save_config(out_dir / "config.ini", config);

  ExperimentConfig base = config;
  base.mode = "vq";

  std::ofstream weights_csv(out_dir / "sweep_loss_weights.csv", std::ios::trunc);
  weights_csv << std::setprecision(17) << "lambda_q,lambda_c,faa,caa\n";
  for (double lq : config.sweep_lambda_q) {
    for (double lc : config.sweep_lambda_c) {
      ExperimentConfig c = base;
      c.lambda_q = lq;
      c.lambda_c = lc;
      const auto r = run_in_memory(c, e, {});
      weights_csv << lq << ',' << lc << ',' << faa(r.accuracy) << ',' << caa(r.accuracy) << '\n';
      if (log) *log << "sweep lambda_q=" << lq << " lambda_c=" << lc << " faa=" << faa(r.accuracy) << '\n';
    }
  }

  std::ofstream pool_csv(out_dir / "sweep_pool.csv", std::ios::trunc);
  pool_csv << std::setprecision(17) << "pool_size,prompt_length,faa,caa\n";
  for (int n : config.sweep_pool_size) {
    for (int lp : config.sweep_prompt_length) {
      ExperimentConfig c = base;
      c.pool_size = n;
      c.prompt_length = lp;
      const auto r = run_in_memory(c, e, {});
      pool_csv << n << ',' << lp << ',' << faa(r.accuracy) << ',' << caa(r.accuracy) << '\n';
      if (log) *log << "sweep N=" << n << " L_p=" << lp << " faa=" << faa(r.accuracy) << '\n';
    }
  }
  if (!weights_csv || !pool_csv) throw std::runtime_error("cannot write sweep tables in " + out_dir.string());
}

}  // namespace vqp
