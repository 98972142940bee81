#pragma once

// Experiment commands behind the vqprompt executable. Every command is a
// pure function of its inputs and the config seed.

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "vqprompt/config.hpp"
#include "vqprompt/metrics.hpp"

namespace vqp {

namespace fs = std::filesystem;

// Writes the benchmark files (datasets plus manifest) into out_dir.
void cmd_generate(const ExperimentConfig& config, const fs::path& out_dir);

// Pretrains on the pretrain split of data_dir and writes the frozen backbone.
PretrainResult cmd_pretrain(const ExperimentConfig& config, const fs::path& data_dir,
                            const fs::path& out_checkpoint, std::ostream* log = nullptr);

struct RunSummary {
  std::string mode;
  AccuracyMatrix accuracy;
  double faa = 0.0;
  double caa = 0.0;
};

// Continual run in config.mode. Writes into out_dir:
//   config.ini, task_<t>.ckpt, loss_task_<t>.csv,
//   accuracy_matrix.csv, metrics.csv, forgetting.csv
RunSummary cmd_run(const ExperimentConfig& config, const fs::path& data_dir, const fs::path& backbone_checkpoint,
                   const fs::path& out_dir, std::ostream* log = nullptr);

struct ReportRow {
  std::string mode;
  std::size_t runs = 0;
  double faa_mean = 0.0, faa_std = 0.0;  // fractions in [0, 1]
  double caa_mean = 0.0, caa_std = 0.0;
};

// Groups run directories by mode; sample standard deviation, 0 for a single run.
std::vector<ReportRow> aggregate_runs(std::span<const fs::path> run_dirs);
// CSV table in percent: mode,runs,faa_mean,faa_std,caa_mean,caa_std
void write_report(std::ostream& out, std::span<const ReportRow> rows);
std::vector<ReportRow> cmd_report(std::span<const fs::path> run_dirs, std::ostream& out);

// vq-mode runs over the config's (lambda_q, lambda_c) and (pool_size,
// prompt_length) grids; writes sweep_loss_weights.csv and sweep_pool.csv.
void cmd_sweep(const ExperimentConfig& config, const fs::path& data_dir, const fs::path& backbone_checkpoint,
               const fs::path& out_dir, std::ostream* log = nullptr);

}  // namespace vqp
