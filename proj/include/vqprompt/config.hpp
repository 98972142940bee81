#pragma once

// INI experiment configuration:
//
//   seed = 7
//   [data]      tasks, classes_per_task, samples_per_class, noise_scale, ...
//   [backbone]  depth, dim, heads, ff_dim, prompt_blocks, pretrain_* ...
//   [prompt]    pool_size, prompt_length, lambda_q, lambda_c, temperature
//   [train]     learning_rate, epochs, batch_size, calibration_*, ...
//   [ablation]  mode, sweep grids
//
// Every key is optional except the seed; unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "vqprompt/backbone.hpp"
#include "vqprompt/cil.hpp"
#include "vqprompt/data.hpp"

namespace vqp {

struct ExperimentConfig {
  std::optional<std::uint64_t> seed;

  // [data]
  int tasks = 5;
  int classes_per_task = 2;
  int samples_per_class = 100;
  double noise_scale = 0.5;
  int pretrain_classes = 10;
  int pretrain_samples_per_class = 200;
  int tokens = 16;
  int token_dim = 32;

  // [backbone]
  int depth = 4;
  int dim = 64;
  int heads = 4;
  int ff_dim = 128;
  std::vector<int> prompt_blocks = {0, 1};
  int pretrain_epochs = 15;
  int pretrain_batch_size = 32;
  double pretrain_learning_rate = 1e-3;

  // [prompt]
  int pool_size = 10;
  int prompt_length = 8;
  double lambda_q = 0.4;
  double lambda_c = 0.1;
  double temperature = 1.0;

  // [train]
  double learning_rate = 0.0025;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0;
  int epochs = 20;
  int batch_size = 16;
  int calibration_epochs = 10;
  double calibration_learning_rate = 0.01;
  int calibration_batch_size = 64;
  int pseudo_per_class = 256;

  // [ablation]
  std::string mode = "vq";  // vq | vq-s | soft | none
  std::vector<double> sweep_lambda_q = {0.0, 0.1, 0.4, 1.0};
  std::vector<double> sweep_lambda_c = {0.0, 0.1, 0.4};
  std::vector<int> sweep_pool_size = {4, 10, 30};
  std::vector<int> sweep_prompt_length = {4, 8, 16};

  std::uint64_t require_seed() const;
  void validate() const;

  BenchmarkOptions benchmark_options() const;
  BackboneConfig backbone_config() const;
  PretrainOptions pretrain_options() const;
  TrainConfig train_config() const;
  PoolShape pool_shape() const { return {pool_size, prompt_length}; }
};

// Modes accepted by the run command.
bool is_run_mode(const std::string& mode);

ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::filesystem::path& path);
void write_config(std::ostream& out, const ExperimentConfig& config);
void save_config(const std::filesystem::path& path, const ExperimentConfig& config);

}  // namespace vqp
