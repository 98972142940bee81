#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "vqprompt/backbone.hpp"
#include "vqprompt/data.hpp"
#include "vqprompt/metrics.hpp"
#include "vqprompt/vq_prompt.hpp"

namespace vqp {

// vq: quantized prompts; soft: continuous prompts; none: no prompts at all.
enum class PromptMode { vq, soft, none };

std::string to_string(PromptMode mode);
PromptMode parse_prompt_mode(const std::string& name);

struct TrainConfig {
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
  std::uint64_t seed = 0;
  LossWeights weights;
  double temperature = 1.0;
  PromptMode mode = PromptMode::vq;
  bool calibrate = true;

  void validate() const;
};

// splitmix64 of (seed, stream); used to give each component its own RNG stream.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Single head over every class of the run; rows of unseen classes stay untouched.
struct ClassifierHead {
  Tensor weight;  // C_total x D
  Tensor bias;    // 1 x C_total

  static ClassifierHead initialize(Index classes, Index dim, std::uint64_t seed);
  Index classes() const { return weight.rows(); }
  Tensor logits(const Tensor& features) const;
  std::vector<Tensor> parameters() const { return {weight, bias}; }
  std::uint64_t checksum() const { return vqp::checksum({weight, bias}); }
};

constexpr double kVarianceFloor = 1e-6;

struct ClassStats {
  RowVector mean;
  RowVector variance;  // diagonal, population, floored at kVarianceFloor
  std::size_t count = 0;
};

using ClassStatistics = std::map<std::uint32_t, ClassStats>;

struct PseudoFeatures {
  Matrix features;            // rows interleaved round-robin over classes
  std::vector<Index> labels;
};

struct LossTraceRow {
  int epoch = 0;
  double ce = 0.0;
  double vq = 0.0;
  double commit = 0.0;
  double total = 0.0;
};

// Everything a continual run mutates, plus the frozen backbone it reads.
struct ContinualState {
  std::shared_ptr<const Backbone> backbone;
  PromptPool pool;
  ClassifierHead head;
  ClassStatistics stats;
  std::vector<bool> seen;  // per global class
  PromptMode mode = PromptMode::vq;
  double temperature = 1.0;

  static ContinualState create(std::shared_ptr<const Backbone> backbone, Index classes,
                               Index pool_size, Index prompt_length, const TrainConfig& config);

  // Features through the mode's prompt path, without recording a graph.
  Matrix features(const TaskDataset& data) const;
  Matrix logits(const TaskDataset& data) const;
};

struct PromptedForward {
  Tensor features;  // B x D
  Tensor vq;        // scalar, zero outside vq mode
  Tensor commit;    // scalar, zero outside vq mode
  std::vector<Index> index;
};

// Prompt selection plus prefix-tuned encoding for one batch. `queries` are the
// precomputed prompt-free class features of the same samples.
PromptedForward prompted_forward(const ContinualState& state, const Matrix& tokens,
                                 const Matrix& queries, Index batch);

// Queries for every sample of a dataset, in sample order (N x D).
Matrix dataset_queries(const Backbone& backbone, const TaskDataset& data);

// Softmax cross-entropy over the active classes only.
Tensor masked_cross_entropy(const Tensor& logits, Index label, const std::vector<bool>& active);

std::vector<LossTraceRow> train_task(ContinualState& state, const TaskDataset& train,
                                     std::span<const std::uint32_t> task_classes, const TrainConfig& config);

// Adds per-class feature statistics for the classes in `train`. Classes that
// already have statistics are rejected.
void collect_class_statistics(const ContinualState& state, const TaskDataset& train, ClassStatistics& stats);

PseudoFeatures sample_pseudo_features(const ClassStatistics& stats, int per_class, std::uint64_t seed);

// Fine-tunes only the head on pseudo features of every class with statistics.
void calibrate_classifier(ClassifierHead& head, const ClassStatistics& stats, const TrainConfig& config,
                          std::uint64_t seed);

// Fraction of rows whose arg-max over `active` classes equals the label.
double head_accuracy(const ClassifierHead& head, const Matrix& features, std::span<const Index> labels,
                     const std::vector<bool>& active);

struct TaskReport {
  int task = 0;  // 1-based
  std::vector<LossTraceRow> trace;
  std::vector<double> accuracies;  // tasks 1..task after this task
};

using TaskObserver = std::function<void(const TaskReport&, const ContinualState&)>;

struct ContinualResult {
  AccuracyMatrix accuracy;
  std::vector<std::vector<LossTraceRow>> traces;
  ContinualState state;
};

struct PoolShape {
  Index pool_size = 10;
  Index prompt_length = 8;
};

ContinualResult run_continual(std::shared_ptr<const Backbone> backbone, const TaskSequence& sequence,
                              const TrainConfig& config, PoolShape pool = {},
                              const TaskObserver& observer = {});

}  // namespace vqp
