#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "vqprompt/tensor.hpp"

namespace vqp {

enum class Split : std::uint8_t { train = 0, test = 1 };

struct Sample {
  std::uint64_t id = 0;
  std::uint32_t label = 0;  // global class index
  Matrix tokens;            // tokens_per_sample x token_dim

  friend bool operator==(const Sample& a, const Sample& b) {
    return a.id == b.id && a.label == b.label && a.tokens.rows() == b.tokens.rows() &&
           a.tokens.cols() == b.tokens.cols() && a.tokens == b.tokens;
  }
};

struct TaskDataset {
  std::uint32_t task_id = 0;
  Split split = Split::train;
  Index tokens_per_sample = 16;
  Index token_dim = 32;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  // Sorted distinct labels.
  std::vector<std::uint32_t> labels() const;

  friend bool operator==(const TaskDataset&, const TaskDataset&) = default;
};

// Tasks are numbered 1..T through task_id; index t in the vectors holds task t+1.
struct TaskSequence {
  std::vector<TaskDataset> train;
  std::vector<TaskDataset> test;
  std::uint32_t num_classes = 0;  // |Y_{1:T}|, the classifier width
  std::uint64_t seed = 0;

  std::size_t size() const { return train.size(); }
};

struct BenchmarkOptions {
  std::uint64_t seed = 0;
  int tasks = 5;
  int classes_per_task = 2;
  int samples_per_class = 100;
  double noise_scale = 0.5;
  int pretrain_classes = 10;
  int pretrain_samples_per_class = 200;
  Index tokens_per_sample = 16;
  Index token_dim = 32;
};

struct Benchmark {
  TaskDataset pretrain_train;
  TaskDataset pretrain_test;
  TaskSequence sequence;
};

// Continual classes take global labels [0, T*classes_per_task) in task order;
// pretrain classes follow them. Each class is a uniform(-1, 1) anchor token
// sequence plus N(0, noise_scale^2) noise; 80% of each class goes to train.
Benchmark generate_benchmark(const BenchmarkOptions& options);

// Throws ProtocolError unless task label sets (and the optional pretrain set)
// are pairwise disjoint.
void check_disjoint_labels(const TaskSequence& sequence, const TaskDataset* pretrain = nullptr);

// Throws DataError when a sample's label is outside `allowed`.
void check_labels_within(const TaskDataset& data, std::span<const std::uint32_t> allowed);

// Rows of the selected samples stacked into (count*tokens_per_sample x token_dim).
Matrix stack_tokens(const TaskDataset& data, std::span<const std::size_t> indices);

void write_dataset(const std::filesystem::path& path, const TaskDataset& data);
TaskDataset read_dataset(const std::filesystem::path& path);

// Directory layout used by the CLI.
void write_benchmark(const std::filesystem::path& dir, const Benchmark& bench);
Benchmark read_benchmark(const std::filesystem::path& dir);

}  // namespace vqp
