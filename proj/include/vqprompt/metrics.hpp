#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "vqprompt/data.hpp"
#include "vqprompt/tensor.hpp"

namespace vqp {

// A(i, j): accuracy on task i after learning task j, defined only for i <= j.
// Indices are zero-based here; task t is index t-1.
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(Index tasks = 0);

  Index tasks() const { return values_.rows(); }
  void set(Index task, Index after, double accuracy);
  bool defined(Index task, Index after) const;
  double at(Index task, Index after) const;
  // NaN wherever undefined.
  const Eigen::MatrixXd& values() const { return values_; }

 private:
  Eigen::MatrixXd values_;
};

// Mean of column `after` over tasks 0..after.
double average_accuracy_after(const AccuracyMatrix& a, Index after);
// (1/T) sum_i A(i, T-1).
double faa(const AccuracyMatrix& a);
// (1/T) sum_j (1/(j+1)) sum_{i<=j} A(i, j).
double caa(const AccuracyMatrix& a);
// CAA of the leading (after+1) x (after+1) block.
double caa_after(const AccuracyMatrix& a, Index after);

// Row-per-stage CSV: row j lists A(0..j, j); cells for tasks not yet seen are empty.
void write_accuracy_csv(const std::filesystem::path& path, const AccuracyMatrix& a);
AccuracyMatrix read_accuracy_csv(const std::filesystem::path& path);
// task_j, faa_so_far, caa_so_far, then a final summary line.
void write_metrics_csv(const std::filesystem::path& path, const AccuracyMatrix& a);
// Long-form per-task accuracy over time: task, after_task, accuracy.
void write_forgetting_csv(const std::filesystem::path& path, const AccuracyMatrix& a);

// Logits (n x C_total) for every sample of a dataset, in sample order.
using LogitFn = std::function<Matrix(const TaskDataset&)>;

// Top-1 accuracy per test set with every seen class as a candidate.
std::vector<double> evaluate_split(const LogitFn& logits, std::span<const TaskDataset> test_sets,
                                   const std::vector<bool>& seen_classes);

}  // namespace vqp
