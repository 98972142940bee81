#include "vqprompt/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace vqp {

AccuracyMatrix::AccuracyMatrix(Index tasks)
    : values_(Eigen::MatrixXd::Constant(tasks, tasks, std::numeric_limits<double>::quiet_NaN())) {}

void AccuracyMatrix::set(Index task, Index after, double accuracy) {
  if (task < 0 || after >= tasks() || task > after) {
    throw ContractError("accuracy matrix: entry (" + std::to_string(task) + ", " + std::to_string(after) +
                        ") is outside the lower triangle");
  }
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw ContractError("accuracy matrix: value outside [0, 1]");
  values_(task, after) = accuracy;
}

bool AccuracyMatrix::defined(Index task, Index after) const {
  return task >= 0 && after < tasks() && task <= after && !std::isnan(values_(task, after));
}

double AccuracyMatrix::at(Index task, Index after) const {
  if (!defined(task, after)) {
    throw ContractError("accuracy matrix: entry (" + std::to_string(task) + ", " + std::to_string(after) +
                        ") is missing");
  }
  return values_(task, after);
}

double average_accuracy_after(const AccuracyMatrix& a, Index after) {
  double s = 0.0;
  for (Index i = 0; i <= after; ++i) s += a.at(i, after);
  return s / static_cast<double>(after + 1);
}

double faa(const AccuracyMatrix& a) {
  if (a.tasks() == 0) throw ContractError("faa: empty accuracy matrix");
  return average_accuracy_after(a, a.tasks() - 1);
}

double caa_after(const AccuracyMatrix& a, Index after) {
  double s = 0.0;
  for (Index j = 0; j <= after; ++j) s += average_accuracy_after(a, j);
  return s / static_cast<double>(after + 1);
}

double caa(const AccuracyMatrix& a) {
  if (a.tasks() == 0) throw ContractError("caa: empty accuracy matrix");
  return caa_after(a, a.tasks() - 1);
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17);
  return out;
}

}  // namespace

void write_accuracy_csv(const std::filesystem::path& path, const AccuracyMatrix& a) {
  auto out = open_csv(path);
  out << "after_task";
  for (Index i = 0; i < a.tasks(); ++i) out << ",task_" << i + 1;
  out << '\n';
  for (Index j = 0; j < a.tasks(); ++j) {
    out << j + 1;
    for (Index i = 0; i < a.tasks(); ++i) {
      out << ',';
      if (a.defined(i, j)) out << a.at(i, j);
    }
    out << '\n';
  }
}

AccuracyMatrix read_accuracy_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string(), 0);
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  const auto t = static_cast<Index>(rows.size());
  AccuracyMatrix a(t);
  for (Index j = 0; j < t; ++j) {
    const auto& cells = rows[static_cast<std::size_t>(j)];
    if (static_cast<Index>(cells.size()) != t + 1) {
      throw FormatError("accuracy csv row " + std::to_string(j + 1) + " has wrong cell count", 0);
    }
    for (Index i = 0; i <= j; ++i) {
      const auto& c = cells[static_cast<std::size_t>(i + 1)];
      if (!c.empty()) a.set(i, j, std::stod(c));
    }
  }
  return a;
}

void write_metrics_csv(const std::filesystem::path& path, const AccuracyMatrix& a) {
  auto out = open_csv(path);
  out << "task_j,faa_so_far,caa_so_far\n";
  for (Index j = 0; j < a.tasks(); ++j) {
    out << j + 1 << ',' << average_accuracy_after(a, j) << ',' << caa_after(a, j) << '\n';
  }
  out << "final," << faa(a) << ',' << caa(a) << '\n';
}

void write_forgetting_csv(const std::filesystem::path& path, const AccuracyMatrix& a) {
  auto out = open_csv(path);
  out << "task,after_task,accuracy\n";
  for (Index i = 0; i < a.tasks(); ++i)
    for (Index j = i; j < a.tasks(); ++j)
      if (a.defined(i, j)) out << i + 1 << ',' << j + 1 << ',' << a.at(i, j) << '\n';
}

std::vector<double> evaluate_split(const LogitFn& logits, std::span<const TaskDataset> test_sets,
                                   const std::vector<bool>& seen_classes) {
  std::vector<double> acc;
  acc.reserve(test_sets.size());
  for (const auto& test : test_sets) {
    if (test.empty()) throw ContractError("evaluate_split: empty test set for task " + std::to_string(test.task_id));
    Matrix z = logits(test);
    if (z.rows() != static_cast<Index>(test.size()) || z.cols() != static_cast<Index>(seen_classes.size())) {
      throw DimensionError("evaluate_split: logits shape does not match test set and class count");
    }
    std::size_t correct = 0;
    for (Index r = 0; r < z.rows(); ++r) {
      Index best = -1;
      double best_v = -std::numeric_limits<double>::infinity();
      for (Index c = 0; c < z.cols(); ++c) {
        if (seen_classes[static_cast<std::size_t>(c)] && (best < 0 || z(r, c) > best_v)) {
          best = c;
          best_v = z(r, c);
        }
      }
      if (best == static_cast<Index>(test.samples[static_cast<std::size_t>(r)].label)) ++correct;
    }
    acc.push_back(static_cast<double>(correct) / static_cast<double>(test.size()));
  }
  return acc;
}

}  // namespace vqp
