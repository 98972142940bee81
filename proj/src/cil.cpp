#include "vqprompt/cil.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>

#include "vqprompt/optim.hpp"

namespace vqp {

namespace {

constexpr std::size_t kInferenceChunk = 64;

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

Matrix gather_query_rows(const Matrix& queries, std::span<const std::size_t> idx) {
  Matrix out(static_cast<Index>(idx.size()), queries.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = queries.row(static_cast<Index>(idx[i]));
  return out;
}

}  // namespace

std::string to_string(PromptMode mode) {
  switch (mode) {
    case PromptMode::vq: return "vq";
    case PromptMode::soft: return "soft";
    case PromptMode::none: return "none";
  }
  return "?";
}

PromptMode parse_prompt_mode(const std::string& name) {
  if (name == "vq") return PromptMode::vq;
  if (name == "soft") return PromptMode::soft;
  if (name == "none") return PromptMode::none;
  throw ContractError("unknown prompt mode '" + name + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ContractError("train config: epochs must be >= 1");
  if (batch_size < 1 || calibration_batch_size < 1) throw ContractError("train config: batch sizes must be >= 1");
  if (calibration_epochs < 0) throw ContractError("train config: calibration epochs must be >= 0");
  if (pseudo_per_class < 1) throw ContractError("train config: pseudo_per_class must be >= 1");
  if (!(learning_rate > 0.0) || !(calibration_learning_rate > 0.0)) {
    throw ContractError("train config: learning rates must be positive");
  }
  if (!(temperature > 0.0)) throw ContractError("train config: temperature must be positive");
  if (weight_decay < 0.0) throw ContractError("train config: weight decay must be non-negative");
  weights.validate();
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---- head ------------------------------------------------------------------

ClassifierHead ClassifierHead::initialize(Index classes, Index dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix w(classes, dim);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  return {Tensor(std::move(w), true), Tensor(Matrix::Zero(1, classes), true)};
}

Tensor ClassifierHead::logits(const Tensor& features) const {
  return add_row(matmul(features, transpose(weight)), bias);
}

double head_accuracy(const ClassifierHead& head, const Matrix& features, std::span<const Index> labels,
                     const std::vector<bool>& active) {
  if (features.rows() == 0) throw ContractError("head_accuracy: no samples");
  Matrix z = (features * head.weight.value().transpose()).rowwise() +
             Eigen::Map<const RowVector>(head.bias.value().data(), head.classes());
  std::size_t correct = 0;
  for (Index r = 0; r < z.rows(); ++r) {
    Index best = -1;
    for (Index c = 0; c < z.cols(); ++c) {
      if (active[static_cast<std::size_t>(c)] && (best < 0 || z(r, c) > z(r, best))) best = c;
    }
    if (best == labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(z.rows());
}

Tensor masked_cross_entropy(const Tensor& logits, Index label, const std::vector<bool>& active) {
  const Index one[] = {label};
  Tensor row = logits.rank() == 2 ? logits : reshape(logits, {1, logits.numel()});
  return masked_cross_entropy(row, std::span<const Index>(one), active);
}

// ---- state -----------------------------------------------------------------

ContinualState ContinualState::create(std::shared_ptr<const Backbone> backbone, Index classes,
                                      Index pool_size, Index prompt_length, const TrainConfig& config) {
  if (!backbone || !backbone->frozen()) throw ContractError("continual state: backbone must be frozen");
  const Index dim = backbone->config().dim;
  return ContinualState{backbone,
                        PromptPool::initialize(pool_size, prompt_length, dim, derive_seed(config.seed, 1)),
                        ClassifierHead::initialize(classes, dim, derive_seed(config.seed, 2)),
                        {},
                        std::vector<bool>(static_cast<std::size_t>(classes), false),
                        config.mode,
                        config.temperature};
}

Matrix dataset_queries(const Backbone& backbone, const TaskDataset& data) {
  Matrix out(static_cast<Index>(data.size()), backbone.config().dim);
  const auto all = iota_indices(data.size());
  for (std::size_t start = 0; start < all.size(); start += kInferenceChunk) {
    std::span<const std::size_t> idx(all.data() + start, std::min(kInferenceChunk, all.size() - start));
    Tensor q = compute_queries(stack_tokens(data, idx), static_cast<Index>(idx.size()), backbone);
    out.middleRows(static_cast<Index>(start), q.rows()) = q.value();
  }
  return out;
}

PromptedForward prompted_forward(const ContinualState& state, const Matrix& tokens, const Matrix& queries,
                                 Index batch) {
  const Backbone& backbone = *state.backbone;
  PromptedForward out{Tensor(queries), Tensor::scalar(0.0), Tensor::scalar(0.0), {}};
  if (state.mode == PromptMode::none) return out;

  const PromptPool& pool = state.pool;
  const Tensor q(queries);
  Tensor prompt;
  if (state.mode == PromptMode::soft) {
    prompt = soft_prompt_forward(pool, q, state.temperature);
  } else {
    PromptSelection sel = select_prompts(pool, q, state.temperature);
    out.vq = vq_loss(sel.continuous, sel.selected);
    out.commit = commitment_loss(sel.continuous, sel.selected);
    out.index = std::move(sel.index);
    prompt = std::move(sel.quantized);
  }
  // One shared prompt per input for every prompt-receiving block.
  Tensor rows = reshape(prompt, {batch * pool.prompt_length(), pool.dim()});
  PromptMap prompts;
  for (int b : backbone.config().resolved_prompt_blocks()) prompts.emplace(b, rows);
  out.features = backbone.encode_batch(tokens, batch, prompts);
  return out;
}

Matrix ContinualState::features(const TaskDataset& data) const {
  NoGradGuard no_grad;
  const Matrix queries = dataset_queries(*backbone, data);
  if (mode == PromptMode::none) return queries;
  Matrix out(queries.rows(), queries.cols());
  const auto all = iota_indices(data.size());
  for (std::size_t start = 0; start < all.size(); start += kInferenceChunk) {
    std::span<const std::size_t> idx(all.data() + start, std::min(kInferenceChunk, all.size() - start));
    const auto n = static_cast<Index>(idx.size());
    auto fwd = prompted_forward(*this, stack_tokens(data, idx), queries.middleRows(static_cast<Index>(start), n), n);
    out.middleRows(static_cast<Index>(start), n) = fwd.features.value();
  }
  return out;
}

Matrix ContinualState::logits(const TaskDataset& data) const {
  NoGradGuard no_grad;
  return head.logits(Tensor(features(data))).value();
}

// ---- training --------------------------------------------------------------

std::vector<LossTraceRow> train_task(ContinualState& state, const TaskDataset& train,
                                     std::span<const std::uint32_t> task_classes, const TrainConfig& config) {
  config.validate();
  if (!state.backbone || !state.backbone->frozen()) throw ContractError("train_task: backbone must be frozen");
  if (train.empty()) throw ContractError("train_task: empty training set");
  check_labels_within(train, task_classes);

  std::vector<bool> active(state.seen.size(), false);
  for (auto c : task_classes) {
    if (c >= state.seen.size()) throw DataError("train_task: class " + std::to_string(c) + " exceeds head width");
    active[c] = true;
    state.seen[c] = true;
  }

  const Matrix queries = dataset_queries(*state.backbone, train);
  std::vector<Tensor> params = state.head.parameters();
  if (state.mode != PromptMode::none) {
    for (auto& p : state.pool.parameters()) params.push_back(p);
  }
  AdamW optimizer(params, {config.beta1, config.beta2, 1e-8, config.weight_decay});

  std::mt19937_64 rng(derive_seed(config.seed, 100 + train.task_id));
  auto order = iota_indices(train.size());
  const auto bs = static_cast<std::size_t>(config.batch_size);
  const long steps_per_epoch = static_cast<long>((train.size() + bs - 1) / bs);
  const long total_steps = steps_per_epoch * config.epochs;
  long step = 0;
  const bool vq_mode = state.mode == PromptMode::vq;
  const LossWeights weights = vq_mode ? config.weights : LossWeights{0.0, 0.0};

  std::vector<LossTraceRow> trace;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    LossTraceRow row;
    row.epoch = epoch + 1;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));
      const auto n = static_cast<Index>(idx.size());
      std::vector<Index> labels;
      labels.reserve(idx.size());
      for (auto i : idx) labels.push_back(train.samples[i].label);

      auto fwd = prompted_forward(state, stack_tokens(train, idx), gather_query_rows(queries, idx), n);
      Tensor ce = masked_cross_entropy(state.head.logits(fwd.features), labels, active);
      Tensor loss = total_loss(ce, fwd.vq, fwd.commit, weights);

      optimizer.zero_grad();
      loss.backward();
      optimizer.step(cosine_rate(config.learning_rate, step++, total_steps));

      const double w = static_cast<double>(n);
      row.ce += w * ce.item();
      row.vq += w * fwd.vq.item();
      row.commit += w * fwd.commit.item();
      row.total += w * loss.item();
    }
    const double inv = 1.0 / static_cast<double>(train.size());
    row.ce *= inv;
    row.vq *= inv;
    row.commit *= inv;
    row.total *= inv;
    trace.push_back(row);
  }
  optimizer.zero_grad();
  return trace;
}

// ---- representation statistics ---------------------------------------------

void collect_class_statistics(const ContinualState& state, const TaskDataset& train, ClassStatistics& stats) {
  const Matrix features = state.features(train);
  std::map<std::uint32_t, std::vector<Index>> rows_of;
  for (std::size_t i = 0; i < train.size(); ++i) rows_of[train.samples[i].label].push_back(static_cast<Index>(i));

  for (const auto& [label, rows] : rows_of) {
    if (stats.count(label)) {
      throw ContractError("collect_class_statistics: class " + std::to_string(label) + " already has statistics");
    }
  }
  for (const auto& [label, rows] : rows_of) {
    ClassStats s;
    s.count = rows.size();
    s.mean = RowVector::Zero(features.cols());
    for (Index r : rows) s.mean += features.row(r);
    s.mean /= static_cast<double>(rows.size());
    s.variance = RowVector::Zero(features.cols());
    for (Index r : rows) s.variance += (features.row(r) - s.mean).cwiseAbs2();
    s.variance /= static_cast<double>(rows.size());
    s.variance = s.variance.cwiseMax(kVarianceFloor);
    if (rows.size() < 2) {
      std::cerr << "warning: class " << label << " has " << rows.size()
                << " sample(s); its variance is the floor value\n";
    }
    stats.emplace(label, std::move(s));
  }
}

PseudoFeatures sample_pseudo_features(const ClassStatistics& stats, int per_class, std::uint64_t seed) {
  if (per_class <= 0) throw ContractError("sample_pseudo_features: per_class must be positive");
  if (stats.empty()) throw ContractError("sample_pseudo_features: no class statistics");
  const Index dim = stats.begin()->second.mean.size();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<RowVector> stddev;
  for (const auto& [label, s] : stats) stddev.push_back(s.variance.cwiseSqrt());

  PseudoFeatures out;
  out.features.resize(static_cast<Index>(stats.size()) * per_class, dim);
  out.labels.reserve(static_cast<std::size_t>(out.features.rows()));
  Index r = 0;
  for (int round = 0; round < per_class; ++round) {
    std::size_t c = 0;
    for (const auto& [label, s] : stats) {
      for (Index k = 0; k < dim; ++k) out.features(r, k) = s.mean(k) + stddev[c](k) * normal(rng);
      out.labels.push_back(label);
      ++r;
      ++c;
    }
  }
  return out;
}

void calibrate_classifier(ClassifierHead& head, const ClassStatistics& stats, const TrainConfig& config,
                          std::uint64_t seed) {
  if (config.calibration_epochs == 0 || stats.empty()) return;
  std::mt19937_64 rng(seed);
  PseudoFeatures pseudo = sample_pseudo_features(stats, config.pseudo_per_class, rng());

  std::vector<bool> active(static_cast<std::size_t>(head.classes()), false);
  for (const auto& [label, s] : stats) active.at(label) = true;

  // Positions of each class's samples, reshuffled per epoch and re-interleaved
  // so that consecutive batches stay class-balanced.
  const std::size_t n_classes = stats.size();
  const auto per_class = static_cast<std::size_t>(config.pseudo_per_class);
  std::vector<std::vector<std::size_t>> slots(n_classes);
  for (std::size_t i = 0; i < pseudo.labels.size(); ++i) slots[i % n_classes].push_back(i);

  AdamW optimizer(head.parameters(), {config.beta1, config.beta2, 1e-8, config.weight_decay});
  const auto bs = static_cast<std::size_t>(config.calibration_batch_size);
  const std::size_t n = pseudo.labels.size();
  const long total_steps = static_cast<long>((n + bs - 1) / bs) * config.calibration_epochs;
  long step = 0;
  std::vector<std::size_t> order(n);
  for (int epoch = 0; epoch < config.calibration_epochs; ++epoch) {
    for (auto& s : slots) std::shuffle(s.begin(), s.end(), rng);
    std::size_t o = 0;
    for (std::size_t round = 0; round < per_class; ++round)
      for (std::size_t c = 0; c < n_classes; ++c) order[o++] = slots[c][round];

    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t m = std::min(bs, n - start);
      Matrix x(static_cast<Index>(m), pseudo.features.cols());
      std::vector<Index> labels(m);
      for (std::size_t i = 0; i < m; ++i) {
        x.row(static_cast<Index>(i)) = pseudo.features.row(static_cast<Index>(order[start + i]));
        labels[i] = pseudo.labels[order[start + i]];
      }
      optimizer.zero_grad();
      masked_cross_entropy(head.logits(Tensor(std::move(x))), labels, active).backward();
      optimizer.step(cosine_rate(config.calibration_learning_rate, step++, total_steps));
    }
  }
  optimizer.zero_grad();
}

// ---- continual run ---------------------------------------------------------

ContinualResult run_continual(std::shared_ptr<const Backbone> backbone, const TaskSequence& sequence,
                              const TrainConfig& config, PoolShape pool, const TaskObserver& observer) {
  config.validate();
  if (sequence.size() == 0) throw ContractError("run_continual: empty task sequence");
  if (sequence.test.size() != sequence.size()) throw ContractError("run_continual: missing test sets");
  check_disjoint_labels(sequence);

  ContinualResult result{AccuracyMatrix(static_cast<Index>(sequence.size())), {},
                         ContinualState::create(std::move(backbone), sequence.num_classes, pool.pool_size,
                                                pool.prompt_length, config)};
  ContinualState& state = result.state;

  for (std::size_t t = 0; t < sequence.size(); ++t) {
    const auto& train = sequence.train[t];
    const auto classes = train.labels();
    TaskReport report;
    report.task = static_cast<int>(t + 1);
    report.trace = train_task(state, train, classes, config);
    collect_class_statistics(state, train, state.stats);
    if (config.calibrate) calibrate_classifier(state.head, state.stats, config, derive_seed(config.seed, 200 + t));

    report.accuracies = evaluate_split([&](const TaskDataset& d) { return state.logits(d); },
                                       std::span<const TaskDataset>(sequence.test.data(), t + 1), state.seen);
    for (std::size_t i = 0; i <= t; ++i) {
      result.accuracy.set(static_cast<Index>(i), static_cast<Index>(t), report.accuracies[i]);
    }
    result.traces.push_back(report.trace);
    if (observer) observer(report, state);
  }
  return result;
}

}  // namespace vqp
