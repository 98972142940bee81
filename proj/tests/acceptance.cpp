// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "scenarios.hpp"
#include "test_util.hpp"
#include "vqprompt/backbone.hpp"
#include "vqprompt/checkpoint.hpp"
#include "vqprompt/cil.hpp"
#include "vqprompt/commands.hpp"
#include "vqprompt/config.hpp"
#include "vqprompt/grad_check.hpp"
#include "vqprompt/metrics.hpp"
#include "vqprompt/vq_prompt.hpp"

using namespace vqp;
using vqp::testing::bit_equal;
using vqp::testing::random_matrix;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Collects the first few failure messages of a criterion.
class Checker {
 public:
  void expect(bool ok, const std::string& what) {
    if (ok) return;
    if (++failures_ <= 3) notes_ << (failures_ > 1 ? "; " : "") << what;
  }
  bool ok() const { return failures_ == 0; }
  std::string notes() const {
    std::string n = notes_.str();
    if (failures_ > 3) n += "; " + std::to_string(failures_ - 3) + " more";
    return n;
  }

 private:
  int failures_ = 0;
  std::ostringstream notes_;
};

std::string fmt(double v, int digits = 3) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

double max_abs(const Tensor& t) { return t.has_grad() ? t.grad().cwiseAbs().maxCoeff() : 0.0; }

PromptPool random_pool(std::mt19937_64& rng, Index n, Index lp, Index d) {
  return PromptPool(Tensor({n, lp, d}, random_matrix(rng, n * lp, d), true), Tensor(random_matrix(rng, n, d), true));
}

Tensor random_query(std::mt19937_64& rng, Index d) {
  return reshape(Tensor(random_matrix(rng, 1, d, -2.0, 2.0)), {d});
}

// ---------------------------------------------------------------------------

Outcome gradient_routing() {
  const Index n = 10, lp = 8, d = 16;
  std::mt19937_64 rng(101);
  Checker c;
  double worst_fd = 0.0, worst_analytic = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    PromptPool pool = random_pool(rng, n, lp, d);
    Tensor q = random_query(rng, d);
    const PromptSelection sel = select_prompts(pool, q);
    Tensor cont(sel.continuous.shape(), sel.continuous.value(), true);
    const Quantized quant = quantize_prompt(pool, cont);
    const Index k = quant.index[0];

    vq_loss(cont, quant.selected).backward();
    c.expect(max_abs(cont) == 0.0, "dL_vq/dp' nonzero");
    Matrix expected = Matrix::Zero(n * lp, d);
    expected.middleRows(k * lp, lp) = 2.0 * (pool.element(k) - cont.value());
    worst_analytic = std::max(worst_analytic, (pool.prompts().grad() - expected).cwiseAbs().maxCoeff());

    Tensor(pool.prompts()).zero_grad();
    cont.zero_grad();
    commitment_loss(cont, quant.selected).backward();
    c.expect(max_abs(pool.prompts()) == 0.0, "direct dL_commit/dP_k nonzero");
    worst_analytic = std::max(
        worst_analytic, (cont.grad() - 2.0 * (cont.value() - pool.element(k))).cwiseAbs().maxCoeff());

    auto vq_fn = [&] {
      PromptSelection s = select_prompts(pool, q);
      return vq_loss(s.continuous, s.selected);
    };
    auto commit_fn = [&] {
      PromptSelection s = select_prompts(pool, q);
      return commitment_loss(s.continuous, s.selected);
    };
    worst_fd = std::max(worst_fd, grad_check(vq_fn, {pool.prompts(), pool.keys()}));
    worst_fd = std::max(worst_fd, grad_check(commit_fn, {pool.prompts(), pool.keys()}));
  }
  c.expect(worst_analytic < 1e-12, "analytic gradient off by " + fmt(worst_analytic));
  c.expect(worst_fd < 1e-4, "finite-difference error " + fmt(worst_fd));
  return {c.ok(), c.ok() ? "100 instances, max fd error " + fmt(worst_fd) : c.notes()};
}

Outcome straight_through_identity() {
  const Index n = 10, lp = 8, d = 16;
  std::mt19937_64 rng(202);
  Checker c;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    PromptPool pool = random_pool(rng, n, lp, d);
    const PromptSelection sel = select_prompts(pool, random_query(rng, d));
    Tensor cont(sel.continuous.shape(), sel.continuous.value(), true);
    const Quantized quant = quantize_prompt(pool, cont);
    const Matrix pk = pool.element(quant.index[0]);
    c.expect(bit_equal(quant.prompt.value(), pk), "forward value is not P_k");

    // L(p) = sum(w * tanh(p)) + 0.5 ||p||^2, differentiated by hand at p = P_k.
    const Matrix w = random_matrix(rng, lp, d);
    Tensor p2 = reshape(quant.prompt, {lp, d});
    add(sum(mul(Tensor(w), tanh(p2))), scale(squared_norm(p2), 0.5)).backward();
    const Matrix symbolic = (w.array() * (1.0 - pk.array().tanh().square())).matrix() + pk;
    worst = std::max(worst, (cont.grad() - symbolic).cwiseAbs().maxCoeff());
    c.expect(max_abs(pool.prompts()) == 0.0, "downstream loss reached the pool through P_k");
  }
  c.expect(worst < 1e-10, "max deviation " + fmt(worst));
  return {c.ok(), c.ok() ? "100 instances, max deviation " + fmt(worst) : c.notes()};
}

// Exhaustive scan, strict comparison so the lowest index wins ties.
Index brute_argmin(const PromptPool& pool, const Matrix& p) {
  Index best = -1;
  double best_d = 0.0;
  for (Index j = 0; j < pool.size(); ++j) {
    const Matrix e = pool.element(j);
    double dist = 0.0;
    for (Index r = 0; r < p.rows(); ++r)
      for (Index col = 0; col < p.cols(); ++col) dist += (p(r, col) - e(r, col)) * (p(r, col) - e(r, col));
    if (best < 0 || dist < best_d) {
      best = j;
      best_d = dist;
    }
  }
  return best;
}

Outcome quantization_oracle() {
  const Index n = 10, lp = 8, d = 16;
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<Index> pick(0, n - 1);
  Checker c;
  int ties = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    Matrix p = random_matrix(rng, n * lp, d);
    Matrix cont = random_matrix(rng, lp, d);
    Index expected = -1;
    if (trial % 4 == 0) {
      Index i = pick(rng), j = pick(rng);
      while (j == i) j = pick(rng);
      if (i > j) std::swap(i, j);
      if (trial % 8 == 0) {
        // Exact duplicates just off p'.
        p.middleRows(i * lp, lp) = cont + 0.01 * random_matrix(rng, lp, d);
        p.middleRows(j * lp, lp) = p.middleRows(i * lp, lp);
      } else {
        // Mirror images around p' = 0.
        cont.setZero();
        const Matrix e = 0.1 * random_matrix(rng, lp, d);
        p.middleRows(i * lp, lp) = (trial % 3 == 0) ? Matrix(-e) : e;
        p.middleRows(j * lp, lp) = (trial % 3 == 0) ? e : Matrix(-e);
      }
      expected = i;
      ++ties;
    }
    PromptPool pool(Tensor({n, lp, d}, p), Tensor(Matrix(Matrix::Zero(n, d))));
    const Index got = quantize_prompt(pool, Tensor(cont)).index[0];
    const Index brute = brute_argmin(pool, cont);
    c.expect(got == brute, "trial " + std::to_string(trial) + ": " + std::to_string(got) + " vs brute " +
                               std::to_string(brute));
    if (expected >= 0) {
      c.expect(brute == expected, "tie oracle disagrees at trial " + std::to_string(trial));
      c.expect(got == expected, "tie at trial " + std::to_string(trial) + " resolved to " + std::to_string(got));
    }
  }
  return {c.ok(), c.ok() ? "10000 pools, " + std::to_string(ties) + " constructed ties" : c.notes()};
}

double caa_oracle(const AccuracyMatrix& a) {
  const Index t = a.tasks();
  double outer = 0.0;
  for (Index j = 1; j <= t; ++j) {
    double inner = 0.0;
    for (Index i = 1; i <= j; ++i) inner += a.at(i - 1, j - 1);
    outer += inner / static_cast<double>(j);
  }
  return outer / static_cast<double>(t);
}

double faa_oracle(const AccuracyMatrix& a) {
  const Index t = a.tasks();
  double s = 0.0;
  for (Index i = 1; i <= t; ++i) s += a.at(i - 1, t - 1);
  return s / static_cast<double>(t);
}

Outcome metric_oracle() {
  std::mt19937_64 rng(404);
  std::uniform_int_distribution<Index> size(1, 10);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Checker c;
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    AccuracyMatrix a(size(rng));
    for (Index j = 0; j < a.tasks(); ++j)
      for (Index i = 0; i <= j; ++i) a.set(i, j, u(rng));
    worst = std::max({worst, std::abs(faa(a) - faa_oracle(a)), std::abs(caa(a) - caa_oracle(a))});
  }
  c.expect(worst <= 1e-12, "random matrices off by " + fmt(worst));
  AccuracyMatrix hand(2);
  hand.set(0, 0, 0.8);
  hand.set(0, 1, 0.6);
  hand.set(1, 1, 0.7);
  c.expect(std::abs(faa(hand) - 0.65) <= 1e-12, "hand FAA " + fmt(faa(hand), 17));
  c.expect(std::abs(caa(hand) - 0.725) <= 1e-12, "hand CAA " + fmt(caa(hand), 17));
  return {c.ok(), c.ok() ? "1000 matrices, hand case FAA 0.65 CAA 0.725" : c.notes()};
}

MSABlockParams random_block(std::mt19937_64& rng, Index d, int heads) {
  MSABlockParams p;
  p.heads = heads;
  p.w_q = Tensor(random_matrix(rng, d, d));
  p.w_k = Tensor(random_matrix(rng, d, d));
  p.w_v = Tensor(random_matrix(rng, d, d));
  p.w_o = Tensor(random_matrix(rng, d, d));
  return p;
}

Outcome prefix_contract() {
  std::mt19937_64 rng(505);
  Checker c;
  int cases = 0;
  for (Index d : {8, 16}) {
    const MSABlockParams block = random_block(rng, d, 4);
    for (Index len : {1, 2, 9, 17}) {
      for (Index batch : {1, 3}) {
        Tensor h(random_matrix(rng, batch * len, d));
        const Tensor plain = msa_forward(h, h, h, block, batch);
        const Tensor empty = prefix_tuned_msa(Tensor(Matrix(0, d)), h, block, batch);
        c.expect(bit_equal(empty.value(), plain.value()), "L_p = 0 differs from plain attention");
        for (Index lp : {0, 2, 4, 8, 16}) {
          const Tensor out = prefix_tuned_msa(Tensor(random_matrix(rng, batch * lp, d)), h, block, batch);
          c.expect(out.shape() == h.shape(), "L_p " + std::to_string(lp) + " changed the output shape to " +
                                                 shape_string(out.shape()));
          ++cases;
        }
      }
    }
  }
  // The same holds for a whole encoder with prompts in every block.
  BackboneConfig cfg;
  cfg.depth = 3;
  cfg.dim = 16;
  cfg.heads = 4;
  cfg.seq_len = 7;
  cfg.ff_dim = 16;
  cfg.token_dim = 5;
  cfg.prompt_blocks = {0, 1, 2};
  const Backbone backbone = Backbone::initialize(cfg, 5);
  const Matrix tokens = random_matrix(rng, 6, 5);
  PromptMap none;
  for (int b : cfg.prompt_blocks) none.emplace(b, Tensor(Matrix(0, 16)));
  c.expect(bit_equal(backbone.encode(tokens, none).value(), backbone.encode(tokens).value()),
           "empty prompts change the encoder output");
  return {c.ok(), c.ok() ? std::to_string(cases) + " prompt/length cases, L_p = 0 bit-equal" : c.notes()};
}

// ---------------------------------------------------------------------------
// Desk-scale benchmark: data and pretrained backbone per seed, built on demand.

const fs::path kRoot = fs::temp_directory_path() / "vqp_acceptance";
const std::vector<std::uint64_t> kSeeds{1, 2, 3};
const std::vector<std::string> kModes{"vq", "vq-s", "soft", "none"};

ExperimentConfig desk_config(std::uint64_t seed, const std::string& mode = "vq") {
  ExperimentConfig cfg;
  cfg.seed = seed;
  cfg.mode = mode;
  return cfg;
}

struct DeskSeed {
  fs::path data, backbone;
};

double g_setup_seconds = 0.0;

const DeskSeed& desk(std::uint64_t seed) {
  static std::map<std::uint64_t, DeskSeed> cache;
  if (auto it = cache.find(seed); it != cache.end()) return it->second;
  const auto start = Clock::now();
  const fs::path dir = kRoot / ("seed_" + std::to_string(seed));
  DeskSeed s{dir / "data", dir / "backbone.ckpt"};
  cmd_generate(desk_config(seed), s.data);
  const PretrainResult r = cmd_pretrain(desk_config(seed), s.data, s.backbone);
  std::cout << "  seed " << seed << ": pretrained backbone, held-out accuracy "
            << fmt(r.heldout_accuracy.value_or(0.0)) << "\n";
  g_setup_seconds += seconds_since(start);
  return cache.emplace(seed, s).first->second;
}

Outcome freeze_contracts() {
  const DeskSeed& s = desk(kSeeds.front());
  const ExperimentConfig cfg = desk_config(kSeeds.front());
  const Benchmark bench = read_benchmark(s.data);
  auto backbone = std::make_shared<const Backbone>(backbone_from_checkpoint(read_checkpoint(s.backbone)));
  const std::uint64_t before = backbone->checksum();
  Checker c;
  int tasks = 0;
  ContinualResult r = run_continual(backbone, bench.sequence, cfg.train_config(), cfg.pool_shape(),
                                    [&](const TaskReport& report, const ContinualState&) {
                                      ++tasks;
                                      c.expect(backbone->checksum() == before,
                                               "backbone moved during task " + std::to_string(report.task));
                                    });
  c.expect(tasks == 5, "expected 5 tasks, saw " + std::to_string(tasks));

  ContinualState& state = r.state;
  const auto head = state.head.checksum(), pool = state.pool.checksum();
  calibrate_classifier(state.head, state.stats, cfg.train_config(), 99);
  c.expect(state.head.checksum() != head, "calibration left the head unchanged");
  c.expect(state.pool.checksum() == pool, "calibration moved the prompt pool");
  c.expect(backbone->checksum() == before, "calibration moved the backbone");
  return {c.ok(), c.ok() ? "checksum constant over 5 tasks, calibration touched only the head" : c.notes()};
}

std::map<std::string, std::vector<RunSummary>> g_runs;

fs::path run_dir(std::uint64_t seed, const std::string& mode) {
  return kRoot / ("seed_" + std::to_string(seed)) / ("run_" + mode);
}

Outcome continual_experiment() {
  const double reused = g_setup_seconds;
  const auto start = Clock::now();
  for (std::uint64_t seed : kSeeds) {
    const DeskSeed& s = desk(seed);
    for (const auto& mode : kModes) {
      RunSummary r = cmd_run(desk_config(seed, mode), s.data, s.backbone, run_dir(seed, mode));
      std::cout << "  seed " << seed << " " << mode << ": FAA " << fmt(100.0 * r.faa, 4) << " CAA "
                << fmt(100.0 * r.caa, 4) << "\n";
      g_runs[mode].push_back(std::move(r));
    }
  }
  const double total = seconds_since(start) + reused;

  std::vector<fs::path> dirs;
  for (const auto& mode : kModes)
    for (std::uint64_t seed : kSeeds) dirs.push_back(run_dir(seed, mode));
  std::ostringstream table;
  const auto rows = cmd_report(dirs, table);
  std::cout << table.str();

  std::map<std::string, double> faa_mean;
  for (const auto& row : rows) faa_mean[row.mode] = 100.0 * row.faa_mean;  // points
  Checker c;
  c.expect(rows.size() == kModes.size(), "report is missing a mode");
  const double margin = faa_mean["vq"] - faa_mean["none"];
  c.expect(margin >= 10.0, "vq - none = " + fmt(margin) + " points");
  c.expect(faa_mean["vq"] >= faa_mean["vq-s"] - 1.0,
           "vq " + fmt(faa_mean["vq"]) + " below vq-s " + fmt(faa_mean["vq-s"]) + " - 1");
  c.expect(std::isfinite(faa_mean["soft"]) && faa_mean.count("soft") == 1, "soft mode not reported");
  c.expect(total < 15 * 60.0, "took " + fmt(total) + " s");
  std::ostringstream detail;
  detail << "FAA vq " << fmt(faa_mean["vq"]) << ", vq-s " << fmt(faa_mean["vq-s"]) << ", soft "
         << fmt(faa_mean["soft"]) << ", none " << fmt(faa_mean["none"]) << " (vq - none " << fmt(margin)
         << " points), experiment " << fmt(total) << " s";
  return {c.ok(), c.ok() ? detail.str() : c.notes() + " | " + detail.str()};
}

Outcome calibration_bias() {
  Checker c;
  std::ostringstream detail;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto r = vqp::testing::calibration_bias_scenario(seed);
    detail << (seed > 1 ? ", " : "") << fmt(r.before) << " -> " << fmt(r.after);
    c.expect(r.after > r.before, "seed " + std::to_string(seed) + " did not improve");
  }
  return {c.ok(), c.ok() ? "task-1 accuracy " + detail.str() : c.notes() + " | " + detail.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome reproducibility() {
  // A second, independent invocation of generate, pretrain and run for seed 1.
  const std::uint64_t seed = kSeeds.front();
  const ExperimentConfig cfg = desk_config(seed);
  const fs::path dir = kRoot / "repeat";
  cmd_generate(cfg, dir / "data");
  cmd_pretrain(cfg, dir / "data", dir / "backbone.ckpt");
  cmd_run(cfg, dir / "data", dir / "backbone.ckpt", dir / "run_vq");

  Checker c;
  const fs::path first = run_dir(seed, "vq");
  c.expect(fs::exists(first / "metrics.csv"), "first run missing");
  c.expect(slurp(desk(seed).backbone) == slurp(dir / "backbone.ckpt"), "backbone checkpoints differ");
  for (const char* f : {"metrics.csv", "accuracy_matrix.csv", "forgetting.csv"}) {
    c.expect(slurp(first / f) == slurp(dir / "run_vq" / f), std::string(f) + " differs");
  }
  return {c.ok(), c.ok() ? "metrics, accuracy and forgetting CSVs byte-identical" : c.notes()};
}

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;  // 0 for no limit of its own
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  fs::remove_all(kRoot);
  fs::create_directories(kRoot);

  const std::vector<Criterion> criteria{
      {1, "gradient routing", 10.0, gradient_routing},
      {2, "straight-through identity", 5.0, straight_through_identity},
      {3, "quantization oracle", 10.0, quantization_oracle},
      {4, "metric oracle", 0.0, metric_oracle},
      {5, "prefix-tuning contract", 0.0, prefix_contract},
      {6, "freeze contracts", 0.0, freeze_contracts},
      {7, "desk-scale continual experiment", 0.0, continual_experiment},
      {8, "calibration bias", 0.0, calibration_bias},
      {9, "reproducibility", 0.0, reproducibility},
  };

  int failed = 0;
  for (const auto& cr : criteria) {
    const auto start = Clock::now();
    Outcome out;
    try {
      out = cr.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(start);
    if (cr.limit_seconds > 0.0 && secs >= cr.limit_seconds) {
      out.pass = false;
      out.detail += " | over the " + fmt(cr.limit_seconds) + " s limit";
    }
    failed += out.pass ? 0 : 1;
    std::cout << (out.pass ? "PASS" : "FAIL") << " criterion " << cr.id << " (" << cr.name << "): " << out.detail
              << " [" << fmt(secs) << " s]" << std::endl;
  }

  fs::remove_all(kRoot);
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
