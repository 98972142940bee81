#include "vqprompt/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "binary_io.hpp"

namespace vqp {

namespace {

constexpr std::string_view kDatasetMagic = "VQPD";
constexpr std::uint32_t kDatasetVersion = 1;

struct ClassBlock {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

ClassBlock make_class(std::mt19937_64& rng, std::uint32_t label, int count,
                      const BenchmarkOptions& opt, std::uint64_t& next_id) {
  std::uniform_real_distribution<double> anchor_dist(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  Matrix anchor(opt.tokens_per_sample, opt.token_dim);
  for (Index i = 0; i < anchor.size(); ++i) anchor.data()[i] = anchor_dist(rng);

  const int n_train = count * 4 / 5;
  ClassBlock block;
  for (int s = 0; s < count; ++s) {
    Sample sample;
    sample.id = next_id++;
    sample.label = label;
    sample.tokens = anchor;
    if (opt.noise_scale != 0.0) {
      for (Index i = 0; i < sample.tokens.size(); ++i) sample.tokens.data()[i] += opt.noise_scale * noise(rng);
    }
    (s < n_train ? block.train : block.test).push_back(std::move(sample));
  }
  return block;
}

TaskDataset empty_dataset(std::uint32_t task_id, Split split, const BenchmarkOptions& opt) {
  TaskDataset d;
  d.task_id = task_id;
  d.split = split;
  d.tokens_per_sample = opt.tokens_per_sample;
  d.token_dim = opt.token_dim;
  return d;
}

void append(std::vector<Sample>& dst, std::vector<Sample>& src) {
  std::move(src.begin(), src.end(), std::back_inserter(dst));
}

}  // namespace

std::vector<std::uint32_t> TaskDataset::labels() const {
  std::set<std::uint32_t> s;
  for (const auto& x : samples) s.insert(x.label);
  return {s.begin(), s.end()};
}

Benchmark generate_benchmark(const BenchmarkOptions& opt) {
  if (opt.tasks < 1) throw ContractError("generate_benchmark: need at least one task");
  if (opt.classes_per_task < 2) throw ContractError("generate_benchmark: need >= 2 classes per task");
  if (opt.samples_per_class < 2) throw ContractError("generate_benchmark: need >= 2 samples per class");
  if (opt.pretrain_classes < 1 || opt.pretrain_samples_per_class < 2) {
    throw ContractError("generate_benchmark: invalid pretrain counts");
  }
  if (opt.noise_scale < 0.0) throw ContractError("generate_benchmark: negative noise scale");
  if (opt.tokens_per_sample < 1 || opt.token_dim < 1) {
    throw ContractError("generate_benchmark: invalid token geometry");
  }

  std::mt19937_64 rng(opt.seed);
  std::uint64_t next_id = 0;
  Benchmark bench;
  bench.sequence.seed = opt.seed;
  bench.sequence.num_classes = static_cast<std::uint32_t>(opt.tasks * opt.classes_per_task);

  std::uint32_t label = 0;
  for (int t = 0; t < opt.tasks; ++t) {
    auto train = empty_dataset(static_cast<std::uint32_t>(t + 1), Split::train, opt);
    auto test = empty_dataset(static_cast<std::uint32_t>(t + 1), Split::test, opt);
    for (int c = 0; c < opt.classes_per_task; ++c) {
      auto block = make_class(rng, label++, opt.samples_per_class, opt, next_id);
      append(train.samples, block.train);
      append(test.samples, block.test);
    }
    bench.sequence.train.push_back(std::move(train));
    bench.sequence.test.push_back(std::move(test));
  }

  bench.pretrain_train = empty_dataset(0, Split::train, opt);
  bench.pretrain_test = empty_dataset(0, Split::test, opt);
  for (int c = 0; c < opt.pretrain_classes; ++c) {
    auto block = make_class(rng, label++, opt.pretrain_samples_per_class, opt, next_id);
    append(bench.pretrain_train.samples, block.train);
    append(bench.pretrain_test.samples, block.test);
  }
  return bench;
}

void check_disjoint_labels(const TaskSequence& sequence, const TaskDataset* pretrain) {
  std::map<std::uint32_t, std::string> owner;
  auto claim = [&](const std::vector<std::uint32_t>& labels, const std::string& who) {
    for (auto l : labels) {
      auto [it, inserted] = owner.emplace(l, who);
      if (!inserted && it->second != who) {
        throw ProtocolError("class " + std::to_string(l) + " appears in both " + it->second +
                            " and " + who);
      }
    }
  };
  for (std::size_t t = 0; t < sequence.size(); ++t) {
    const std::string who = "task " + std::to_string(t + 1);
    claim(sequence.train[t].labels(), who);
    if (t < sequence.test.size()) claim(sequence.test[t].labels(), who);
  }
  if (pretrain) claim(pretrain->labels(), "pretrain");
}

void check_labels_within(const TaskDataset& data, std::span<const std::uint32_t> allowed) {
  for (const auto& s : data.samples) {
    if (std::find(allowed.begin(), allowed.end(), s.label) == allowed.end()) {
      throw DataError("sample " + std::to_string(s.id) + " has label " + std::to_string(s.label) +
                      " outside the task's class set");
    }
  }
}

Matrix stack_tokens(const TaskDataset& data, std::span<const std::size_t> indices) {
  const Index l = data.tokens_per_sample;
  Matrix out(static_cast<Index>(indices.size()) * l, data.token_dim);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.middleRows(static_cast<Index>(i) * l, l) = data.samples.at(indices[i]).tokens;
  }
  return out;
}

void write_dataset(const std::filesystem::path& path, const TaskDataset& data) {
  io::Writer w;
  w.raw(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u32(data.task_id);
  w.u8(static_cast<std::uint8_t>(data.split));
  w.u32(static_cast<std::uint32_t>(data.tokens_per_sample));
  w.u32(static_cast<std::uint32_t>(data.token_dim));
  w.u64(data.samples.size());
  for (const auto& s : data.samples) {
    if (s.tokens.rows() != data.tokens_per_sample || s.tokens.cols() != data.token_dim) {
      throw DimensionError("write_dataset: sample " + std::to_string(s.id) + " has wrong token shape");
    }
    w.u64(s.id);
    w.u32(s.label);
    for (Index i = 0; i < s.tokens.size(); ++i) w.f64(s.tokens.data()[i]);
  }
  w.save(path);
}

TaskDataset read_dataset(const std::filesystem::path& path) {
  io::Reader r(path);
  r.expect_magic(kDatasetMagic);
  const std::uint64_t version_at = r.offset();
  if (r.u32("version") != kDatasetVersion) throw FormatError("unsupported dataset version", version_at);
  TaskDataset d;
  d.task_id = r.u32("task id");
  const std::uint64_t split_at = r.offset();
  const std::uint8_t split = r.u8("split");
  if (split > 1) throw FormatError("invalid split tag", split_at);
  d.split = static_cast<Split>(split);
  d.tokens_per_sample = r.u32("tokens per sample");
  d.token_dim = r.u32("token dim");
  const std::uint64_t count = r.u64("sample count");
  const std::uint64_t per_sample = 12 + 8 * static_cast<std::uint64_t>(d.tokens_per_sample * d.token_dim);
  if (per_sample != 0 && count > r.remaining() / per_sample) {
    throw FormatError("truncated file: header promises " + std::to_string(count) + " samples",
                      r.offset());
  }
  d.samples.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Sample s;
    s.id = r.u64("sample id");
    s.label = r.u32("label");
    s.tokens.resize(d.tokens_per_sample, d.token_dim);
    for (Index j = 0; j < s.tokens.size(); ++j) s.tokens.data()[j] = r.f64("token value");
    d.samples.push_back(std::move(s));
  }
  r.expect_end();
  return d;
}

namespace {

std::filesystem::path task_file(const std::filesystem::path& dir, std::size_t t, Split split) {
  return dir / ("task_" + std::to_string(t) + (split == Split::train ? "_train.bin" : "_test.bin"));
}

std::string class_range(const TaskDataset& d) {
  auto labels = d.labels();
  if (labels.empty()) return "-";
  return std::to_string(labels.front()) + "-" + std::to_string(labels.back());
}

}  // namespace

void write_benchmark(const std::filesystem::path& dir, const Benchmark& bench) {
  std::filesystem::create_directories(dir);
  write_dataset(dir / "pretrain_train.bin", bench.pretrain_train);
  write_dataset(dir / "pretrain_test.bin", bench.pretrain_test);
  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  manifest << "# task classes train test\n";
  manifest << "pretrain " << class_range(bench.pretrain_train) << ' ' << bench.pretrain_train.size()
           << ' ' << bench.pretrain_test.size() << '\n';
  for (std::size_t t = 0; t < bench.sequence.size(); ++t) {
    const auto& tr = bench.sequence.train[t];
    const auto& te = bench.sequence.test[t];
    write_dataset(task_file(dir, t + 1, Split::train), tr);
    write_dataset(task_file(dir, t + 1, Split::test), te);
    manifest << tr.task_id << ' ' << class_range(tr) << ' ' << tr.size() << ' ' << te.size() << '\n';
  }
  manifest << "num_classes " << bench.sequence.num_classes << '\n';
  manifest << "seed " << bench.sequence.seed << '\n';
  if (!manifest) throw std::runtime_error("failed to write manifest in " + dir.string());
}

Benchmark read_benchmark(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw FormatError("missing manifest.txt in " + dir.string(), 0);
  Benchmark bench;
  std::size_t tasks = 0;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "num_classes") {
      is >> bench.sequence.num_classes;
    } else if (key == "seed") {
      is >> bench.sequence.seed;
    } else if (key != "pretrain") {
      ++tasks;
    }
  }
  bench.pretrain_train = read_dataset(dir / "pretrain_train.bin");
  bench.pretrain_test = read_dataset(dir / "pretrain_test.bin");
  for (std::size_t t = 1; t <= tasks; ++t) {
    bench.sequence.train.push_back(read_dataset(task_file(dir, t, Split::train)));
    bench.sequence.test.push_back(read_dataset(task_file(dir, t, Split::test)));
  }
  return bench;
}

}  // namespace vqp
