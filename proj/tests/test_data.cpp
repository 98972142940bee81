#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "test_util.hpp"
#include "vqprompt/data.hpp"
#include "vqprompt/errors.hpp"

using namespace vqp;
namespace fs = std::filesystem;
using vqp::testing::bit_equal;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

BenchmarkOptions small_options(std::uint64_t seed) {
  BenchmarkOptions o;
  o.seed = seed;
  o.tasks = 3;
  o.classes_per_task = 2;
  o.samples_per_class = 10;
  o.pretrain_classes = 2;
  o.pretrain_samples_per_class = 10;
  o.tokens_per_sample = 4;
  o.token_dim = 3;
  return o;
}

}  // namespace

TEST_CASE("generation is a pure function of the seed") {
  TempDir dir("vqp_test_data_det");
  write_benchmark(dir.path / "a", generate_benchmark(BenchmarkOptions{.seed = 7}));
  write_benchmark(dir.path / "b", generate_benchmark(BenchmarkOptions{.seed = 7}));
  for (const auto& entry : fs::directory_iterator(dir.path / "a")) {
    CHECK(slurp(entry.path()) == slurp(dir.path / "b" / entry.path().filename()));
  }
  CHECK_FALSE(generate_benchmark(BenchmarkOptions{.seed = 8}).sequence.train[0] ==
              generate_benchmark(BenchmarkOptions{.seed = 7}).sequence.train[0]);
}

TEST_CASE("default benchmark layout") {
  Benchmark b = generate_benchmark(BenchmarkOptions{.seed = 1});
  REQUIRE(b.sequence.size() == 5);
  CHECK(b.sequence.num_classes == 10);
  std::set<std::uint64_t> ids;
  for (std::size_t t = 0; t < 5; ++t) {
    const auto& tr = b.sequence.train[t];
    const auto& te = b.sequence.test[t];
    CHECK(tr.task_id == t + 1);
    CHECK(tr.split == Split::train);
    CHECK(te.split == Split::test);
    CHECK(tr.size() == 160);
    CHECK(te.size() == 40);
    // Contiguous global range per task.
    CHECK(tr.labels() == std::vector<std::uint32_t>{static_cast<std::uint32_t>(2 * t),
                                                    static_cast<std::uint32_t>(2 * t + 1)});
    CHECK(te.labels() == tr.labels());
    for (const auto& s : tr.samples) {
      CHECK(s.tokens.rows() == 16);
      CHECK(s.tokens.cols() == 32);
      ids.insert(s.id);
    }
    for (const auto& s : te.samples) ids.insert(s.id);
  }
  CHECK(ids.size() == 5 * 200);
  CHECK(b.pretrain_train.size() == 1600);
  CHECK(b.pretrain_test.size() == 400);
  CHECK(b.pretrain_train.labels().front() == 10);
  CHECK_NOTHROW(check_disjoint_labels(b.sequence, &b.pretrain_train));
}

TEST_CASE("zero noise makes every sample its class anchor") {
  BenchmarkOptions o = small_options(2);
  o.noise_scale = 0.0;
  Benchmark b = generate_benchmark(o);
  std::map<std::uint32_t, Matrix> anchor;
  for (const auto& s : b.sequence.train[0].samples) anchor.emplace(s.label, s.tokens);
  for (const auto* set : {&b.sequence.train[0], &b.sequence.test[0]}) {
    for (const auto& s : set->samples) CHECK(bit_equal(s.tokens, anchor.at(s.label)));
  }
  // A nearest-anchor classifier seeded with one sample per class is perfect.
  std::size_t correct = 0;
  for (const auto& s : b.sequence.test[0].samples) {
    std::uint32_t best = 0;
    double best_d = 1e300;
    for (const auto& [label, a] : anchor) {
      const double d = (s.tokens - a).squaredNorm();
      if (d < best_d) best_d = d, best = label;
    }
    correct += best == s.label;
  }
  CHECK(correct == b.sequence.test[0].size());
}

TEST_CASE("invalid generation parameters") {
  BenchmarkOptions o = small_options(1);
  o.tasks = 0;
  CHECK_THROWS_AS(generate_benchmark(o), ContractError);
  o = small_options(1);
  o.classes_per_task = 1;
  CHECK_THROWS_AS(generate_benchmark(o), ContractError);
  o = small_options(1);
  o.noise_scale = -1.0;
  CHECK_THROWS_AS(generate_benchmark(o), ContractError);
}

TEST_CASE("label guards") {
  Benchmark b = generate_benchmark(small_options(3));
  TaskSequence overlap = b.sequence;
  overlap.train[1].samples[0].label = 0;
  CHECK_THROWS_AS(check_disjoint_labels(overlap), ProtocolError);
  CHECK_THROWS_AS(check_disjoint_labels(b.sequence, &b.sequence.train[2]), ProtocolError);

  const std::vector<std::uint32_t> allowed{0, 1};
  CHECK_NOTHROW(check_labels_within(b.sequence.train[0], allowed));
  CHECK_THROWS_AS(check_labels_within(b.sequence.train[1], allowed), DataError);
}

TEST_CASE("stacked tokens keep sample order") {
  Benchmark b = generate_benchmark(small_options(4));
  const auto& d = b.sequence.train[0];
  const std::vector<std::size_t> idx{3, 0};
  Matrix m = stack_tokens(d, idx);
  CHECK(m.rows() == 8);
  CHECK(bit_equal(m.topRows(4), d.samples[3].tokens));
  CHECK(bit_equal(m.bottomRows(4), d.samples[0].tokens));
}

TEST_CASE("dataset file round trip") {
  TempDir dir("vqp_test_data_io");
  Benchmark b = generate_benchmark(small_options(5));
  write_dataset(dir.path / "d.bin", b.sequence.test[1]);
  CHECK(read_dataset(dir.path / "d.bin") == b.sequence.test[1]);

  TaskDataset empty;
  empty.task_id = 9;
  empty.split = Split::test;
  write_dataset(dir.path / "e.bin", empty);
  CHECK(read_dataset(dir.path / "e.bin") == empty);

  write_benchmark(dir.path / "bench", b);
  Benchmark back = read_benchmark(dir.path / "bench");
  CHECK(back.pretrain_train == b.pretrain_train);
  CHECK(back.pretrain_test == b.pretrain_test);
  CHECK(back.sequence.num_classes == b.sequence.num_classes);
  CHECK(back.sequence.seed == b.sequence.seed);
  REQUIRE(back.sequence.size() == b.sequence.size());
  for (std::size_t t = 0; t < b.sequence.size(); ++t) {
    CHECK(back.sequence.train[t] == b.sequence.train[t]);
    CHECK(back.sequence.test[t] == b.sequence.test[t]);
  }
  CHECK(fs::exists(dir.path / "bench" / "manifest.txt"));
}

TEST_CASE("malformed dataset files report a byte offset") {
  TempDir dir("vqp_test_data_bad");
  Benchmark b = generate_benchmark(small_options(6));
  write_dataset(dir.path / "d.bin", b.sequence.train[0]);
  const std::string bytes = slurp(dir.path / "d.bin");

  spit(dir.path / "t.bin", bytes.substr(0, bytes.size() - 5));
  try {
    read_dataset(dir.path / "t.bin");
    FAIL("truncated file was accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset() > 0);
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }

  std::string magic = bytes;
  magic[1] = '?';
  spit(dir.path / "m.bin", magic);
  try {
    read_dataset(dir.path / "m.bin");
    FAIL("bad magic was accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }

  std::string version = bytes;
  version[4] = 9;
  spit(dir.path / "v.bin", version);
  try {
    read_dataset(dir.path / "v.bin");
    FAIL("bad version was accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 4);
  }

  spit(dir.path / "x.bin", bytes + "junk");
  CHECK_THROWS_AS(read_dataset(dir.path / "x.bin"), FormatError);
  CHECK_THROWS_AS(read_dataset(dir.path / "missing.bin"), FormatError);
}
