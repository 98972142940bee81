#include "vqprompt/config.hpp"

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <type_traits>

#include "vqprompt/errors.hpp"

namespace vqp {

namespace {

namespace pt = boost::property_tree;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  const std::string s = trim(text);
  T v{};
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty()) {
    throw ContractError("config: bad value '" + text + "' for " + key);
  }
  return v;
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) out.push_back(parse_number<T>(key, item));
  return out;
}

template <class T>
std::string format_value(const T& v) {
  if constexpr (std::is_arithmetic_v<T>) {
    // Shortest text that parses back to the same value.
    char buf[64];
    return std::string(buf, std::to_chars(buf, buf + sizeof buf, v).ptr);
  } else {
    return v;
  }
}

template <class T>
std::string format_list(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_value(v[i]);
  return s;
}

struct Field {
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class T>
Field scalar(T ExperimentConfig::*member) {
  return {[member](ExperimentConfig& c, const std::string& key, const std::string& text) {
            c.*member = parse_number<T>(key, text);
          },
          [member](const ExperimentConfig& c) { return format_value(c.*member); }};
}

template <class T>
Field list(std::vector<T> ExperimentConfig::*member) {
  return {[member](ExperimentConfig& c, const std::string& key, const std::string& text) {
            c.*member = parse_list<T>(key, text);
          },
          [member](const ExperimentConfig& c) { return format_list(c.*member); }};
}

// Section -> key -> field, in snapshot order.
using Schema = std::vector<std::pair<std::string, std::vector<std::pair<std::string, Field>>>>;

const Schema& schema() {
  static const Schema s = {
      {"data",
       {{"tasks", scalar(&ExperimentConfig::tasks)},
        {"classes_per_task", scalar(&ExperimentConfig::classes_per_task)},
        {"samples_per_class", scalar(&ExperimentConfig::samples_per_class)},
        {"noise_scale", scalar(&ExperimentConfig::noise_scale)},
        {"pretrain_classes", scalar(&ExperimentConfig::pretrain_classes)},
        {"pretrain_samples_per_class", scalar(&ExperimentConfig::pretrain_samples_per_class)},
        {"tokens", scalar(&ExperimentConfig::tokens)},
        {"token_dim", scalar(&ExperimentConfig::token_dim)}}},
      {"backbone",
       {{"depth", scalar(&ExperimentConfig::depth)},
        {"dim", scalar(&ExperimentConfig::dim)},
        {"heads", scalar(&ExperimentConfig::heads)},
        {"ff_dim", scalar(&ExperimentConfig::ff_dim)},
        {"prompt_blocks", list(&ExperimentConfig::prompt_blocks)},
        {"pretrain_epochs", scalar(&ExperimentConfig::pretrain_epochs)},
        {"pretrain_batch_size", scalar(&ExperimentConfig::pretrain_batch_size)},
        {"pretrain_learning_rate", scalar(&ExperimentConfig::pretrain_learning_rate)}}},
      {"prompt",
       {{"pool_size", scalar(&ExperimentConfig::pool_size)},
        {"prompt_length", scalar(&ExperimentConfig::prompt_length)},
        {"lambda_q", scalar(&ExperimentConfig::lambda_q)},
        {"lambda_c", scalar(&ExperimentConfig::lambda_c)},
        {"temperature", scalar(&ExperimentConfig::temperature)}}},
      {"train",
       {{"learning_rate", scalar(&ExperimentConfig::learning_rate)},
        {"beta1", scalar(&ExperimentConfig::beta1)},
        {"beta2", scalar(&ExperimentConfig::beta2)},
        {"weight_decay", scalar(&ExperimentConfig::weight_decay)},
        {"epochs", scalar(&ExperimentConfig::epochs)},
        {"batch_size", scalar(&ExperimentConfig::batch_size)},
        {"calibration_epochs", scalar(&ExperimentConfig::calibration_epochs)},
        {"calibration_learning_rate", scalar(&ExperimentConfig::calibration_learning_rate)},
        {"calibration_batch_size", scalar(&ExperimentConfig::calibration_batch_size)},
        {"pseudo_per_class", scalar(&ExperimentConfig::pseudo_per_class)}}},
      {"ablation",
       {{"mode",
         {[](ExperimentConfig& c, const std::string&, const std::string& text) { c.mode = trim(text); },
          [](const ExperimentConfig& c) { return c.mode; }}},
        {"sweep_lambda_q", list(&ExperimentConfig::sweep_lambda_q)},
        {"sweep_lambda_c", list(&ExperimentConfig::sweep_lambda_c)},
        {"sweep_pool_size", list(&ExperimentConfig::sweep_pool_size)},
        {"sweep_prompt_length", list(&ExperimentConfig::sweep_prompt_length)}}},
  };
  return s;
}

const Field* find_field(const std::string& section, const std::string& key) {
  for (const auto& [name, fields] : schema()) {
    if (name != section) continue;
    for (const auto& [k, f] : fields) {
      if (k == key) return &f;
    }
  }
  return nullptr;
}

}  // namespace

bool is_run_mode(const std::string& mode) {
  return mode == "vq" || mode == "vq-s" || mode == "soft" || mode == "none";
}

std::uint64_t ExperimentConfig::require_seed() const {
  if (!seed) throw ContractError("config: no seed given (set 'seed' or pass --seed)");
  return *seed;
}

void ExperimentConfig::validate() const {
  if (tasks < 1) throw ContractError("config: [data] tasks must be >= 1");
  if (classes_per_task < 2) throw ContractError("config: [data] classes_per_task must be >= 2");
  if (samples_per_class < 2 || pretrain_samples_per_class < 2) {
    throw ContractError("config: [data] samples per class must be >= 2");
  }
  if (pretrain_classes < 2) throw ContractError("config: [data] pretrain_classes must be >= 2");
  if (noise_scale < 0.0) throw ContractError("config: [data] noise_scale must be non-negative");
  if (tokens < 1 || token_dim < 1) throw ContractError("config: [data] token sizes must be positive");
  if (pretrain_epochs < 0 || pretrain_batch_size < 1 || !(pretrain_learning_rate > 0.0)) {
    throw ContractError("config: [backbone] invalid pretraining settings");
  }
  if (pool_size < 1) throw ContractError("config: [prompt] pool_size must be >= 1");
  if (prompt_length < 0 || prompt_length % 2 != 0) {
    throw ContractError("config: [prompt] prompt_length must be even");
  }
  if (!is_run_mode(mode)) throw ContractError("config: [ablation] unknown mode '" + mode + "'");
  backbone_config().validate();
  train_config().validate();
}

BenchmarkOptions ExperimentConfig::benchmark_options() const {
  BenchmarkOptions o;
  o.seed = require_seed();
  o.tasks = tasks;
  o.classes_per_task = classes_per_task;
  o.samples_per_class = samples_per_class;
  o.noise_scale = noise_scale;
  o.pretrain_classes = pretrain_classes;
  o.pretrain_samples_per_class = pretrain_samples_per_class;
  o.tokens_per_sample = tokens;
  o.token_dim = token_dim;
  return o;
}

BackboneConfig ExperimentConfig::backbone_config() const {
  BackboneConfig c;
  c.depth = depth;
  c.dim = dim;
  c.heads = heads;
  c.seq_len = tokens + 1;
  c.ff_dim = ff_dim;
  c.token_dim = token_dim;
  c.prompt_blocks = prompt_blocks;
  return c;
}

PretrainOptions ExperimentConfig::pretrain_options() const {
  return {pretrain_epochs, pretrain_batch_size, pretrain_learning_rate, derive_seed(require_seed(), 11)};
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig t;
  t.learning_rate = learning_rate;
  t.beta1 = beta1;
  t.beta2 = beta2;
  t.weight_decay = weight_decay;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.calibration_epochs = calibration_epochs;
  t.calibration_learning_rate = calibration_learning_rate;
  t.calibration_batch_size = calibration_batch_size;
  t.pseudo_per_class = pseudo_per_class;
  t.seed = seed.value_or(0);
  t.weights = {lambda_q, lambda_c};
  t.temperature = temperature;
  // vq-s is vq with calibration switched off; the baselines never calibrate.
  t.mode = mode == "vq-s" ? PromptMode::vq : parse_prompt_mode(mode);
  t.calibrate = mode == "vq";
  return t;
}

ExperimentConfig parse_config(std::istream& in) {
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ContractError("config: " + std::string(e.message()) + " at line " + std::to_string(e.line()));
  }
  ExperimentConfig c;
  for (const auto& [name, node] : tree) {
    if (node.empty() && name != "seed") {
      const bool section = std::any_of(schema().begin(), schema().end(),
                                       [&](const auto& entry) { return entry.first == name; });
      if (section && node.data().empty()) continue;
    }
    if (node.empty()) {
      if (name != "seed") throw ContractError("config: unknown top-level key '" + name + "'");
      c.seed = parse_number<std::uint64_t>("seed", node.data());
      continue;
    }
    for (const auto& [key, value] : node) {
      const Field* f = find_field(name, key);
      if (!f) throw ContractError("config: unknown key '" + key + "' in [" + name + "]");
      f->set(c, "[" + name + "] " + key, value.data());
    }
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("config: cannot open " + path.string());
  return parse_config(in);
}

void write_config(std::ostream& out, const ExperimentConfig& config) {
  if (config.seed) out << "seed = " << *config.seed << "\n";
  for (const auto& [section, fields] : schema()) {
    out << "\n[" << section << "]\n";
    for (const auto& [key, field] : fields) out << key << " = " << field.get(config) << "\n";
  }
}

void save_config(const std::filesystem::path& path, const ExperimentConfig& config) {
  std::ofstream out(path);
  if (!out) throw ContractError("config: cannot write " + path.string());
  write_config(out, config);
}

}  // namespace vqp
