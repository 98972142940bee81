#include "vqprompt/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "vqprompt/optim.hpp"

namespace vqp {

namespace {

Tensor uniform_param(std::mt19937_64& rng, Index rows, Index cols, double fan_in) {
  const double bound = 1.0 / std::sqrt(fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return Tensor(std::move(m), true);
}

Tensor constant_param(Index rows, Index cols, double v) {
  return Tensor(Matrix::Constant(rows, cols, v), true);
}

Tensor frozen_copy(const Tensor& t) { return Tensor(t.shape(), t.value(), false); }

}  // namespace

std::vector<int> default_prompt_blocks(int depth) {
  std::vector<int> blocks(static_cast<std::size_t>(std::min(depth, 5)));
  std::iota(blocks.begin(), blocks.end(), 0);
  return blocks;
}

std::vector<int> BackboneConfig::resolved_prompt_blocks() const {
  return prompt_blocks.empty() ? default_prompt_blocks(depth) : prompt_blocks;
}

void BackboneConfig::validate() const {
  if (depth < 1 || dim < 1 || heads < 1 || ff_dim < 1 || token_dim < 1) {
    throw ContractError("backbone config: sizes must be positive");
  }
  if (dim % heads != 0) {
    throw ContractError("backbone config: D=" + std::to_string(dim) + " not divisible by M=" +
                        std::to_string(heads));
  }
  if (seq_len < 2) throw ContractError("backbone config: L must include a class token and content");
  for (int b : prompt_blocks) {
    if (b < 0 || b >= depth) {
      throw ContractError("backbone config: prompt block " + std::to_string(b) + " outside [0, " +
                          std::to_string(depth) + ")");
    }
  }
}

// ---- attention -------------------------------------------------------------

Tensor msa_forward(const Tensor& h_q, const Tensor& h_k, const Tensor& h_v,
                   const MSABlockParams& params, Index batch) {
  const Index d = params.w_q.rows();
  for (const Tensor* h : {&h_q, &h_k, &h_v}) {
    if (h->cols() != d) {
      throw DimensionError("msa_forward: input " + shape_string(h->shape()) +
                           " does not have embedding dim " + std::to_string(d));
    }
  }
  Tensor q = matmul(h_q, params.w_q);
  Tensor k = matmul(h_k, params.w_k);
  Tensor v = matmul(h_v, params.w_v);
  return matmul(attention(q, k, v, params.heads, batch), params.w_o);
}

Tensor prefix_tuned_msa(const Tensor& p, const Tensor& h, const MSABlockParams& params, Index batch) {
  if (p.numel() == 0) return msa_forward(h, h, h, params, batch);
  if (p.rows() % batch != 0) {
    throw DimensionError("prefix_tuned_msa: prompt rows do not split over batch " + std::to_string(batch));
  }
  const Index lp = p.rows() / batch;
  if (lp % 2 != 0) {
    throw ContractError("prefix_tuned_msa: prompt length " + std::to_string(lp) + " is odd");
  }
  Tensor p_k = segment_rows(p, batch, 0, lp / 2);
  Tensor p_v = segment_rows(p, batch, lp / 2, lp / 2);
  return msa_forward(h, concat_per_sample(p_k, h, batch), concat_per_sample(p_v, h, batch), params,
                     batch);
}

// ---- backbone --------------------------------------------------------------

Backbone Backbone::initialize(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const Index d = config.dim, ff = config.ff_dim;
  Backbone b;
  b.config_ = config;
  b.embed_w_ = uniform_param(rng, config.token_dim, d, config.token_dim);
  b.embed_b_ = uniform_param(rng, 1, d, config.token_dim);
  b.class_token_ = uniform_param(rng, 1, d, d);
  b.position_ = uniform_param(rng, config.seq_len, d, d);
  for (int i = 0; i < config.depth; ++i) {
    MSABlockParams blk;
    blk.heads = config.heads;
    blk.w_q = uniform_param(rng, d, d, d);
    blk.w_k = uniform_param(rng, d, d, d);
    blk.w_v = uniform_param(rng, d, d, d);
    blk.w_o = uniform_param(rng, d, d, d);
    blk.ln1_gain = constant_param(1, d, 1.0);
    blk.ln1_offset = constant_param(1, d, 0.0);
    blk.ln2_gain = constant_param(1, d, 1.0);
    blk.ln2_offset = constant_param(1, d, 0.0);
    blk.ff_w1 = uniform_param(rng, d, ff, d);
    blk.ff_b1 = uniform_param(rng, 1, ff, d);
    blk.ff_w2 = uniform_param(rng, ff, d, ff);
    blk.ff_b2 = uniform_param(rng, 1, d, ff);
    b.blocks_.push_back(std::move(blk));
  }
  b.final_gain_ = constant_param(1, d, 1.0);
  b.final_offset_ = constant_param(1, d, 0.0);
  return b;
}

void Backbone::freeze() {
  if (frozen_) return;
  embed_w_ = frozen_copy(embed_w_);
  embed_b_ = frozen_copy(embed_b_);
  class_token_ = frozen_copy(class_token_);
  position_ = frozen_copy(position_);
  for (auto& blk : blocks_) {
    for (Tensor* t : {&blk.w_q, &blk.w_k, &blk.w_v, &blk.w_o, &blk.ln1_gain, &blk.ln1_offset,
                      &blk.ln2_gain, &blk.ln2_offset, &blk.ff_w1, &blk.ff_b1, &blk.ff_w2, &blk.ff_b2}) {
      *t = frozen_copy(*t);
    }
  }
  final_gain_ = frozen_copy(final_gain_);
  final_offset_ = frozen_copy(final_offset_);
  frozen_ = true;
}

Tensor Backbone::encode(const Matrix& tokens, const PromptMap& prompts) const {
  Tensor features = encode_batch(tokens, 1, prompts);
  return reshape(features, {config_.dim});
}

Tensor Backbone::encode_batch(const Matrix& tokens, Index batch, const PromptMap& prompts) const {
  const Index content = config_.content_tokens();
  if (batch < 1 || tokens.rows() != batch * content || tokens.cols() != config_.token_dim) {
    throw DimensionError("encode: expected " + std::to_string(batch * content) + "x" +
                         std::to_string(config_.token_dim) + " tokens, got " +
                         std::to_string(tokens.rows()) + "x" + std::to_string(tokens.cols()));
  }
  const auto allowed = config_.resolved_prompt_blocks();
  for (const auto& [block, _] : prompts) {
    if (std::find(allowed.begin(), allowed.end(), block) == allowed.end()) {
      throw ContractError("encode: block " + std::to_string(block) + " does not accept prompts");
    }
  }

  Tensor x(tokens);
  Tensor h = add_row(matmul(x, embed_w_), embed_b_);
  h = concat_per_sample(repeat_rows(class_token_, batch), h, batch);
  h = h + repeat_rows(position_, batch);

  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& blk = blocks_[i];
    Tensor hn = layer_norm(h, blk.ln1_gain, blk.ln1_offset);
    auto it = prompts.find(static_cast<int>(i));
    Tensor attn = it != prompts.end() ? prefix_tuned_msa(it->second, hn, blk, batch)
                                      : msa_forward(hn, hn, hn, blk, batch);
    h = h + attn;
    Tensor hidden = vqp::tanh(add_row(matmul(layer_norm(h, blk.ln2_gain, blk.ln2_offset), blk.ff_w1), blk.ff_b1));
    h = h + add_row(matmul(hidden, blk.ff_w2), blk.ff_b2);
  }
  Tensor cls = segment_rows(h, batch, 0, 1);
  return layer_norm(cls, final_gain_, final_offset_);
}

std::vector<NamedTensor> Backbone::parameters() const {
  std::vector<NamedTensor> out{{"embed.weight", embed_w_},
                               {"embed.bias", embed_b_},
                               {"class_token", class_token_},
                               {"position", position_}};
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    const std::string p = "block" + std::to_string(i) + ".";
    out.push_back({p + "w_q", b.w_q});
    out.push_back({p + "w_k", b.w_k});
    out.push_back({p + "w_v", b.w_v});
    out.push_back({p + "w_o", b.w_o});
    out.push_back({p + "ln1.gain", b.ln1_gain});
    out.push_back({p + "ln1.offset", b.ln1_offset});
    out.push_back({p + "ln2.gain", b.ln2_gain});
    out.push_back({p + "ln2.offset", b.ln2_offset});
    out.push_back({p + "ff.w1", b.ff_w1});
    out.push_back({p + "ff.b1", b.ff_b1});
    out.push_back({p + "ff.w2", b.ff_w2});
    out.push_back({p + "ff.b2", b.ff_b2});
  }
  out.push_back({"final.gain", final_gain_});
  out.push_back({"final.offset", final_offset_});
  return out;
}

std::uint64_t checksum(const std::vector<Tensor>& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tensors) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.value().data());
    const std::size_t n = static_cast<std::size_t>(t.numel()) * sizeof(Scalar);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::uint64_t Backbone::checksum() const {
  std::vector<Tensor> ts;
  for (auto& nt : parameters()) ts.push_back(nt.tensor);
  return vqp::checksum(ts);
}

Backbone load_backbone_parameters(const BackboneConfig& config, bool frozen,
                                  const std::map<std::string, Matrix>& values) {
  Backbone b = Backbone::initialize(config, 0);
  for (auto& nt : b.parameters()) {
    auto it = values.find(nt.name);
    if (it == values.end()) throw ContractError("backbone parameter '" + nt.name + "' missing");
    if (it->second.rows() != nt.tensor.rows() || it->second.cols() != nt.tensor.cols()) {
      throw DimensionError("backbone parameter '" + nt.name + "' has shape " +
                           std::to_string(it->second.rows()) + "x" + std::to_string(it->second.cols()) +
                           ", expected " + shape_string(nt.tensor.shape()));
    }
    nt.tensor.mutable_value() = it->second;
  }
  if (frozen) b.freeze();
  return b;
}

// ---- pretraining -----------------------------------------------------------

namespace {

double head_accuracy(const Backbone& backbone, const Tensor& w, const Tensor& bias,
                     const TaskDataset& data, const std::vector<std::uint32_t>& classes) {
  NoGradGuard no_grad;
  std::size_t correct = 0;
  const std::size_t chunk = 64;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    Tensor f = backbone.encode_batch(stack_tokens(data, idx), static_cast<Index>(idx.size()));
    Matrix logits = (f.value() * w.value().transpose()).rowwise() +
                    Eigen::Map<const RowVector>(bias.value().data(), bias.numel());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      Index best = 0;
      logits.row(static_cast<Index>(r)).maxCoeff(&best);
      if (classes[static_cast<std::size_t>(best)] == data.samples[idx[r]].label) ++correct;
    }
  }
  return data.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace

PretrainResult pretrain_backbone(const TaskDataset& train, const TaskDataset* heldout,
                                 const BackboneConfig& config, const PretrainOptions& options) {
  if (train.empty()) throw ContractError("pretrain_backbone: empty dataset");
  if (options.epochs < 0 || options.batch_size < 1) {
    throw ContractError("pretrain_backbone: invalid epochs or batch size");
  }
  std::mt19937_64 rng(options.seed);
  Backbone backbone = Backbone::initialize(config, rng());

  const auto classes = train.labels();
  std::map<std::uint32_t, Index> class_index;
  for (std::size_t i = 0; i < classes.size(); ++i) class_index[classes[i]] = static_cast<Index>(i);
  const auto n_classes = static_cast<Index>(classes.size());
  Tensor head_w = uniform_param(rng, n_classes, config.dim, config.dim);
  Tensor head_b = constant_param(1, n_classes, 0.0);

  std::vector<Tensor> params{head_w, head_b};
  for (auto& nt : backbone.parameters()) params.push_back(nt.tensor);
  AdamW optimizer(params);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::vector<bool> active(static_cast<std::size_t>(n_classes), true);
  const auto bs = static_cast<std::size_t>(options.batch_size);
  const long steps_per_epoch = static_cast<long>((train.size() + bs - 1) / bs);
  const long total_steps = steps_per_epoch * options.epochs;
  long step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));
      std::vector<Index> labels;
      for (auto i : idx) labels.push_back(class_index.at(train.samples[i].label));
      Tensor f = backbone.encode_batch(stack_tokens(train, idx), static_cast<Index>(idx.size()));
      Tensor logits = add_row(matmul(f, transpose(head_w)), head_b);
      optimizer.zero_grad();
      masked_cross_entropy(logits, labels, active).backward();
      optimizer.step(cosine_rate(options.learning_rate, step++, total_steps));
    }
  }

  PretrainResult result{std::move(backbone), 0.0, std::nullopt};
  result.train_accuracy = head_accuracy(result.backbone, head_w, head_b, train, classes);
  if (heldout && !heldout->empty()) {
    result.heldout_accuracy = head_accuracy(result.backbone, head_w, head_b, *heldout, classes);
  }
  result.backbone.freeze();
  return result;
}

}  // namespace vqp
