#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vqprompt/data.hpp"
#include "vqprompt/tensor.hpp"

namespace vqp {

struct BackboneConfig {
  int depth = 4;
  int dim = 64;       // D
  int heads = 4;      // M
  int seq_len = 17;   // L, content tokens plus the class token
  int ff_dim = 128;   // D_ff
  int token_dim = 32; // raw token width before embedding
  // Blocks that accept prefixes. Empty selects default_prompt_blocks(depth).
  std::vector<int> prompt_blocks;

  int head_dim() const { return dim / heads; }
  int content_tokens() const { return seq_len - 1; }
  std::vector<int> resolved_prompt_blocks() const;
  void validate() const;

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

// First five blocks when depth >= 5, otherwise every block.
std::vector<int> default_prompt_blocks(int depth);

// One pre-norm transformer block: attention with W_Q, W_K, W_V, W_O (no
// biases), then a tanh feed-forward layer.
struct MSABlockParams {
  int heads = 1;
  Tensor w_q, w_k, w_v, w_o;  // D x D
  Tensor ln1_gain, ln1_offset;
  Tensor ln2_gain, ln2_offset;
  Tensor ff_w1, ff_b1;  // D x D_ff, 1 x D_ff
  Tensor ff_w2, ff_b2;  // D_ff x D, 1 x D
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Multi-head self-attention. h_q is (batch*L_q x D); h_k and h_v share their
// sequence length. Output matches h_q's shape.
Tensor msa_forward(const Tensor& h_q, const Tensor& h_k, const Tensor& h_v,
                   const MSABlockParams& params, Index batch = 1);

// Prefix tuning: p (batch*L_p x D) splits into key and value halves that are
// prepended to the keys and values of MSA(h, h, h). L_p must be even; L_p = 0
// is plain self-attention.
Tensor prefix_tuned_msa(const Tensor& p, const Tensor& h, const MSABlockParams& params,
                        Index batch = 1);

// Per-block prompts, each (batch*L_p x D).
using PromptMap = std::map<int, Tensor>;

class Backbone {
 public:
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, unit layer-norm gains.
  static Backbone initialize(const BackboneConfig& config, std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }
  bool frozen() const { return frozen_; }
  // Rebuilds every parameter as a non-trainable leaf with the same values.
  void freeze();

  // Content tokens of one sample (L-1 x token_dim) to its class-token feature, shape [D].
  Tensor encode(const Matrix& tokens, const PromptMap& prompts = {}) const;
  // Stacked content tokens (batch*(L-1) x token_dim) to features (batch x D).
  Tensor encode_batch(const Matrix& tokens, Index batch, const PromptMap& prompts = {}) const;

  // Declaration order; this is also the checkpoint blob order.
  std::vector<NamedTensor> parameters() const;
  std::uint64_t checksum() const;

  const std::vector<MSABlockParams>& blocks() const { return blocks_; }

 private:
  Backbone() = default;

  BackboneConfig config_;
  bool frozen_ = false;
  Tensor embed_w_, embed_b_;  // token_dim x D, 1 x D
  Tensor class_token_;        // 1 x D
  Tensor position_;           // L x D
  std::vector<MSABlockParams> blocks_;
  Tensor final_gain_, final_offset_;
};

// Rebuilds a backbone from named parameter values (checkpoint loading).
Backbone load_backbone_parameters(const BackboneConfig& config, bool frozen,
                                  const std::map<std::string, Matrix>& values);

// FNV-1a over the raw bytes of the given tensors, in order.
std::uint64_t checksum(const std::vector<Tensor>& tensors);

struct PretrainOptions {
  int epochs = 15;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  Backbone backbone;
  double train_accuracy = 0.0;
  std::optional<double> heldout_accuracy;
};

// Trains backbone plus a temporary linear head by cross-entropy, discards the
// head and returns the frozen backbone. epochs = 0 returns the random init.
PretrainResult pretrain_backbone(const TaskDataset& train, const TaskDataset* heldout,
                                 const BackboneConfig& config, const PretrainOptions& options);

}  // namespace vqp
