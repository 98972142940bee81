#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "vqprompt/backbone.hpp"
#include "vqprompt/checkpoint.hpp"
#include "vqprompt/tensor.hpp"

namespace vqp {

struct LossWeights {
  double lambda_q = 0.4;  // VQ term
  double lambda_c = 0.1;  // commitment term

  void validate() const;
};

// Codebook P of N prompts (each L_p x D) with one key per prompt (K is N x D).
// Shapes are fixed for the whole run.
class PromptPool {
 public:
  // Every entry uniform(-1/sqrt(D), 1/sqrt(D)).
  static PromptPool initialize(Index pool_size, Index prompt_length, Index dim, std::uint64_t seed);
  // prompts: shape [N, L_p, D]; keys: shape [N, D].
  PromptPool(Tensor prompts, Tensor keys);

  Index size() const { return prompts_.dim(0); }
  Index prompt_length() const { return prompts_.dim(1); }
  Index dim() const { return prompts_.dim(2); }

  const Tensor& prompts() const { return prompts_; }
  const Tensor& keys() const { return keys_; }
  // Element i as an L_p x D matrix.
  Matrix element(Index i) const;
  // P viewed as N x (L_p*D); connected to the graph.
  Tensor flat() const;

  std::vector<Tensor> parameters() const { return {prompts_, keys_}; }
  std::uint64_t checksum() const;

 private:
  Tensor prompts_;
  Tensor keys_;
};

// Everything the selection pipeline produces for a batch of queries.
struct PromptSelection {
  Tensor alpha;         // B x N similarity scores
  Tensor continuous;    // p', shape [B, L_p, D]
  Tensor quantized;     // p, straight-through output fed to the backbone
  Tensor selected;      // raw P_k rows, graph-connected to P (for the VQ loss)
  std::vector<Index> index;
};

// q = encode(x) with no prompts. The backbone must be frozen; nothing flows
// back into it.
Tensor compute_query(const Matrix& tokens, const Backbone& backbone);
// Batched form: B x D.
Tensor compute_queries(const Matrix& tokens, Index batch, const Backbone& backbone);

// Softmax(K q / temperature). q is [D] (result [N]) or B x D (result B x N).
Tensor similarity_scores(const PromptPool& pool, const Tensor& q, double temperature = 1.0);

// p' = sum_i alpha_i P_i. alpha is [N] (result [L_p, D]) or B x N
// (result [B, L_p, D]).
Tensor aggregate_prompt(const PromptPool& pool, const Tensor& alpha);

struct Quantized {
  Tensor prompt;    // straight_through(P_k, p'): value P_k, gradient to p'
  Tensor selected;  // P_k gathered from the pool, gradient to P
  std::vector<Index> index;
};

// Nearest pool element per prompt (Frobenius distance, ties to the lowest
// index). p_cont is [L_p, D] or [B, L_p, D].
Quantized quantize_prompt(const PromptPool& pool, const Tensor& p_cont);

// ||sg[p'] - P_k||^2, averaged over the batch. Gradient reaches only P_k.
Tensor vq_loss(const Tensor& p_cont, const Tensor& p_selected);
// ||p' - sg[P_k]||^2, averaged over the batch. Gradient reaches only p'.
Tensor commitment_loss(const Tensor& p_cont, const Tensor& p_selected);

Tensor total_loss(const Tensor& ce, const Tensor& vq, const Tensor& commit, const LossWeights& w);
double total_loss(double ce, double vq, double commit, const LossWeights& w);

// Continuous prompt at the given temperature, used directly without quantization.
Tensor soft_prompt_forward(const PromptPool& pool, const Tensor& q, double temperature);

// Scores, aggregation and quantization in one call.
PromptSelection select_prompts(const PromptPool& pool, const Tensor& queries, double temperature = 1.0);

void store_pool(Checkpoint& ckpt, const PromptPool& pool);
// Trainable pool from the "prompt.P" / "prompt.K" blobs.
PromptPool load_pool(const Checkpoint& ckpt);

}  // namespace vqp
