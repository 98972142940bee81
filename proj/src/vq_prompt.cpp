#include "vqprompt/vq_prompt.hpp"

#include <cmath>
#include <limits>
#include <random>

namespace vqp {

namespace {

// Leading batch count of a prompt-shaped tensor ([L_p, D] or [B, L_p, D]).
Index prompt_batch(const Tensor& p) { return p.rank() == 3 ? p.dim(0) : 1; }

Tensor as_rows(const Tensor& t) {
  if (t.rank() == 2) return t;
  return reshape(t, {1, t.numel()});
}

}  // namespace

void LossWeights::validate() const {
  if (!(lambda_q >= 0.0) || !(lambda_c >= 0.0)) {
    throw ContractError("loss weights must be non-negative");
  }
}

PromptPool PromptPool::initialize(Index pool_size, Index prompt_length, Index dim, std::uint64_t seed) {
  if (pool_size < 1 || dim < 1 || prompt_length < 0) throw ContractError("prompt pool: invalid sizes");
  if (prompt_length % 2 != 0) throw ContractError("prompt pool: prompt length must be even");
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix p(pool_size * prompt_length, dim);
  for (Index i = 0; i < p.size(); ++i) p.data()[i] = dist(rng);
  Matrix k(pool_size, dim);
  for (Index i = 0; i < k.size(); ++i) k.data()[i] = dist(rng);
  return PromptPool(Tensor({pool_size, prompt_length, dim}, std::move(p), true),
                    Tensor({pool_size, dim}, std::move(k), true));
}

PromptPool::PromptPool(Tensor prompts, Tensor keys) : prompts_(std::move(prompts)), keys_(std::move(keys)) {
  if (prompts_.rank() != 3 || keys_.rank() != 2) {
    throw DimensionError("prompt pool: expected P [N, L_p, D] and K [N, D], got " +
                         shape_string(prompts_.shape()) + " and " + shape_string(keys_.shape()));
  }
  if (keys_.dim(0) != prompts_.dim(0) || keys_.dim(1) != prompts_.dim(2)) {
    throw DimensionError("prompt pool: P " + shape_string(prompts_.shape()) + " and K " +
                         shape_string(keys_.shape()) + " disagree");
  }
  if (prompts_.dim(1) % 2 != 0) throw ContractError("prompt pool: prompt length must be even");
}

Matrix PromptPool::element(Index i) const {
  return prompts_.value().middleRows(i * prompt_length(), prompt_length());
}

Tensor PromptPool::flat() const { return reshape(prompts_, {size(), prompt_length() * dim()}); }

std::uint64_t PromptPool::checksum() const { return vqp::checksum({prompts_, keys_}); }

// ---- selection -------------------------------------------------------------

Tensor compute_queries(const Matrix& tokens, Index batch, const Backbone& backbone) {
  if (!backbone.frozen()) throw ContractError("compute_query: backbone is not frozen");
  NoGradGuard no_grad;
  return backbone.encode_batch(tokens, batch);
}

Tensor compute_query(const Matrix& tokens, const Backbone& backbone) {
  if (!backbone.frozen()) throw ContractError("compute_query: backbone is not frozen");
  NoGradGuard no_grad;
  return backbone.encode(tokens);
}

Tensor similarity_scores(const PromptPool& pool, const Tensor& q, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("similarity_scores: temperature must be positive");
  const bool single = q.rank() <= 1;
  Tensor q2 = as_rows(q);
  if (q2.cols() != pool.dim()) {
    throw DimensionError("similarity_scores: query " + shape_string(q.shape()) +
                         " does not match key dim " + std::to_string(pool.dim()));
  }
  Tensor logits = matmul(q2, transpose(pool.keys()));
  if (temperature != 1.0) logits = scale(logits, 1.0 / temperature);
  Tensor alpha = softmax(logits);
  return single ? reshape(alpha, {pool.size()}) : alpha;
}

Tensor aggregate_prompt(const PromptPool& pool, const Tensor& alpha) {
  const bool single = alpha.rank() <= 1;
  Tensor a2 = as_rows(alpha);
  if (a2.cols() != pool.size()) {
    throw DimensionError("aggregate_prompt: scores " + shape_string(alpha.shape()) + " for a pool of " +
                         std::to_string(pool.size()));
  }
  Tensor p = matmul(a2, pool.flat());
  if (single) return reshape(p, {pool.prompt_length(), pool.dim()});
  return reshape(p, {a2.rows(), pool.prompt_length(), pool.dim()});
}

Quantized quantize_prompt(const PromptPool& pool, const Tensor& p_cont) {
  const Index lp = pool.prompt_length(), d = pool.dim();
  const bool single = p_cont.rank() == 2;
  if (!((single && p_cont.dim(0) == lp && p_cont.dim(1) == d) ||
        (p_cont.rank() == 3 && p_cont.dim(1) == lp && p_cont.dim(2) == d))) {
    throw DimensionError("quantize_prompt: prompt " + shape_string(p_cont.shape()) +
                         " does not match pool elements [" + std::to_string(lp) + "x" +
                         std::to_string(d) + "]");
  }
  const Index batch = prompt_batch(p_cont);
  const Index width = lp * d;
  Eigen::Map<const Matrix> cont(p_cont.value().data(), batch, width);
  Eigen::Map<const Matrix> codebook(pool.prompts().value().data(), pool.size(), width);

  std::vector<Index> index(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) {
    Index best = 0;
    Scalar best_dist = std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j < pool.size(); ++j) {
      const Scalar dist = (cont.row(b) - codebook.row(j)).squaredNorm();
      if (dist < best_dist) {
        best_dist = dist;
        best = j;
      }
    }
    index[static_cast<std::size_t>(b)] = best;
  }

  Tensor selected = reshape(gather_rows(pool.flat(), index), p_cont.shape());
  Tensor prompt = straight_through(selected, p_cont);
  return {std::move(prompt), std::move(selected), std::move(index)};
}

Tensor vq_loss(const Tensor& p_cont, const Tensor& p_selected) {
  if (p_cont.shape() != p_selected.shape()) {
    throw DimensionError("vq_loss: shape mismatch " + shape_string(p_cont.shape()) + " vs " +
                         shape_string(p_selected.shape()));
  }
  Tensor loss = squared_norm(sub(stop_gradient(p_cont), p_selected));
  const Index batch = prompt_batch(p_cont);
  return batch == 1 ? loss : scale(loss, 1.0 / static_cast<double>(batch));
}

Tensor commitment_loss(const Tensor& p_cont, const Tensor& p_selected) {
  if (p_cont.shape() != p_selected.shape()) {
    throw DimensionError("commitment_loss: shape mismatch " + shape_string(p_cont.shape()) + " vs " +
                         shape_string(p_selected.shape()));
  }
  Tensor loss = squared_norm(sub(p_cont, stop_gradient(p_selected)));
  const Index batch = prompt_batch(p_cont);
  return batch == 1 ? loss : scale(loss, 1.0 / static_cast<double>(batch));
}

Tensor total_loss(const Tensor& ce, const Tensor& vq, const Tensor& commit, const LossWeights& w) {
  w.validate();
  Tensor loss = ce;
  if (w.lambda_q != 0.0) loss = add(loss, scale(vq, w.lambda_q));
  if (w.lambda_c != 0.0) loss = add(loss, scale(commit, w.lambda_c));
  return loss;
}

double total_loss(double ce, double vq, double commit, const LossWeights& w) {
  w.validate();
  return ce + w.lambda_q * vq + w.lambda_c * commit;
}

Tensor soft_prompt_forward(const PromptPool& pool, const Tensor& q, double temperature) {
  return aggregate_prompt(pool, similarity_scores(pool, q, temperature));
}

PromptSelection select_prompts(const PromptPool& pool, const Tensor& queries, double temperature) {
  PromptSelection s;
  s.alpha = similarity_scores(pool, queries, temperature);
  s.continuous = aggregate_prompt(pool, s.alpha);
  auto q = quantize_prompt(pool, s.continuous);
  s.quantized = std::move(q.prompt);
  s.selected = std::move(q.selected);
  s.index = std::move(q.index);
  return s;
}

void store_pool(Checkpoint& ckpt, const PromptPool& pool) {
  ckpt.pool_size = static_cast<std::uint32_t>(pool.size());
  ckpt.prompt_length = static_cast<std::uint32_t>(pool.prompt_length());
  ckpt.put("prompt.P", pool.prompts());
  ckpt.put("prompt.K", pool.keys());
}

PromptPool load_pool(const Checkpoint& ckpt) {
  const auto* p = ckpt.find("prompt.P");
  const auto* k = ckpt.find("prompt.K");
  if (!p || !k) throw ContractError("checkpoint has no prompt pool");
  PromptPool pool(Tensor(p->shape, p->value, true), Tensor(k->shape, k->value, true));
  if (pool.size() != ckpt.pool_size || pool.prompt_length() != ckpt.prompt_length) {
    throw ContractError("checkpoint pool header disagrees with the stored blobs");
  }
  return pool;
}

}  // namespace vqp
