#pragma once

#include <vector>

#include "vqprompt/tensor.hpp"

namespace vqp {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam over a fixed list of leaf tensors.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWOptions options = {});

  void zero_grad();
  void step(double learning_rate);
  long steps_taken() const { return step_; }

 private:
  std::vector<Tensor> params_;
  std::vector<Matrix> m_, v_;
  AdamWOptions opt_;
  long step_ = 0;
};

// Cosine decay from base_rate at step 0 to zero at step total_steps - 1.
double cosine_rate(double base_rate, long step, long total_steps);

}  // namespace vqp
