#include "vqprompt/optim.hpp"

#include <cmath>
#include <numbers>

namespace vqp {

AdamW::AdamW(std::vector<Tensor> params, AdamWOptions options)
    : params_(std::move(params)), opt_(options) {
  for (const auto& p : params_) {
    if (!p.is_leaf() || !p.requires_grad()) {
      throw ContractError("AdamW: parameters must be trainable leaf tensors");
    }
    m_.push_back(Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void AdamW::step(double learning_rate) {
  ++step_;
  const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    Matrix& w = p.mutable_value();
    if (opt_.weight_decay != 0.0) w *= 1.0 - learning_rate * opt_.weight_decay;
    if (!p.has_grad()) continue;
    const Matrix g = p.grad();
    m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
    v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.cwiseProduct(g);
    w.array() -= learning_rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + opt_.eps);
  }
}

double cosine_rate(double base_rate, long step, long total_steps) {
  if (total_steps <= 1) return base_rate;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return 0.5 * base_rate * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

}  // namespace vqp
