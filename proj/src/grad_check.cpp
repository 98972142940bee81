#include "vqprompt/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace vqp {

namespace {

// Restores tape state on every exit path.
struct TapeSession {
  detail::BlockedPathTape& tape = detail::BlockedPathTape::current();
  ~TapeSession() { tape.stop(); }
};

}  // namespace

double grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> inputs, double epsilon) {
  if (!(epsilon > 0.0)) throw ContractError("grad_check: epsilon must be positive");
  for (const auto& t : inputs) {
    if (!t.is_leaf()) throw ContractError("grad_check: inputs must be leaf tensors");
  }

  TapeSession session;
  for (auto& t : inputs) t.zero_grad();
  session.tape.start(detail::BlockedPathTape::Mode::record);
  Tensor out = fn();
  if (out.numel() != 1) {
    throw ContractError("grad_check: function must return a scalar, got " +
                        shape_string(out.shape()));
  }
  out.backward();
  std::vector<Matrix> analytic;
  analytic.reserve(inputs.size());
  for (const auto& t : inputs) analytic.push_back(t.grad());

  session.tape.start(detail::BlockedPathTape::Mode::replay);
  auto evaluate = [&] {
    NoGradGuard no_grad;
    session.tape.rewind();
    return fn().item();
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Matrix& x = inputs[i].mutable_value();
    for (Index j = 0; j < x.size(); ++j) {
      Scalar& xj = x.data()[j];
      const Scalar saved = xj;
      xj = saved + epsilon;
      const double up = evaluate();
      xj = saved - epsilon;
      const double down = evaluate();
      xj = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double err = std::abs(analytic[i].data()[j] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return worst;
}

}  // namespace vqp
