#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double matrices. Every tensor stores its values as a 2-D Eigen matrix whose
// column count is the last dimension of the logical shape and whose row count
// is the product of the leading dimensions.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vqprompt/errors.hpp"

namespace vqp {

using Scalar = double;
using Index = Eigen::Index;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Matrix value;
  Matrix grad;  // empty until the first contribution arrives
  Shape shape;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward;
  std::uint64_t id = 0;

  void accumulate(const Matrix& g);
};

}  // namespace detail

class Tensor {
 public:
  Tensor();
  // A 2-D tensor of value.rows() x value.cols().
  explicit Tensor(Matrix value, bool requires_grad = false);
  // Arbitrary shape; value must be (prod(shape[:-1]) x shape.back()).
  Tensor(Shape shape, Matrix value, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(Scalar v, bool requires_grad = false);
  static Tensor row(const RowVector& v, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const;
  Index numel() const { return node_->value.size(); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }

  const Matrix& value() const { return node_->value; }
  // In-place access for optimizers and finite-difference probes. Only legal on
  // leaves; mutating an interior node would desynchronise the tape.
  Matrix& mutable_value();
  Scalar item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  // Zeros of the right shape when no gradient has arrived.
  Matrix grad() const;
  void zero_grad();

  // Seeds d(this)/d(this) = 1 and propagates through the recorded graph.
  void backward() const;

  bool is_leaf() const { return node_->parents.empty(); }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Internal: build a result node. Records parents only when grad mode is on
  // and at least one parent requires grad.
  static Tensor make_result(Shape shape, Matrix value, std::vector<Tensor> inputs,
                            std::function<void(detail::Node&)> backward);
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Scalar s);
// a (R x C) plus a broadcast row (1 x C).
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor tanh(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(Scalar s, const Tensor& a) { return scale(a, s); }

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---- normalisation ---------------------------------------------------------

// Softmax along axis (rank <= 2). axis = -1 means the last axis.
Tensor softmax(const Tensor& v, int axis = -1);
// Row-wise layer norm with per-column gain and offset (both 1 x C).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset, Scalar eps = 1e-5);

// ---- structure -------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& a, Index start, Index count);
// For a batch of `batch` equal row segments, keeps rows [offset, offset+count)
// of every segment.
Tensor segment_rows(const Tensor& a, Index batch, Index offset, Index count);
// Per sample b: rows of a's b-th segment followed by rows of b's b-th segment.
Tensor concat_per_sample(const Tensor& a, const Tensor& b, Index batch);
Tensor repeat_rows(const Tensor& a, Index times);
Tensor gather_rows(const Tensor& a, std::span<const Index> indices);

// ---- reductions and losses -------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor squared_norm(const Tensor& a);
// Mean softmax cross-entropy of logits (B x C) against labels, where only
// columns with active[c] participate. Inactive columns get exactly zero grad.
Tensor masked_cross_entropy(const Tensor& logits, std::span<const Index> labels,
                            const std::vector<bool>& active);

// ---- attention -------------------------------------------------------------

// Multi-head scaled dot-product attention over a batch of `batch` samples.
// q is (batch*Lq x D), k and v are (batch*Lk x D); heads split D evenly.
// Returns the concatenated head outputs (batch*Lq x D), before W^O.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Index heads, Index batch = 1);

// ---- gradient connectors ---------------------------------------------------

// Identity forward; contributes no gradient backward.
Tensor stop_gradient(const Tensor& x);
// Forwards forward_value; backward routes the full incoming gradient to
// gradient_target and nothing to forward_value.
Tensor straight_through(const Tensor& forward_value, const Tensor& gradient_target);

namespace detail {
// Finite-difference support: while replaying, stop_gradient and
// straight_through reuse the blocked quantities captured during recording, so
// the checked function treats blocked paths as constants.
class BlockedPathTape {
 public:
  enum class Mode { off, record, replay };
  static BlockedPathTape& current();
  void start(Mode mode);
  void rewind() { cursor_ = 0; }
  void stop();
  Mode mode() const { return mode_; }
  Matrix next(const Matrix& live);

 private:
  Mode mode_ = Mode::off;
  std::vector<Matrix> values_;
  std::size_t cursor_ = 0;
};
}  // namespace detail

}  // namespace vqp
