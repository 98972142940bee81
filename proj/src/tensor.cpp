#include "vqprompt/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace vqp {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_next_id{1};

Index product(const Shape& shape, std::size_t begin, std::size_t end) {
  Index p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= shape[i];
  return p;
}

// Row/column extents of the matrix that stores a tensor of this shape.
std::pair<Index, Index> storage_extents(const Shape& shape) {
  if (shape.empty()) return {1, 1};
  if (shape.size() == 1) return {1, shape[0]};
  return {product(shape, 0, shape.size() - 1), shape.back()};
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

void require_rank_le2(const Tensor& a, const char* op) {
  if (a.rank() > 2) {
    throw DimensionError(std::string(op) + ": expected rank <= 2, got " + shape_string(a.shape()));
  }
}

Shape matrix_shape(Index r, Index c) { return Shape{r, c}; }

detail::Node& parent(detail::Node& n, std::size_t i) { return *n.parents[i]; }

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void detail::Node::accumulate(const Matrix& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor() : Tensor(Shape{}, Matrix::Zero(1, 1), false) {}

Tensor::Tensor(Matrix value, bool requires_grad) {
  node_ = std::make_shared<detail::Node>();
  node_->shape = matrix_shape(value.rows(), value.cols());
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
}

Tensor::Tensor(Shape shape, Matrix value, bool requires_grad) {
  auto [r, c] = storage_extents(shape);
  if (value.rows() != r || value.cols() != c) {
    throw DimensionError("tensor storage " + std::to_string(value.rows()) + "x" +
                         std::to_string(value.cols()) + " does not match shape " +
                         shape_string(shape));
  }
  node_ = std::make_shared<detail::Node>();
  node_->value = std::move(value);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
  node_->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto [r, c] = storage_extents(shape);
  return Tensor(std::move(shape), Matrix::Zero(r, c), requires_grad);
}

Tensor Tensor::scalar(Scalar v, bool requires_grad) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Tensor(Shape{}, std::move(m), requires_grad);
}

Tensor Tensor::row(const RowVector& v, bool requires_grad) {
  return Tensor(Shape{v.size()}, Matrix(v), requires_grad);
}

Index Tensor::dim(Index axis) const {
  const auto& s = node_->shape;
  if (axis < 0) axis += static_cast<Index>(s.size());
  if (axis < 0 || axis >= static_cast<Index>(s.size())) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[static_cast<std::size_t>(axis)];
}

Matrix& Tensor::mutable_value() {
  if (!node_->parents.empty()) throw ContractError("mutable_value on a non-leaf tensor");
  return node_->value;
}

Scalar Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return node_->value(0, 0);
}

Matrix Tensor::grad() const {
  if (node_->grad.size() == 0) return Matrix::Zero(node_->value.rows(), node_->value.cols());
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.resize(0, 0); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() needs a scalar, got " + shape_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; parents are visited in recorded order so the
  // traversal (and floating-point accumulation order) is deterministic.
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

Tensor Tensor::make_result(Shape shape, Matrix value, std::vector<Tensor> inputs,
                           std::function<void(detail::Node&)> backward) {
  Tensor out(std::move(shape), std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(inputs.size());
  for (auto& t : inputs) out.node_->parents.push_back(t.node_);
  out.node_->backward = std::move(backward);
  return out;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return Tensor::make_result(a.shape(), a.value() + b.value(), {a, b}, [](detail::Node& n) {
    parent(n, 0).accumulate(n.grad);
    parent(n, 1).accumulate(n.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return Tensor::make_result(a.shape(), a.value() - b.value(), {a, b}, [](detail::Node& n) {
    parent(n, 0).accumulate(n.grad);
    parent(n, 1).accumulate(-n.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Matrix v = a.value().cwiseProduct(b.value());
  return Tensor::make_result(a.shape(), std::move(v), {a, b}, [](detail::Node& n) {
    auto& pa = parent(n, 0);
    auto& pb = parent(n, 1);
    if (pa.requires_grad) pa.accumulate(n.grad.cwiseProduct(pb.value));
    if (pb.requires_grad) pb.accumulate(n.grad.cwiseProduct(pa.value));
  });
}

Tensor scale(const Tensor& a, Scalar s) {
  return Tensor::make_result(a.shape(), a.value() * s, {a},
                             [s](detail::Node& n) { parent(n, 0).accumulate(n.grad * s); });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_rank_le2(a, "add_row");
  if (row.numel() != a.cols()) {
    throw DimensionError("add_row: row " + shape_string(row.shape()) + " does not broadcast over " +
                         shape_string(a.shape()));
  }
  Matrix v = a.value();
  v.rowwise() += Eigen::Map<const RowVector>(row.value().data(), row.numel());
  return Tensor::make_result(a.shape(), std::move(v), {a, row}, [](detail::Node& n) {
    auto& pa = parent(n, 0);
    auto& pr = parent(n, 1);
    pa.accumulate(n.grad);
    if (pr.requires_grad) {
      RowVector g = n.grad.colwise().sum();
      pr.accumulate(Eigen::Map<const Matrix>(g.data(), pr.value.rows(), pr.value.cols()));
    }
  });
}

Tensor tanh(const Tensor& a) {
  Matrix v = a.value().array().tanh().matrix();
  return Tensor::make_result(a.shape(), v, {a}, [v](detail::Node& n) {
    parent(n, 0).accumulate((n.grad.array() * (1.0 - v.array().square())).matrix());
  });
}

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank_le2(a, "matmul");
  require_rank_le2(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  Matrix v = a.value() * b.value();
  return Tensor::make_result(matrix_shape(a.rows(), b.cols()), std::move(v), {a, b},
                             [](detail::Node& n) {
                               auto& pa = parent(n, 0);
                               auto& pb = parent(n, 1);
                               if (pa.requires_grad) pa.accumulate(n.grad * pb.value.transpose());
                               if (pb.requires_grad) pb.accumulate(pa.value.transpose() * n.grad);
                             });
}

Tensor transpose(const Tensor& a) {
  require_rank_le2(a, "transpose");
  Matrix v = a.value().transpose();
  Shape s = matrix_shape(v.rows(), v.cols());
  return Tensor::make_result(std::move(s), std::move(v), {a}, [](detail::Node& n) {
    parent(n, 0).accumulate(n.grad.transpose());
  });
}

// ---- normalisation ---------------------------------------------------------

namespace {

Matrix softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

// d(softmax)/d(logits) applied to g, row by row.
Matrix softmax_rows_backward(const Matrix& y, const Matrix& g) {
  Matrix out(y.rows(), y.cols());
  for (Index r = 0; r < y.rows(); ++r) {
    const Scalar dot = y.row(r).dot(g.row(r));
    out.row(r) = y.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
  }
  return out;
}

}  // namespace

Tensor softmax(const Tensor& v, int axis) {
  require_rank_le2(v, "softmax");
  const int rank = static_cast<int>(v.rank());
  const int last = std::max(rank - 1, 0);
  if (axis < 0) axis += std::max(rank, 1);
  if (axis < 0 || axis > last) {
    throw DimensionError("softmax: axis out of range for " + shape_string(v.shape()));
  }
  const Index n = rank == 0 ? 1 : v.dim(axis);
  if (n < 1) throw DimensionError("softmax: empty axis in " + shape_string(v.shape()));
  if (rank == 2 && axis == 0) return transpose(softmax(transpose(v), 1));

  Matrix y = softmax_rows(v.value());
  return Tensor::make_result(v.shape(), y, {v}, [y](detail::Node& n) {
    parent(n, 0).accumulate(softmax_rows_backward(y, n.grad));
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset, Scalar eps) {
  require_rank_le2(x, "layer_norm");
  const Index rows = x.rows(), cols = x.cols();
  if (gain.numel() != cols || offset.numel() != cols) {
    throw DimensionError("layer_norm: gain/offset must have " + std::to_string(cols) + " entries");
  }
  Eigen::Map<const RowVector> g(gain.value().data(), cols);
  Eigen::Map<const RowVector> b(offset.value().data(), cols);

  Matrix xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const Scalar mu = x.value().row(r).mean();
    const auto centered = (x.value().row(r).array() - mu).matrix();
    const Scalar var = centered.squaredNorm() / static_cast<Scalar>(cols);
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = centered * inv_std(r);
  }
  Matrix y = xhat;
  y.array().rowwise() *= g.array();
  y.rowwise() += b;

  return Tensor::make_result(x.shape(), std::move(y), {x, gain, offset},
                             [xhat, inv_std, cols](detail::Node& n) {
                               auto& px = parent(n, 0);
                               auto& pg = parent(n, 1);
                               auto& pb = parent(n, 2);
                               Eigen::Map<const RowVector> gv(pg.value.data(), cols);
                               if (px.requires_grad) {
                                 Matrix dxhat = n.grad;
                                 dxhat.array().rowwise() *= gv.array();
                                 Matrix dx(dxhat.rows(), cols);
                                 const Scalar inv_n = 1.0 / static_cast<Scalar>(cols);
                                 for (Index r = 0; r < dxhat.rows(); ++r) {
                                   const Scalar m1 = dxhat.row(r).sum() * inv_n;
                                   const Scalar m2 = dxhat.row(r).dot(xhat.row(r)) * inv_n;
                                   dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 -
                                                             xhat.row(r).array() * m2)
                                                                .matrix();
                                 }
                                 px.accumulate(dx);
                               }
                               if (pg.requires_grad) {
                                 RowVector dg = n.grad.cwiseProduct(xhat).colwise().sum();
                                 pg.accumulate(Eigen::Map<const Matrix>(dg.data(), pg.value.rows(),
                                                                        pg.value.cols()));
                               }
                               if (pb.requires_grad) {
                                 RowVector db = n.grad.colwise().sum();
                                 pb.accumulate(Eigen::Map<const Matrix>(db.data(), pb.value.rows(),
                                                                        pb.value.cols()));
                               }
                             });
}

// ---- structure -------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  auto [r, c] = storage_extents(shape);
  if (r * c != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                         shape_string(shape));
  }
  Matrix v = Eigen::Map<const Matrix>(a.value().data(), r, c);
  return Tensor::make_result(std::move(shape), std::move(v), {a}, [](detail::Node& n) {
    auto& p = parent(n, 0);
    p.accumulate(Eigen::Map<const Matrix>(n.grad.data(), p.value.rows(), p.value.cols()));
  });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  require_rank_le2(a, "concat_rows");
  require_rank_le2(b, "concat_rows");
  if (a.cols() != b.cols()) {
    throw DimensionError("concat_rows: column mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Matrix v(a.rows() + b.rows(), a.cols());
  v << a.value(), b.value();
  const Index ra = a.rows(), rb = b.rows();
  Shape out_shape = matrix_shape(v.rows(), v.cols());
  return Tensor::make_result(std::move(out_shape), std::move(v), {a, b},
                             [ra, rb](detail::Node& n) {
                               parent(n, 0).accumulate(n.grad.topRows(ra));
                               parent(n, 1).accumulate(n.grad.bottomRows(rb));
                             });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_rank_le2(a, "concat_cols");
  require_rank_le2(b, "concat_cols");
  if (a.rows() != b.rows()) {
    throw DimensionError("concat_cols: row mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Matrix v(a.rows(), a.cols() + b.cols());
  v << a.value(), b.value();
  const Index ca = a.cols(), cb = b.cols();
  Shape out_shape = matrix_shape(v.rows(), v.cols());
  return Tensor::make_result(std::move(out_shape), std::move(v), {a, b},
                             [ca, cb](detail::Node& n) {
                               parent(n, 0).accumulate(n.grad.leftCols(ca));
                               parent(n, 1).accumulate(n.grad.rightCols(cb));
                             });
}

Tensor slice_rows(const Tensor& a, Index start, Index count) {
  require_rank_le2(a, "slice_rows");
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of range for " +
                         shape_string(a.shape()));
  }
  Matrix v = a.value().middleRows(start, count);
  return Tensor::make_result(matrix_shape(count, a.cols()), std::move(v), {a},
                             [start, count](detail::Node& n) {
                               auto& p = parent(n, 0);
                               Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
                               g.middleRows(start, count) = n.grad;
                               p.accumulate(g);
                             });
}

Tensor segment_rows(const Tensor& a, Index batch, Index offset, Index count) {
  require_rank_le2(a, "segment_rows");
  if (batch <= 0 || a.rows() % batch != 0) {
    throw DimensionError("segment_rows: " + std::to_string(a.rows()) +
                         " rows do not split into batch " + std::to_string(batch));
  }
  const Index seg = a.rows() / batch;
  if (offset < 0 || count < 0 || offset + count > seg) {
    throw DimensionError("segment_rows: window exceeds segment length " + std::to_string(seg));
  }
  Matrix v(batch * count, a.cols());
  for (Index b = 0; b < batch; ++b) v.middleRows(b * count, count) = a.value().middleRows(b * seg + offset, count);
  Shape out_shape = matrix_shape(v.rows(), v.cols());
  return Tensor::make_result(std::move(out_shape), std::move(v), {a},
                             [batch, seg, offset, count](detail::Node& n) {
                               auto& p = parent(n, 0);
                               Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
                               for (Index b = 0; b < batch; ++b)
                                 g.middleRows(b * seg + offset, count) = n.grad.middleRows(b * count, count);
                               p.accumulate(g);
                             });
}

Tensor concat_per_sample(const Tensor& a, const Tensor& b, Index batch) {
  require_rank_le2(a, "concat_per_sample");
  require_rank_le2(b, "concat_per_sample");
  if (batch <= 0 || a.rows() % batch != 0 || b.rows() % batch != 0 || a.cols() != b.cols()) {
    throw DimensionError("concat_per_sample: cannot interleave " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()) + " over batch " + std::to_string(batch));
  }
  const Index la = a.rows() / batch, lb = b.rows() / batch, l = la + lb;
  Matrix v(batch * l, a.cols());
  for (Index s = 0; s < batch; ++s) {
    v.middleRows(s * l, la) = a.value().middleRows(s * la, la);
    v.middleRows(s * l + la, lb) = b.value().middleRows(s * lb, lb);
  }
  Shape out_shape = matrix_shape(v.rows(), v.cols());
  return Tensor::make_result(std::move(out_shape), std::move(v), {a, b},
                             [batch, la, lb, l](detail::Node& n) {
                               auto& pa = parent(n, 0);
                               auto& pb = parent(n, 1);
                               if (pa.requires_grad) {
                                 Matrix g(batch * la, n.grad.cols());
                                 for (Index s = 0; s < batch; ++s) g.middleRows(s * la, la) = n.grad.middleRows(s * l, la);
                                 pa.accumulate(g);
                               }
                               if (pb.requires_grad) {
                                 Matrix g(batch * lb, n.grad.cols());
                                 for (Index s = 0; s < batch; ++s) g.middleRows(s * lb, lb) = n.grad.middleRows(s * l + la, lb);
                                 pb.accumulate(g);
                               }
                             });
}

Tensor repeat_rows(const Tensor& a, Index times) {
  require_rank_le2(a, "repeat_rows");
  if (times < 0) throw DimensionError("repeat_rows: negative count");
  const Index r = a.rows();
  Matrix v(r * times, a.cols());
  for (Index t = 0; t < times; ++t) v.middleRows(t * r, r) = a.value();
  Shape out_shape = matrix_shape(v.rows(), v.cols());
  return Tensor::make_result(std::move(out_shape), std::move(v), {a},
                             [r, times](detail::Node& n) {
                               auto& p = parent(n, 0);
                               Matrix g = Matrix::Zero(r, n.grad.cols());
                               for (Index t = 0; t < times; ++t) g += n.grad.middleRows(t * r, r);
                               p.accumulate(Eigen::Map<const Matrix>(g.data(), p.value.rows(), p.value.cols()));
                             });
}

Tensor gather_rows(const Tensor& a, std::span<const Index> indices) {
  require_rank_le2(a, "gather_rows");
  const auto n_idx = static_cast<Index>(indices.size());
  Matrix v(n_idx, a.cols());
  for (Index i = 0; i < n_idx; ++i) {
    const Index r = indices[static_cast<std::size_t>(i)];
    if (r < 0 || r >= a.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(r) + " out of range for " +
                           shape_string(a.shape()));
    }
    v.row(i) = a.value().row(r);
  }
  std::vector<Index> idx(indices.begin(), indices.end());
  return Tensor::make_result(matrix_shape(n_idx, a.cols()), std::move(v), {a},
                             [idx = std::move(idx)](detail::Node& n) {
                               auto& p = parent(n, 0);
                               Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
                               for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += n.grad.row(static_cast<Index>(i));
                               p.accumulate(g);
                             });
}

// ---- reductions and losses -------------------------------------------------

Tensor sum(const Tensor& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return Tensor::make_result(Shape{}, std::move(v), {a}, [](detail::Node& n) {
    auto& p = parent(n, 0);
    p.accumulate(Matrix::Constant(p.value.rows(), p.value.cols(), n.grad(0, 0)));
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<Scalar>(a.numel()));
}

Tensor squared_norm(const Tensor& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().squaredNorm();
  return Tensor::make_result(Shape{}, std::move(v), {a}, [](detail::Node& n) {
    auto& p = parent(n, 0);
    p.accumulate(p.value * (2.0 * n.grad(0, 0)));
  });
}

Tensor masked_cross_entropy(const Tensor& logits, std::span<const Index> labels,
                            const std::vector<bool>& active) {
  require_rank_le2(logits, "masked_cross_entropy");
  const Index batch = logits.rank() == 1 ? 1 : logits.rows();
  const Index classes = logits.cols();
  if (static_cast<Index>(labels.size()) != batch) {
    throw DimensionError("masked_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(batch) + " rows");
  }
  if (static_cast<Index>(active.size()) != classes) {
    throw DimensionError("masked_cross_entropy: mask has " + std::to_string(active.size()) +
                         " entries, logits have " + std::to_string(classes) + " classes");
  }
  if (batch == 0) throw DimensionError("masked_cross_entropy: empty batch");
  for (Index label : labels) {
    if (label < 0 || label >= classes || !active[static_cast<std::size_t>(label)]) {
      throw ContractError("masked_cross_entropy: label " + std::to_string(label) +
                          " is not an active class");
    }
  }

  // Probabilities over the active set; inactive entries stay exactly zero.
  Matrix prob = Matrix::Zero(batch, classes);
  Scalar loss = 0.0;
  for (Index b = 0; b < batch; ++b) {
    Scalar m = -std::numeric_limits<Scalar>::infinity();
    for (Index c = 0; c < classes; ++c)
      if (active[static_cast<std::size_t>(c)]) m = std::max(m, logits.value()(b, c));
    Scalar z = 0.0;
    for (Index c = 0; c < classes; ++c) {
      if (!active[static_cast<std::size_t>(c)]) continue;
      prob(b, c) = std::exp(logits.value()(b, c) - m);
      z += prob(b, c);
    }
    prob.row(b) /= z;
    const Index y = labels[static_cast<std::size_t>(b)];
    loss += -(logits.value()(b, y) - m - std::log(z));
  }
  loss /= static_cast<Scalar>(batch);

  Matrix v(1, 1);
  v(0, 0) = loss;
  std::vector<Index> ys(labels.begin(), labels.end());
  return Tensor::make_result(Shape{}, std::move(v), {logits},
                             [prob, ys = std::move(ys), batch](detail::Node& n) {
                               Matrix g = prob;
                               for (Index b = 0; b < batch; ++b) g(b, ys[static_cast<std::size_t>(b)]) -= 1.0;
                               g *= n.grad(0, 0) / static_cast<Scalar>(batch);
                               auto& p = parent(n, 0);
                               p.accumulate(Eigen::Map<const Matrix>(g.data(), p.value.rows(), p.value.cols()));
                             });
}

// ---- attention -------------------------------------------------------------

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Index heads, Index batch) {
  for (const Tensor* t : {&q, &k, &v}) require_rank_le2(*t, "attention");
  const Index d = q.cols();
  if (k.cols() != d || v.cols() != d) {
    throw DimensionError("attention: embedding mismatch " + shape_string(q.shape()) + ", " +
                         shape_string(k.shape()) + ", " + shape_string(v.shape()));
  }
  if (k.rows() != v.rows()) {
    throw DimensionError("attention: keys " + shape_string(k.shape()) + " and values " +
                         shape_string(v.shape()) + " differ in length");
  }
  if (heads <= 0 || d % heads != 0) {
    throw DimensionError("attention: dimension " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (batch <= 0 || q.rows() % batch != 0 || k.rows() % batch != 0) {
    throw DimensionError("attention: rows do not split into batch " + std::to_string(batch));
  }
  const Index lq = q.rows() / batch, lk = k.rows() / batch, dh = d / heads;
  const Scalar s = 1.0 / std::sqrt(static_cast<Scalar>(dh));

  Matrix out(q.rows(), d);
  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(batch * heads));
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      const auto qb = q.value().block(b * lq, h * dh, lq, dh);
      const auto kb = k.value().block(b * lk, h * dh, lk, dh);
      const auto vb = v.value().block(b * lk, h * dh, lk, dh);
      Matrix scores = (qb * kb.transpose()) * s;
      Matrix a = softmax_rows(scores);
      out.block(b * lq, h * dh, lq, dh) = a * vb;
      (*probs)[static_cast<std::size_t>(b * heads + h)] = std::move(a);
    }
  }

  return Tensor::make_result(
      q.shape(), std::move(out), {q, k, v},
      [probs, batch, heads, lq, lk, dh, s](detail::Node& n) {
        auto& pq = parent(n, 0);
        auto& pk = parent(n, 1);
        auto& pv = parent(n, 2);
        Matrix gq = pq.requires_grad ? Matrix::Zero(pq.value.rows(), pq.value.cols()) : Matrix();
        Matrix gk = pk.requires_grad ? Matrix::Zero(pk.value.rows(), pk.value.cols()) : Matrix();
        Matrix gv = pv.requires_grad ? Matrix::Zero(pv.value.rows(), pv.value.cols()) : Matrix();
        for (Index b = 0; b < batch; ++b) {
          for (Index h = 0; h < heads; ++h) {
            const Matrix& a = (*probs)[static_cast<std::size_t>(b * heads + h)];
            const auto go = n.grad.block(b * lq, h * dh, lq, dh);
            const auto qb = pq.value.block(b * lq, h * dh, lq, dh);
            const auto kb = pk.value.block(b * lk, h * dh, lk, dh);
            const auto vb = pv.value.block(b * lk, h * dh, lk, dh);
            if (pv.requires_grad) gv.block(b * lk, h * dh, lk, dh) += a.transpose() * go;
            if (pq.requires_grad || pk.requires_grad) {
              Matrix ds = softmax_rows_backward(a, go * vb.transpose()) * s;
              if (pq.requires_grad) gq.block(b * lq, h * dh, lq, dh) += ds * kb;
              if (pk.requires_grad) gk.block(b * lk, h * dh, lk, dh) += ds.transpose() * qb;
            }
          }
        }
        if (pq.requires_grad) pq.accumulate(gq);
        if (pk.requires_grad) pk.accumulate(gk);
        if (pv.requires_grad) pv.accumulate(gv);
      });
}

// ---- gradient connectors ---------------------------------------------------

detail::BlockedPathTape& detail::BlockedPathTape::current() {
  thread_local BlockedPathTape tape;
  return tape;
}

void detail::BlockedPathTape::start(Mode mode) {
  mode_ = mode;
  cursor_ = 0;
  if (mode == Mode::record) values_.clear();
}

void detail::BlockedPathTape::stop() {
  mode_ = Mode::off;
  values_.clear();
  cursor_ = 0;
}

Matrix detail::BlockedPathTape::next(const Matrix& live) {
  switch (mode_) {
    case Mode::off:
      return live;
    case Mode::record:
      values_.push_back(live);
      return live;
    case Mode::replay:
      if (cursor_ >= values_.size()) {
        throw ContractError("blocked-path replay: function made more sg/st calls than recorded");
      }
      return values_[cursor_++];
  }
  return live;
}

Tensor stop_gradient(const Tensor& x) {
  auto& tape = detail::BlockedPathTape::current();
  Matrix v = tape.mode() == detail::BlockedPathTape::Mode::off ? x.value() : tape.next(x.value());
  return Tensor(x.shape(), std::move(v), false);
}

Tensor straight_through(const Tensor& forward_value, const Tensor& gradient_target) {
  require_same_shape(forward_value, gradient_target, "straight_through");
  auto& tape = detail::BlockedPathTape::current();
  Matrix v;
  switch (tape.mode()) {
    case detail::BlockedPathTape::Mode::off:
      v = forward_value.value();
      break;
    case detail::BlockedPathTape::Mode::record:
      tape.next(forward_value.value() - gradient_target.value());
      v = forward_value.value();
      break;
    case detail::BlockedPathTape::Mode::replay:
      v = gradient_target.value() + tape.next(Matrix());
      break;
  }
  return Tensor::make_result(forward_value.shape(), std::move(v), {gradient_target},
                             [](detail::Node& n) { parent(n, 0).accumulate(n.grad); });
}

}  // namespace vqp
