#pragma once

// Dense 2-D tensors and a flat reverse-mode differentiation tape.
//
// Every op appends one node to the tape. A node tracks gradients when it is a
// requires_grad leaf or when any of its inputs tracks; backward() walks the
// tape once, in reverse recording order, and only visits tracking nodes.
// Multiple uses of the same node sum their contributions.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "clga/error.hpp"

namespace clga {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// A value grid with an optional gradient accumulator.
struct Tensor {
  Matrix value;
  bool requires_grad = false;
  std::optional<Matrix> grad;

  Tensor() = default;
  explicit Tensor(Matrix v, bool track = false) : value(std::move(v)), requires_grad(track) {}

  Index rows() const { return value.rows(); }
  Index cols() const { return value.cols(); }
  void zero_grad() { grad.reset(); }
};

class Tape;

// Handle to a node on a tape. Valid while the tape is alive and not cleared.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  // Gradient after backward(); zero-filled when the node was never reached.
  Matrix grad() const;
  bool tracks() const;

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void reserve(std::size_t n) { nodes_.reserve(n); }
  void clear() {
    nodes_.clear();
    trace_.clear();
  }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Matrix value) { return push_leaf("constant", std::move(value), false); }
  Var variable(Matrix value) { return push_leaf("variable", std::move(value), true); }
  Var leaf(const Tensor& t) { return push_leaf(t.requires_grad ? "variable" : "constant", t.value, t.requires_grad); }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool tracks(std::size_t id) const { return nodes_[id].tracks; }
  std::string_view op_name(std::size_t id) const { return nodes_[id].op; }

  Matrix grad(std::size_t id) const {
    const Node& n = nodes_[id];
    if (n.grad) return *n.grad;
    return Matrix::Zero(n.value.rows(), n.value.cols());
  }

  // Copies the gradient of a leaf back into a standalone tensor.
  void export_grad(Var v, Tensor& into) const { into.grad = grad(v.id()); }

  // Order in which nodes were visited by the last backward pass.
  const std::vector<std::size_t>& backward_trace() const { return trace_; }

  // Appends a computed node. Rejects non-finite values, naming the op.
  Var record(std::string_view op, Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
    if (!value.allFinite()) {
      throw NumericalError("non-finite value produced by op '" + std::string(op) + "' (node " +
                           std::to_string(nodes_.size()) + ", shape " + shape_str(value) + ")");
    }
    Node n;
    n.op = op;
    n.value = std::move(value);
    for (const Var& in : inputs) {
      if (in.tape_ != this) throw Error("op '" + std::string(op) + "' mixes vars from different tapes");
      if (nodes_[in.id_].tracks) n.tracks = true;
    }
    if (n.tracks) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  // Adds `contribution` to the gradient of node `id` if it tracks.
  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& contribution) {
    Node& n = nodes_[id];
    if (!n.tracks) return;
    if (n.grad) {
      *n.grad += contribution;
    } else {
      n.grad = contribution;
    }
  }

  // Reverse sweep from a 1x1 loss. Every requires_grad leaf receives d loss / d leaf
  // (zero if it is not on a path to the loss).
  void backward(Var loss) {
    if (loss.tape_ != this) throw Error("backward: loss belongs to another tape");
    if (nodes_.empty()) throw Error("backward: empty tape");
    const std::size_t root = loss.id_;
    if (nodes_[root].value.rows() != 1 || nodes_[root].value.cols() != 1) {
      throw ShapeError("backward: loss must be 1x1, got " + shape_str(nodes_[root].value));
    }
    if (!nodes_[root].tracks) {
      throw Error("backward: loss is disconnected from every requires_grad leaf");
    }
    for (Node& n : nodes_) n.grad.reset();
    trace_.clear();
    nodes_[root].grad = Matrix::Ones(1, 1);
    for (std::size_t i = root + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.tracks || !n.grad) continue;
      trace_.push_back(i);
      if (n.backward) {
        n.backward(*this, *n.grad);
        if (!n.grad->allFinite()) {
          throw NumericalError("non-finite gradient flowing out of op '" + std::string(n.op) + "' (node " +
                               std::to_string(i) + ")");
        }
      }
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (n.is_leaf && n.tracks) {
        if (!n.grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
        if (!n.grad->allFinite()) {
          throw NumericalError("non-finite gradient on leaf node " + std::to_string(i));
        }
      }
    }
  }

 private:
  friend class Var;

  struct Node {
    std::string_view op;
    Matrix value;
    std::optional<Matrix> grad;
    bool tracks = false;
    bool is_leaf = false;
    BackwardFn backward;
  };

  Var push_leaf(std::string_view op, Matrix value, bool requires_grad) {
    if (!value.allFinite()) throw NumericalError("non-finite value in leaf '" + std::string(op) + "'");
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.tracks = requires_grad;
    n.is_leaf = true;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> trace_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline Matrix Var::grad() const { return tape_->grad(id_); }
inline bool Var::tracks() const { return tape_->tracks(id_); }

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

namespace detail {

inline void require_same_shape(std::string_view op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: shape mismatch " + shape_str(av) + " x " + shape_str(bv));
  }
  Matrix out(av.rows(), bv.cols());
  out.noalias() = av * bv;
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.tracks(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.tracks(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape("add", a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("add", a.value() + b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape("sub", a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("sub", a.value() - b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape("mul", a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape().record("mul", std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.tracks(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.tracks(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

inline Var scale(Var a, double s) {
  const std::size_t ia = a.id();
  return a.tape().record("scale", a.value() * s, {a}, [ia, s](Tape& t, const Matrix& g) {
    t.accumulate(ia, g * s);
  });
}

inline Var transpose(Var a) {
  const std::size_t ia = a.id();
  Matrix out = a.value().transpose();
  return a.tape().record("transpose", std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.transpose());
  });
}

// Elementwise power x^p.
inline Var pow(Var a, double p) {
  const std::size_t ia = a.id();
  Matrix out = a.value().array().pow(p).matrix();
  return a.tape().record("pow", std::move(out), {a}, [ia, p](Tape& t, const Matrix& g) {
    t.accumulate(ia, (g.array() * p * t.value(ia).array().pow(p - 1.0)).matrix());
  });
}

inline Var exp(Var a) {
  const std::size_t ia = a.id();
  Matrix out = a.value().array().exp().matrix();
  const std::size_t self = a.tape().size();
  return a.tape().record("exp", std::move(out), {a}, [ia, self](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(self)));
  });
}

inline Var log(Var a) {
  const std::size_t ia = a.id();
  Matrix out = a.value().array().log().matrix();
  return a.tape().record("log", std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseQuotient(t.value(ia)));
  });
}

inline Var relu(Var a) {
  const std::size_t ia = a.id();
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape().record("relu", std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, (t.value(ia).array() > 0.0).select(g.array(), 0.0).matrix());
  });
}

// Numerically stable log(sigmoid(x)), elementwise.
inline Var log_sigmoid(Var a) {
  const std::size_t ia = a.id();
  Matrix out = a.value().unaryExpr([](double x) {
    return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
  });
  return a.tape().record("log_sigmoid", std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    // d/dx log(sigmoid(x)) = sigmoid(-x)
    Matrix d = t.value(ia).unaryExpr([](double x) {
      return x >= 0.0 ? std::exp(-x) / (1.0 + std::exp(-x)) : 1.0 / (1.0 + std::exp(x));
    });
    t.accumulate(ia, g.cwiseProduct(d));
  });
}

// Sum of all entries, 1x1.
inline Var sum(Var a) {
  const std::size_t ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const Index r = a.rows(), c = a.cols();
  return a.tape().record("sum", std::move(out), {a}, [ia, r, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

// Per-row sums, n x 1.
inline Var row_sum(Var a) {
  const std::size_t ia = a.id();
  Matrix out = a.value().rowwise().sum();
  const Index c = a.cols();
  return a.tape().record("row_sum", std::move(out), {a}, [ia, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.replicate(1, c));
  });
}

// Main diagonal of a square matrix as n x 1.
inline Var diag(Var a) {
  const Matrix& av = a.value();
  if (av.rows() != av.cols()) throw ShapeError("diag: square input required, got " + shape_str(av));
  const std::size_t ia = a.id();
  const Index n = av.rows();
  Matrix out = av.diagonal();
  return a.tape().record("diag", std::move(out), {a}, [ia, n](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(n, n);
    d.diagonal() = g.col(0);
    t.accumulate(ia, d);
  });
}

// [a | b] along columns.
inline Var concat_cols(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows()) {
    throw ShapeError("concat_cols: row mismatch " + shape_str(av) + " vs " + shape_str(bv));
  }
  Matrix out(av.rows(), av.cols() + bv.cols());
  out << av, bv;
  const std::size_t ia = a.id(), ib = b.id();
  const Index ca = av.cols(), cb = bv.cols();
  return a.tape().record("concat_cols", std::move(out), {a, b}, [ia, ib, ca, cb](Tape& t, const Matrix& g) {
    if (t.tracks(ia)) t.accumulate(ia, g.leftCols(ca));
    if (t.tracks(ib)) t.accumulate(ib, g.rightCols(cb));
  });
}

// Selected entries (r, c) as an m x 1 column.
inline Var gather(Var a, std::vector<std::pair<Index, Index>> at) {
  const Matrix& av = a.value();
  Matrix out(static_cast<Index>(at.size()), 1);
  for (std::size_t k = 0; k < at.size(); ++k) {
    const auto [r, c] = at[k];
    if (r < 0 || r >= av.rows() || c < 0 || c >= av.cols()) {
      throw ShapeError("gather: index (" + std::to_string(r) + "," + std::to_string(c) + ") outside " +
                       shape_str(av));
    }
    out(static_cast<Index>(k), 0) = av(r, c);
  }
  const std::size_t ia = a.id();
  const Index rows = av.rows(), cols = av.cols();
  return a.tape().record("gather", std::move(out), {a},
                         [ia, rows, cols, at = std::move(at)](Tape& t, const Matrix& g) {
                           Matrix d = Matrix::Zero(rows, cols);
                           for (std::size_t k = 0; k < at.size(); ++k) {
                             d(at[k].first, at[k].second) += g(static_cast<Index>(k), 0);
                           }
                           t.accumulate(ia, d);
                         });
}

// Rows of `a` in the given order (repeats allowed), k x c.
inline Var select_rows(Var a, std::vector<Index> rows) {
  const Matrix& av = a.value();
  Matrix out(static_cast<Index>(rows.size()), av.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] < 0 || rows[k] >= av.rows()) {
      throw ShapeError("select_rows: row " + std::to_string(rows[k]) + " outside " + shape_str(av));
    }
    out.row(static_cast<Index>(k)) = av.row(rows[k]);
  }
  const std::size_t ia = a.id();
  const Index r = av.rows(), c = av.cols();
  return a.tape().record("select_rows", std::move(out), {a},
                         [ia, r, c, rows = std::move(rows)](Tape& t, const Matrix& g) {
                           Matrix d = Matrix::Zero(r, c);
                           for (std::size_t k = 0; k < rows.size(); ++k) d.row(rows[k]) += g.row(static_cast<Index>(k));
                           t.accumulate(ia, d);
                         });
}

// a + 1 * b for a 1 x c row b (bias broadcast).
inline Var add_rowwise(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (bv.rows() != 1 || bv.cols() != av.cols()) {
    throw ShapeError("add_rowwise: expected 1x" + std::to_string(av.cols()) + " row, got " + shape_str(bv));
  }
  Matrix out = av.rowwise() + bv.row(0);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("add_rowwise", std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.tracks(ia)) t.accumulate(ia, g);
    if (t.tracks(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

namespace detail {

inline Vector row_norms(const Matrix& x, double eps, std::string_view op) {
  Vector norms = x.rowwise().norm();
  if (eps <= 0.0) {
    for (Index i = 0; i < norms.size(); ++i) {
      if (norms(i) == 0.0) {
        throw NumericalError(std::string(op) + ": row " + std::to_string(i) +
                             " has zero norm (node " + std::to_string(i) + ")");
      }
    }
  }
  return norms;
}

// Backward of y = x / (|x| + eps), row by row.
inline Matrix row_normalize_backward(const Matrix& x, const Vector& norms, double eps, const Matrix& dy) {
  Matrix dx(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double nrm = norms(i);
    const double r = nrm + eps;
    if (nrm == 0.0) {
      dx.row(i) = dy.row(i) / r;
      continue;
    }
    const double proj = x.row(i).dot(dy.row(i));
    dx.row(i) = dy.row(i) / r - x.row(i) * (proj / (r * r * nrm));
  }
  return dx;
}

}  // namespace detail

// Rows scaled to unit L2 norm. Zero rows are an error unless eps > 0, in which
// case the divisor is |x| + eps.
inline Var row_normalize(Var a, double eps = 0.0) {
  const Matrix& av = a.value();
  Vector norms = detail::row_norms(av, eps, "row_normalize");
  Matrix out = (av.array().colwise() / (norms.array() + eps)).matrix();
  const std::size_t ia = a.id();
  return a.tape().record("row_normalize", std::move(out), {a},
                         [ia, eps, norms = std::move(norms)](Tape& t, const Matrix& g) {
                           t.accumulate(ia, detail::row_normalize_backward(t.value(ia), norms, eps, g));
                         });
}

// out(i, j) = cos(a_i, b_j). Zero-norm rows are an error unless eps > 0.
inline Var cosine_similarity(Var a, Var b, double eps = 0.0) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw ShapeError("cosine_similarity: width mismatch " + shape_str(av) + " vs " + shape_str(bv));
  }
  Vector na = detail::row_norms(av, eps, "cosine_similarity");
  Vector nb = detail::row_norms(bv, eps, "cosine_similarity");
  Matrix an = (av.array().colwise() / (na.array() + eps)).matrix();
  Matrix bn = (bv.array().colwise() / (nb.array() + eps)).matrix();
  Matrix out(av.rows(), bv.rows());
  out.noalias() = an * bn.transpose();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      "cosine_similarity", std::move(out), {a, b},
      [ia, ib, eps, na = std::move(na), nb = std::move(nb), an = std::move(an), bn = std::move(bn)](
          Tape& t, const Matrix& g) {
        if (t.tracks(ia)) {
          Matrix dan = g * bn;
          t.accumulate(ia, detail::row_normalize_backward(t.value(ia), na, eps, dan));
        }
        if (t.tracks(ib)) {
          Matrix dbn = g.transpose() * an;
          t.accumulate(ib, detail::row_normalize_backward(t.value(ib), nb, eps, dbn));
        }
      });
}

// Per-row log-sum-exp with max subtraction, n x 1. Entries where `exclude` is
// true do not participate; a fully excluded row is an error.
inline Var row_logsumexp(Var a, const BoolMatrix* exclude = nullptr) {
  const Matrix& av = a.value();
  if (exclude && (exclude->rows() != av.rows() || exclude->cols() != av.cols())) {
    throw ShapeError("row_logsumexp: mask shape mismatch");
  }
  const Index n = av.rows(), c = av.cols();
  Matrix out(n, 1);
  Matrix soft = Matrix::Zero(n, c);
  for (Index i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < c; ++j) {
      if (exclude && (*exclude)(i, j)) continue;
      mx = std::max(mx, av(i, j));
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw InvalidArgument("row_logsumexp: row " + std::to_string(i) + " has no participating entries");
    }
    double s = 0.0;
    for (Index j = 0; j < c; ++j) {
      if (exclude && (*exclude)(i, j)) continue;
      const double e = std::exp(av(i, j) - mx);
      soft(i, j) = e;
      s += e;
    }
    soft.row(i) /= s;
    out(i, 0) = mx + std::log(s);
  }
  const std::size_t ia = a.id();
  return a.tape().record("row_logsumexp", std::move(out), {a},
                         [ia, soft = std::move(soft)](Tape& t, const Matrix& g) {
                           t.accumulate(ia, (soft.array().colwise() * g.col(0).array()).matrix());
                         });
}

}  // namespace clga
