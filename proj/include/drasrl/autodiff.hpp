#pragma once

// Minimal reverse-mode automatic differentiation over dense matrices.
//
// A Tape owns every intermediate value. Ops append a node holding the forward
// value and a closure that, given the node's upstream gradient, accumulates into
// its parents. Tape::backward walks nodes in reverse creation order, which is a
// valid topological order because parents always precede children.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "drasrl/error.hpp"

namespace drasrl::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

/// Handle to a tape node. Cheap to copy; only valid while its tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  using Backprop = std::function<void(Tape&, const Matrix& upstream, const Matrix& output)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Matrix value, std::string label = "constant") { return push(std::move(value), false, {}, std::move(label)); }

  /// Leaf that accumulates a gradient.
  Var parameter(Matrix value, std::string label) { return push(std::move(value), true, {}, std::move(label)); }

  /// Appends an op result. requires_grad is inherited from the caller's parents.
  Var push(Matrix value, bool requires_grad, Backprop backprop, std::string label) {
    if (!value.allFinite()) throw NumericError("non-finite value produced by " + label);
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, std::move(backprop), std::move(label)});
    return Var{this, nodes_.size() - 1};
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(const Var& v) const { return nodes_[v.id].requires_grad; }
  const std::string& label(std::size_t id) const { return nodes_[id].label; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward() root w.r.t. node id (zeros if unreached).
  Matrix grad(std::size_t id) const {
    const Node& n = nodes_[id];
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }
  Matrix grad(const Var& v) const { return grad(v.id); }

  template <typename Expr>
  void accumulate(std::size_t id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Seeds d(root)/d(root) = 1 and propagates. root must be 1x1.
  void backward(const Var& root) {
    if (root.rows() != 1 || root.cols() != 1) throw ConfigError("backward: root must be a scalar");
    for (Node& n : nodes_) n.grad.resize(0, 0);
    if (!nodes_[root.id].requires_grad) return;
    nodes_[root.id].grad = Matrix::Ones(1, 1);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0 || !n.backprop) continue;
      if (!n.grad.allFinite()) throw NumericError("non-finite gradient at " + n.label);
      n.backprop(*this, n.grad, n.value);
    }
  }

  /// Hash of every ReLU activation pattern seen so far. Two evaluations with the
  /// same signature lie on the same smooth piece of the network.
  std::uint64_t kink_signature() const { return kink_signature_; }
  void mix_kink_bit(bool bit) {
    kink_signature_ ^= static_cast<std::uint64_t>(bit) + 0x9e3779b97f4a7c15ULL + (kink_signature_ << 6) +
                       (kink_signature_ >> 2);
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad;
    Backprop backprop;
    std::string label;
  };
  std::vector<Node> nodes_;
  std::uint64_t kink_signature_ = 0xcbf29ce484222325ULL;
};

inline const Matrix& Var::value() const { return tape->value(id); }

namespace detail {
inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape || a.tape == nullptr) throw ConfigError("autodiff: operands live on different tapes");
  return *a.tape;
}
inline void require_shape(bool ok, const char* op) {
  if (!ok) throw ConfigError(std::string("autodiff: shape mismatch in ") + op);
}
}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  const std::size_t ia = a.id, ib = b.id;
  return t.push(a.value() + b.value(), t.requires_grad(a) || t.requires_grad(b),
                [ia, ib](Tape& tp, const Matrix& g, const Matrix&) {
                  tp.accumulate(ia, g);
                  tp.accumulate(ib, g);
                },
                "add");
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
  const std::size_t ia = a.id, ib = b.id;
  return t.push(a.value() - b.value(), t.requires_grad(a) || t.requires_grad(b),
                [ia, ib](Tape& tp, const Matrix& g, const Matrix&) {
                  tp.accumulate(ia, g);
                  tp.accumulate(ib, -g);
                },
                "sub");
}

inline Var scale(const Var& a, double c) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.push(c * a.value(), t.requires_grad(a), [ia, c](Tape& tp, const Matrix& g, const Matrix&) { tp.accumulate(ia, c * g); },
                "scale");
}

/// a * b
inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_shape(a.cols() == b.rows(), "matmul");
  const std::size_t ia = a.id, ib = b.id;
  return t.push(a.value() * b.value(), t.requires_grad(a) || t.requires_grad(b),
                [ia, ib](Tape& tp, const Matrix& g, const Matrix&) {
                  if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
                  if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
                },
                "matmul");
}

/// a * b^T, the row-major "apply weight matrix to every token" form.
inline Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_shape(a.cols() == b.cols(), "matmul_nt");
  const std::size_t ia = a.id, ib = b.id;
  return t.push(a.value() * b.value().transpose(), t.requires_grad(a) || t.requires_grad(b),
                [ia, ib](Tape& tp, const Matrix& g, const Matrix&) {
                  if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib));
                  if (tp.requires_grad(ib)) tp.accumulate(ib, g.transpose() * tp.value(ia));
                },
                "matmul_nt");
}

/// Adds a 1 x n row to every row of m.
inline Var add_row(const Var& m, const Var& row) {
  Tape& t = detail::same_tape(m, row);
  detail::require_shape(row.rows() == 1 && row.cols() == m.cols(), "add_row");
  const std::size_t im = m.id, ir = row.id;
  Matrix out = m.value();
  out.rowwise() += row.value().row(0);
  return t.push(std::move(out), t.requires_grad(m) || t.requires_grad(row),
                [im, ir](Tape& tp, const Matrix& g, const Matrix&) {
                  tp.accumulate(im, g);
                  if (tp.requires_grad(ir)) tp.accumulate(ir, g.colwise().sum());
                },
                "add_row");
}

inline Var relu(const Var& a) {
  Tape& t = *a.tape;
  const Matrix& x = a.value();
  for (Eigen::Index i = 0; i < x.size(); ++i) t.mix_kink_bit(x.data()[i] > 0.0);
  const std::size_t ia = a.id;
  return t.push(x.cwiseMax(0.0), t.requires_grad(a),
                [ia](Tape& tp, const Matrix& g, const Matrix&) {
                  tp.accumulate(ia, g.cwiseProduct((tp.value(ia).array() > 0.0).cast<double>().matrix()));
                },
                "relu");
}

/// Row-wise softmax.
inline Var softmax_rows(const Var& a) {
  Tape& t = *a.tape;
  Matrix y = a.value();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    y.row(r).array() -= y.row(r).maxCoeff();
    y.row(r) = y.row(r).array().exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  const std::size_t ia = a.id;
  return t.push(std::move(y), t.requires_grad(a),
                [ia](Tape& tp, const Matrix& g, const Matrix& y) {
                  const Eigen::VectorXd dots = (g.array() * y.array()).rowwise().sum();
                  tp.accumulate(ia, (y.array() * (g.array().colwise() - dots.array())).matrix());
                },
                "softmax_rows");
}

/// Log-softmax over a column vector.
inline Var log_softmax(const Var& a) {
  Tape& t = *a.tape;
  detail::require_shape(a.cols() == 1, "log_softmax");
  const Matrix& x = a.value();
  const double mx = x.maxCoeff();
  const double lse = mx + std::log((x.array() - mx).exp().sum());
  const std::size_t ia = a.id;
  return t.push((x.array() - lse).matrix(), t.requires_grad(a),
                [ia](Tape& tp, const Matrix& g, const Matrix& y) {
                  const Matrix p = y.array().exp().matrix();
                  tp.accumulate(ia, g - p * g.sum());
                },
                "log_softmax");
}

/// log(1 + exp(x)), elementwise, overflow-safe.
inline Var softplus(const Var& a) {
  Tape& t = *a.tape;
  Matrix y = a.value().unaryExpr([](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); });
  const std::size_t ia = a.id;
  return t.push(std::move(y), t.requires_grad(a),
                [ia](Tape& tp, const Matrix& g, const Matrix&) {
                  const Matrix sig = tp.value(ia).unaryExpr([](double x) {
                    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                  });
                  tp.accumulate(ia, g.cwiseProduct(sig));
                },
                "softplus");
}

inline Var square(const Var& a) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.push(a.value().cwiseAbs2(), t.requires_grad(a),
                [ia](Tape& tp, const Matrix& g, const Matrix&) { tp.accumulate(ia, 2.0 * g.cwiseProduct(tp.value(ia))); }, "square");
}

inline Var abs(const Var& a) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.push(a.value().cwiseAbs(), t.requires_grad(a),
                [ia](Tape& tp, const Matrix& g, const Matrix&) {
                  tp.accumulate(ia, g.cwiseProduct(tp.value(ia).unaryExpr([](double x) {
                    return static_cast<double>((x > 0.0) - (x < 0.0));
                  })));
                },
                "abs");
}

inline Var sum(const Var& a) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.push(Matrix::Constant(1, 1, a.value().sum()), t.requires_grad(a),
                [ia, r, c](Tape& tp, const Matrix& g, const Matrix&) { tp.accumulate(ia, Matrix::Constant(r, c, g(0, 0))); }, "sum");
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Row-major reshape (rows are read left to right, top to bottom).
inline Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  Tape& t = *a.tape;
  detail::require_shape(rows * cols == a.value().size(), "reshape");
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const RowMajor src = a.value();
  Matrix out = Eigen::Map<const RowMajor>(src.data(), rows, cols);
  const std::size_t ia = a.id;
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  return t.push(std::move(out), t.requires_grad(a),
                [ia, r0, c0](Tape& tp, const Matrix& g, const Matrix&) {
                  const RowMajor gr = g;
                  tp.accumulate(ia, Matrix(Eigen::Map<const RowMajor>(gr.data(), r0, c0)));
                },
                "reshape");
}

/// Stacks equal-width blocks vertically.
inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ConfigError("concat_rows: no inputs");
  Tape& t = *parts.front().tape;
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool rg = false;
  for (const Var& p : parts) {
    detail::same_tape(parts.front(), p);
    detail::require_shape(p.cols() == cols, "concat_rows");
    rows += p.rows();
    rg = rg || t.requires_grad(p);
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index offset = 0;
  for (const Var& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    spans.emplace_back(p.id, p.rows());
    offset += p.rows();
  }
  return t.push(std::move(out), rg,
                [spans = std::move(spans)](Tape& tp, const Matrix& g, const Matrix&) {
                  Eigen::Index off = 0;
                  for (const auto& [id, n] : spans) {
                    if (tp.requires_grad(id)) tp.accumulate(id, g.middleRows(off, n));
                    off += n;
                  }
                },
                "concat_rows");
}

/// x / ||x|| per row. Zero rows are an error.
inline Var l2_normalize_rows(const Var& a) {
  Tape& t = *a.tape;
  const Matrix& x = a.value();
  const Eigen::VectorXd norms = x.rowwise().norm();
  if ((norms.array() == 0.0).any()) throw NumericError("l2_normalize_rows: zero-norm feature vector");
  Matrix y = x.array().colwise() / norms.array();
  const std::size_t ia = a.id;
  return t.push(std::move(y), t.requires_grad(a),
                [ia, norms](Tape& tp, const Matrix& g, const Matrix& y) {
                  const Eigen::VectorXd proj = (y.array() * g.array()).rowwise().sum();
                  Matrix d = g - (y.array().colwise() * proj.array()).matrix();
                  d = d.array().colwise() / norms.array();
                  tp.accumulate(ia, d);
                },
                "l2_normalize_rows");
}

/// Rows [start, start + n) of a.
inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index n) {
  Tape& t = *a.tape;
  detail::require_shape(start >= 0 && n >= 0 && start + n <= a.rows(), "slice_rows");
  const std::size_t ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.push(a.value().middleRows(start, n), t.requires_grad(a),
                [ia, r, c, start, n](Tape& tp, const Matrix& g, const Matrix&) {
                  Matrix full = Matrix::Zero(r, c);
                  full.middleRows(start, n) = g;
                  tp.accumulate(ia, full);
                },
                "slice_rows");
}

/// Unmasked scaled dot-product attention applied independently to consecutive
/// blocks of `block` rows: out_b = softmax(scale * q_b k_b^T) v_b. Fused so a
/// batch of windows costs one tape node. weights_out receives the stacked
/// (rows x block) attention weights when given.
inline Var block_attention(const Var& q, const Var& k, const Var& v, Eigen::Index block, double scale,
                           Matrix* weights_out = nullptr) {
  Tape& t = detail::same_tape(q, k);
  detail::same_tape(q, v);
  detail::require_shape(q.cols() == k.cols() && q.rows() == k.rows() && v.rows() == q.rows(), "block_attention");
  detail::require_shape(block > 0 && q.rows() % block == 0, "block_attention");
  const Eigen::Index blocks = q.rows() / block;
  Matrix weights(q.rows(), block);
  Matrix out(q.rows(), v.cols());
  for (Eigen::Index b = 0; b < blocks; ++b) {
    const Eigen::Index r0 = b * block;
    Matrix w = scale * (q.value().middleRows(r0, block) * k.value().middleRows(r0, block).transpose());
    for (Eigen::Index r = 0; r < block; ++r) {
      w.row(r).array() -= w.row(r).maxCoeff();
      w.row(r) = w.row(r).array().exp().matrix();
      w.row(r) /= w.row(r).sum();
    }
    out.middleRows(r0, block) = w * v.value().middleRows(r0, block);
    weights.middleRows(r0, block) = w;
  }
  if (weights_out != nullptr) *weights_out = weights;
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return t.push(std::move(out), t.requires_grad(q) || t.requires_grad(k) || t.requires_grad(v),
                [iq, ik, iv, block, blocks, scale, weights = std::move(weights)](Tape& tp, const Matrix& g,
                                                                                 const Matrix&) {
                  const Matrix& qv = tp.value(iq);
                  const Matrix& kv = tp.value(ik);
                  const Matrix& vv = tp.value(iv);
                  Matrix dq(qv.rows(), qv.cols()), dk(kv.rows(), kv.cols()), dv(vv.rows(), vv.cols());
                  for (Eigen::Index b = 0; b < blocks; ++b) {
                    const Eigen::Index r0 = b * block;
                    const auto w = weights.middleRows(r0, block);
                    const auto gb = g.middleRows(r0, block);
                    dv.middleRows(r0, block) = w.transpose() * gb;
                    const Matrix dw = gb * vv.middleRows(r0, block).transpose();
                    const Eigen::VectorXd dots = (dw.array() * w.array()).rowwise().sum();
                    const Matrix ds = scale * (w.array() * (dw.array().colwise() - dots.array())).matrix();
                    dq.middleRows(r0, block) = ds * kv.middleRows(r0, block);
                    dk.middleRows(r0, block) = ds.transpose() * qv.middleRows(r0, block);
                  }
                  tp.accumulate(iq, dq);
                  tp.accumulate(ik, dk);
                  tp.accumulate(iv, dv);
                },
                "block_attention");
}

}  // namespace drasrl::ad
