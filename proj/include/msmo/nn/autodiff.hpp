// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape records every operation of one forward pass. Parameters live outside
// the tape (owned by the model) and are bound as leaves with Tape::param();
// Tape::backward() accumulates into Parameter::grad. A tape is single-use and
// single-threaded; build a fresh one per example or batch.
#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace msmo::ad {

using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

struct Parameter {
  Mat value;
  Mat grad;
  // Adam moments.
  Mat m1, m2;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Mat v) : value(std::move(v)) { zero_grad(); }

  void zero_grad() { grad = Mat::Zero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node on a tape. Cheap to copy.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Mat& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::function<void(Tape&, std::size_t self)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value) { return push(std::move(value), false, nullptr); }

  Var param(Parameter& p) { return push(p.value, p.trainable, &p); }

  /// Creates a node computed from `parents`. `backward` runs only when at least
  /// one parent needs a gradient.
  Var op(Mat value, std::initializer_list<Var> parents, std::function<void(Tape&, std::size_t)> backward) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || nodes_[p.id].requires_grad;
    Var v = push(std::move(value), rg, nullptr);
    if (rg) nodes_[v.id].backward = std::move(backward);
    return v;
  }

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Adds `g` into the gradient buffer of node `id` (if it wants one).
  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.grad += g;
  }

  /// Back-propagates from a 1x1 node. Parameter gradients are added to
  /// Parameter::grad (callers zero them between steps).
  void backward(Var loss) {
    if (loss.tape != this) throw std::logic_error("backward: variable from another tape");
    if (nodes_[loss.id].value.size() != 1) throw std::logic_error("backward: loss must be a scalar");
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = Mat::Ones(1, 1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.param != nullptr) {
        if (n.param->grad.rows() != n.grad.rows() || n.param->grad.cols() != n.grad.cols()) n.param->zero_grad();
        n.param->grad += n.grad;
      } else if (n.backward) {
        n.backward(*this, i);
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  Var push(Mat value, bool rg, Parameter* p) {
    nodes_.push_back(Node{std::move(value), Mat(), rg, p, {}});
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
};

inline const Mat& Var::value() const { return tape->node(id).value; }

namespace detail {
inline void same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::logic_error("variables belong to different tapes");
}
inline void same_shape(Var a, Var b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
}
inline const Mat& grad_of(Tape& t, std::size_t self) { return t.node(self).grad; }
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear algebra

inline Var add(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "add");
  return a.tape->op(a.value() + b.value(), {a, b}, [a, b](Tape& t, std::size_t s) {
    t.accumulate(a.id, detail::grad_of(t, s));
    t.accumulate(b.id, detail::grad_of(t, s));
  });
}

inline Var sub(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "sub");
  return a.tape->op(a.value() - b.value(), {a, b}, [a, b](Tape& t, std::size_t s) {
    t.accumulate(a.id, detail::grad_of(t, s));
    t.accumulate(b.id, -detail::grad_of(t, s));
  });
}

inline Var hadamard(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "hadamard");
  return a.tape->op(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, std::size_t s) {
    const Mat& g = detail::grad_of(t, s);
    t.accumulate(a.id, g.cwiseProduct(b.value()));
    t.accumulate(b.id, g.cwiseProduct(a.value()));
  });
}

inline Var scale(Var a, double k) {
  return a.tape->op(a.value() * k, {a}, [a, k](Tape& t, std::size_t s) { t.accumulate(a.id, detail::grad_of(t, s) * k); });
}

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  return a.tape->op(a.value() * b.value(), {a, b}, [a, b](Tape& t, std::size_t s) {
    const Mat& g = detail::grad_of(t, s);
    if (t.requires_grad(a)) t.accumulate(a.id, g * b.value().transpose());
    if (t.requires_grad(b)) t.accumulate(b.id, a.value().transpose() * g);
  });
}

/// a * b^T
inline Var matmul_nt(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: column counts differ");
  return a.tape->op(a.value() * b.value().transpose(), {a, b}, [a, b](Tape& t, std::size_t s) {
    const Mat& g = detail::grad_of(t, s);
    if (t.requires_grad(a)) t.accumulate(a.id, g * b.value());
    if (t.requires_grad(b)) t.accumulate(b.id, g.transpose() * a.value());
  });
}

/// Adds a 1 x c row vector to every row of a.
inline Var add_rowvec(Var a, Var row) {
  detail::same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_rowvec: bias shape mismatch");
  Mat out = a.value().rowwise() + row.value().row(0);
  return a.tape->op(std::move(out), {a, row}, [a, row](Tape& t, std::size_t s) {
    const Mat& g = detail::grad_of(t, s);
    t.accumulate(a.id, g);
    t.accumulate(row.id, g.colwise().sum());
  });
}

inline Var add_scalar_var(Var a, Var scalar) {
  detail::same_tape(a, scalar);
  if (scalar.value().size() != 1) throw std::invalid_argument("add_scalar_var: expected 1x1");
  Mat out = a.value().array() + scalar.scalar();
  return a.tape->op(std::move(out), {a, scalar}, [a, scalar](Tape& t, std::size_t s) {
    const Mat& g = detail::grad_of(t, s);
    t.accumulate(a.id, g);
    t.accumulate(scalar.id, Mat::Constant(1, 1, g.sum()));
  });
}

inline Var transpose(Var a) {
  return a.tape->op(a.value().transpose(), {a}, [a](Tape& t, std::size_t s) {
    t.accumulate(a.id, detail::grad_of(t, s).transpose());
  });
}

inline Var relu(Var a) {
  Mat out = a.value().cwiseMax(0.0);
  return a.tape->op(std::move(out), {a}, [a](Tape& t, std::size_t s) {
    t.accumulate(a.id, (a.value().array() > 0.0).cast<double>().matrix().cwiseProduct(detail::grad_of(t, s)));
  });
}

inline Var tanh(Var a) {
  Mat out = a.value().array().tanh().matrix();
  return a.tape->op(out, {a}, [a, out](Tape& t, std::size_t s) {
    t.accumulate(a.id, detail::grad_of(t, s).cwiseProduct((1.0 - out.array().square()).matrix()));
  });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  Mat out = a.value().unaryExpr([](double x) { return sigmoid_scalar(x); });
  return a.tape->op(out, {a}, [a, out](Tape& t, std::size_t s) {
    t.accumulate(a.id, detail::grad_of(t, s).cwiseProduct(out.cwiseProduct((1.0 - out.array()).matrix())));
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Var sum_all(Var a) {
  return a.tape->op(Mat::Constant(1, 1, a.value().sum()), {a}, [a](Tape& t, std::size_t s) {
    t.accumulate(a.id, Mat::Constant(a.rows(), a.cols(), detail::grad_of(t, s)(0, 0)));
  });
}

/// Mean over rows: r x c -> 1 x c.
inline Var mean_rows(Var a) {
  const double r = static_cast<double>(a.rows());
  return a.tape->op(a.value().colwise().mean(), {a}, [a, r](Tape& t, std::size_t s) {
    const Mat& g = detail::grad_of(t, s);
    t.accumulate(a.id, g.replicate(a.rows(), 1) / r);
  });
}

inline Var gather_rows(Var table, std::vector<Index> ids) {
  Mat out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) throw std::out_of_range("gather_rows: id out of range");
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  return table.tape->op(std::move(out), {table}, [table, ids = std::move(ids)](Tape& t, std::size_t s) {
    const Mat& g = detail::grad_of(t, s);
    Mat acc = Mat::Zero(table.rows(), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) acc.row(ids[i]) += g.row(static_cast<Index>(i));
    t.accumulate(table.id, acc);
  });
}

inline Var slice_cols(Var a, Index start, Index len) {
  if (start < 0 || start + len > a.cols()) throw std::out_of_range("slice_cols");
  return a.tape->op(a.value().middleCols(start, len), {a}, [a, start, len](Tape& t, std::size_t s) {
    Mat g = Mat::Zero(a.rows(), a.cols());
    g.middleCols(start, len) = detail::grad_of(t, s);
    t.accumulate(a.id, g);
  });
}

inline Var hconcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("hconcat: no inputs");
  Index rows = parts.front().rows(), cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("hconcat: row counts differ");
    cols += p.cols();
  }
  Mat out(rows, cols);
  Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  Tape* tape = parts.front().tape;
  Var v = tape->op(std::move(out), {}, {});
  // Parents are variadic; wire requires_grad and backward by hand.
  bool rg = false;
  for (const auto& p : parts) rg = rg || tape->requires_grad(p);
  tape->node(v.id).requires_grad = rg;
  if (rg) {
    tape->node(v.id).backward = [parts](Tape& t, std::size_t s) {
      const Mat& g = detail::grad_of(t, s);
      Index off = 0;
      for (const auto& p : parts) {
        t.accumulate(p.id, g.middleCols(off, p.cols()));
        off += p.cols();
      }
    };
  }
  return v;
}

// ---------------------------------------------------------------------------
// Attention and normalization building blocks

/// Numerically stable softmax over each row.
inline Mat softmax_rows(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

inline Var row_softmax(Var a) {
  Mat out = softmax_rows(a.value());
  return a.tape->op(out, {a}, [a, out](Tape& t, std::size_t s) {
    const Mat& g = detail::grad_of(t, s);
    Mat ga(out.rows(), out.cols());
    for (Index r = 0; r < out.rows(); ++r) {
      const double dot = g.row(r).dot(out.row(r));
      ga.row(r) = out.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
    }
    t.accumulate(a.id, ga);
  });
}

/// Scales each row to unit L2 norm. Rows with norm below `eps` map to zero
/// and pass no gradient.
inline Var normalize_rows(Var a, double eps = 1e-12) {
  const Index r = a.rows();
  Eigen::VectorXd norms = a.value().rowwise().norm();
  Mat out = Mat::Zero(r, a.cols());
  for (Index i = 0; i < r; ++i)
    if (norms(i) >= eps) out.row(i) = a.value().row(i) / norms(i);
  return a.tape->op(out, {a}, [a, out, norms, eps](Tape& t, std::size_t s) {
    const Mat& g = detail::grad_of(t, s);
    Mat ga = Mat::Zero(out.rows(), out.cols());
    for (Index i = 0; i < out.rows(); ++i) {
      if (norms(i) < eps) continue;
      ga.row(i) = (g.row(i) - out.row(i) * g.row(i).dot(out.row(i))) / norms(i);
    }
    t.accumulate(a.id, ga);
  });
}

/// Adds a constant (e.g. a -inf causal mask) without tracking it.
inline Var add_constant(Var a, const Mat& c) {
  if (c.rows() != a.rows() || c.cols() != a.cols()) throw std::invalid_argument("add_constant: shape mismatch");
  return a.tape->op(a.value() + c, {a}, [a](Tape& t, std::size_t s) { t.accumulate(a.id, detail::grad_of(t, s)); });
}

/// Row-wise layer normalization with learned gain and bias (1 x c each).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  const Index r = x.rows(), c = x.cols();
  Mat xhat(r, c);
  Eigen::VectorXd inv_std(r);
  for (Index i = 0; i < r; ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Mat out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return x.tape->op(std::move(out), {x, gain, bias}, [x, gain, bias, xhat, inv_std](Tape& t, std::size_t s) {
    const Mat& g = detail::grad_of(t, s);
    const Index c = xhat.cols();
    t.accumulate(gain.id, g.cwiseProduct(xhat).colwise().sum());
    t.accumulate(bias.id, g.colwise().sum());
    if (t.requires_grad(x)) {
      Mat gx(xhat.rows(), c);
      for (Index i = 0; i < xhat.rows(); ++i) {
        const Eigen::RowVectorXd gh = g.row(i).cwiseProduct(gain.value().row(0));
        const double mean_gh = gh.mean();
        const double mean_gh_xhat = gh.dot(xhat.row(i)) / static_cast<double>(c);
        gx.row(i) = inv_std(i) * (gh.array() - mean_gh - xhat.row(i).array() * mean_gh_xhat).matrix();
      }
      t.accumulate(x.id, gx);
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

/// Clamped binary cross-entropy on probabilities, averaged over entries:
///   -(1/m) sum_i [y_i log p_i + (1 - y_i) log(1 - p_i)],  p clamped to [eps, 1-eps].
inline Var bce(Var p, const Mat& y, double eps = 1e-12) {
  if (p.rows() != y.rows() || p.cols() != y.cols()) throw std::invalid_argument("bce: shape mismatch");
  const double count = static_cast<double>(p.value().size());
  double loss = 0.0;
  for (Index i = 0; i < p.value().size(); ++i) {
    const double pi = std::clamp(p.value()(i), eps, 1.0 - eps);
    loss -= y(i) * std::log(pi) + (1.0 - y(i)) * std::log(1.0 - pi);
  }
  return p.tape->op(Mat::Constant(1, 1, loss / count), {p}, [p, y, eps, count](Tape& t, std::size_t s) {
    const double g = detail::grad_of(t, s)(0, 0);
    Mat gp(p.rows(), p.cols());
    for (Index i = 0; i < gp.size(); ++i) {
      const double pi = p.value()(i);
      // Outside the clamp the loss is flat in p.
      gp(i) = (pi < eps || pi > 1.0 - eps) ? 0.0 : -(y(i) / pi - (1.0 - y(i)) / (1.0 - pi)) * g / count;
    }
    t.accumulate(p.id, gp);
  });
}

/// Mean token cross-entropy of row-wise logits against target ids.
inline Var cross_entropy_rows(Var logits, const std::vector<Index>& targets) {
  if (static_cast<Index>(targets.size()) != logits.rows()) throw std::invalid_argument("cross_entropy_rows: target count");
  const Mat probs = softmax_rows(logits.value());
  double loss = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i)
    loss -= std::log(std::max(probs(static_cast<Index>(i), targets[i]), std::numeric_limits<double>::min()));
  const double n = static_cast<double>(targets.size());
  return logits.tape->op(Mat::Constant(1, 1, loss / n), {logits}, [logits, probs, targets, n](Tape& t, std::size_t s) {
    Mat g = probs;
    for (std::size_t i = 0; i < targets.size(); ++i) g(static_cast<Index>(i), targets[i]) -= 1.0;
    t.accumulate(logits.id, g * (detail::grad_of(t, s)(0, 0) / n));
  });
}

}  // namespace msmo::ad
