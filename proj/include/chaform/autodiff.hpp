#pragma once

// Minimal reverse-mode autodiff over Eigen double matrices. Each op builds a
// node holding its value and a closure that routes the upstream gradient to
// its inputs; backward() runs the closures in reverse topological order.
// Inference runs the same code with gradients disabled (NoGradGuard), which
// skips closure allocation entirely.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

namespace chaform::nn {

using Mat = Eigen::MatrixXd;

inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev; }
};

struct Node {
  Mat value;
  Mat grad;  // empty until first accumulation
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backprop;
  bool requires_grad = false;

  void accumulate(const Mat& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
    grad += g;
  }
};

using Var = std::shared_ptr<Node>;

inline Var constant(Mat v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return n;
}

inline Var parameter(Mat v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  return n;
}

inline Var make_op(std::vector<Var> inputs, Mat value, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool rg = false;
  for (const Var& in : inputs) rg = rg || in->requires_grad;
  if (rg && grad_enabled()) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backprop = std::move(backprop);
  }
  return n;
}

inline double item(const Var& v) {
  if (v->value.size() != 1) throw std::invalid_argument("item: not a scalar");
  return v->value(0, 0);
}

inline void backward(const Var& root) {
  if (root->value.rows() != 1 || root->value.cols() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  // iterative post-order over grad-requiring nodes
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (!root->requires_grad) return;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->inputs.size()) {
      Node* c = n->inputs[i++].get();
      if (c->requires_grad && seen.insert(c).second) stack.push_back({c, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root->grad = Mat::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->grad.size() != 0) n->backprop(*n);
  }
}

// ---- elementwise / linear ops ----

inline Var add(const Var& a, const Var& b) {
  return make_op({a, b}, a->value + b->value, [a, b](Node& n) {
    a->accumulate(n.grad);
    b->accumulate(n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  return make_op({a, b}, a->value - b->value, [a, b](Node& n) {
    a->accumulate(n.grad);
    b->accumulate(-n.grad);
  });
}

inline Var scale(const Var& a, double s) {
  return make_op({a}, a->value * s, [a, s](Node& n) { a->accumulate(n.grad * s); });
}

inline Var cmul(const Var& a, const Var& b) {
  return make_op({a, b}, a->value.cwiseProduct(b->value), [a, b](Node& n) {
    a->accumulate(n.grad.cwiseProduct(b->value));
    b->accumulate(n.grad.cwiseProduct(a->value));
  });
}

inline Var matmul(const Var& a, const Var& b) {
  return make_op({a, b}, a->value * b->value, [a, b](Node& n) {
    a->accumulate(n.grad * b->value.transpose());
    b->accumulate(a->value.transpose() * n.grad);
  });
}

// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  return make_op({a, b}, a->value * b->value.transpose(), [a, b](Node& n) {
    a->accumulate(n.grad * b->value);
    b->accumulate(n.grad.transpose() * a->value);
  });
}

// x (n×d) + bias (1×d) broadcast over rows
inline Var add_bias(const Var& x, const Var& bias) {
  Mat v = x->value;
  v.rowwise() += bias->value.row(0);
  return make_op({x, bias}, std::move(v), [x, bias](Node& n) {
    x->accumulate(n.grad);
    bias->accumulate(n.grad.colwise().sum());
  });
}

// exact (erf) gelu — smooth everywhere, friendly to finite differences
inline Var gelu(const Var& x) {
  static constexpr double inv_sqrt2 = 0.7071067811865475244;
  static constexpr double inv_sqrt2pi = 0.3989422804014326779;
  Mat y = x->value.unaryExpr([](double t) { return 0.5 * t * (1.0 + std::erf(t * inv_sqrt2)); });
  return make_op({x}, std::move(y), [x](Node& n) {
    Mat d = x->value.unaryExpr([](double t) {
      double cdf = 0.5 * (1.0 + std::erf(t * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * t * t);
      return cdf + t * pdf;
    });
    x->accumulate(n.grad.cwiseProduct(d));
  });
}

// row-wise layer normalization with learned gain/bias (1×d each)
inline Var layernorm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const Eigen::Index rows = x->value.rows(), cols = x->value.cols();
  auto xhat = std::make_shared<Mat>(rows, cols);
  auto inv_std = std::make_shared<Eigen::VectorXd>(rows);
  Mat y(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    double mu = x->value.row(i).mean();
    Eigen::RowVectorXd centered = x->value.row(i).array() - mu;
    double var = centered.squaredNorm() / static_cast<double>(cols);
    double s = 1.0 / std::sqrt(var + eps);
    (*inv_std)(i) = s;
    xhat->row(i) = centered * s;
    y.row(i) = xhat->row(i).cwiseProduct(gamma->value.row(0)) + beta->value.row(0);
  }
  return make_op({x, gamma, beta}, std::move(y), [x, gamma, beta, xhat, inv_std](Node& n) {
    const Eigen::Index rows = n.grad.rows(), cols = n.grad.cols();
    Mat dx(rows, cols);
    Eigen::RowVectorXd dgamma = Eigen::RowVectorXd::Zero(cols);
    Eigen::RowVectorXd dbeta = Eigen::RowVectorXd::Zero(cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      Eigen::RowVectorXd g = n.grad.row(i);
      Eigen::RowVectorXd xh = xhat->row(i);
      dgamma += g.cwiseProduct(xh);
      dbeta += g;
      Eigen::RowVectorXd dxh = g.cwiseProduct(gamma->value.row(0));
      double m1 = dxh.mean();
      double m2 = dxh.cwiseProduct(xh).mean();
      dx.row(i) = ((dxh.array() - m1) - xh.array() * m2) * (*inv_std)(i);
    }
    x->accumulate(dx);
    gamma->accumulate(dgamma);
    beta->accumulate(dbeta);
  });
}

// ---- masked attention softmax ----

struct MaskMat {
  int rows = 0, cols = 0;
  std::vector<std::uint8_t> v;

  MaskMat() = default;
  MaskMat(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0) {}
  bool at(int i, int j) const { return v[static_cast<std::size_t>(i) * cols + j] != 0; }
  void set(int i, int j) { v[static_cast<std::size_t>(i) * cols + j] = 1; }

  static MaskMat full(int r, int c) {
    MaskMat m(r, c);
    std::fill(m.v.begin(), m.v.end(), 1);
    return m;
  }
  static MaskMat causal(int n) {
    MaskMat m(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) m.set(i, j);
    return m;
  }
};

// row-wise softmax over visible columns; hidden columns get probability 0
inline Var softmax_masked(const Var& x, const MaskMat& mask) {
  const Eigen::Index rows = x->value.rows(), cols = x->value.cols();
  if (mask.rows != rows || mask.cols != cols)
    throw std::invalid_argument("softmax_masked: mask shape mismatch");
  auto probs = std::make_shared<Mat>(Mat::Zero(rows, cols));
  for (Eigen::Index i = 0; i < rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    int visible = 0;
    for (Eigen::Index j = 0; j < cols; ++j) {
      if (!mask.at(static_cast<int>(i), static_cast<int>(j))) continue;
      ++visible;
      if (x->value(i, j) > mx) mx = x->value(i, j);
    }
    if (visible == 0) throw std::invalid_argument("softmax_masked: fully masked row");
    // non-finite scores flow through as non-finite probabilities so training
    // can report divergence instead of masking it
    double z = 0;
    for (Eigen::Index j = 0; j < cols; ++j) {
      if (!mask.at(static_cast<int>(i), static_cast<int>(j))) continue;
      double e = std::exp(x->value(i, j) - mx);
      (*probs)(i, j) = e;
      z += e;
    }
    probs->row(i) /= z;
  }
  Mat value = *probs;
  return make_op({x}, std::move(value), [x, probs](Node& n) {
    Mat dx(n.grad.rows(), n.grad.cols());
    for (Eigen::Index i = 0; i < n.grad.rows(); ++i) {
      double dot = n.grad.row(i).cwiseProduct(probs->row(i)).sum();
      dx.row(i) = probs->row(i).array() * (n.grad.row(i).array() - dot);
    }
    x->accumulate(dx);
  });
}

// ---- gather / slice / concat / row selection ----

// out.row(i) = table.row(idx[i])
inline Var rows_gather(const Var& table, const std::vector<int>& idx) {
  Mat v(static_cast<Eigen::Index>(idx.size()), table->value.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= table->value.rows())
      throw std::out_of_range("rows_gather: index out of range");
    v.row(static_cast<Eigen::Index>(i)) = table->value.row(idx[i]);
  }
  return make_op({table}, std::move(v), [table, idx](Node& n) {
    Mat d = Mat::Zero(table->value.rows(), table->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      d.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    table->accumulate(d);
  });
}

inline Var slice_cols(const Var& x, int c0, int w) {
  return make_op({x}, x->value.middleCols(c0, w), [x, c0, w](Node& n) {
    Mat d = Mat::Zero(x->value.rows(), x->value.cols());
    d.middleCols(c0, w) = n.grad;
    x->accumulate(d);
  });
}

inline Var concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty");
  Eigen::Index rows = xs[0]->value.rows(), cols = 0;
  for (const Var& x : xs) cols += x->value.cols();
  Mat v(rows, cols);
  Eigen::Index off = 0;
  for (const Var& x : xs) {
    v.middleCols(off, x->value.cols()) = x->value;
    off += x->value.cols();
  }
  std::vector<Var> ins = xs;
  return make_op(ins, std::move(v), [ins](Node& n) {
    Eigen::Index off = 0;
    for (const Var& x : ins) {
      x->accumulate(n.grad.middleCols(off, x->value.cols()));
      off += x->value.cols();
    }
  });
}

// zeroes the rows where keep[i] == 0 (both value and gradient)
inline Var row_mask(const Var& x, const std::vector<std::uint8_t>& keep) {
  if (static_cast<Eigen::Index>(keep.size()) != x->value.rows())
    throw std::invalid_argument("row_mask: size mismatch");
  Mat v = x->value;
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (!keep[i]) v.row(static_cast<Eigen::Index>(i)).setZero();
  return make_op({x}, std::move(v), [x, keep](Node& n) {
    Mat d = n.grad;
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (!keep[i]) d.row(static_cast<Eigen::Index>(i)).setZero();
    x->accumulate(d);
  });
}

// ---- losses ----

// sum over rows with target >= 0 of (logsumexp(row) - row[target]);
// `count`, when given, receives the number of contributing rows
inline Var cross_entropy_sum(const Var& logits, const std::vector<int>& targets, int* count = nullptr) {
  const Eigen::Index rows = logits->value.rows(), cols = logits->value.cols();
  if (static_cast<Eigen::Index>(targets.size()) != rows)
    throw std::invalid_argument("cross_entropy_sum: target size mismatch");
  auto probs = std::make_shared<Mat>(Mat::Zero(rows, cols));
  double total = 0;
  int n_valid = 0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    int t = targets[i];
    if (t < 0) continue;
    if (t >= cols) throw std::out_of_range("cross_entropy_sum: target out of range");
    double mx = logits->value.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits->value.row(i).array() - mx).exp();
    double z = e.sum();
    probs->row(i) = e / z;
    total += std::log(z) + mx - logits->value(i, t);
    ++n_valid;
  }
  if (count) *count = n_valid;
  Mat v(1, 1);
  v(0, 0) = total;
  return make_op({logits}, std::move(v), [logits, probs, targets](Node& n) {
    Mat d = *probs;
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
      if (targets[i] < 0) {
        d.row(i).setZero();
        continue;
      }
      d(i, targets[i]) -= 1.0;
    }
    logits->accumulate(d * n.grad(0, 0));
  });
}

// sum over rows with target >= 0 of -log(probs[i][target]); inputs are
// probabilities (pointer nets emit probabilities, not logits)
inline Var pointer_nll_sum(const Var& probs, const std::vector<int>& targets, int* count = nullptr) {
  const Eigen::Index rows = probs->value.rows();
  if (static_cast<Eigen::Index>(targets.size()) != rows)
    throw std::invalid_argument("pointer_nll_sum: target size mismatch");
  static constexpr double tiny = 1e-300;
  double total = 0;
  int n_valid = 0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    int t = targets[i];
    if (t < 0) continue;
    if (t >= probs->value.cols()) throw std::out_of_range("pointer_nll_sum: target out of range");
    total += -std::log(std::max(probs->value(i, t), tiny));
    ++n_valid;
  }
  if (count) *count = n_valid;
  Mat v(1, 1);
  v(0, 0) = total;
  return make_op({probs}, std::move(v), [probs, targets](Node& n) {
    Mat d = Mat::Zero(probs->value.rows(), probs->value.cols());
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
      int t = targets[i];
      if (t < 0) continue;
      d(i, t) = -1.0 / std::max(probs->value(i, t), tiny);
    }
    probs->accumulate(d * n.grad(0, 0));
  });
}

}  // namespace chaform::nn
