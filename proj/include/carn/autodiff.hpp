#ifndef CARN_AUTODIFF_HPP
#define CARN_AUTODIFF_HPP

// Reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records every operation applied to Var handles and replays the
// chain rule backwards from a scalar. Rows are sequence positions, columns
// are features. Trainable tensors live in a ParamSet; the tape reads them
// in place and accumulates their gradients into a caller-provided buffer,
// so several tapes can run concurrently against one ParamSet.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "carn/errors.hpp"

namespace carn {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// Key-validity mask for attention and pooling; empty means "all valid".
using Mask = std::vector<char>;

template <typename Scalar>
class ParamSet {
 public:
  int add(std::string name, Matrix<Scalar> value) {
    if (lookup_.count(name)) {
      throw std::invalid_argument("duplicate parameter '" + name + "'");
    }
    lookup_.emplace(name, static_cast<int>(values_.size()));
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return static_cast<int>(values_.size()) - 1;
  }

  int index(std::string_view name) const {
    auto it = lookup_.find(std::string(name));
    if (it == lookup_.end()) {
      throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
    }
    return it->second;
  }

  bool contains(std::string_view name) const {
    return lookup_.count(std::string(name)) > 0;
  }

  int size() const { return static_cast<int>(values_.size()); }
  const std::string& name(int i) const { return names_[i]; }
  Matrix<Scalar>& value(int i) { return values_[i]; }
  const Matrix<Scalar>& value(int i) const { return values_[i]; }

  std::vector<Matrix<Scalar>> zeros_like() const {
    std::vector<Matrix<Scalar>> out;
    out.reserve(values_.size());
    for (const auto& v : values_) out.push_back(Matrix<Scalar>::Zero(v.rows(), v.cols()));
    return out;
  }

  Eigen::Index total_size() const {
    Eigen::Index n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Matrix<Scalar>> values_;
  std::unordered_map<std::string, int> lookup_;
};

template <typename Scalar>
using Gradients = std::vector<Matrix<Scalar>>;

template <typename Scalar>
class Tape;

template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Matrix<Scalar>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using V = Var<Scalar>;

  /// `grads` may be null for inference; no backward closures are recorded then.
  Tape(const ParamSet<Scalar>& params, Gradients<Scalar>* grads)
      : params_(&params), grads_(grads), param_nodes_(params.size(), -1) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return grads_ != nullptr; }
  const ParamSet<Scalar>& params() const { return *params_; }

  V constant(Mat value) { return push(std::move(value), false, {}); }

  V param(int pid) {
    if (param_nodes_[pid] >= 0) return V{this, param_nodes_[pid]};
    V v = push(params_->value(pid), recording(), {});
    nodes_[v.id].param_id = pid;
    param_nodes_[pid] = v.id;
    return v;
  }

  V param(std::string_view name) { return param(params_->index(name)); }

  const Mat& value(V v) const { return nodes_[v.id].value; }
  Scalar scalar(V v) const { return nodes_[v.id].value(0, 0); }
  bool requires_grad(V v) const { return nodes_[v.id].requires_grad; }

  /// Gradient buffer of a node, allocated on first access.
  Mat& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Gradients<Scalar>& param_grads() { return *grads_; }

  /// Records a node computed outside the built-in op set. `back` is invoked
  /// with the node id during the backward sweep.
  V custom(Mat value, std::initializer_list<V> inputs, std::function<void(int)> back) {
    bool rg = false;
    for (const V& in : inputs) rg = rg || nodes_[in.id].requires_grad;
    return push(std::move(value), rg, std::move(back));
  }

  V custom_flagged(Mat value, bool requires_grad, std::function<void(int)> back) {
    return push(std::move(value), requires_grad && recording(), std::move(back));
  }

  /// Leaf whose gradient is scattered straight into a parameter's buffer.
  V custom_param_leaf(Mat value, std::function<void(int)> back) {
    return push(std::move(value), recording(), std::move(back));
  }

  void backward(V loss) {
    if (!recording()) throw std::logic_error("backward on a non-recording tape");
    if (nodes_[loss.id].value.size() != 1) throw ShapeError("backward expects a scalar loss");
    grad(loss.id)(0, 0) += Scalar(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.back) n.back(id);
      if (n.param_id >= 0) (*grads_)[n.param_id] += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    int param_id = -1;
    std::function<void(int)> back;
  };

  V push(Mat value, bool rg, std::function<void(int)> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    if (rg) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return V{this, static_cast<int>(nodes_.size()) - 1};
  }

  const ParamSet<Scalar>* params_;
  Gradients<Scalar>* grads_;
  std::vector<int> param_nodes_;
  std::vector<Node> nodes_;
};

namespace detail {

template <typename Scalar>
void check_same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.tape != b.tape) throw std::logic_error("vars belong to different tapes");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementary operations

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  Tape<Scalar>& t = *a.tape;
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Matrix<Scalar> out = a.value() * b.value();
  return t.custom(std::move(out), {a, b}, [&t, a, b](int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) t.grad(a.id).noalias() += g * t.value(b).transpose();
    if (t.requires_grad(b)) t.grad(b.id).noalias() += t.value(a).transpose() * g;
  });
}

template <typename Scalar>
Var<Scalar> operator*(Var<Scalar> a, Var<Scalar> b) {
  return matmul(a, b);
}

/// a * b^T
template <typename Scalar>
Var<Scalar> matmul_nt(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  Tape<Scalar>& t = *a.tape;
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: feature dimensions differ");
  Matrix<Scalar> out = a.value() * b.value().transpose();
  return t.custom(std::move(out), {a, b}, [&t, a, b](int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) t.grad(a.id).noalias() += g * t.value(b);
    if (t.requires_grad(b)) t.grad(b.id).noalias() += g.transpose() * t.value(a);
  });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  Tape<Scalar>& t = *a.tape;
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("add: shapes differ");
  Matrix<Scalar> out = a.value() + b.value();
  return t.custom(std::move(out), {a, b}, [&t, a, b](int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) t.grad(a.id) += g;
    if (t.requires_grad(b)) t.grad(b.id) += g;
  });
}

/// Adds a 1 x n row to every row of a.
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> row) {
  detail::check_same_tape(a, row);
  Tape<Scalar>& t = *a.tape;
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias shape");
  Matrix<Scalar> out = a.value().rowwise() + row.value().row(0);
  return t.custom(std::move(out), {a, row}, [&t, a, row](int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) t.grad(a.id) += g;
    if (t.requires_grad(row)) t.grad(row.id) += g.colwise().sum();
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value() * s;
  return t.custom(std::move(out), {a}, [&t, a, s](int self) {
    t.grad(a.id) += t.grad(self) * s;
  });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value().cwiseMax(Scalar(0));
  return t.custom(std::move(out), {a}, [&t, a](int self) {
    const auto& x = t.value(a);
    t.grad(a.id) += (x.array() > Scalar(0)).select(t.grad(self).array(), Scalar(0)).matrix();
  });
}

/// Row-wise softmax. Columns whose mask entry is 0 get probability 0; a row
/// with no valid column is all zeros.
template <typename Scalar>
Matrix<Scalar> softmax_rows_value(const Matrix<Scalar>& x, const Mask& mask = {}) {
  Matrix<Scalar> out = Matrix<Scalar>::Zero(x.rows(), x.cols());
  if (!mask.empty() && static_cast<Eigen::Index>(mask.size()) != x.cols()) {
    throw ShapeError("softmax: mask length does not match columns");
  }
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (mask.empty() || mask[c]) mx = std::max(mx, x(r, c));
    }
    if (!std::isfinite(mx)) continue;
    Scalar total = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (mask.empty() || mask[c]) {
        out(r, c) = std::exp(x(r, c) - mx);
        total += out(r, c);
      }
    }
    out.row(r) /= total;
  }
  return out;
}

template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a, const Mask& mask = {}) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = softmax_rows_value(a.value(), mask);
  return t.custom(std::move(out), {a}, [&t, a](int self) {
    const auto& p = t.value(Var<Scalar>{&t, self});
    const auto& g = t.grad(self);
    Matrix<Scalar> dot = (g.array() * p.array()).rowwise().sum().matrix();
    Matrix<Scalar> dx = p.array() * (g.colwise() - dot.col(0)).array();
    t.grad(a.id) += dx;
  });
}

template <typename Scalar>
Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape<Scalar>& t = *parts[0].tape;
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix<Scalar> out(rows, cols);
  Eigen::Index at = 0;
  bool rg = false;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
    rg = rg || t.requires_grad(p);
  }
  std::vector<Var<Scalar>> keep(parts.begin(), parts.end());
  auto back = [&t, keep](int self) {
    const auto& g = t.grad(self);
    Eigen::Index off = 0;
    for (const auto& p : keep) {
      const Eigen::Index n = t.value(p).cols();
      if (t.requires_grad(p)) t.grad(p.id) += g.middleCols(off, n);
      off += n;
    }
  };
  return t.custom_flagged(std::move(out), rg, back);
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape<Scalar>& t = *parts[0].tape;
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
    rg = rg || t.requires_grad(p);
  }
  Matrix<Scalar> out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var<Scalar>> keep(parts.begin(), parts.end());
  return t.custom_flagged(std::move(out), rg, [&t, keep](int self) {
    const auto& g = t.grad(self);
    Eigen::Index off = 0;
    for (const auto& p : keep) {
      const Eigen::Index n = t.value(p).rows();
      if (t.requires_grad(p)) t.grad(p.id) += g.middleRows(off, n);
      off += n;
    }
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, Eigen::Index start, Eigen::Index n) {
  Tape<Scalar>& t = *a.tape;
  if (start < 0 || start + n > a.cols()) throw ShapeError("slice_cols: out of range");
  Matrix<Scalar> out = a.value().middleCols(start, n);
  return t.custom(std::move(out), {a}, [&t, a, start, n](int self) {
    t.grad(a.id).middleCols(start, n) += t.grad(self);
  });
}

template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> a, Eigen::Index start, Eigen::Index n) {
  Tape<Scalar>& t = *a.tape;
  if (start < 0 || start + n > a.rows()) throw ShapeError("slice_rows: out of range");
  Matrix<Scalar> out = a.value().middleRows(start, n);
  return t.custom(std::move(out), {a}, [&t, a, start, n](int self) {
    t.grad(a.id).middleRows(start, n) += t.grad(self);
  });
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value().transpose();
  return t.custom(std::move(out), {a}, [&t, a](int self) {
    t.grad(a.id) += t.grad(self).transpose();
  });
}

/// Per-row layer normalization with learned 1 x n gain and bias.
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> bias,
                       Scalar eps = Scalar(1e-5)) {
  Tape<Scalar>& t = *x.tape;
  const auto& xv = x.value();
  const Eigen::Index n = xv.cols();
  if (gain.cols() != n || bias.cols() != n) throw ShapeError("layer_norm: parameter width");
  Matrix<Scalar> xhat(xv.rows(), n);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const Scalar mu = xv.row(r).mean();
    const Scalar var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix<Scalar> out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return t.custom(std::move(out), {x, gain, bias},
                  [&t, x, gain, bias, xhat = std::move(xhat), inv_std](int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(gain)) {
      t.grad(gain.id) += (g.array() * xhat.array()).colwise().sum().matrix();
    }
    if (t.requires_grad(bias)) t.grad(bias.id) += g.colwise().sum();
    if (t.requires_grad(x)) {
      Matrix<Scalar> dxhat = (g.array().rowwise() * t.value(gain).row(0).array()).matrix();
      auto& gx = t.grad(x.id);
      for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
        const Scalar m1 = dxhat.row(r).mean();
        const Scalar m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
        gx.row(r).array() +=
            inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
      }
    }
  });
}

/// Mean over the rows whose mask entry is set; 1 x n result.
template <typename Scalar>
Var<Scalar> mean_rows(Var<Scalar> a, const Mask& mask = {}) {
  Tape<Scalar>& t = *a.tape;
  const auto& av = a.value();
  std::vector<Eigen::Index> keep;
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    if (mask.empty() || mask[r]) keep.push_back(r);
  }
  if (keep.empty()) throw EmptyInputError("mean_rows: no valid rows");
  Matrix<Scalar> out = Matrix<Scalar>::Zero(1, av.cols());
  for (auto r : keep) out += av.row(r);
  const Scalar inv = Scalar(1) / static_cast<Scalar>(keep.size());
  out *= inv;
  return t.custom(std::move(out), {a}, [&t, a, keep, inv](int self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a.id);
    for (auto r : keep) ga.row(r) += g.row(0) * inv;
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return t.custom(std::move(out), {a}, [&t, a](int self) {
    t.grad(a.id).array() += t.grad(self)(0, 0);
  });
}

/// -log softmax(logits)[gold] for a 1 x C row of logits.
template <typename Scalar>
Var<Scalar> cross_entropy_logits(Var<Scalar> logits, int gold) {
  Tape<Scalar>& t = *logits.tape;
  if (logits.rows() != 1 || gold < 0 || gold >= logits.cols()) {
    throw ShapeError("cross_entropy_logits: expects one row and a valid class");
  }
  Matrix<Scalar> p = softmax_rows_value(logits.value());
  Matrix<Scalar> out(1, 1);
  const auto& z = logits.value();
  const Scalar mx = z.maxCoeff();
  out(0, 0) = -(z(0, gold) - mx - std::log((z.array() - mx).exp().sum()));
  return t.custom(std::move(out), {logits}, [&t, logits, gold, p = std::move(p)](int self) {
    Matrix<Scalar> d = p;
    d(0, gold) -= Scalar(1);
    t.grad(logits.id) += d * t.grad(self)(0, 0);
  });
}

/// Rows of a trainable table averaged per output row; an empty index list
/// yields a zero row. Gradients go straight into the table's buffer.
template <typename Scalar>
Var<Scalar> gather_mean(Tape<Scalar>& t, int pid, std::vector<std::vector<int>> rows) {
  const auto& table = t.params().value(pid);
  Matrix<Scalar> out = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(rows.size()), table.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].empty()) continue;
    for (int r : rows[i]) {
      if (r < 0 || r >= table.rows()) throw ShapeError("gather: row index out of range");
      out.row(static_cast<Eigen::Index>(i)) += table.row(r);
    }
    out.row(static_cast<Eigen::Index>(i)) /= static_cast<Scalar>(rows[i].size());
  }
  return t.custom_param_leaf(std::move(out), [&t, pid, rows = std::move(rows)](int self) {
    const auto& g = t.grad(self);
    auto& gt = t.param_grads()[pid];
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].empty()) continue;
      const Scalar w = Scalar(1) / static_cast<Scalar>(rows[i].size());
      for (int r : rows[i]) gt.row(r) += g.row(static_cast<Eigen::Index>(i)) * w;
    }
  });
}

}  // namespace carn

#endif  // CARN_AUTODIFF_HPP
