#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every operation applied to Vars in execution order; backward()
// walks the record once in reverse and accumulates gradients into every node
// that depends on a tracked leaf. Broadcasting is limited to scalar operands.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace envisions {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw DimensionError("tensor " + shape_string() + " given " + std::to_string(values_.size()) +
                           " values");
    }
  }

  static Tensor scalar(double value) { return Tensor(1, 1, std::vector<double>{value}); }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor(r, c, std::move(values));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  std::vector<std::size_t> shape() const { return {rows_, cols_}; }
  bool is_scalar() const { return rows_ == 1 && cols_ == 1; }
  bool same_shape(const Tensor& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

  double item() const {
    if (!is_scalar()) throw DimensionError("item() on non-scalar tensor " + shape_string());
    return values_[0];
  }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool flag) {
    requires_grad_ = flag;
    return *this;
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  std::string shape_string() const {
    return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.values_ == b.values_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
  bool requires_grad_ = false;
};

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

inline ConstMap view(const Tensor& t) {
  return ConstMap(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}
inline MutMap view(Tensor& t) {
  return MutMap(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

}  // namespace detail

/// Numerically stable log-softmax of one row of logits.
inline void log_softmax_into(std::span<const double> logits, std::span<double> out) {
  const double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double v : logits) total += std::exp(v - peak);
  const double log_total = peak + std::log(total);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - log_total;
}

inline std::vector<double> log_softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  log_softmax_into(logits, out);
  return out;
}

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is tracked iff value.requires_grad().
  Var leaf(Tensor value) {
    const bool track = value.requires_grad();
    return push(std::move(value), track, nullptr);
  }

  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }

  /// Records an operation output. The backward rule runs only if some input
  /// is tracked.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool track = false;
    for (const Var& in : inputs) {
      check_owner(in);
      track = track || nodes_[in.id()].tracked;
    }
    if (!value.all_finite()) {
      throw TrainingError("non-finite value produced on tape (node " + std::to_string(nodes_.size()) +
                          ")");
    }
    return push(std::move(value), track, track ? std::move(backward) : nullptr);
  }

  const Tensor& value(Var v) const {
    check_owner(v);
    return nodes_[v.id()].value;
  }

  bool tracked(Var v) const { return nodes_[v.id()].tracked; }

  /// Gradient of the last backward() loss wrt v; zeros if v was not reached.
  Tensor grad(Var v) const {
    check_owner(v);
    const Node& node = nodes_[v.id()];
    if (node.grad.size() == 0) return Tensor(node.value.rows(), node.value.cols());
    return node.grad;
  }

  /// Accumulation target for backward rules.
  Tensor& grad_slot(Var v) {
    Node& node = nodes_[v.id()];
    if (node.grad.size() == 0 && node.value.size() != 0) {
      node.grad = Tensor(node.value.rows(), node.value.cols());
    }
    return node.grad;
  }

  /// Single reverse sweep. A tape can be differentiated only once.
  void backward(Var loss) {
    check_owner(loss);
    if (consumed_) throw ContractError("backward called twice on the same tape");
    const Tensor& out = nodes_[loss.id()].value;
    if (!out.is_scalar()) throw ContractError("backward needs a scalar loss, got " + out.shape_string());
    consumed_ = true;
    grad_slot(loss)[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.backward || node.grad.size() == 0) continue;
      node.backward(*this, node.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool tracked = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool tracked, BackwardFn backward) {
    if (consumed_) throw ContractError("cannot record on a tape after backward");
    nodes_.push_back(Node{std::move(value), Tensor(), tracked, std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  void check_owner(Var v) const {
    if (v.tape_ != this) throw ContractError("variable belongs to a different tape");
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

// ---------------------------------------------------------------------------
// Operations

inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul shape mismatch: " + av.shape_string() + " x " + bv.shape_string());
  }
  Tensor out(av.rows(), bv.cols());
  detail::view(out).noalias() = detail::view(av) * detail::view(bv);
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& up) {
    if (tape.tracked(a)) {
      detail::view(tape.grad_slot(a)).noalias() += detail::view(up) * detail::view(b.value()).transpose();
    }
    if (tape.tracked(b)) {
      detail::view(tape.grad_slot(b)).noalias() += detail::view(a.value()).transpose() * detail::view(up);
    }
  });
}

namespace detail {

inline void check_binary(const Tensor& a, const Tensor& b, const char* op) {
  if (a.same_shape(b) || a.is_scalar() || b.is_scalar()) return;
  throw DimensionError(std::string(op) + " shape mismatch: " + a.shape_string() + " vs " +
                       b.shape_string());
}

// Adds `values` into `slot`, summing when slot is a broadcast scalar.
inline void accumulate(Tensor& slot, const Tensor& values) {
  if (slot.same_shape(values)) {
    detail::view(slot) += detail::view(values);
  } else {
    slot[0] += detail::view(values).sum();
  }
}

inline Tensor broadcast_result(const Tensor& a, const Tensor& b) {
  return a.is_scalar() && !b.is_scalar() ? Tensor(b.rows(), b.cols()) : Tensor(a.rows(), a.cols());
}

}  // namespace detail

inline Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::check_binary(av, bv, "add");
  Tensor out = detail::broadcast_result(av, bv);
  const bool as = av.is_scalar() && !out.is_scalar();
  const bool bs = bv.is_scalar() && !out.is_scalar();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[as ? 0 : i] + bv[bs ? 0 : i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& up) {
    if (tape.tracked(a)) detail::accumulate(tape.grad_slot(a), up);
    if (tape.tracked(b)) detail::accumulate(tape.grad_slot(b), up);
  });
}

inline Var mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::check_binary(av, bv, "mul");
  Tensor out = detail::broadcast_result(av, bv);
  const bool as = av.is_scalar() && !out.is_scalar();
  const bool bs = bv.is_scalar() && !out.is_scalar();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[as ? 0 : i] * bv[bs ? 0 : i];
  return a.tape().record(std::move(out), {a, b}, [a, b, as, bs](Tape& tape, const Tensor& up) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (tape.tracked(a)) {
      Tensor& slot = tape.grad_slot(a);
      for (std::size_t i = 0; i < up.size(); ++i) slot[as ? 0 : i] += up[i] * bv[bs ? 0 : i];
    }
    if (tape.tracked(b)) {
      Tensor& slot = tape.grad_slot(b);
      for (std::size_t i = 0; i < up.size(); ++i) slot[bs ? 0 : i] += up[i] * av[as ? 0 : i];
    }
  });
}

/// a * factor for a constant factor.
inline Var scale(Var a, double factor) {
  Tensor out = a.value();
  out.set_requires_grad(false);
  detail::view(out) *= factor;
  return a.tape().record(std::move(out), {a}, [a, factor](Tape& tape, const Tensor& up) {
    detail::view(tape.grad_slot(a)) += factor * detail::view(up);
  });
}

/// a + offset for a constant offset.
inline Var shift(Var a, double offset) {
  Tensor out = a.value();
  out.set_requires_grad(false);
  detail::view(out).array() += offset;
  return a.tape().record(std::move(out), {a}, [a](Tape& tape, const Tensor& up) {
    detail::view(tape.grad_slot(a)) += detail::view(up);
  });
}

inline Var tanh(Var a) {
  Tensor out(a.value().rows(), a.value().cols());
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
  return a.tape().record(std::move(out), {a}, [a](Tape& tape, const Tensor& up) {
    Tensor& slot = tape.grad_slot(a);
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < up.size(); ++i) {
      const double t = std::tanh(av[i]);
      slot[i] += up[i] * (1.0 - t * t);
    }
  });
}

namespace detail {
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
// log(sigmoid(x)) = -softplus(-x)
inline double log_sigmoid(double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}
}  // namespace detail

inline Var sigmoid(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::sigmoid(av[i]);
  return a.tape().record(std::move(out), {a}, [a](Tape& tape, const Tensor& up) {
    Tensor& slot = tape.grad_slot(a);
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < up.size(); ++i) {
      const double s = detail::sigmoid(av[i]);
      slot[i] += up[i] * s * (1.0 - s);
    }
  });
}

inline Var log_sigmoid(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::log_sigmoid(av[i]);
  return a.tape().record(std::move(out), {a}, [a](Tape& tape, const Tensor& up) {
    Tensor& slot = tape.grad_slot(a);
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < up.size(); ++i) slot[i] += up[i] * detail::sigmoid(-av[i]);
  });
}

/// Sum of all entries as a scalar.
inline Var sum(Var a) {
  const double total = detail::view(a.value()).sum();
  return a.tape().record(Tensor::scalar(total), {a}, [a](Tape& tape, const Tensor& up) {
    detail::view(tape.grad_slot(a)).array() += up[0];
  });
}

enum class Elementwise { add, mul, tanh, sigmoid };

/// Dispatches one of the elementwise primitives. Binary ops fold left over
/// all operands.
inline Var elementwise(Elementwise op, std::span<const Var> operands) {
  if (operands.empty()) throw ContractError("elementwise needs at least one operand");
  switch (op) {
    case Elementwise::tanh:
    case Elementwise::sigmoid:
      if (operands.size() != 1) throw ContractError("unary elementwise op takes one operand");
      return op == Elementwise::tanh ? tanh(operands[0]) : sigmoid(operands[0]);
    case Elementwise::add:
    case Elementwise::mul: {
      Var acc = operands[0];
      for (std::size_t i = 1; i < operands.size(); ++i) {
        acc = op == Elementwise::add ? add(acc, operands[i]) : mul(acc, operands[i]);
      }
      return acc;
    }
  }
  throw ContractError("unknown elementwise op");
}

inline Var elementwise(Elementwise op, std::initializer_list<Var> operands) {
  return elementwise(op, std::span<const Var>(operands.begin(), operands.size()));
}

/// Gathers rows of `table` in id order; the gradient scatters back into the rows.
inline Var embedding_lookup(Var table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  Tensor out(ids.size(), tv.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows()) {
      throw IndexError("embedding id " + std::to_string(ids[r]) + " out of range for " +
                       std::to_string(tv.rows()) + " rows");
    }
    std::copy_n(tv.row(static_cast<std::size_t>(ids[r])).begin(), tv.cols(), out.row(r).begin());
  }
  std::vector<int> kept(ids.begin(), ids.end());
  return table.tape().record(std::move(out), {table},
                             [table, kept = std::move(kept)](Tape& tape, const Tensor& up) {
                               Tensor& slot = tape.grad_slot(table);
                               for (std::size_t r = 0; r < kept.size(); ++r) {
                                 auto dst = slot.row(static_cast<std::size_t>(kept[r]));
                                 auto src = up.row(r);
                                 for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
                               }
                             });
}

/// Per-row negative log-likelihood, shape [rows x 1]. A negative target marks
/// the row as ignored (its loss and gradient are zero).
inline Var nll_rows(Var logits, std::span<const int> targets, std::vector<double>* logp_out = nullptr) {
  const Tensor& lv = logits.value();
  if (targets.size() != lv.rows()) {
    throw DimensionError("nll target count " + std::to_string(targets.size()) + " vs logits " +
                         lv.shape_string());
  }
  Tensor out(lv.rows(), 1);
  Tensor probs(lv.rows(), lv.cols());
  std::vector<double> row(lv.cols());
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= lv.cols()) {
      throw IndexError("target id " + std::to_string(targets[r]) + " out of range for " +
                       std::to_string(lv.cols()) + " classes");
    }
    log_softmax_into(lv.row(r), row);
    out(r, 0) = -row[static_cast<std::size_t>(targets[r])];
    if (logp_out) logp_out->push_back(row[static_cast<std::size_t>(targets[r])]);
    for (std::size_t c = 0; c < lv.cols(); ++c) probs(r, c) = std::exp(row[c]);
  }
  std::vector<int> kept(targets.begin(), targets.end());
  return logits.tape().record(
      std::move(out), {logits},
      [logits, kept = std::move(kept), probs = std::move(probs)](Tape& tape, const Tensor& up) {
        Tensor& slot = tape.grad_slot(logits);
        for (std::size_t r = 0; r < kept.size(); ++r) {
          if (kept[r] < 0 || up[r] == 0.0) continue;
          auto dst = slot.row(r);
          auto p = probs.row(r);
          for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += up[r] * p[c];
          dst[static_cast<std::size_t>(kept[r])] -= up[r];
        }
      });
}

struct NllResult {
  Var loss;                            // scalar, -sum of target log-probabilities
  std::vector<double> per_token_logp;  // one entry per non-ignored row
};

/// Summed negative log-likelihood of `targets` under row-wise softmax(logits).
inline NllResult log_softmax_nll(Var logits, std::span<const int> targets) {
  if (targets.empty()) throw ContractError("log_softmax_nll needs at least one target");
  NllResult result;
  Var rows = nll_rows(logits, targets, &result.per_token_logp);
  result.loss = sum(rows);
  return result;
}

// ---------------------------------------------------------------------------
// Optimizer

struct Parameter {
  std::string name;
  Tensor value;
};

inline double global_norm(std::span<const Tensor> grads) {
  double total = 0.0;
  for (const Tensor& g : grads) total += detail::view(g).squaredNorm();
  return std::sqrt(total);
}

/// Global-norm clipping to `clip`, then p <- p - lr * g. Returns the
/// pre-clipping norm.
inline double sgd_step(std::span<Parameter> params, std::span<const Tensor> grads, double lr,
                       double clip = std::numeric_limits<double>::infinity()) {
  if (!(lr > 0)) throw ContractError("learning rate must be positive");
  if (params.size() != grads.size()) throw ContractError("parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].same_shape(params[i].value)) {
      throw DimensionError("gradient " + grads[i].shape_string() + " for parameter '" +
                           params[i].name + "' " + params[i].value.shape_string());
    }
    if (!grads[i].all_finite()) {
      throw TrainingError("non-finite gradient for parameter '" + params[i].name + "'");
    }
  }
  const double norm = global_norm(grads);
  const double factor = norm > clip ? clip / norm : 1.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    detail::view(params[i].value) -= (lr * factor) * detail::view(grads[i]);
  }
  return norm;
}

}  // namespace envisions
