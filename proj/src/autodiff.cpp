#include "bagforge/autodiff.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <string>

#include "bagforge/errors.hpp"

namespace bagforge::ad {

// ---- ParameterSet ----------------------------------------------------------

std::size_t ParameterSet::add(std::string name, Matrix value) {
  if (index_of(name)) throw ValidationError("duplicate parameter name '" + name + "'");
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::optional<std::size_t> ParameterSet::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  return std::nullopt;
}

Matrix& ParameterSet::operator[](std::string_view name) {
  auto idx = index_of(name);
  if (!idx) throw ValidationError("unknown parameter '" + std::string(name) + "'");
  return values_[*idx];
}

const Matrix& ParameterSet::operator[](std::string_view name) const {
  auto idx = index_of(name);
  if (!idx) throw ValidationError("unknown parameter '" + std::string(name) + "'");
  return values_[*idx];
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

bool ParameterSet::identical(const ParameterSet& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const auto& a = values_[i];
    const auto& b = other.values_[i];
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    if (!std::equal(a.data(), a.data() + a.size(), b.data(), [](double x, double y) {
          return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
        })) {
      return false;
    }
  }
  return true;
}

// ---- Var / Tape ------------------------------------------------------------

const Matrix& Var::value() const {
  if (tape == nullptr) throw UsageError("Var is not attached to a tape");
  return tape->value(id);
}

double Var::scalar() const {
  const auto& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw ShapeError("expected a 1x1 value, got " + std::to_string(v.rows()) + "x" + std::to_string(v.cols()));
  }
  return v(0, 0);
}

void Tape::check_owner(Var v) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw UsageError("Var does not belong to this tape");
  }
}

Var Tape::constant(Matrix value) { return record(std::move(value), {}, nullptr, "constant"); }

Var Tape::parameter(const ParameterSet& params, std::size_t index) {
  if (bound_params_ == nullptr) {
    bound_params_ = &params;
    param_nodes_.assign(params.size(), -1);
  } else if (bound_params_ != &params) {
    throw UsageError("a tape can only bind one ParameterSet");
  }
  if (index >= params.size()) throw UsageError("parameter index out of range");
  if (param_nodes_.size() < params.size()) param_nodes_.resize(params.size(), -1);
  if (param_nodes_[index] >= 0) return Var{this, param_nodes_[index]};
  Var v = record(params.value(index), {}, nullptr, "parameter");
  nodes_.back().param = static_cast<std::int64_t>(index);
  param_nodes_[index] = v.id;
  return v;
}

Var Tape::parameter(const ParameterSet& params, std::string_view name) {
  auto idx = params.index_of(name);
  if (!idx) throw UsageError("unknown parameter '" + std::string(name) + "'");
  return parameter(params, *idx);
}

Var Tape::record(Matrix value, std::vector<std::int32_t> parents, BackwardFn backward, const char* op) {
  if (backward_done_) throw UsageError("cannot record on a tape after backward");
  const auto id = next_id();
  if (!value.allFinite()) {
    throw NonFiniteError("node #" + std::to_string(id) + " (" + op + ") produced non-finite values");
  }
  Node node;
  node.value = std::move(value);
  node.parents = std::move(parents);
  node.backward = std::move(backward);
  node.op = op;
  nodes_.push_back(std::move(node));
  return Var{this, id};
}

Matrix& Tape::grad_ref(std::int32_t id) {
  auto& node = nodes_.at(static_cast<std::size_t>(id));
  if (node.grad.size() == 0 && node.value.size() != 0) {
    node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
  }
  return node.grad;
}

Matrix Tape::grad(Var v) const {
  check_owner(v);
  const auto& node = nodes_[static_cast<std::size_t>(v.id)];
  if (node.grad.size() == 0) return Matrix::Zero(node.value.rows(), node.value.cols());
  return node.grad;
}

void Tape::backward(Var loss) {
  if (nodes_.empty()) throw UsageError("backward called before forward: tape is empty");
  check_owner(loss);
  if (backward_done_) throw UsageError("backward already ran on this tape");
  const auto& lv = nodes_[static_cast<std::size_t>(loss.id)].value;
  if (lv.rows() != 1 || lv.cols() != 1) throw UsageError("backward requires a scalar (1x1) loss node");
  grad_ref(loss.id)(0, 0) = 1.0;
  for (std::int32_t id = loss.id; id >= 0; --id) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (node.grad.size() == 0 || !node.backward) continue;
    node.backward(*this, id);
  }
  backward_done_ = true;
}

std::vector<Matrix> Tape::parameter_gradients(const ParameterSet& params) const {
  if (!backward_done_) throw UsageError("gradients requested before backward");
  if (bound_params_ != nullptr && bound_params_ != &params) {
    throw UsageError("gradients requested for a ParameterSet not bound to this tape");
  }
  std::vector<Matrix> out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& shape = params.value(i);
    const std::int32_t node = i < param_nodes_.size() ? param_nodes_[i] : -1;
    if (node >= 0 && nodes_[static_cast<std::size_t>(node)].grad.size() != 0) {
      const auto& g = nodes_[static_cast<std::size_t>(node)].grad;
      if (!g.allFinite()) throw NonFiniteError("gradient of parameter '" + params.name(i) + "' is non-finite");
      out.push_back(g);
    } else {
      out.push_back(Matrix::Zero(shape.rows(), shape.cols()));
    }
  }
  return out;
}

// ---- primitives ------------------------------------------------------------

namespace {

std::string shape_str(const Matrix& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

[[noreturn]] void shape_fail(const Tape& t, const char* op, const std::string& detail) {
  throw ShapeError("node #" + std::to_string(t.next_id()) + " (" + op + "): " + detail);
}

Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw UsageError("operands belong to different tapes");
  a.tape->check_owner(a);
  a.tape->check_owner(b);
  return *a.tape;
}

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw UsageError("Var is not attached to a tape");
  a.tape->check_owner(a);
  return *a.tape;
}

enum class Bcast { same, row, col, scalar };

Bcast broadcast_kind(const Tape& t, const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Bcast::same;
  if (b.rows() == 1 && b.cols() == 1) return Bcast::scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::row;
  if (b.cols() == 1 && b.rows() == a.rows()) return Bcast::col;
  shape_fail(t, op, "cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
}

Matrix expand(const Matrix& b, Bcast kind, Eigen::Index rows, Eigen::Index cols) {
  switch (kind) {
    case Bcast::same:
      return b;
    case Bcast::row:
      return b.replicate(rows, 1);
    case Bcast::col:
      return b.replicate(1, cols);
    case Bcast::scalar:
      return Matrix::Constant(rows, cols, b(0, 0));
  }
  return b;
}

Matrix reduce(const Matrix& g, Bcast kind) {
  switch (kind) {
    case Bcast::same:
      return g;
    case Bcast::row:
      return g.colwise().sum();
    case Bcast::col:
      return g.rowwise().sum();
    case Bcast::scalar:
      return Matrix::Constant(1, 1, g.sum());
  }
  return g;
}

Var unary(Var a, Matrix value, const char* op, std::function<void(Tape&, std::int32_t)> fn) {
  Tape& t = tape_of(a);
  return t.record(std::move(value), {a.id}, std::move(fn), op);
}

Matrix sigmoid_of(const Matrix& x) {
  return x.unaryExpr([](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

Matrix softmax_of_rows(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) shape_fail(t, "matmul", "lhs " + shape_str(av) + " vs rhs " + shape_str(bv));
  return t.record(av * bv, {a.id, b.id}, [](Tape& tp, std::int32_t self) {
    const auto pa = tp.parent(self, 0);
    const auto pb = tp.parent(self, 1);
    const Matrix& g = tp.upstream(self);
    const Matrix& av = tp.value(pa);
    const Matrix& bv = tp.value(pb);
    tp.grad_ref(pa).noalias() += g * bv.transpose();
    tp.grad_ref(pb).noalias() += av.transpose() * g;
  }, "matmul");
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const Bcast kind = broadcast_kind(t, "add", av, bv);
  Matrix out = av + expand(bv, kind, av.rows(), av.cols());
  return t.record(std::move(out), {a.id, b.id}, [kind](Tape& tp, std::int32_t self) {
    const Matrix& g = tp.upstream(self);
    tp.grad_ref(tp.parent(self, 0)) += g;
    tp.grad_ref(tp.parent(self, 1)) += reduce(g, kind);
  }, "add");
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const Bcast kind = broadcast_kind(t, "sub", av, bv);
  Matrix out = av - expand(bv, kind, av.rows(), av.cols());
  return t.record(std::move(out), {a.id, b.id}, [kind](Tape& tp, std::int32_t self) {
    const Matrix& g = tp.upstream(self);
    tp.grad_ref(tp.parent(self, 0)) += g;
    tp.grad_ref(tp.parent(self, 1)) -= reduce(g, kind);
  }, "sub");
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const Bcast kind = broadcast_kind(t, "mul", av, bv);
  Matrix out = av.cwiseProduct(expand(bv, kind, av.rows(), av.cols()));
  return t.record(std::move(out), {a.id, b.id}, [kind](Tape& tp, std::int32_t self) {
    const auto pa = tp.parent(self, 0);
    const auto pb = tp.parent(self, 1);
    const Matrix& g = tp.upstream(self);
    const Matrix& av = tp.value(pa);
    const Matrix& bv = tp.value(pb);
    tp.grad_ref(pa) += g.cwiseProduct(expand(bv, kind, av.rows(), av.cols()));
    tp.grad_ref(pb) += reduce(g.cwiseProduct(av), kind);
  }, "mul");
}

Var scale(Var a, double factor) {
  return unary(a, a.value() * factor, "scale", [factor](Tape& tp, std::int32_t self) {
    tp.grad_ref(tp.parent(self, 0)) += tp.upstream(self) * factor;
  });
}

Var add_scalar(Var a, double offset) {
  return unary(a, a.value().array() + offset, "add_scalar", [](Tape& tp, std::int32_t self) {
    tp.grad_ref(tp.parent(self, 0)) += tp.upstream(self);
  });
}

Var transpose(Var a) {
  return unary(a, a.value().transpose(), "transpose", [](Tape& tp, std::int32_t self) {
    tp.grad_ref(tp.parent(self, 0)) += tp.upstream(self).transpose();
  });
}

Var tanh(Var a) {
  return unary(a, a.value().array().tanh(), "tanh", [](Tape& tp, std::int32_t self) {
    const Matrix& y = tp.value(self);
    tp.grad_ref(tp.parent(self, 0)).array() += tp.upstream(self).array() * (1.0 - y.array().square());
  });
}

Var sigmoid(Var a) {
  return unary(a, sigmoid_of(a.value()), "sigmoid", [](Tape& tp, std::int32_t self) {
    const Matrix& y = tp.value(self);
    tp.grad_ref(tp.parent(self, 0)).array() += tp.upstream(self).array() * y.array() * (1.0 - y.array());
  });
}

Var relu(Var a) {
  return unary(a, a.value().cwiseMax(0.0), "relu", [](Tape& tp, std::int32_t self) {
    const auto p = tp.parent(self, 0);
    const Matrix& x = tp.value(p);
    tp.grad_ref(p).array() += (x.array() > 0.0).select(tp.upstream(self).array(), 0.0);
  });
}

Var exp(Var a) {
  return unary(a, a.value().array().exp(), "exp", [](Tape& tp, std::int32_t self) {
    tp.grad_ref(tp.parent(self, 0)).array() += tp.upstream(self).array() * tp.value(self).array();
  });
}

Var log(Var a) {
  return unary(a, a.value().array().log(), "log", [](Tape& tp, std::int32_t self) {
    const auto p = tp.parent(self, 0);
    tp.grad_ref(p).array() += tp.upstream(self).array() / tp.value(p).array();
  });
}

Var square(Var a) {
  return unary(a, a.value().array().square(), "square", [](Tape& tp, std::int32_t self) {
    const auto p = tp.parent(self, 0);
    tp.grad_ref(p).array() += 2.0 * tp.upstream(self).array() * tp.value(p).array();
  });
}

Var softmax_rows(Var a) {
  return unary(a, softmax_of_rows(a.value()), "softmax_rows", [](Tape& tp, std::int32_t self) {
    const Matrix& y = tp.value(self);
    const Matrix& g = tp.upstream(self);
    Matrix& ga = tp.grad_ref(tp.parent(self, 0));
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      ga.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

Var logsumexp(Var a) {
  const auto& x = a.value();
  if (x.size() == 0) shape_fail(tape_of(a), "logsumexp", "empty input");
  const double m = x.maxCoeff();
  const double value = m + std::log((x.array() - m).exp().sum());
  return unary(a, Matrix::Constant(1, 1, value), "logsumexp", [](Tape& tp, std::int32_t self) {
    const auto p = tp.parent(self, 0);
    const Matrix& x = tp.value(p);
    const double y = tp.value(self)(0, 0);
    tp.grad_ref(p).array() += tp.upstream(self)(0, 0) * (x.array() - y).exp();
  });
}

Var logsumexp_rows(Var a) {
  const auto& x = a.value();
  if (x.cols() == 0) shape_fail(tape_of(a), "logsumexp_rows", "rows have no columns");
  Matrix y(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    y(r, 0) = m + std::log((x.row(r).array() - m).exp().sum());
  }
  return unary(a, std::move(y), "logsumexp_rows", [](Tape& tp, std::int32_t self) {
    const auto p = tp.parent(self, 0);
    const Matrix& x = tp.value(p);
    const Matrix& y = tp.value(self);
    const Matrix& g = tp.upstream(self);
    Matrix& ga = tp.grad_ref(p);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      ga.row(r).array() += g(r, 0) * (x.row(r).array() - y(r, 0)).exp();
    }
  });
}

Var sum(Var a) {
  return unary(a, Matrix::Constant(1, 1, a.value().sum()), "sum", [](Tape& tp, std::int32_t self) {
    tp.grad_ref(tp.parent(self, 0)).array() += tp.upstream(self)(0, 0);
  });
}

Var mean(Var a) {
  const auto n = static_cast<double>(a.value().size());
  if (n == 0) shape_fail(tape_of(a), "mean", "empty input");
  return unary(a, Matrix::Constant(1, 1, a.value().sum() / n), "mean", [n](Tape& tp, std::int32_t self) {
    tp.grad_ref(tp.parent(self, 0)).array() += tp.upstream(self)(0, 0) / n;
  });
}

Var mean_cols(Var a) {
  const auto& x = a.value();
  if (x.cols() == 0) shape_fail(tape_of(a), "mean_cols", "rows have no columns");
  const auto n = static_cast<double>(x.cols());
  Matrix y = x.rowwise().sum() / n;
  return unary(a, std::move(y), "mean_cols", [n](Tape& tp, std::int32_t self) {
    const auto p = tp.parent(self, 0);
    const Matrix& g = tp.upstream(self);
    tp.grad_ref(p) += (g / n).replicate(1, tp.value(p).cols());
  });
}

Var sum_rows(Var a) {
  return unary(a, a.value().colwise().sum(), "sum_rows", [](Tape& tp, std::int32_t self) {
    const auto p = tp.parent(self, 0);
    tp.grad_ref(p) += tp.upstream(self).replicate(tp.value(p).rows(), 1);
  });
}

Var max_rows(Var a) {
  const auto& x = a.value();
  if (x.rows() == 0) shape_fail(tape_of(a), "max_rows", "no rows");
  std::vector<Eigen::Index> argmax(static_cast<std::size_t>(x.cols()), 0);
  Matrix y(1, x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < x.rows(); ++r) {
      if (x(r, c) > x(best, c)) best = r;
    }
    argmax[static_cast<std::size_t>(c)] = best;
    y(0, c) = x(best, c);
  }
  return unary(a, std::move(y), "max_rows", [argmax = std::move(argmax)](Tape& tp, std::int32_t self) {
    const Matrix& g = tp.upstream(self);
    Matrix& ga = tp.grad_ref(tp.parent(self, 0));
    for (std::size_t c = 0; c < argmax.size(); ++c) {
      ga(argmax[c], static_cast<Eigen::Index>(c)) += g(0, static_cast<Eigen::Index>(c));
    }
  });
}

Var hcat(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("hcat of zero parts");
  Tape& t = tape_of(parts[0]);
  Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  std::vector<std::int32_t> parents;
  for (const auto& p : parts) {
    same_tape(parts[0], p);
    if (p.rows() != rows) shape_fail(t, "hcat", "row count " + std::to_string(p.rows()) + " != " + std::to_string(rows));
    cols += p.cols();
    parents.push_back(p.id);
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return t.record(std::move(out), std::move(parents), [n = parts.size()](Tape& tp, std::int32_t self) {
    const Matrix& g = tp.upstream(self);
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = tp.parent(self, i);
      const auto c = tp.value(p).cols();
      tp.grad_ref(p) += g.middleCols(at, c);
      at += c;
    }
  }, "hcat");
}

Var vcat(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("vcat of zero parts");
  Tape& t = tape_of(parts[0]);
  Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  std::vector<std::int32_t> parents;
  for (const auto& p : parts) {
    same_tape(parts[0], p);
    if (p.cols() != cols) shape_fail(t, "vcat", "column count " + std::to_string(p.cols()) + " != " + std::to_string(cols));
    rows += p.rows();
    parents.push_back(p.id);
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return t.record(std::move(out), std::move(parents), [n = parts.size()](Tape& tp, std::int32_t self) {
    const Matrix& g = tp.upstream(self);
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = tp.parent(self, i);
      const auto r = tp.value(p).rows();
      tp.grad_ref(p) += g.middleRows(at, r);
      at += r;
    }
  }, "vcat");
}

Var select_rows(Var a, std::span<const Eigen::Index> rows) {
  Tape& t = tape_of(a);
  const auto& x = a.value();
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) {
      shape_fail(t, "select_rows", "row " + std::to_string(rows[i]) + " out of range for " + shape_str(x));
    }
    out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  }
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  return t.record(std::move(out), {a.id}, [idx = std::move(idx)](Tape& tp, std::int32_t self) {
    const Matrix& g = tp.upstream(self);
    Matrix& ga = tp.grad_ref(tp.parent(self, 0));
    for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  }, "select_rows");
}

Var select_cols(Var a, Eigen::Index begin, Eigen::Index count) {
  Tape& t = tape_of(a);
  const auto& x = a.value();
  if (begin < 0 || count < 0 || begin + count > x.cols()) {
    shape_fail(t, "select_cols", "columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                                     ") out of range for " + shape_str(x));
  }
  return t.record(x.middleCols(begin, count), {a.id}, [begin, count](Tape& tp, std::int32_t self) {
    tp.grad_ref(tp.parent(self, 0)).middleCols(begin, count) += tp.upstream(self);
  }, "select_cols");
}

Var layer_norm_rows(Var a, double eps) {
  const auto& x = a.value();
  if (x.cols() == 0) shape_fail(tape_of(a), "layer_norm_rows", "rows have no columns");
  const auto n = static_cast<double>(x.cols());
  Matrix y(x.rows(), x.cols());
  ColVector inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().sum() / n;
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    y.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  return unary(a, std::move(y), "layer_norm_rows", [inv_std = std::move(inv_std)](Tape& tp, std::int32_t self) {
    const Matrix& y = tp.value(self);
    const Matrix& g = tp.upstream(self);
    Matrix& ga = tp.grad_ref(tp.parent(self, 0));
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double g_mean = g.row(r).mean();
      const double gy_mean = g.row(r).cwiseProduct(y.row(r)).mean();
      ga.row(r).array() += inv_std(r) * (g.row(r).array() - g_mean - y.row(r).array() * gy_mean);
    }
  });
}

// ---- helpers ---------------------------------------------------------------

LossAndGrad value_and_grad(const ParameterSet& params, const LossFn& fn) {
  Tape tape;
  Var loss = fn(tape);
  tape.backward(loss);
  return {loss.scalar(), tape.parameter_gradients(params)};
}

GradCheckReport grad_check(ParameterSet& params, const LossFn& fn, double eps) {
  GradCheckReport report;
  LossAndGrad analytic;
  try {
    analytic = value_and_grad(params, fn);
  } catch (const NonFiniteError&) {
    report.max_rel_error = std::numeric_limits<double>::infinity();
    return report;
  }
  auto eval = [&]() {
    Tape tape;
    return fn(tape).scalar();
  };
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix& value = params.value(p);
    for (Eigen::Index i = 0; i < value.size(); ++i) {
      const double saved = value.data()[i];
      double numeric = 0.0;
      try {
        value.data()[i] = saved + eps;
        const double up = eval();
        value.data()[i] = saved - eps;
        const double down = eval();
        numeric = (up - down) / (2.0 * eps);
      } catch (const NonFiniteError&) {
        numeric = std::numeric_limits<double>::quiet_NaN();
      }
      value.data()[i] = saved;
      const double a = analytic.grads[p].data()[i];
      double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (!std::isfinite(err)) err = std::numeric_limits<double>::infinity();
      if (err > report.max_rel_error || report.worst_entry < 0) {
        report.max_rel_error = err;
        report.worst_param = params.name(p);
        report.worst_entry = i;
      }
    }
  }
  return report;
}

AdamState AdamState::zeros_like(const ParameterSet& params, AdamOptions options) {
  AdamState s;
  s.options = options;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& v = params.value(i);
    s.first_moment.push_back(Matrix::Zero(v.rows(), v.cols()));
    s.second_moment.push_back(Matrix::Zero(v.rows(), v.cols()));
  }
  return s;
}

void adam_step(ParameterSet& params, std::span<const Matrix> grads, AdamState& state) {
  if (grads.size() != params.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    throw ShapeError("adam_step: parameter, gradient, and moment counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params.value(i);
    const auto& g = grads[i];
    if (g.rows() != p.rows() || g.cols() != p.cols() || state.first_moment[i].rows() != p.rows() ||
        state.first_moment[i].cols() != p.cols() || state.second_moment[i].rows() != p.rows() ||
        state.second_moment[i].cols() != p.cols()) {
      throw ShapeError("adam_step: shape mismatch for parameter '" + params.name(i) + "'");
    }
    if (!g.allFinite()) throw NonFiniteError("adam_step: non-finite gradient for parameter '" + params.name(i) + "'");
  }
  const auto& o = state.options;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(o.beta1, t);
  const double bias2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params.value(i).array();
    auto m = state.first_moment[i].array();
    auto v = state.second_moment[i].array();
    const auto g = grads[i].array();
    m = o.beta1 * m + (1.0 - o.beta1) * g;
    v = o.beta2 * v + (1.0 - o.beta2) * g.square();
    if (o.weight_decay != 0.0) theta *= (1.0 - o.lr * o.weight_decay);
    theta -= o.lr * (m / bias1) / ((v / bias2).sqrt() + o.eps);
  }
}

}  // namespace bagforge::ad
