#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records operations eagerly as they are applied (define-by-run);
// backward() replays the recorded nodes in reverse insertion order, which is
// a valid reverse topological order because parents are always recorded
// before their children.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bagforge::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using ColVector = Eigen::Matrix<double, Eigen::Dynamic, 1>;

/// Named trainable tensors. Indices are stable in insertion order.
class ParameterSet {
 public:
  std::size_t add(std::string name, Matrix value);

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t index) const { return names_.at(index); }
  Matrix& value(std::size_t index) { return values_.at(index); }
  const Matrix& value(std::size_t index) const { return values_.at(index); }

  std::optional<std::size_t> index_of(std::string_view name) const;
  /// Throws ValidationError for an unknown name.
  Matrix& operator[](std::string_view name);
  const Matrix& operator[](std::string_view name) const;

  std::size_t scalar_count() const;
  /// Same names, shapes, and bit-identical values.
  bool identical(const ParameterSet& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
struct Var {
  Tape* tape = nullptr;
  std::int32_t id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::int32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Leaf bound to entry `index` of `params`. Repeated calls return the same node.
  Var parameter(const ParameterSet& params, std::size_t index);
  Var parameter(const ParameterSet& params, std::string_view name);

  /// Appends a computed node. Throws NonFiniteError if `value` has NaN/Inf.
  Var record(Matrix value, std::vector<std::int32_t> parents, BackwardFn backward, const char* op);

  /// Reverse pass from a 1x1 loss node.
  void backward(Var loss);
  bool backward_done() const { return backward_done_; }

  const Matrix& value(std::int32_t id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  const char* op(std::int32_t id) const { return nodes_.at(static_cast<std::size_t>(id)).op; }
  std::int32_t parent(std::int32_t id, std::size_t which) const {
    return nodes_.at(static_cast<std::size_t>(id)).parents.at(which);
  }
  /// Gradient accumulated so far at `id` (zeros if none reached it).
  Matrix grad(Var v) const;
  /// Mutable accumulator for a node; allocates zeros on first touch.
  Matrix& grad_ref(std::int32_t id);
  const Matrix& upstream(std::int32_t id) const { return nodes_.at(static_cast<std::size_t>(id)).grad; }

  /// One gradient per entry of `params` (zeros for entries not on the tape).
  std::vector<Matrix> parameter_gradients(const ParameterSet& params) const;

  std::size_t size() const { return nodes_.size(); }
  std::int32_t next_id() const { return static_cast<std::int32_t>(nodes_.size()); }

  /// Throws UsageError when `v` was not recorded on this tape.
  void check_owner(Var v) const;

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<std::int32_t> parents;
    BackwardFn backward;
    const char* op = "";
    std::int64_t param = -1;
  };
  std::vector<Node> nodes_;
  std::vector<std::int32_t> param_nodes_;
  const ParameterSet* bound_params_ = nullptr;
  bool backward_done_ = false;
};

// ---- primitives ----------------------------------------------------------
//
// Binary elementwise ops accept equal shapes, or a right operand that is a
// 1xC row vector, an Rx1 column vector, or a 1x1 scalar broadcast over the
// left operand.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var transpose(Var a);

Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);

/// Row-wise softmax (max-subtracted).
Var softmax_rows(Var a);
/// log(sum(exp(a))) over every entry, as 1x1.
Var logsumexp(Var a);
/// Row-wise logsumexp, as Rx1.
Var logsumexp_rows(Var a);

Var sum(Var a);
Var mean(Var a);
/// Mean over columns, Rx1.
Var mean_cols(Var a);
/// Sum over rows, 1xC.
Var sum_rows(Var a);
/// Max over rows, 1xC. Ties route the gradient to the first maximal row.
Var max_rows(Var a);

Var hcat(std::span<const Var> parts);
Var vcat(std::span<const Var> parts);
Var select_rows(Var a, std::span<const Eigen::Index> rows);
Var select_cols(Var a, Eigen::Index begin, Eigen::Index count);

/// Per-row standardization (x - mean) / sqrt(var + eps), no affine part.
Var layer_norm_rows(Var a, double eps = 1e-5);

// ---- evaluation helpers ---------------------------------------------------

using LossFn = std::function<Var(Tape&)>;

struct LossAndGrad {
  double loss = 0.0;
  std::vector<Matrix> grads;
};

/// Records `fn` on a fresh tape, runs backward, and returns loss + gradients.
LossAndGrad value_and_grad(const ParameterSet& params, const LossFn& fn);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  Eigen::Index worst_entry = -1;
};

/// Compares analytic gradients with central differences at every entry of
/// every parameter: max |analytic - numeric| / max(1, |analytic|).
/// Non-finite comparisons yield +inf.
GradCheckReport grad_check(ParameterSet& params, const LossFn& fn, double eps = 1e-6);

// ---- optimizer -----------------------------------------------------------

struct AdamOptions {
  double lr = 1e-3;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamOptions options;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::int64_t step = 0;

  static AdamState zeros_like(const ParameterSet& params, AdamOptions options);
};

/// Bias-corrected Adam with decoupled weight decay. Validates every gradient
/// before touching any parameter.
void adam_step(ParameterSet& params, std::span<const Matrix> grads, AdamState& state);

}  // namespace bagforge::ad
