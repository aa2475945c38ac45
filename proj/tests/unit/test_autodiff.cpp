#include <doctest.h>

#include <cmath>
#include <functional>
#include <numbers>

#include "bagforge/autodiff.hpp"
#include "bagforge/errors.hpp"
#include "bagforge/rng.hpp"

using namespace bagforge;
using ad::Matrix;
using ad::Var;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

/// Contracts an op's output with fixed random weights so every entry of the
/// gradient is exercised.
Var weighted_sum(ad::Tape& t, Var x, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum(ad::mul(x, t.constant(random_matrix(rng, x.rows(), x.cols()))));
}

double check_unary(const std::function<Var(ad::Tape&, Var)>& op, Eigen::Index r, Eigen::Index c,
                   double lo = -1.0, double hi = 1.0, std::uint64_t seed = 1) {
  Rng rng(seed);
  ad::ParameterSet p;
  p.add("x", random_matrix(rng, r, c, lo, hi));
  auto fn = [&](ad::Tape& t) { return weighted_sum(t, op(t, t.parameter(p, "x")), seed + 100); };
  return ad::grad_check(p, fn).max_rel_error;
}

double check_binary(const std::function<Var(ad::Tape&, Var, Var)>& op, Eigen::Index ar, Eigen::Index ac,
                    Eigen::Index br, Eigen::Index bc, std::uint64_t seed = 2) {
  Rng rng(seed);
  ad::ParameterSet p;
  p.add("a", random_matrix(rng, ar, ac));
  p.add("b", random_matrix(rng, br, bc));
  auto fn = [&](ad::Tape& t) { return weighted_sum(t, op(t, t.parameter(p, "a"), t.parameter(p, "b")), seed + 100); };
  return ad::grad_check(p, fn).max_rel_error;
}

}  // namespace

TEST_CASE("softmax of equal scores is uniform") {
  ad::Tape t;
  Var s = ad::softmax_rows(t.constant(Matrix::Zero(1, 3)));
  for (int i = 0; i < 3; ++i) CHECK(s.value()(0, i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax rows are nonnegative and sum to one") {
  Rng rng(5);
  ad::Tape t;
  Var s = ad::softmax_rows(t.constant(random_matrix(rng, 6, 9, -30, 30)));
  for (Eigen::Index r = 0; r < 6; ++r) {
    CHECK((s.value().row(r).array() >= 0).all());
    CHECK(std::abs(s.value().row(r).sum() - 1.0) < 1e-12);
  }
}

TEST_CASE("identity matmul") {
  ad::Tape t;
  Matrix x(1, 2);
  x << 1, 0;
  Var y = ad::matmul(t.constant(x), t.constant(Matrix::Identity(2, 2)));
  CHECK(y.value()(0, 0) == 1.0);
  CHECK(y.value()(0, 1) == 0.0);
}

TEST_CASE("logsumexp of (0, ln 3) is ln 4") {
  ad::Tape t;
  Matrix x(1, 2);
  x << 0.0, std::log(3.0);
  CHECK(ad::logsumexp(t.constant(x)).scalar() == doctest::Approx(std::log(4.0)).epsilon(1e-15));
}

TEST_CASE("logsumexp does not overflow") {
  ad::Tape t;
  Matrix x(1, 2);
  x << 1000.0, 1000.0;
  CHECK(ad::logsumexp(t.constant(x)).scalar() == doctest::Approx(1000.0 + std::log(2.0)));
}

TEST_CASE("gradient of sum is all ones") {
  ad::ParameterSet p;
  p.add("x", Matrix::Constant(3, 4, 0.7));
  const auto r = ad::value_and_grad(p, [&](ad::Tape& t) { return ad::sum(t.parameter(p, "x")); });
  CHECK(r.grads[0].isApprox(Matrix::Ones(3, 4)));
}

TEST_CASE("gradient of x squared at 3 is 6") {
  ad::ParameterSet p;
  p.add("x", Matrix::Constant(1, 1, 3.0));
  const auto r = ad::value_and_grad(p, [&](ad::Tape& t) { return ad::square(t.parameter(p, "x")); });
  CHECK(r.loss == 9.0);
  CHECK(r.grads[0](0, 0) == 6.0);
}

TEST_CASE("backward before forward is a usage error") {
  ad::Tape t;
  CHECK_THROWS_AS(t.backward(Var{}), UsageError);
  Var v = t.constant(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(t.backward(v), UsageError);
}

TEST_CASE("non-finite values are rejected with the node identity") {
  ad::Tape t;
  Var v = t.constant(Matrix::Constant(1, 1, -1.0));
  CHECK_THROWS_AS(ad::log(v), NonFiniteError);
}

TEST_CASE("shape mismatches name the node") {
  ad::Tape t;
  Var a = t.constant(Matrix::Ones(2, 3));
  Var b = t.constant(Matrix::Ones(2, 3));
  CHECK_THROWS_AS(ad::matmul(a, b), ShapeError);
  CHECK_THROWS_AS(ad::add(a, t.constant(Matrix::Ones(3, 2))), ShapeError);
}

TEST_CASE("bce of sigmoid matches finite differences") {
  Rng rng(11);
  ad::ParameterSet p;
  p.add("w", random_matrix(rng, 8, 1));
  const Matrix f = random_matrix(rng, 1, 8);
  auto fn = [&](ad::Tape& t) {
    Var z = ad::matmul(t.constant(f), t.parameter(p, "w"));
    Var yhat = ad::sigmoid(z);
    // y = 1: -log(sigmoid(z))
    return ad::scale(ad::log(yhat), -1.0);
  };
  CHECK(ad::grad_check(p, fn).max_rel_error < 1e-5);
}

TEST_CASE("linear graphs check exactly") {
  Rng rng(3);
  ad::ParameterSet p;
  p.add("W", random_matrix(rng, 4, 3));
  const Matrix x = random_matrix(rng, 5, 4);
  auto fn = [&](ad::Tape& t) { return weighted_sum(t, ad::matmul(t.constant(x), t.parameter(p, "W")), 9); };
  CHECK(ad::grad_check(p, fn).max_rel_error < 1e-9);
}

TEST_CASE("primitive gradients agree with central differences") {
  const double tol = 1e-5;
  CHECK(check_binary([](ad::Tape&, Var a, Var b) { return ad::matmul(a, b); }, 3, 4, 4, 2) < tol);
  CHECK(check_binary([](ad::Tape&, Var a, Var b) { return ad::add(a, b); }, 3, 4, 3, 4) < tol);
  CHECK(check_binary([](ad::Tape&, Var a, Var b) { return ad::add(a, b); }, 3, 4, 1, 4) < tol);
  CHECK(check_binary([](ad::Tape&, Var a, Var b) { return ad::add(a, b); }, 3, 4, 3, 1) < tol);
  CHECK(check_binary([](ad::Tape&, Var a, Var b) { return ad::sub(a, b); }, 3, 4, 1, 1) < tol);
  CHECK(check_binary([](ad::Tape&, Var a, Var b) { return ad::mul(a, b); }, 3, 4, 3, 4) < tol);
  CHECK(check_binary([](ad::Tape&, Var a, Var b) { return ad::mul(a, b); }, 3, 4, 1, 4) < tol);
  CHECK(check_binary(
            [](ad::Tape&, Var a, Var b) {
              const Var parts[] = {a, b};
              return ad::hcat(parts);
            },
            3, 2, 3, 5) < tol);
  CHECK(check_binary(
            [](ad::Tape&, Var a, Var b) {
              const Var parts[] = {a, b};
              return ad::vcat(parts);
            },
            2, 3, 4, 3) < tol);

  CHECK(check_unary([](ad::Tape&, Var x) { return ad::tanh(x); }, 3, 4) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::sigmoid(x); }, 3, 4) < tol);
  // Inputs kept away from the kink at 0.
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::relu(x); }, 3, 4, 0.1, 1.0) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::relu(x); }, 3, 4, -1.0, -0.1) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::exp(x); }, 3, 4) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::log(x); }, 3, 4, 0.5, 2.0) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::square(x); }, 3, 4) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::scale(x, -2.5); }, 3, 4) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::add_scalar(x, 0.3); }, 3, 4) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::transpose(x); }, 3, 4) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::softmax_rows(x); }, 3, 5) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::logsumexp(x); }, 3, 5) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::logsumexp_rows(x); }, 3, 5) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::mean(x); }, 3, 5) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::mean_cols(x); }, 3, 5) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::sum_rows(x); }, 3, 5) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::max_rows(x); }, 4, 5) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::layer_norm_rows(x); }, 3, 6) < tol);
  CHECK(check_unary(
            [](ad::Tape&, Var x) {
              const Eigen::Index rows[] = {2, 0, 2};
              return ad::select_rows(x, rows);
            },
            4, 3) < tol);
  CHECK(check_unary([](ad::Tape&, Var x) { return ad::select_cols(x, 1, 2); }, 3, 4) < tol);
}

TEST_CASE("adam first step moves by lr against the gradient sign") {
  ad::ParameterSet p;
  p.add("theta", Matrix::Zero(1, 1));
  ad::AdamOptions o;
  o.weight_decay = 0.0;
  auto state = ad::AdamState::zeros_like(p, o);
  const Matrix g = Matrix::Constant(1, 1, 0.5);
  ad::adam_step(p, std::span<const Matrix>(&g, 1), state);
  CHECK(state.step == 1);
  CHECK(p["theta"](0, 0) == doctest::Approx(-0.001).epsilon(1e-6));
}

TEST_CASE("adam with zero gradient and no decay is a fixed point") {
  Rng rng(4);
  ad::ParameterSet p;
  p.add("w", random_matrix(rng, 3, 3));
  const Matrix before = p["w"];
  ad::AdamOptions o;
  o.weight_decay = 0.0;
  auto state = ad::AdamState::zeros_like(p, o);
  const Matrix g = Matrix::Zero(3, 3);
  for (int i = 0; i < 5; ++i) ad::adam_step(p, std::span<const Matrix>(&g, 1), state);
  CHECK(p["w"] == before);
  CHECK(state.step == 5);
}

TEST_CASE("adam steps are deterministic and reject bad gradients") {
  Rng rng(6);
  ad::ParameterSet a;
  a.add("w", random_matrix(rng, 2, 2));
  ad::ParameterSet b = a;
  auto sa = ad::AdamState::zeros_like(a, {});
  auto sb = ad::AdamState::zeros_like(b, {});
  const Matrix g = random_matrix(rng, 2, 2);
  ad::adam_step(a, std::span<const Matrix>(&g, 1), sa);
  ad::adam_step(b, std::span<const Matrix>(&g, 1), sb);
  CHECK(a.identical(b));

  Matrix bad = g;
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const Matrix keep = a["w"];
  CHECK_THROWS_AS(ad::adam_step(a, std::span<const Matrix>(&bad, 1), sa), NonFiniteError);
  CHECK(a["w"] == keep);
  const Matrix wrong = Matrix::Zero(3, 2);
  CHECK_THROWS_AS(ad::adam_step(a, std::span<const Matrix>(&wrong, 1), sa), ShapeError);
}

TEST_CASE("forward and backward are deterministic") {
  Rng rng(8);
  ad::ParameterSet p;
  p.add("w", random_matrix(rng, 5, 3));
  const Matrix x = random_matrix(rng, 7, 5);
  auto fn = [&](ad::Tape& t) {
    return ad::logsumexp(ad::tanh(ad::matmul(t.constant(x), t.parameter(p, "w"))));
  };
  const auto r1 = ad::value_and_grad(p, fn);
  const auto r2 = ad::value_and_grad(p, fn);
  CHECK(r1.loss == r2.loss);
  CHECK(r1.grads[0] == r2.grads[0]);
}
