#include <doctest.h>

#include <cmath>
#include <numeric>

#include "bagforge/errors.hpp"
#include "bagforge/objectives.hpp"
#include "bagforge/rng.hpp"
#include "support/oracles.hpp"

using namespace bagforge;

namespace {

SurvivalBatch random_batch(Rng& rng, std::size_t n, bool ties) {
  SurvivalBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    b.log_hazards.push_back(rng.normal() * 2.0);
    b.times.push_back(ties ? static_cast<double>(rng.below(6)) : rng.exponential(0.1));
    b.events.push_back(rng.uniform() < 0.7);
  }
  b.events[0] = true;
  return b;
}

}  // namespace

TEST_CASE("bce examples") {
  const double p1[] = {1.0, 0.0};
  const double y1[] = {1.0, 0.0};
  CHECK(bce_loss_probs(p1, y1) == 0.0);
  const double half[] = {0.5, 0.5, 0.5};
  const double y2[] = {1.0, 0.0, 1.0};
  CHECK(bce_loss_probs(half, y2) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  const double p3[] = {0.9, 0.2};
  CHECK(bce_loss_probs(p3, y1) == doctest::Approx(0.164252).epsilon(1e-6));
  CHECK(bce_loss_probs(p3, y1) == doctest::Approx((-std::log(0.9) - std::log(0.8)) / 2).epsilon(1e-14));
  const double logits[] = {std::log(9.0), std::log(0.25)};
  CHECK(bce_loss_logits(logits, y1) == doctest::Approx(0.164252).epsilon(1e-6));
}

TEST_CASE("bce is stable for extreme logits and validates input") {
  const double z[] = {800.0, -800.0};
  const double y[] = {1.0, 0.0};
  CHECK(bce_loss_logits(z, y) == 0.0);
  const double wrong[] = {0.0, 1.0};
  CHECK(bce_loss_logits(z, wrong) == doctest::Approx(800.0));
  CHECK_THROWS_AS(bce_loss_logits(std::span<const double>{}, std::span<const double>{}), ValidationError);
  const double bad[] = {0.5, 2.0};
  CHECK_THROWS_AS(bce_loss_logits(z, bad), ValidationError);
}

TEST_CASE("bce tape gradient checks") {
  Rng rng(1);
  ad::ParameterSet p;
  ad::Matrix z(6, 1);
  for (Eigen::Index i = 0; i < 6; ++i) z(i, 0) = rng.normal() * 3;
  p.add("z", z);
  const std::vector<double> y{1, 0, 1, 1, 0, 0};
  auto fn = [&](ad::Tape& t) { return bce_with_logits(t.parameter(p, "z"), y); };
  CHECK(ad::grad_check(p, fn).max_rel_error < 1e-4);
  ad::Tape t;
  CHECK(bce_with_logits(t.parameter(p, "z"), y).scalar() ==
        doctest::Approx(bce_loss_logits(std::span<const double>(z.data(), 6), y)).epsilon(1e-14));
}

TEST_CASE("cox examples") {
  CHECK(cox_loss(SurvivalBatch{{1.7}, {3.0}, {true}}).loss == 0.0);
  const CoxValue two = cox_loss(SurvivalBatch{{0.0, 0.0}, {1.0, 2.0}, {true, true}});
  CHECK(two.loss == doctest::Approx(std::log(2.0) / 2).epsilon(1e-15));
  CHECK(two.loss == doctest::Approx(0.346574).epsilon(1e-6));
  const CoxValue none = cox_loss(SurvivalBatch{{0.3, -1.0}, {1.0, 2.0}, {false, false}});
  CHECK(none.loss == 0.0);
  CHECK(none.no_events);
  CHECK_FALSE(two.no_events);
  CHECK_THROWS_AS(cox_loss(SurvivalBatch{{0.0}, {1.0, 2.0}, {true}}), ValidationError);
}

TEST_CASE("cox matches the literal risk-set evaluation") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const SurvivalBatch b = random_batch(rng, 1 + rng.below(64), trial % 2 == 0);
    CHECK(std::abs(cox_loss(b).loss - oracle::cox_literal(b.log_hazards, b.times, b.events)) < 1e-10);
  }
}

TEST_CASE("cox is shift invariant and order independent") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    SurvivalBatch b = random_batch(rng, 2 + rng.below(40), trial % 3 == 0);
    const double base = cox_loss(b).loss;
    SurvivalBatch shifted = b;
    const double c = rng.uniform(-20, 20);
    for (auto& h : shifted.log_hazards) h += c;
    CHECK(std::abs(cox_loss(shifted).loss - base) < 1e-10);

    std::vector<std::size_t> perm(b.times.size());
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<std::size_t>(perm));
    SurvivalBatch shuffled;
    for (auto i : perm) {
      shuffled.log_hazards.push_back(b.log_hazards[i]);
      shuffled.times.push_back(b.times[i]);
      shuffled.events.push_back(b.events[i]);
    }
    CHECK(std::abs(cox_loss(shuffled).loss - base) < 1e-10);
  }
}

TEST_CASE("cox tape version agrees and passes grad_check over 16 samples") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const SurvivalBatch b = random_batch(rng, 16, trial % 2 == 1);
    ad::ParameterSet p;
    p.add("eta", Eigen::Map<const ad::Matrix>(b.log_hazards.data(), 16, 1));
    auto fn = [&](ad::Tape& t) { return cox_loss(t.parameter(p, "eta"), b.times, b.events).loss; };
    CHECK(ad::grad_check(p, fn).max_rel_error < 1e-4);
    ad::Tape t;
    CHECK(std::abs(fn(t).scalar() - cox_loss(b).loss) < 1e-12);
  }
  ad::Tape t;
  const std::vector<bool> censored{false, false};
  const std::vector<double> times{1.0, 2.0};
  const CoxTerm term = cox_loss(t.constant(ad::Matrix::Zero(2, 1)), times, censored);
  CHECK(term.no_events);
  CHECK(term.loss.scalar() == 0.0);
}

TEST_CASE("composite clam loss") {
  CHECK(composite_clam_loss(1.0, 0.5, 0.3) == doctest::Approx(0.85).epsilon(1e-15));
  CHECK(composite_clam_loss(0.123, 9.0, 0.0) == 0.123);
  CHECK(composite_clam_loss(0.123, 9.0, 1.0) == 9.0);
  CHECK_THROWS_AS(composite_clam_loss(1.0, 1.0, 1.5), ValidationError);

  Rng rng(5);
  ad::ParameterSet p;
  ad::Matrix logits(5, 1);
  for (Eigen::Index i = 0; i < 5; ++i) logits(i, 0) = rng.normal();
  p.add("inst", logits);
  const double att[] = {0.4, 0.1, 0.3, 0.15, 0.05};
  const InstanceTargets targets = clam_instance_targets(att, 2, 2, 1);
  ad::Tape t;
  const ad::Var inst = instance_bce(t.parameter(p, "inst"), targets);
  std::vector<double> sel, lab;
  for (std::size_t i = 0; i < targets.indices.size(); ++i) {
    sel.push_back(logits(targets.indices[i], 0));
    lab.push_back(targets.targets[i]);
  }
  CHECK(inst.scalar() == doctest::Approx(bce_loss_logits(sel, lab)).epsilon(1e-14));
  const ad::Var slide = t.constant(ad::Matrix::Constant(1, 1, 0.7));
  CHECK(composite_clam_loss(slide, inst, 1.0).scalar() == inst.scalar());
  CHECK(composite_clam_loss(slide, inst, 0.0).scalar() == 0.7);
}
