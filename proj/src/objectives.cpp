#include "bagforge/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "bagforge/errors.hpp"

namespace bagforge {

namespace {

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

void check_labels(std::span<const double> labels) {
  for (double y : labels) {
    if (y != 0.0 && y != 1.0) throw ValidationError("labels must be 0 or 1");
  }
}

// Log of a running sum of exponentials.
struct RunningLse {
  double max = -std::numeric_limits<double>::infinity();
  double scaled = 0.0;

  void add(double x) {
    if (x <= max) {
      scaled += std::exp(x - max);
    } else {
      scaled = scaled * std::exp(max - x) + 1.0;
      max = x;
    }
  }
  double value() const { return max + std::log(scaled); }
};

struct CoxPieces {
  double loss = 0.0;
  std::size_t events = 0;
  std::vector<double> grad;
};

// Breslow: subjects with equal times share one risk set. Both the loss and
// the gradient dL/d eta_j = (sum_{i event, t_i <= t_j} exp(eta_j - LSE_i) - e_j) / E
// are accumulated in log space.
CoxPieces cox_pieces(std::span<const double> eta, std::span<const double> times, const std::vector<bool>& events,
                     bool want_grad) {
  const std::size_t n = eta.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });

  CoxPieces out;
  std::vector<double> lse_at(n, 0.0);  // LSE of the risk set at each subject's time
  RunningLse risk;
  double sum = 0.0;
  for (std::size_t g = 0; g < n;) {
    std::size_t end = g;
    while (end < n && times[order[end]] == times[order[g]]) ++end;
    for (std::size_t i = g; i < end; ++i) risk.add(eta[order[i]]);
    const double lse = risk.value();
    for (std::size_t i = g; i < end; ++i) {
      const std::size_t s = order[i];
      lse_at[s] = lse;
      if (events[s]) {
        sum += eta[s] - lse;
        out.events += 1;
      }
    }
    g = end;
  }
  if (out.events == 0) return out;
  const double e = static_cast<double>(out.events);
  out.loss = -sum / e;
  if (!want_grad) return out;

  out.grad.assign(n, 0.0);
  RunningLse acc;  // log sum over events with t_i <= t of exp(-LSE_i)
  for (std::size_t g = n; g > 0;) {
    std::size_t begin = g;
    while (begin > 0 && times[order[begin - 1]] == times[order[g - 1]]) --begin;
    for (std::size_t i = begin; i < g; ++i) {
      const std::size_t s = order[i];
      if (events[s]) acc.add(-lse_at[s]);
    }
    for (std::size_t i = begin; i < g; ++i) {
      const std::size_t s = order[i];
      const double share = acc.scaled > 0.0 ? std::exp(eta[s] + acc.value()) : 0.0;
      out.grad[s] = (share - (events[s] ? 1.0 : 0.0)) / e;
    }
    g = begin;
  }
  return out;
}

}  // namespace

void SurvivalBatch::validate() const {
  if (log_hazards.empty()) throw ValidationError("survival batch is empty");
  if (times.size() != log_hazards.size() || events.size() != log_hazards.size()) {
    throw ValidationError("survival batch fields have unequal lengths");
  }
  for (double t : times) {
    if (!std::isfinite(t) || t < 0) throw ValidationError("survival times must be finite and >= 0");
  }
  for (double h : log_hazards) {
    if (!std::isfinite(h)) throw ValidationError("log-hazards must be finite");
  }
}

std::size_t SurvivalBatch::event_count() const {
  return static_cast<std::size_t>(std::count(events.begin(), events.end(), true));
}

double bce_loss_logits(std::span<const double> logits, std::span<const double> labels) {
  if (logits.empty()) throw ValidationError("bce_loss: empty batch");
  if (logits.size() != labels.size()) throw ValidationError("bce_loss: lengths differ");
  check_labels(labels);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) total += softplus(logits[i]) - labels[i] * logits[i];
  return total / static_cast<double>(logits.size());
}

double bce_loss_probs(std::span<const double> probs, std::span<const double> labels) {
  if (probs.empty()) throw ValidationError("bce_loss: empty batch");
  if (probs.size() != labels.size()) throw ValidationError("bce_loss: lengths differ");
  check_labels(labels);
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("bce_loss: probabilities must lie in [0, 1]");
    const double y = labels[i];
    if (y == 1.0) total -= p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
    if (y == 0.0) total -= p < 1.0 ? std::log1p(-p) : -std::numeric_limits<double>::infinity();
  }
  return total / static_cast<double>(probs.size());
}

ad::Var bce_with_logits(ad::Var logits, std::span<const double> labels) {
  const auto& z = logits.value();
  if (z.size() == 0) throw ValidationError("bce_loss: empty batch");
  if (z.rows() != 1 && z.cols() != 1) throw ShapeError("bce_loss: logits must be a vector");
  if (static_cast<std::size_t>(z.size()) != labels.size()) throw ValidationError("bce_loss: lengths differ");
  check_labels(labels);
  std::vector<double> y(labels.begin(), labels.end());
  const double loss = bce_loss_logits(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())), y);
  return logits.tape->record(ad::Matrix::Constant(1, 1, loss), {logits.id},
                             [y = std::move(y)](ad::Tape& t, std::int32_t self) {
                               const auto p = t.parent(self, 0);
                               const ad::Matrix& z = t.value(p);
                               const double g = t.upstream(self)(0, 0) / static_cast<double>(z.size());
                               ad::Matrix& gz = t.grad_ref(p);
                               for (Eigen::Index i = 0; i < z.size(); ++i) {
                                 gz.data()[i] += g * (sigmoid(z.data()[i]) - y[static_cast<std::size_t>(i)]);
                               }
                             },
                             "bce_with_logits");
}

CoxValue cox_loss(const SurvivalBatch& batch) {
  batch.validate();
  const auto pieces = cox_pieces(batch.log_hazards, batch.times, batch.events, false);
  return {pieces.loss, pieces.events == 0};
}

CoxTerm cox_loss(ad::Var log_hazards, std::span<const double> times, const std::vector<bool>& events) {
  const auto& eta = log_hazards.value();
  if (eta.rows() != 1 && eta.cols() != 1) throw ShapeError("cox_loss: log-hazards must be a vector");
  SurvivalBatch batch;
  batch.log_hazards.assign(eta.data(), eta.data() + eta.size());
  batch.times.assign(times.begin(), times.end());
  batch.events = events;
  batch.validate();
  auto pieces = cox_pieces(batch.log_hazards, batch.times, batch.events, true);
  const bool none = pieces.events == 0;
  ad::Var loss = log_hazards.tape->record(
      ad::Matrix::Constant(1, 1, pieces.loss), {log_hazards.id},
      [grad = std::move(pieces.grad)](ad::Tape& t, std::int32_t self) {
        if (grad.empty()) return;
        const auto p = t.parent(self, 0);
        const double g = t.upstream(self)(0, 0);
        ad::Matrix& ge = t.grad_ref(p);
        for (std::size_t i = 0; i < grad.size(); ++i) ge.data()[i] += g * grad[i];
      },
      "cox_loss");
  return {loss, none};
}

double composite_clam_loss(double slide_loss, double instance_loss, double weight) {
  if (!(weight >= 0.0 && weight <= 1.0)) throw ValidationError("instance-loss weight must be in [0, 1]");
  if (weight == 0.0) return slide_loss;
  if (weight == 1.0) return instance_loss;
  return (1.0 - weight) * slide_loss + weight * instance_loss;
}

ad::Var composite_clam_loss(ad::Var slide_loss, ad::Var instance_loss, double weight) {
  if (!(weight >= 0.0 && weight <= 1.0)) throw ValidationError("instance-loss weight must be in [0, 1]");
  if (weight == 0.0) return slide_loss;
  if (weight == 1.0) return instance_loss;
  return ad::add(ad::scale(slide_loss, 1.0 - weight), ad::scale(instance_loss, weight));
}

ad::Var instance_bce(ad::Var instance_logits, const InstanceTargets& targets) {
  if (targets.indices.empty()) throw ValidationError("instance_bce: no pseudo-labeled patches");
  ad::Var picked = ad::select_rows(instance_logits, targets.indices);
  return bce_with_logits(picked, targets.targets);
}

}  // namespace bagforge
