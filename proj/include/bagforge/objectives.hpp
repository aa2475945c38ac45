#pragma once

// Training objectives: binary cross-entropy and the Cox negative partial
// log-likelihood (Breslow ties, risk set R(t_i) = {j : t_j >= t_i}).

#include <span>
#include <vector>

#include "bagforge/autodiff.hpp"
#include "bagforge/mil.hpp"

namespace bagforge {

struct SurvivalBatch {
  std::vector<double> log_hazards;
  std::vector<double> times;
  /// true = event observed.
  std::vector<bool> events;

  void validate() const;
  std::size_t event_count() const;
};

/// Mean BCE on logits using the softplus form.
double bce_loss_logits(std::span<const double> logits, std::span<const double> labels);
/// Mean BCE on probabilities; 0 * log(0) is taken as 0 so exact predictions give 0.
double bce_loss_probs(std::span<const double> probs, std::span<const double> labels);
/// Tape version on an n x 1 (or 1 x n) logit node.
ad::Var bce_with_logits(ad::Var logits, std::span<const double> labels);

struct CoxValue {
  double loss = 0.0;
  /// Set when the batch has no observed events; loss is then 0.
  bool no_events = false;
};

/// Event-count-normalized Cox loss computed with running logsumexp.
CoxValue cox_loss(const SurvivalBatch& batch);

struct CoxTerm {
  ad::Var loss;
  bool no_events = false;
};

CoxTerm cox_loss(ad::Var log_hazards, std::span<const double> times, const std::vector<bool>& events);

/// (1 - weight) * slide_loss + weight * instance_loss.
double composite_clam_loss(double slide_loss, double instance_loss, double weight);
ad::Var composite_clam_loss(ad::Var slide_loss, ad::Var instance_loss, double weight);

/// Mean BCE of the selected instance logits (k x 1) against pseudo-labels.
ad::Var instance_bce(ad::Var instance_logits, const InstanceTargets& targets);

}  // namespace bagforge
