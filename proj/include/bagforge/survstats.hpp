#pragma once

// Evaluation metrics: accuracy, ROC/AUC, Harrell's C-index, Kaplan-Meier,
// the two-group log-rank test and median risk stratification.

#include <limits>
#include <span>
#include <string>
#include <vector>

namespace bagforge {

/// Percentage of correct calls; p >= threshold predicts class 1.
double accuracy(std::span<const double> probs, std::span<const int> labels, double threshold = 0.5);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  /// Scores >= threshold are called positive. The first point uses +inf.
  double threshold = std::numeric_limits<double>::infinity();
};

struct RocResult {
  double auc = 0.0;
  std::vector<RocPoint> curve;
};

/// Mann-Whitney AUC with tied scores counting 1/2. Throws ValidationError
/// when only one class is present.
double roc_auc(std::span<const double> scores, std::span<const int> labels);
RocResult roc_curve(std::span<const double> scores, std::span<const int> labels);

/// Harrell's C: comparable pairs have t_i < t_j with an event at t_i.
/// Equal times are never comparable; tied risks count 1/2.
double concordance_index(std::span<const double> risks, std::span<const double> times,
                         const std::vector<bool>& events);

struct SurvivalCurve {
  /// Distinct event times, ascending.
  std::vector<double> times;
  std::vector<double> survival;
  std::vector<int> at_risk;
  std::vector<int> events;
  int n = 0;

  /// Step function value; 1 before the first event.
  double at(double t) const;
};

SurvivalCurve kaplan_meier(std::span<const double> times, const std::vector<bool>& events);

struct LogRankResult {
  double chi_square = 0.0;
  double p_value = 1.0;
  double observed_a = 0.0;
  double expected_a = 0.0;
  double observed_b = 0.0;
  double expected_b = 0.0;
  double variance = 0.0;
};

/// Upper tail of the chi-square distribution with one degree of freedom.
double chi_square_sf_1(double x);

LogRankResult logrank_test(std::span<const double> times_a, const std::vector<bool>& events_a,
                           std::span<const double> times_b, const std::vector<bool>& events_b);

struct Stratification {
  /// Threshold used for the split (the cohort median unless given explicitly).
  double median_risk = 0.0;
  std::vector<std::size_t> high;
  std::vector<std::size_t> low;
  SurvivalCurve km_high;
  SurvivalCurve km_low;
  LogRankResult logrank;
};

/// Splits at the median risk; risks equal to the median go to the low group.
/// Throws ValidationError when either group would be empty.
Stratification stratify_by_median(std::span<const double> risks, std::span<const double> times,
                                  const std::vector<bool>& events);
/// Same split rule with a caller-supplied threshold (e.g. on predicted PFS proxies).
Stratification stratify_by_threshold(std::span<const double> risks, std::span<const double> times,
                                     const std::vector<bool>& events, double threshold);

std::string roc_to_csv(const RocResult& roc);
/// Long format: group,time,survival,at_risk,events with a leading (t=0, S=1) row.
std::string km_to_csv(const Stratification& strat);

}  // namespace bagforge
