#include "bagforge/survstats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bagforge/errors.hpp"
#include "bagforge/kvdoc.hpp"

namespace bagforge {

namespace {

void check_binary(std::span<const double> scores, std::span<const int> labels, const char* what) {
  if (scores.empty()) throw ValidationError(std::string(what) + ": empty input");
  if (scores.size() != labels.size()) throw ValidationError(std::string(what) + ": lengths differ");
  for (int y : labels) {
    if (y != 0 && y != 1) throw ValidationError(std::string(what) + ": labels must be 0 or 1");
  }
  for (double s : scores) {
    if (std::isnan(s)) throw ValidationError(std::string(what) + ": NaN score");
  }
}

void check_survival(std::size_t n, std::span<const double> times, const std::vector<bool>& events, const char* what) {
  if (times.size() != n || events.size() != n) throw ValidationError(std::string(what) + ": lengths differ");
  for (double t : times) {
    if (!std::isfinite(t) || t < 0) throw ValidationError(std::string(what) + ": times must be finite and >= 0");
  }
}

}  // namespace

double accuracy(std::span<const double> probs, std::span<const int> labels, double threshold) {
  check_binary(probs, labels, "accuracy");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const int call = probs[i] >= threshold ? 1 : 0;
    hit += call == labels[i] ? 1 : 0;
  }
  return 100.0 * static_cast<double>(hit) / static_cast<double>(probs.size());
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_binary(scores, labels, "roc_auc");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks over tie groups.
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t g = 0; g < n;) {
    std::size_t end = g;
    while (end < n && scores[order[end]] == scores[order[g]]) ++end;
    const double mid = (static_cast<double>(g + 1) + static_cast<double>(end)) / 2.0;
    for (std::size_t i = g; i < end; ++i) {
      if (labels[order[i]] == 1) {
        rank_sum += mid;
        ++n_pos;
      }
    }
    g = end;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("roc_auc: AUC undefined with a single class");
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

RocResult roc_curve(std::span<const double> scores, std::span<const int> labels) {
  RocResult out;
  out.auc = roc_auc(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double n_pos = 0, n_neg = 0;
  for (int y : labels) (y == 1 ? n_pos : n_neg) += 1;
  out.curve.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  double tp = 0, fp = 0;
  for (std::size_t g = 0; g < n;) {
    std::size_t end = g;
    while (end < n && scores[order[end]] == scores[order[g]]) ++end;
    for (std::size_t i = g; i < end; ++i) (labels[order[i]] == 1 ? tp : fp) += 1;
    out.curve.push_back({fp / n_neg, tp / n_pos, scores[order[g]]});
    g = end;
  }
  return out;
}

double concordance_index(std::span<const double> risks, std::span<const double> times,
                         const std::vector<bool>& events) {
  if (risks.empty()) throw ValidationError("concordance_index: empty input");
  check_survival(risks.size(), times, events, "concordance_index");
  double concordant = 0.0;
  std::size_t comparable = 0;
  const std::size_t n = risks.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (!events[i]) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (!(times[i] < times[j])) continue;
      ++comparable;
      if (risks[i] > risks[j]) {
        concordant += 1.0;
      } else if (risks[i] == risks[j]) {
        concordant += 0.5;
      }
    }
  }
  if (comparable == 0) throw ValidationError("concordance_index: c-index undefined (no comparable pairs)");
  return concordant / static_cast<double>(comparable);
}

double SurvivalCurve::at(double t) const {
  double s = 1.0;
  for (std::size_t i = 0; i < times.size() && times[i] <= t; ++i) s = survival[i];
  return s;
}

SurvivalCurve kaplan_meier(std::span<const double> times, const std::vector<bool>& events) {
  if (times.empty()) throw ValidationError("kaplan_meier: empty input");
  check_survival(times.size(), times, events, "kaplan_meier");
  const std::size_t n = times.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });
  SurvivalCurve out;
  out.n = static_cast<int>(n);
  double s = 1.0;
  std::size_t at_risk = n;
  for (std::size_t g = 0; g < n;) {
    std::size_t end = g;
    int d = 0;
    while (end < n && times[order[end]] == times[order[g]]) {
      d += events[order[end]] ? 1 : 0;
      ++end;
    }
    if (d > 0) {
      s *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
      out.times.push_back(times[order[g]]);
      out.survival.push_back(s);
      out.at_risk.push_back(static_cast<int>(at_risk));
      out.events.push_back(d);
    }
    at_risk -= end - g;
    g = end;
  }
  return out;
}

double chi_square_sf_1(double x) {
  if (x <= 0) return 1.0;
  return std::erfc(std::sqrt(x / 2.0));
}

LogRankResult logrank_test(std::span<const double> times_a, const std::vector<bool>& events_a,
                           std::span<const double> times_b, const std::vector<bool>& events_b) {
  if (times_a.empty() || times_b.empty()) throw ValidationError("logrank_test: both groups must be non-empty");
  check_survival(times_a.size(), times_a, events_a, "logrank_test");
  check_survival(times_b.size(), times_b, events_b, "logrank_test");
  struct Obs {
    double t;
    bool event;
    bool in_a;
  };
  std::vector<Obs> all;
  for (std::size_t i = 0; i < times_a.size(); ++i) all.push_back({times_a[i], events_a[i], true});
  for (std::size_t i = 0; i < times_b.size(); ++i) all.push_back({times_b[i], events_b[i], false});
  std::stable_sort(all.begin(), all.end(), [](const Obs& x, const Obs& y) { return x.t < y.t; });

  LogRankResult out;
  double n_a = static_cast<double>(times_a.size());
  double n_b = static_cast<double>(times_b.size());
  for (std::size_t g = 0; g < all.size();) {
    std::size_t end = g;
    double d_a = 0, d_b = 0, c_a = 0, c_b = 0;
    while (end < all.size() && all[end].t == all[g].t) {
      const Obs& o = all[end];
      if (o.event) {
        (o.in_a ? d_a : d_b) += 1;
      } else {
        (o.in_a ? c_a : c_b) += 1;
      }
      ++end;
    }
    const double d = d_a + d_b;
    const double n = n_a + n_b;
    if (d > 0) {
      out.observed_a += d_a;
      out.observed_b += d_b;
      out.expected_a += d * n_a / n;
      out.expected_b += d * n_b / n;
      if (n > 1) out.variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1);
    }
    n_a -= d_a + c_a;
    n_b -= d_b + c_b;
    g = end;
  }
  if (out.variance <= 0) {
    out.chi_square = 0.0;
    out.p_value = 1.0;
    return out;
  }
  const double diff = out.observed_a - out.expected_a;
  out.chi_square = diff * diff / out.variance;
  out.p_value = chi_square_sf_1(out.chi_square);
  return out;
}

Stratification stratify_by_threshold(std::span<const double> risks, std::span<const double> times,
                                     const std::vector<bool>& events, double threshold) {
  if (risks.size() < 4) throw ValidationError("stratify: need at least 4 subjects");
  check_survival(risks.size(), times, events, "stratify");
  Stratification out;
  out.median_risk = threshold;
  for (std::size_t i = 0; i < risks.size(); ++i) (risks[i] > threshold ? out.high : out.low).push_back(i);
  if (out.high.empty() || out.low.empty()) {
    throw ValidationError("stratify: degenerate stratification (risk scores do not separate)");
  }
  auto pick = [&](const std::vector<std::size_t>& idx, std::vector<double>& t, std::vector<bool>& e) {
    for (auto i : idx) {
      t.push_back(times[i]);
      e.push_back(events[i]);
    }
  };
  std::vector<double> t_hi, t_lo;
  std::vector<bool> e_hi, e_lo;
  pick(out.high, t_hi, e_hi);
  pick(out.low, t_lo, e_lo);
  out.km_high = kaplan_meier(t_hi, e_hi);
  out.km_low = kaplan_meier(t_lo, e_lo);
  out.logrank = logrank_test(t_hi, e_hi, t_lo, e_lo);
  return out;
}

Stratification stratify_by_median(std::span<const double> risks, std::span<const double> times,
                                  const std::vector<bool>& events) {
  if (risks.size() < 4) throw ValidationError("stratify: need at least 4 subjects");
  std::vector<double> sorted(risks.begin(), risks.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  return stratify_by_threshold(risks, times, events, median);
}

std::string roc_to_csv(const RocResult& roc) {
  std::string out = "fpr,tpr,threshold\n";
  for (const auto& p : roc.curve) {
    out += format_double(p.fpr) + "," + format_double(p.tpr) + "," + format_double(p.threshold) + "\n";
  }
  return out;
}

std::string km_to_csv(const Stratification& strat) {
  std::string out = "# logrank chi_square=" + format_double(strat.logrank.chi_square) +
                    " p_value=" + format_double(strat.logrank.p_value) + "\n";
  out += "# median_risk=" + format_double(strat.median_risk) + "\n";
  out += "group,time,survival,at_risk,events\n";
  auto emit = [&](const char* group, const SurvivalCurve& c) {
    out += std::string(group) + ",0,1," + std::to_string(c.n) + ",0\n";
    for (std::size_t i = 0; i < c.times.size(); ++i) {
      out += std::string(group) + "," + format_double(c.times[i]) + "," + format_double(c.survival[i]) + "," +
             std::to_string(c.at_risk[i]) + "," + std::to_string(c.events[i]) + "\n";
    }
  };
  emit("high", strat.km_high);
  emit("low", strat.km_low);
  return out;
}

}  // namespace bagforge
