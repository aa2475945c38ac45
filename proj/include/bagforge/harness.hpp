#pragma once

// Experiment orchestration: cross-validated training with best-validation
// checkpointing, held-out evaluation, aggregation over seeds and report export.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bagforge/autodiff.hpp"
#include "bagforge/cohort.hpp"
#include "bagforge/kvdoc.hpp"
#include "bagforge/mil.hpp"
#include "bagforge/survstats.hpp"

namespace bagforge {

enum class StopMetric { val_auc, val_accuracy, val_cindex, val_loss };

std::string_view stop_metric_name(StopMetric m);
StopMetric parse_stop_metric(std::string_view name);

struct ExperimentConfig {
  Task task = Task::classification;
  /// model.input_dim = 0 takes the dimension from the bags.
  MilConfig model;
  std::filesystem::path manifest;
  /// Optional saved split; generated from `split` when empty.
  std::filesystem::path split_file;
  SplitOptions split;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  /// Folds to run; empty runs all.
  std::vector<int> folds;
  double lr = 1e-3;
  double weight_decay = 1e-2;
  int max_epochs = 50;
  /// Unset: val_auc (classification) or val_cindex (survival).
  std::optional<StopMetric> early_stop;
  /// Slides kept for training and validation (by subtype tag).
  std::vector<std::string> subtypes;
  /// Slides kept for test evaluation; unset follows `subtypes`.
  std::optional<std::vector<std::string>> eval_subtypes;
  /// 0 = task default (16 for classification, full cohort for survival).
  int batch_size = 0;
  std::filesystem::path report_dir = "report";
  /// Select the best seed on test metrics instead of validation.
  bool select_on_test = false;
  /// Average slide scores per patient before computing test metrics.
  bool patient_level = false;
  unsigned threads = 1;
  int attention_top_n = 5;

  StopMetric stop_metric() const;
  int effective_batch_size(std::size_t n_train) const;
  const std::vector<std::string>& test_subtypes() const { return eval_subtypes ? *eval_subtypes : subtypes; }
  void validate() const;

  /// Relative paths resolve against `base_dir`.
  static ExperimentConfig from_doc(const KvDoc& doc, const std::filesystem::path& base_dir = {});
  static ExperimentConfig load(const std::filesystem::path& path);
  /// Every field, defaults included; from_doc(to_doc()) reproduces the config.
  KvDoc to_doc() const;
};

struct EpochLog {
  int epoch = 0;
  /// Mean training loss over steps; NaN for the initial (epoch 0) row.
  double train_loss = 0.0;
  double val_loss = 0.0;
  /// Early-stop metric; NaN when undefined and the fallback (-val_loss) applies.
  double val_metric = 0.0;
  double selection_score = 0.0;
  int skipped_steps = 0;
};

struct TrainResult {
  MilModel model;
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_score = 0.0;
  std::string encoder;
};

struct EvalRecord {
  Task task = Task::classification;
  std::size_t n = 0;
  std::optional<double> accuracy;
  std::optional<double> auc;
  std::optional<RocResult> roc;
  std::optional<double> cindex;
  std::optional<Stratification> strat;
  std::vector<Prediction> predictions;
  std::vector<std::string> notices;
};

/// Loads the fold's train/val bags and trains with best-validation
/// checkpointing (ties go to the earliest epoch; epoch 0 is the initial model).
TrainResult train_fold(const ExperimentConfig& config, const CohortManifest& manifest, const FoldSplit& split,
                       int fold, std::uint64_t seed);

/// Same, on preloaded bags.
TrainResult train_model(const ExperimentConfig& config, const std::vector<EmbeddingBag>& train,
                        const std::vector<EmbeddingBag>& val, std::uint64_t seed, int fold = 0);

/// Test metrics. Throws ValidationError listing slides without the fields
/// the task needs.
EvalRecord evaluate(const MilModel& model, const std::vector<EmbeddingBag>& bags, Task task,
                    bool patient_level = false);
/// Metrics from precomputed scores (probabilities or log-hazards).
EvalRecord evaluate_scores(const std::vector<EmbeddingBag>& bags, const std::vector<Prediction>& predictions,
                           Task task, bool patient_level = false);

struct AttentionRow {
  int rank = 0;
  Eigen::Index patch = 0;
  std::optional<std::int32_t> x;
  std::optional<std::int32_t> y;
  double weight = 0.0;
};

/// Top-n indices by descending weight, ties by ascending index.
std::vector<Eigen::Index> top_attention(std::span<const double> weights, int top_n);
std::vector<AttentionRow> export_attention(const MilModel& model, const EmbeddingBag& bag, int top_n = 5);

struct RunRecord {
  int fold = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  int best_epoch = 0;
  double val_score = 0.0;
  std::string encoder;
  EvalRecord test;
  std::vector<EpochLog> log;
  std::vector<std::pair<std::string, std::vector<AttentionRow>>> attention;
};

struct MetricAggregate {
  std::string metric;
  std::uint64_t best_seed = 0;
  double best_seed_mean = 0.0;
  double best_seed_std = 0.0;
  /// Mean and standard deviation across seeds of the per-seed fold means.
  double seed_mean = 0.0;
  double seed_std = 0.0;
};

struct SeedSummary {
  std::uint64_t seed = 0;
  /// Fold mean of the score used for best-seed selection.
  double selection_score = 0.0;
  int folds_ok = 0;
};

struct ReportBundle {
  ExperimentConfig config;
  std::vector<RunRecord> runs;
  bool partial = false;
  std::vector<SeedSummary> seeds;
  std::uint64_t best_seed = 0;
  std::vector<MetricAggregate> aggregates;

  const RunRecord* find(int fold, std::uint64_t seed) const;
  const MetricAggregate* aggregate(std::string_view metric) const;
};

/// Runs every (fold, seed) pair and aggregates. The leak guard runs first.
ReportBundle run_experiment(const ExperimentConfig& config);

/// Writes metrics.csv, runs.csv, training_log.csv, summary.csv,
/// summary.txt, config.resolved and the plot-data files into `dir`.
void write_report(const ReportBundle& bundle, const std::filesystem::path& dir);

/// Plot-data CSVs (ROC, KM, attention) for the best seed of each fold.
/// Returns the file names written.
std::vector<std::string> emit_plots(const ReportBundle& bundle, const std::filesystem::path& dir);

/// metrics.csv content.
std::string metrics_csv(const ReportBundle& bundle);

/// Split from the config: loaded from split_file or generated.
FoldSplit resolve_split(const ExperimentConfig& config, const CohortManifest& manifest);

}  // namespace bagforge
