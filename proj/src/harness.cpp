#include "bagforge/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <thread>

#include "bagforge/errors.hpp"
#include "bagforge/objectives.hpp"
#include "bagforge/rng.hpp"

namespace bagforge {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::uint64_t kShuffleStream = 0x53480000;
constexpr std::uint64_t kDropoutStream = 0x44520000;

std::string join(const std::vector<std::string>& v, const char* sep = ",") {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += v[i];
  }
  return out;
}

std::vector<std::string> parse_list(std::string_view text) {
  std::vector<std::string> out;
  if (trim(text).empty()) return out;
  for (const auto& p : split(text, ',')) {
    auto t = std::string(trim(p));
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

std::string opt_num(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return kNaN;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Sample standard deviation; 0 for a single value.
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

struct Prepared {
  std::vector<ad::Matrix> x;
  std::vector<double> y;
  std::vector<double> t;
  std::vector<bool> e;
  std::vector<std::string> ids;
};

void require_task_fields(const std::vector<EmbeddingBag>& bags, Task task) {
  std::vector<std::string> missing;
  for (const auto& b : bags) {
    const bool ok = task == Task::classification ? b.label.has_value() : (b.pfs_months && b.event);
    if (!ok) missing.push_back(b.slide_id);
  }
  if (!missing.empty()) {
    throw ValidationError(std::string(task == Task::classification ? "missing labels" : "missing survival fields") +
                          " for slides: " + join(missing, ", "));
  }
}

Prepared prepare(const std::vector<EmbeddingBag>& bags, Task task) {
  require_task_fields(bags, task);
  Prepared p;
  for (const auto& b : bags) {
    p.x.push_back(to_matrix(b.features));
    p.ids.push_back(b.slide_id);
    if (task == Task::classification) {
      p.y.push_back(static_cast<double>(*b.label));
    } else {
      p.t.push_back(*b.pfs_months);
      p.e.push_back(*b.event);
    }
  }
  return p;
}

struct BatchLoss {
  ad::Var loss;
  bool skip = false;
};

BatchLoss batch_loss(ad::Tape& tape, const MilModel& model, const Prepared& data, std::span<const std::size_t> idx,
                     Rng* dropout) {
  const MilConfig& cfg = model.config();
  std::vector<ad::Var> outputs;
  std::vector<ad::Var> instance_terms;
  const bool use_instance = cfg.task == Task::classification && arch_has_instance_branch(cfg.arch) &&
                            cfg.instance_loss_weight > 0.0 && cfg.instance_k > 0;
  for (std::size_t i : idx) {
    auto fwd = model.forward(tape, data.x[i], dropout);
    outputs.push_back(fwd.output);
    if (use_instance && fwd.instance_logits) {
      const int label = static_cast<int>(data.y[i]);
      const Eigen::Index row = std::min<Eigen::Index>(label, fwd.branch_attention.rows() - 1);
      const ad::RowVector a = fwd.branch_attention.row(row);
      const auto targets = clam_instance_targets(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())),
                                                 cfg.instance_k, cfg.instance_k, label);
      instance_terms.push_back(instance_bce(*fwd.instance_logits, targets));
    }
  }
  ad::Var stacked = ad::vcat(outputs);
  if (cfg.task == Task::classification) {
    std::vector<double> y;
    for (std::size_t i : idx) y.push_back(data.y[i]);
    ad::Var loss = bce_with_logits(stacked, y);
    if (!instance_terms.empty()) {
      loss = composite_clam_loss(loss, ad::mean(ad::vcat(instance_terms)), cfg.instance_loss_weight);
    }
    return {loss, false};
  }
  std::vector<double> t;
  std::vector<bool> e;
  for (std::size_t i : idx) {
    t.push_back(data.t[i]);
    e.push_back(data.e[i]);
  }
  auto cox = cox_loss(stacked, t, e);
  return {cox.loss, cox.no_events};
}

struct ValEval {
  double loss = kNaN;
  double metric = kNaN;
};

ValEval evaluate_val(const MilModel& model, const Prepared& val, StopMetric metric) {
  ValEval out;
  if (val.x.empty()) return out;
  std::vector<double> scores;
  for (const auto& x : val.x) {
    ad::Tape t;
    scores.push_back(model.forward(t, x, nullptr).output.scalar());
  }
  if (model.config().task == Task::classification) {
    out.loss = bce_loss_logits(scores, val.y);
    std::vector<int> labels(val.y.begin(), val.y.end());
    std::vector<double> probs;
    for (double z : scores) probs.push_back(1.0 / (1.0 + std::exp(-z)));
    const bool both = std::count(labels.begin(), labels.end(), 1) > 0 && std::count(labels.begin(), labels.end(), 0) > 0;
    if (metric == StopMetric::val_auc && both) out.metric = roc_auc(scores, labels);
    if (metric == StopMetric::val_accuracy) out.metric = accuracy(probs, labels);
  } else {
    SurvivalBatch b{scores, val.t, val.e};
    const auto cox = cox_loss(b);
    out.loss = cox.no_events ? kNaN : cox.loss;
    if (metric == StopMetric::val_cindex) {
      try {
        out.metric = concordance_index(scores, val.t, val.e);
      } catch (const ValidationError&) {
        out.metric = kNaN;
      }
    }
  }
  if (metric == StopMetric::val_loss) out.metric = -out.loss;
  return out;
}

double selection_of(const ValEval& v) {
  if (std::isfinite(v.metric)) return v.metric;
  if (std::isfinite(v.loss)) return -v.loss;
  return -std::numeric_limits<double>::infinity();
}

const char* kConfigKeys[] = {"task", "manifest", "split_file", "split.n_folds", "split.train_fraction",
                             "split.val_fraction", "split.test_fraction", "split.seed", "split.fixed_test", "seeds",
                             "folds", "optimizer.lr", "optimizer.weight_decay", "max_epochs", "early_stop", "subtypes",
                             "eval_subtypes", "batch_size", "report_dir", "select_on_test", "patient_level", "threads",
                             "attention_top_n"};

}  // namespace

std::string_view stop_metric_name(StopMetric m) {
  switch (m) {
    case StopMetric::val_auc:
      return "val_auc";
    case StopMetric::val_accuracy:
      return "val_accuracy";
    case StopMetric::val_cindex:
      return "val_cindex";
    case StopMetric::val_loss:
      return "val_loss";
  }
  return "?";
}

StopMetric parse_stop_metric(std::string_view name) {
  for (StopMetric m : {StopMetric::val_auc, StopMetric::val_accuracy, StopMetric::val_cindex, StopMetric::val_loss}) {
    if (stop_metric_name(m) == name) return m;
  }
  throw ValidationError("unknown early-stop metric '" + std::string(name) + "'");
}

// ---- config ---------------------------------------------------------------

StopMetric ExperimentConfig::stop_metric() const {
  if (early_stop) return *early_stop;
  return task == Task::classification ? StopMetric::val_auc : StopMetric::val_cindex;
}

int ExperimentConfig::effective_batch_size(std::size_t n_train) const {
  if (batch_size > 0) return batch_size;
  if (task == Task::classification) return 16;
  return static_cast<int>(std::max<std::size_t>(n_train, 1));
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ValidationError("config: seeds must be non-empty");
  if (max_epochs < 0) throw ValidationError("config: max_epochs must be >= 0");
  if (!(lr > 0 && std::isfinite(lr))) throw ValidationError("config: optimizer.lr must be positive");
  if (!(weight_decay >= 0 && std::isfinite(weight_decay))) throw ValidationError("config: optimizer.weight_decay must be >= 0");
  if (batch_size < 0) throw ValidationError("config: batch_size must be >= 0");
  if (attention_top_n < 0) throw ValidationError("config: attention_top_n must be >= 0");
  if (split.n_folds < 1) throw ValidationError("config: split.n_folds must be >= 1");
  for (int f : folds) {
    if (f < 0 || f >= split.n_folds) throw ValidationError("config: fold " + std::to_string(f) + " out of range");
  }
  const StopMetric m = stop_metric();
  if (task == Task::classification && m == StopMetric::val_cindex) {
    throw ValidationError("config: val_cindex requires the survival task");
  }
  if (task == Task::survival && (m == StopMetric::val_auc || m == StopMetric::val_accuracy)) {
    throw ValidationError("config: " + std::string(stop_metric_name(m)) + " requires the classification task");
  }
  if (model.task != task) throw ValidationError("config: model.task disagrees with task");
  MilConfig probe = model;
  if (probe.input_dim == 0) probe.input_dim = 1;
  probe.validate();
}

ExperimentConfig ExperimentConfig::from_doc(const KvDoc& doc, const std::filesystem::path& base_dir) {
  std::set<std::string> known(std::begin(kConfigKeys), std::end(kConfigKeys));
  {
    KvDoc probe;
    MilConfig{}.write(probe);
    for (const auto& [k, v] : probe.entries()) known.insert(k);
  }
  for (const auto& [k, v] : doc.entries()) {
    if (!known.count(k) && k.rfind("synth.", 0) != 0) throw ValidationError("config: unknown key '" + k + "'");
  }
  auto resolve = [&](const std::string& p) -> std::filesystem::path {
    if (p.empty()) return {};
    std::filesystem::path path(p);
    return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
  };

  ExperimentConfig c;
  c.task = parse_task(doc.get_string("task", "classification"));
  MilConfig model_defaults;
  model_defaults.task = c.task;
  model_defaults.input_dim = 0;
  // Reading with input_dim 0 allowed: validation happens once bags are loaded.
  {
    KvDoc m;
    for (const auto& [k, v] : doc.entries()) {
      if (k.rfind("model.", 0) == 0) m.set(k, v);
    }
    if (!m.contains("model.input_dim")) m.set("model.input_dim", 1);
    c.model = MilConfig::read(m, "model.", model_defaults);
    if (!doc.contains("model.input_dim")) c.model.input_dim = 0;
  }
  if (doc.contains("model.task") && c.model.task != c.task) throw ValidationError("config: model.task disagrees with task");
  c.model.task = c.task;
  c.manifest = resolve(doc.get_string("manifest", ""));
  c.split_file = resolve(doc.get_string("split_file", ""));
  c.split.n_folds = static_cast<int>(doc.get_int("split.n_folds", c.split.n_folds));
  c.split.train_fraction = doc.get_double("split.train_fraction", c.split.train_fraction);
  c.split.val_fraction = doc.get_double("split.val_fraction", c.split.val_fraction);
  c.split.test_fraction = doc.get_double("split.test_fraction", c.split.test_fraction);
  c.split.seed = static_cast<std::uint64_t>(doc.get_int("split.seed", static_cast<std::int64_t>(c.split.seed)));
  c.split.fixed_test = doc.get_bool("split.fixed_test", c.split.fixed_test);
  if (auto s = doc.find("seeds")) {
    c.seeds.clear();
    for (const auto& v : parse_list(*s)) c.seeds.push_back(static_cast<std::uint64_t>(parse_int(v, "seeds")));
  }
  if (auto f = doc.find("folds")) {
    for (const auto& v : parse_list(*f)) c.folds.push_back(static_cast<int>(parse_int(v, "folds")));
  }
  c.lr = doc.get_double("optimizer.lr", c.lr);
  c.weight_decay = doc.get_double("optimizer.weight_decay", c.weight_decay);
  c.max_epochs = static_cast<int>(doc.get_int("max_epochs", c.max_epochs));
  if (auto m = doc.find("early_stop"); m && !trim(*m).empty() && trim(*m) != "auto") {
    c.early_stop = parse_stop_metric(trim(*m));
  }
  if (auto s = doc.find("subtypes")) c.subtypes = parse_list(*s);
  if (auto s = doc.find("eval_subtypes"); s && trim(*s) != "inherit") c.eval_subtypes = parse_list(*s);
  c.batch_size = static_cast<int>(doc.get_int("batch_size", c.batch_size));
  c.report_dir = resolve(doc.get_string("report_dir", c.report_dir.string()));
  c.select_on_test = doc.get_bool("select_on_test", c.select_on_test);
  c.patient_level = doc.get_bool("patient_level", c.patient_level);
  c.threads = static_cast<unsigned>(std::max<std::int64_t>(1, doc.get_int("threads", c.threads)));
  c.attention_top_n = static_cast<int>(doc.get_int("attention_top_n", c.attention_top_n));
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  return from_doc(KvDoc::load(path), path.parent_path());
}

KvDoc ExperimentConfig::to_doc() const {
  KvDoc doc;
  doc.set("task", std::string(task_name(task)));
  model.write(doc);
  doc.set("manifest", manifest.generic_string());
  doc.set("split_file", split_file.generic_string());
  doc.set("split.n_folds", split.n_folds);
  doc.set("split.train_fraction", split.train_fraction);
  doc.set("split.val_fraction", split.val_fraction);
  doc.set("split.test_fraction", split.test_fraction);
  doc.set("split.seed", std::to_string(split.seed));
  doc.set("split.fixed_test", split.fixed_test);
  std::vector<std::string> s;
  for (auto v : seeds) s.push_back(std::to_string(v));
  doc.set("seeds", join(s));
  std::vector<std::string> f;
  for (auto v : folds) f.push_back(std::to_string(v));
  doc.set("folds", join(f));
  doc.set("optimizer.lr", lr);
  doc.set("optimizer.weight_decay", weight_decay);
  doc.set("max_epochs", max_epochs);
  doc.set("early_stop", std::string(stop_metric_name(stop_metric())));
  doc.set("subtypes", join(subtypes));
  doc.set("eval_subtypes", eval_subtypes ? join(*eval_subtypes) : std::string("inherit"));
  doc.set("batch_size", batch_size);
  doc.set("report_dir", report_dir.generic_string());
  doc.set("select_on_test", select_on_test);
  doc.set("patient_level", patient_level);
  doc.set("threads", static_cast<std::int64_t>(threads));
  doc.set("attention_top_n", attention_top_n);
  return doc;
}

// ---- training -------------------------------------------------------------

TrainResult train_model(const ExperimentConfig& config, const std::vector<EmbeddingBag>& train_bags,
                        const std::vector<EmbeddingBag>& val_bags, std::uint64_t seed, int fold) {
  if (train_bags.empty()) throw RunAbort("fold " + std::to_string(fold) + ": training subset is empty");
  MilConfig mc = config.model;
  mc.task = config.task;
  mc.input_dim = static_cast<int>(train_bags.front().d());
  if (config.model.input_dim != 0 && config.model.input_dim != mc.input_dim) {
    throw ValidationError("model.input_dim " + std::to_string(config.model.input_dim) + " != bag feature dim " +
                          std::to_string(mc.input_dim));
  }
  for (const auto& b : train_bags) {
    if (b.d() != mc.input_dim) throw ValidationError("bag '" + b.slide_id + "' has a different feature dimension");
  }
  mc.init_seed = seed;
  const Prepared train = prepare(train_bags, config.task);
  const Prepared val = prepare(val_bags, config.task);
  if (config.task == Task::survival && std::none_of(train.e.begin(), train.e.end(), [](bool b) { return b; })) {
    throw RunAbort("fold " + std::to_string(fold) + ": split has no events");
  }

  TrainResult result{MilModel::init(mc), {}, 0, 0.0, train_bags.front().encoder.name};
  MilModel& model = result.model;
  ad::AdamState adam = ad::AdamState::zeros_like(model.params(), ad::AdamOptions{config.lr, config.weight_decay});
  Rng shuffle_rng(Rng::derive(seed, kShuffleStream + static_cast<std::uint64_t>(fold)));
  Rng dropout_rng(Rng::derive(seed, kDropoutStream + static_cast<std::uint64_t>(fold)));
  const StopMetric metric = config.stop_metric();

  auto record_epoch = [&](int epoch, double train_loss, int skipped) {
    const ValEval v = evaluate_val(model, val, metric);
    EpochLog log{epoch, train_loss, v.loss, v.metric, selection_of(v), skipped};
    result.log.push_back(log);
    return log.selection_score;
  };

  ad::ParameterSet best = model.params();
  result.best_score = record_epoch(0, kNaN, 0);
  result.best_epoch = 0;

  const std::size_t n = train.x.size();
  const auto bs = static_cast<std::size_t>(config.effective_batch_size(n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    // Cohort-level Cox keeps one risk set, so there is nothing to shuffle.
    if (bs < n) shuffle_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    int steps = 0, skipped = 0, batch_no = 0;
    for (std::size_t start = 0; start < n; start += bs, ++batch_no) {
      const std::size_t end = std::min(n, start + bs);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      try {
        ad::Tape tape;
        auto bl = batch_loss(tape, model, train, idx, &dropout_rng);
        if (bl.skip) {
          ++skipped;
          continue;
        }
        tape.backward(bl.loss);
        const auto grads = tape.parameter_gradients(model.params());
        ad::adam_step(model.params(), grads, adam);
        loss_sum += bl.loss.scalar();
        ++steps;
      } catch (const NonFiniteError& e) {
        throw RunAbort("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no) +
                       ": " + e.what());
      }
    }
    const double score = record_epoch(epoch, steps ? loss_sum / steps : kNaN, skipped);
    if (score > result.best_score) {
      result.best_score = score;
      result.best_epoch = epoch;
      best = model.params();
    }
  }
  model.params() = best;
  return result;
}

TrainResult train_fold(const ExperimentConfig& config, const CohortManifest& manifest, const FoldSplit& split,
                       int fold, std::uint64_t seed) {
  const auto train = load_cohort(manifest, split, fold, Subset::train, config.subtypes);
  const auto val = load_cohort(manifest, split, fold, Subset::val, config.subtypes);
  return train_model(config, train, val, seed, fold);
}

// ---- evaluation -----------------------------------------------------------

EvalRecord evaluate_scores(const std::vector<EmbeddingBag>& bags, const std::vector<Prediction>& predictions,
                           Task task, bool patient_level) {
  if (bags.size() != predictions.size()) throw ValidationError("evaluate: predictions do not match bags");
  if (bags.empty()) throw ValidationError("evaluate: no bags");
  require_task_fields(bags, task);
  EvalRecord rec;
  rec.task = task;
  rec.predictions = predictions;

  // Unit of analysis: slides, or patients with averaged scores. Patient
  // clinical fields are taken from the patient's first slide.
  std::vector<double> score, prob, time;
  std::vector<int> label;
  std::vector<bool> event;
  auto push = [&](const EmbeddingBag& b, double s, double p) {
    score.push_back(s);
    prob.push_back(p);
    if (task == Task::classification) {
      label.push_back(*b.label);
    } else {
      time.push_back(*b.pfs_months);
      event.push_back(*b.event);
    }
  };
  if (!patient_level) {
    for (std::size_t i = 0; i < bags.size(); ++i) push(bags[i], predictions[i].score(), predictions[i].y_hat.value_or(kNaN));
  } else {
    std::vector<std::string> order;
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < bags.size(); ++i) {
      if (!groups.count(bags[i].patient_id)) order.push_back(bags[i].patient_id);
      groups[bags[i].patient_id].push_back(i);
    }
    for (const auto& pid : order) {
      double s = 0, p = 0;
      for (auto i : groups[pid]) {
        s += predictions[i].score();
        p += predictions[i].y_hat.value_or(kNaN);
      }
      const double m = static_cast<double>(groups[pid].size());
      push(bags[groups[pid].front()], s / m, p / m);
    }
  }
  rec.n = score.size();

  if (task == Task::classification) {
    rec.accuracy = accuracy(prob, label);
    try {
      auto roc = roc_curve(score, label);
      rec.auc = roc.auc;
      rec.roc = std::move(roc);
    } catch (const ValidationError& e) {
      rec.notices.push_back(e.what());
    }
  } else {
    try {
      rec.cindex = concordance_index(score, time, event);
    } catch (const ValidationError& e) {
      rec.notices.push_back(e.what());
    }
    try {
      rec.strat = stratify_by_median(score, time, event);
    } catch (const ValidationError& e) {
      rec.notices.push_back(e.what());
    }
  }
  return rec;
}

EvalRecord evaluate(const MilModel& model, const std::vector<EmbeddingBag>& bags, Task task, bool patient_level) {
  if (model.config().task != task) throw ValidationError("evaluate: model was built for a different task");
  require_task_fields(bags, task);
  std::vector<Prediction> preds;
  preds.reserve(bags.size());
  for (const auto& b : bags) preds.push_back(model.predict(b));
  return evaluate_scores(bags, preds, task, patient_level);
}

std::vector<Eigen::Index> top_attention(std::span<const double> weights, int top_n) {
  std::vector<Eigen::Index> idx(weights.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    return weights[static_cast<std::size_t>(a)] > weights[static_cast<std::size_t>(b)];
  });
  idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(std::max(top_n, 0))));
  return idx;
}

std::vector<AttentionRow> export_attention(const MilModel& model, const EmbeddingBag& bag, int top_n) {
  const auto pred = model.predict(bag);
  std::vector<AttentionRow> rows;
  int rank = 1;
  for (Eigen::Index i : top_attention(pred.attention, top_n)) {
    AttentionRow r;
    r.rank = rank++;
    r.patch = i;
    r.weight = pred.attention[static_cast<std::size_t>(i)];
    if (bag.patch_coords) {
      r.x = (*bag.patch_coords)(i, 0);
      r.y = (*bag.patch_coords)(i, 1);
    }
    rows.push_back(r);
  }
  return rows;
}

// ---- experiment -----------------------------------------------------------

const RunRecord* ReportBundle::find(int fold, std::uint64_t seed) const {
  for (const auto& r : runs) {
    if (r.fold == fold && r.seed == seed) return &r;
  }
  return nullptr;
}

const MetricAggregate* ReportBundle::aggregate(std::string_view metric) const {
  for (const auto& a : aggregates) {
    if (a.metric == metric) return &a;
  }
  return nullptr;
}

FoldSplit resolve_split(const ExperimentConfig& config, const CohortManifest& manifest) {
  FoldSplit split = config.split_file.empty() ? make_splits(manifest, config.split) : FoldSplit::load(config.split_file);
  check_no_leakage(manifest, split);
  return split;
}

namespace {

std::optional<double> test_metric(const RunRecord& r, std::string_view metric) {
  if (metric == "accuracy") return r.test.accuracy;
  if (metric == "auc") return r.test.auc;
  if (metric == "cindex") return r.test.cindex;
  return std::nullopt;
}

}  // namespace

ReportBundle run_experiment(const ExperimentConfig& config) {
  config.validate();
  if (config.manifest.empty()) throw ValidationError("config: manifest is required");
  const CohortManifest manifest = CohortManifest::load(config.manifest);
  manifest.validate();
  const FoldSplit split = resolve_split(config, manifest);
  if (split.n_folds != config.split.n_folds && config.split_file.empty()) {
    throw ValidationError("split fold count mismatch");
  }

  std::vector<int> folds = config.folds;
  if (folds.empty()) {
    for (int f = 0; f < split.n_folds; ++f) folds.push_back(f);
  }
  for (int f : folds) {
    if (f < 0 || f >= split.n_folds) throw ValidationError("fold " + std::to_string(f) + " out of range");
  }

  ReportBundle bundle;
  bundle.config = config;
  std::vector<std::pair<int, std::uint64_t>> jobs;
  for (int f : folds) {
    for (auto s : config.seeds) jobs.emplace_back(f, s);
  }
  bundle.runs.resize(jobs.size());

  auto run_one = [&](std::size_t j) {
    RunRecord& rec = bundle.runs[j];
    rec.fold = jobs[j].first;
    rec.seed = jobs[j].second;
    try {
      auto trained = train_fold(config, manifest, split, rec.fold, rec.seed);
      rec.best_epoch = trained.best_epoch;
      rec.val_score = trained.best_score;
      rec.encoder = trained.encoder;
      rec.log = std::move(trained.log);
      const auto test = load_cohort(manifest, split, rec.fold, Subset::test, config.test_subtypes());
      rec.test = evaluate(trained.model, test, config.task, config.patient_level);
      if (config.attention_top_n > 0) {
        for (const auto& b : test) rec.attention.emplace_back(b.slide_id, export_attention(trained.model, b, config.attention_top_n));
      }
      rec.ok = true;
    } catch (const std::exception& e) {
      rec.ok = false;
      rec.error = e.what();
    }
  };

  const unsigned n_threads = std::max(1u, std::min<unsigned>(config.threads, static_cast<unsigned>(jobs.size())));
  if (n_threads <= 1) {
    for (std::size_t j = 0; j < jobs.size(); ++j) run_one(j);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < n_threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t j = w; j < jobs.size(); j += n_threads) run_one(j);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (const auto& r : bundle.runs) bundle.partial = bundle.partial || !r.ok;

  // Seed selection: fold-mean validation score, or the task's test metric.
  const std::string primary = config.task == Task::classification ? "auc" : "cindex";
  bool have_best = false;
  double best_score = -std::numeric_limits<double>::infinity();
  for (auto s : config.seeds) {
    SeedSummary sum;
    sum.seed = s;
    std::vector<double> v;
    for (const auto& r : bundle.runs) {
      if (r.seed != s || !r.ok) continue;
      sum.folds_ok += 1;
      if (config.select_on_test) {
        if (auto m = test_metric(r, primary)) v.push_back(*m);
      } else {
        v.push_back(r.val_score);
      }
    }
    sum.selection_score = v.empty() ? kNaN : mean_of(v);
    if (!v.empty() && (!have_best || sum.selection_score > best_score)) {
      have_best = true;
      best_score = sum.selection_score;
      bundle.best_seed = s;
    }
    bundle.seeds.push_back(sum);
  }

  const std::vector<std::string> metrics =
      config.task == Task::classification ? std::vector<std::string>{"accuracy", "auc"} : std::vector<std::string>{"cindex"};
  for (const auto& metric : metrics) {
    MetricAggregate agg;
    agg.metric = metric;
    agg.best_seed = bundle.best_seed;
    std::vector<double> seed_means;
    for (auto s : config.seeds) {
      std::vector<double> v;
      for (const auto& r : bundle.runs) {
        if (r.seed != s || !r.ok) continue;
        if (auto m = test_metric(r, metric)) v.push_back(*m);
      }
      if (v.empty()) continue;
      seed_means.push_back(mean_of(v));
      if (s == bundle.best_seed) {
        agg.best_seed_mean = mean_of(v);
        agg.best_seed_std = std_of(v);
      }
    }
    if (seed_means.empty()) {
      agg.best_seed_mean = agg.best_seed_std = agg.seed_mean = agg.seed_std = kNaN;
    } else {
      agg.seed_mean = mean_of(seed_means);
      agg.seed_std = std_of(seed_means);
    }
    bundle.aggregates.push_back(agg);
  }
  return bundle;
}

// ---- report ---------------------------------------------------------------

std::string metrics_csv(const ReportBundle& bundle) {
  std::string out = "model,encoder,fold,seed,accuracy,auc,cindex\n";
  const std::string arch(arch_name(bundle.config.model.arch));
  for (const auto& r : bundle.runs) {
    if (!r.ok) continue;
    out += arch + "," + csv_cell(r.encoder) + "," + std::to_string(r.fold) + "," + std::to_string(r.seed) + "," +
           opt_num(r.test.accuracy) + "," + opt_num(r.test.auc) + "," + opt_num(r.test.cindex) + "\n";
  }
  return out;
}

std::vector<std::string> emit_plots(const ReportBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> written;
  const std::string arch(arch_name(bundle.config.model.arch));
  std::set<int> folds;
  for (const auto& r : bundle.runs) folds.insert(r.fold);
  for (int f : folds) {
    const RunRecord* r = bundle.find(f, bundle.best_seed);
    if (!r || !r->ok) continue;
    const std::string tag = arch + "_fold" + std::to_string(f);
    if (r->test.roc) {
      const std::string name = "roc_" + tag + ".csv";
      write_text(dir / name, roc_to_csv(*r->test.roc));
      written.push_back(name);
    }
    if (bundle.config.task == Task::survival) {
      if (r->test.strat) {
        const std::string name = "km_" + tag + ".csv";
        write_text(dir / name, km_to_csv(*r->test.strat));
        written.push_back(name);
      }
    }
    if (!r->attention.empty()) {
      std::string csv = "slide_id,rank,patch_index,x,y,attention\n";
      for (const auto& [slide, rows] : r->attention) {
        for (const auto& a : rows) {
          csv += csv_cell(slide) + "," + std::to_string(a.rank) + "," + std::to_string(a.patch) + "," +
                 (a.x ? std::to_string(*a.x) : "") + "," + (a.y ? std::to_string(*a.y) : "") + "," +
                 format_double(a.weight) + "\n";
        }
      }
      const std::string name = "attention_" + tag + ".csv";
      write_text(dir / name, csv);
      written.push_back(name);
    }
  }
  return written;
}

void write_report(const ReportBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "metrics.csv", metrics_csv(bundle));

  std::string runs = "fold,seed,status,best_epoch,val_score,error\n";
  std::string log = "fold,seed,epoch,train_loss,val_loss,val_metric,selection_score,skipped_steps\n";
  for (const auto& r : bundle.runs) {
    runs += std::to_string(r.fold) + "," + std::to_string(r.seed) + "," + (r.ok ? "ok" : "failed") + "," +
            (r.ok ? std::to_string(r.best_epoch) : "") + "," + (r.ok ? format_double(r.val_score) : "") + "," +
            csv_cell(r.error) + "\n";
    for (const auto& e : r.log) {
      log += std::to_string(r.fold) + "," + std::to_string(r.seed) + "," + std::to_string(e.epoch) + "," +
             format_double(e.train_loss) + "," + format_double(e.val_loss) + "," + format_double(e.val_metric) + "," +
             format_double(e.selection_score) + "," + std::to_string(e.skipped_steps) + "\n";
    }
  }
  write_text(dir / "runs.csv", runs);
  write_text(dir / "training_log.csv", log);

  std::string csv = "metric,protocol,seed,mean,std\n";
  std::string txt;
  const std::string arch(arch_name(bundle.config.model.arch));
  txt += "model: " + arch + "\n";
  txt += "task: " + std::string(task_name(bundle.config.task)) + "\n";
  txt += std::string("best seed: ") + std::to_string(bundle.best_seed) + " (selected on " +
         (bundle.config.select_on_test ? "test" : "validation") + ")\n";
  if (bundle.partial) txt += "status: partial (some runs failed, see runs.csv)\n";
  for (const auto& a : bundle.aggregates) {
    csv += a.metric + ",best_seed," + std::to_string(a.best_seed) + "," + format_double(a.best_seed_mean) + "," +
           format_double(a.best_seed_std) + "\n";
    csv += a.metric + ",seed_mean,," + format_double(a.seed_mean) + "," + format_double(a.seed_std) + "\n";
    txt += a.metric + "  best-seed " + format_fixed(a.best_seed_mean, 2) + " ± " + format_fixed(a.best_seed_std, 2) +
           "  seed-mean " + format_fixed(a.seed_mean, 2) + " ± " + format_fixed(a.seed_std, 2) + "\n";
  }
  for (const auto& s : bundle.seeds) {
    csv += "selection,seed_score," + std::to_string(s.seed) + "," + format_double(s.selection_score) + ",\n";
  }
  write_text(dir / "summary.csv", csv);
  write_text(dir / "summary.txt", txt);
  write_text(dir / "config.resolved", bundle.config.to_doc().serialize());
  emit_plots(bundle, dir);
}

}  // namespace bagforge
