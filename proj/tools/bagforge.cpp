// bagforge: training, evaluation and reporting for MIL embedding bags.
//
// Exit codes: 0 success, 1 validation error, 2 runtime abort.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "bagforge/bag.hpp"
#include "bagforge/cohort.hpp"
#include "bagforge/errors.hpp"
#include "bagforge/harness.hpp"
#include "bagforge/synthgen.hpp"

namespace fs = std::filesystem;
using namespace bagforge;

namespace {

struct Common {
  std::string config;
  std::vector<int> folds;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> subtypes;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool with_out = true) {
  cmd->add_option("--config", c.config, "experiment config (key = value)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--fold", c.folds, "fold index (repeatable)");
  cmd->add_option("--seed", c.seeds, "seed (repeatable)");
  cmd->add_option("--subtype", c.subtypes, "subtype filter (repeatable)")->delimiter(',');
  if (with_out) cmd->add_option("--out", c.out, "output path");
}

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg = ExperimentConfig::load(c.config);
  if (!c.folds.empty()) cfg.folds = c.folds;
  if (!c.seeds.empty()) cfg.seeds = c.seeds;
  if (!c.subtypes.empty()) cfg.subtypes = c.subtypes;
  cfg.validate();
  return cfg;
}

int single_fold(const ExperimentConfig& cfg) { return cfg.folds.empty() ? 0 : cfg.folds.front(); }

void write_string(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << s;
}

std::string eval_summary(const EvalRecord& r) {
  std::string out;
  if (r.accuracy) out += "accuracy = " + format_double(*r.accuracy) + "\n";
  if (r.auc) out += "auc = " + format_double(*r.auc) + "\n";
  if (r.cindex) out += "cindex = " + format_double(*r.cindex) + "\n";
  if (r.strat) {
    out += "logrank.chi_square = " + format_double(r.strat->logrank.chi_square) + "\n";
    out += "logrank.p_value = " + format_double(r.strat->logrank.p_value) + "\n";
  }
  for (const auto& n : r.notices) out += "# notice: " + n + "\n";
  return out;
}

int run_verify(const std::vector<std::string>& paths, const std::string& manifest) {
  std::vector<fs::path> files(paths.begin(), paths.end());
  if (!manifest.empty()) {
    const auto m = CohortManifest::load(manifest);
    m.validate();
    for (const auto& e : m.entries) files.push_back(m.resolve(e));
  }
  if (files.empty()) throw ValidationError("verify: nothing to check");
  int failures = 0;
  for (const auto& f : files) {
    try {
      const auto bag = read_bag(f);
      std::printf("ok %s slide=%s k=%ld d=%ld encoder=%s\n", f.string().c_str(), bag.slide_id.c_str(),
                  static_cast<long>(bag.k()), static_cast<long>(bag.d()), bag.encoder.name.c_str());
    } catch (const std::exception& e) {
      ++failures;
      std::printf("FAIL %s: %s\n", f.string().c_str(), e.what());
    }
  }
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bagforge: MIL training and evaluation on embedding bags"};
  app.require_subcommand(1);

  Common c;
  std::string model_path;
  int top_n = 5;

  auto* split_cmd = app.add_subcommand("split", "write the patient-level fold split");
  add_common(split_cmd, c);
  auto* train_cmd = app.add_subcommand("train", "train one (fold, seed) run and save the checkpoint");
  add_common(train_cmd, c);
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a fold's test subset");
  add_common(eval_cmd, c);
  eval_cmd->add_option("--model", model_path, "checkpoint (.milm)")->required()->check(CLI::ExistingFile);
  auto* report_cmd = app.add_subcommand("report", "run every (fold, seed) and write the report directory");
  add_common(report_cmd, c);
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic cohort from synth.* keys");
  synth_cmd->add_option("--config", c.config, "config with synth.* keys")->check(CLI::ExistingFile);
  synth_cmd->add_option("--out", c.out, "output directory")->required();
  std::uint64_t synth_seed = 0;
  auto* synth_seed_opt = synth_cmd->add_option("--seed", synth_seed, "generator seed");
  auto* attn_cmd = app.add_subcommand("attention", "export top-n attention patches for a fold's test slides");
  add_common(attn_cmd, c);
  attn_cmd->add_option("--model", model_path, "checkpoint (.milm)")->required()->check(CLI::ExistingFile);
  attn_cmd->add_option("--top-n", top_n, "patches per slide");
  std::vector<std::string> verify_paths;
  std::string verify_manifest;
  auto* verify_cmd = app.add_subcommand("verify", "validate MILB bag files");
  verify_cmd->add_option("paths", verify_paths, "bag files");
  verify_cmd->add_option("--manifest", verify_manifest, "check every bag listed in a manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*verify_cmd) return run_verify(verify_paths, verify_manifest);

    if (*synth_cmd) {
      KvDoc doc = c.config.empty() ? KvDoc{} : KvDoc::load(c.config);
      SynthSpec spec = SynthSpec::read(doc);
      if (*synth_seed_opt) spec.seed = synth_seed;
      const auto cohort = generate_cohort(spec, c.out);
      std::printf("wrote %zu bags, manifest %s, truth %s\n", cohort.bags.size(), cohort.manifest_path.string().c_str(),
                  cohort.truth_path.string().c_str());
      return 0;
    }

    const ExperimentConfig cfg = load_config(c);
    if (*split_cmd) {
      const auto manifest = CohortManifest::load(cfg.manifest);
      manifest.validate();
      const auto split = resolve_split(cfg, manifest);
      const fs::path out = c.out.empty() ? cfg.report_dir / "split.txt" : fs::path(c.out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      split.save(out);
      for (int f = 0; f < split.n_folds; ++f) {
        const auto& a = split.folds[static_cast<std::size_t>(f)];
        std::printf("fold %d: train %zu, val %zu, test %zu patients\n", f, a.train.size(), a.val.size(), a.test.size());
      }
      return 0;
    }

    if (*train_cmd) {
      const auto manifest = CohortManifest::load(cfg.manifest);
      manifest.validate();
      const auto split = resolve_split(cfg, manifest);
      const int fold = single_fold(cfg);
      const std::uint64_t seed = cfg.seeds.front();
      auto result = train_fold(cfg, manifest, split, fold, seed);
      const fs::path out = c.out.empty() ? cfg.report_dir : fs::path(c.out);
      fs::create_directories(out);
      const std::string tag = "fold" + std::to_string(fold) + "_seed" + std::to_string(seed);
      result.model.save(out / ("model_" + tag + ".milm"));
      std::string log = "epoch,train_loss,val_loss,val_metric,selection_score,skipped_steps\n";
      for (const auto& e : result.log) {
        log += std::to_string(e.epoch) + "," + format_double(e.train_loss) + "," + format_double(e.val_loss) + "," +
               format_double(e.val_metric) + "," + format_double(e.selection_score) + "," +
               std::to_string(e.skipped_steps) + "\n";
      }
      write_string(out / ("epochs_" + tag + ".csv"), log);
      std::printf("fold %d seed %llu: best epoch %d, %s = %s\n", fold, static_cast<unsigned long long>(seed),
                  result.best_epoch, std::string(stop_metric_name(cfg.stop_metric())).c_str(),
                  format_double(result.best_score).c_str());
      return 0;
    }

    if (*eval_cmd || *attn_cmd) {
      const auto manifest = CohortManifest::load(cfg.manifest);
      manifest.validate();
      const auto split = resolve_split(cfg, manifest);
      const int fold = single_fold(cfg);
      const auto model = MilModel::load(model_path);
      const auto bags = load_cohort(manifest, split, fold, Subset::test, cfg.test_subtypes());
      if (*eval_cmd) {
        const auto rec = evaluate(model, bags, cfg.task, cfg.patient_level);
        const std::string text = eval_summary(rec);
        std::fputs(text.c_str(), stdout);
        if (!c.out.empty()) {
          fs::create_directories(c.out);
          write_string(fs::path(c.out) / "eval.txt", text);
          if (rec.roc) write_string(fs::path(c.out) / "roc.csv", roc_to_csv(*rec.roc));
          if (rec.strat) write_string(fs::path(c.out) / "km.csv", km_to_csv(*rec.strat));
        }
        return 0;
      }
      std::string csv = "slide_id,rank,patch_index,x,y,attention\n";
      for (const auto& b : bags) {
        for (const auto& r : export_attention(model, b, top_n)) {
          csv += csv_cell(b.slide_id) + "," + std::to_string(r.rank) + "," + std::to_string(r.patch) + "," +
                 (r.x ? std::to_string(*r.x) : "") + "," + (r.y ? std::to_string(*r.y) : "") + "," +
                 format_double(r.weight) + "\n";
        }
      }
      if (c.out.empty()) {
        std::fputs(csv.c_str(), stdout);
      } else {
        write_string(c.out, csv);
      }
      return 0;
    }

    if (*report_cmd) {
      ExperimentConfig run_cfg = cfg;
      if (!c.out.empty()) run_cfg.report_dir = c.out;
      const auto bundle = run_experiment(run_cfg);
      write_report(bundle, run_cfg.report_dir);
      std::ifstream summary(run_cfg.report_dir / "summary.txt");
      std::cout << summary.rdbuf();
      for (const auto& r : bundle.runs) {
        if (!r.ok) std::fprintf(stderr, "run fold %d seed %llu failed: %s\n", r.fold,
                                static_cast<unsigned long long>(r.seed), r.error.c_str());
      }
      return bundle.partial ? 2 : 0;
    }
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const CorruptionError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "abort: %s\n", e.what());
    return 2;
  }
  return 0;
}
