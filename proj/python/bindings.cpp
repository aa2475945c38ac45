#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "bagforge/bag.hpp"
#include "bagforge/cohort.hpp"
#include "bagforge/errors.hpp"
#include "bagforge/harness.hpp"
#include "bagforge/mil.hpp"
#include "bagforge/objectives.hpp"
#include "bagforge/stainnorm.hpp"
#include "bagforge/survstats.hpp"
#include "bagforge/synthgen.hpp"

namespace py = pybind11;
using namespace bagforge;

namespace {

using RgbArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

RgbPatch patch_from_array(const RgbArray& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw ValidationError("expected an H x W x 3 uint8 array");
  RgbPatch p(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::memcpy(p.pixels.data(), a.data(), p.pixels.size());
  return p;
}

RgbArray patch_to_array(const RgbPatch& p) {
  RgbArray a({static_cast<py::ssize_t>(p.height), static_cast<py::ssize_t>(p.width), py::ssize_t{3}});
  std::memcpy(a.mutable_data(), p.pixels.data(), p.pixels.size());
  return a;
}

KvDoc doc_from_dict(const py::dict& d) {
  KvDoc doc;
  for (auto [k, v] : d) {
    if (py::isinstance<py::bool_>(v)) {
      doc.set(py::str(k), v.cast<bool>());
    } else if (py::isinstance<py::list>(v) || py::isinstance<py::tuple>(v)) {
      std::string joined;
      for (auto item : v) {
        if (!joined.empty()) joined += ",";
        joined += py::str(item).cast<std::string>();
      }
      doc.set(py::str(k), joined);
    } else {
      doc.set(py::str(k), py::str(v).cast<std::string>());
    }
  }
  return doc;
}

py::dict eval_to_dict(const EvalRecord& r) {
  py::dict d;
  d["task"] = std::string(task_name(r.task));
  d["n"] = r.n;
  d["accuracy"] = r.accuracy;
  d["auc"] = r.auc;
  d["cindex"] = r.cindex;
  if (r.strat) {
    d["logrank_p"] = r.strat->logrank.p_value;
    d["logrank_chi_square"] = r.strat->logrank.chi_square;
  } else {
    d["logrank_p"] = py::none();
    d["logrank_chi_square"] = py::none();
  }
  d["notices"] = r.notices;
  py::list preds;
  for (const auto& p : r.predictions) preds.append(py::make_tuple(p.slide_id, p.score()));
  d["predictions"] = preds;
  return d;
}

}  // namespace

PYBIND11_MODULE(_bagforge, m) {
  m.doc() = "MIL training and evaluation on embedding bags";

  auto base = py::register_exception<Error>(m, "BagforgeError", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<CorruptionError>(m, "CorruptionError", base.ptr());
  py::register_exception<RunAbort>(m, "RunAbort", base.ptr());

  // ---- bags and cohorts ----------------------------------------------------

  py::class_<EmbeddingBag>(m, "EmbeddingBag")
      .def(py::init<>())
      .def_readwrite("slide_id", &EmbeddingBag::slide_id)
      .def_readwrite("patient_id", &EmbeddingBag::patient_id)
      .def_readwrite("features", &EmbeddingBag::features)
      .def_readwrite("label", &EmbeddingBag::label)
      .def_readwrite("pfs_months", &EmbeddingBag::pfs_months)
      .def_readwrite("event", &EmbeddingBag::event)
      .def_readwrite("subtype", &EmbeddingBag::subtype)
      .def_property(
          "encoder_name", [](const EmbeddingBag& b) { return b.encoder.name; },
          [](EmbeddingBag& b, std::string n) { b.encoder.name = std::move(n); })
      .def_property(
          "encoder_dim", [](const EmbeddingBag& b) { return b.encoder.dim; },
          [](EmbeddingBag& b, std::int64_t d) { b.encoder.dim = d; })
      .def_readwrite("patch_coords", &EmbeddingBag::patch_coords)
      .def_property_readonly("k", &EmbeddingBag::k)
      .def_property_readonly("d", &EmbeddingBag::d)
      .def("validate", &EmbeddingBag::validate)
      .def("__eq__", [](const EmbeddingBag& a, const EmbeddingBag& b) { return bags_equal(a, b); });

  m.def("read_bag", &read_bag, py::arg("path"));
  m.def("write_bag", &write_bag, py::arg("bag"), py::arg("path"));
  m.def("encode_bag", [](const EmbeddingBag& b) {
    const auto bytes = encode_bag(b);
    return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  });
  m.def("decode_bag", [](const py::bytes& data) {
    const std::string s = data;
    return decode_bag(std::vector<std::uint8_t>(s.begin(), s.end()));
  });

  py::class_<CohortManifest>(m, "CohortManifest")
      .def_static("load", &CohortManifest::load, py::arg("path"))
      .def_readonly("cohort_id", &CohortManifest::cohort_id)
      .def("patients", &CohortManifest::patients)
      .def("to_csv", &CohortManifest::to_csv)
      .def("__len__", [](const CohortManifest& c) { return c.entries.size(); })
      .def("slide_ids", [](const CohortManifest& c) {
        std::vector<std::string> ids;
        for (const auto& e : c.entries) ids.push_back(e.slide_id);
        return ids;
      });

  py::class_<FoldSplit>(m, "FoldSplit")
      .def_readonly("n_folds", &FoldSplit::n_folds)
      .def("subset", [](const FoldSplit& s, int fold, const std::string& subset) {
        return s.folds.at(static_cast<std::size_t>(fold)).get(parse_subset(subset));
      })
      .def("save", &FoldSplit::save)
      .def_static("load", &FoldSplit::load);

  m.def(
      "make_splits",
      [](const CohortManifest& manifest, int n_folds, std::uint64_t seed, bool fixed_test) {
        SplitOptions o;
        o.n_folds = n_folds;
        o.seed = seed;
        o.fixed_test = fixed_test;
        return make_splits(manifest, o);
      },
      py::arg("manifest"), py::arg("n_folds") = 3, py::arg("seed") = 0, py::arg("fixed_test") = true);
  m.def("check_no_leakage", &check_no_leakage);
  m.def("load_cohort", &load_cohort, py::arg("manifest"), py::arg("split"), py::arg("fold"), py::arg("subset"),
        py::arg("subtypes") = std::vector<std::string>{});
  py::enum_<Subset>(m, "Subset").value("train", Subset::train).value("val", Subset::val).value("test", Subset::test);

  // ---- synthetic cohorts ---------------------------------------------------

  py::class_<SynthSpec>(m, "SynthSpec")
      .def(py::init<>())
      .def_readwrite("n_patients", &SynthSpec::n_patients)
      .def_readwrite("slides_per_patient", &SynthSpec::slides_per_patient)
      .def_readwrite("k", &SynthSpec::k)
      .def_readwrite("d", &SynthSpec::d)
      .def_readwrite("witness_fraction", &SynthSpec::witness_fraction)
      .def_readwrite("separation", &SynthSpec::separation)
      .def_readwrite("positive_fraction", &SynthSpec::positive_fraction)
      .def_readwrite("hazard_scale", &SynthSpec::hazard_scale)
      .def_readwrite("base_rate", &SynthSpec::base_rate)
      .def_readwrite("censor_fraction", &SynthSpec::censor_fraction)
      .def_readwrite("seed", &SynthSpec::seed)
      .def_readwrite("with_coords", &SynthSpec::with_coords)
      .def("validate", &SynthSpec::validate);

  py::class_<SynthTruth>(m, "SynthTruth")
      .def_readonly("direction", &SynthTruth::direction)
      .def_readonly("witnesses", &SynthTruth::witnesses)
      .def_readonly("slide_scores", &SynthTruth::slide_scores)
      .def_static("load", &SynthTruth::load);

  py::class_<SynthCohort>(m, "SynthCohort")
      .def_readonly("manifest", &SynthCohort::manifest)
      .def_readonly("truth", &SynthCohort::truth)
      .def_readonly("bags", &SynthCohort::bags)
      .def_readonly("manifest_path", &SynthCohort::manifest_path)
      .def_readonly("truth_path", &SynthCohort::truth_path);

  m.def("synthesize", &synthesize, py::arg("spec"));
  m.def("generate_cohort", &generate_cohort, py::arg("spec"), py::arg("out_dir"));
  m.def("oracle_scores", &oracle_scores, py::arg("bags"), py::arg("truth"));

  // ---- models and experiments ---------------------------------------------

  py::class_<MilModel>(m, "MilModel")
      .def_static("load", &MilModel::load)
      .def("save", &MilModel::save)
      .def_property_readonly("arch", [](const MilModel& mm) { return std::string(arch_name(mm.config().arch)); })
      .def("predict", [](const MilModel& mm, const EmbeddingBag& b) {
        const Prediction p = mm.predict(b);
        py::dict d;
        d["slide_id"] = p.slide_id;
        d["score"] = p.score();
        d["y_hat"] = p.y_hat;
        d["log_hazard"] = p.log_hazard;
        d["attention"] = p.attention;
        return d;
      });

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def_static("load", &ExperimentConfig::load, py::arg("path"))
      .def_static(
          "from_dict",
          [](const py::dict& d, const std::filesystem::path& base_dir) {
            return ExperimentConfig::from_doc(doc_from_dict(d), base_dir);
          },
          py::arg("values"), py::arg("base_dir") = std::filesystem::path{})
      .def("resolved", [](const ExperimentConfig& c) { return c.to_doc().serialize(); })
      .def_readwrite("seeds", &ExperimentConfig::seeds)
      .def_readwrite("folds", &ExperimentConfig::folds)
      .def_readwrite("max_epochs", &ExperimentConfig::max_epochs)
      .def_readwrite("report_dir", &ExperimentConfig::report_dir);

  m.def(
      "train_fold",
      [](const ExperimentConfig& c, int fold, std::uint64_t seed) {
        const auto manifest = CohortManifest::load(c.manifest);
        const auto split = resolve_split(c, manifest);
        py::gil_scoped_release release;
        TrainResult r = train_fold(c, manifest, split, fold, seed);
        py::gil_scoped_acquire acquire;
        return py::make_tuple(std::move(r.model), r.best_epoch, r.best_score);
      },
      py::arg("config"), py::arg("fold"), py::arg("seed"));
  m.def(
      "evaluate",
      [](const MilModel& model, const std::vector<EmbeddingBag>& bags, const std::string& task, bool patient_level) {
        return eval_to_dict(evaluate(model, bags, parse_task(task), patient_level));
      },
      py::arg("model"), py::arg("bags"), py::arg("task"), py::arg("patient_level") = false);

  m.def(
      "run_experiment",
      [](const ExperimentConfig& c, const std::optional<std::filesystem::path>& report_dir) {
        ReportBundle bundle;
        {
          py::gil_scoped_release release;
          bundle = run_experiment(c);
          if (report_dir) write_report(bundle, *report_dir);
        }
        py::dict d;
        d["partial"] = bundle.partial;
        d["best_seed"] = bundle.best_seed;
        py::dict agg;
        for (const auto& a : bundle.aggregates) {
          py::dict row;
          row["best_seed_mean"] = a.best_seed_mean;
          row["best_seed_std"] = a.best_seed_std;
          row["seed_mean"] = a.seed_mean;
          row["seed_std"] = a.seed_std;
          agg[py::str(a.metric)] = row;
        }
        d["aggregates"] = agg;
        py::list runs;
        for (const auto& r : bundle.runs) {
          py::dict row = eval_to_dict(r.test);
          row["fold"] = r.fold;
          row["seed"] = r.seed;
          row["ok"] = r.ok;
          row["error"] = r.error;
          row["best_epoch"] = r.best_epoch;
          runs.append(row);
        }
        d["runs"] = runs;
        d["metrics_csv"] = metrics_csv(bundle);
        return d;
      },
      py::arg("config"), py::arg("report_dir") = std::nullopt);

  // ---- statistics and objectives ------------------------------------------

  using Vec = std::vector<double>;
  m.def(
      "accuracy",
      [](const Vec& probs, const std::vector<int>& labels, double threshold) {
        return accuracy(probs, labels, threshold);
      },
      py::arg("probs"), py::arg("labels"), py::arg("threshold") = 0.5);
  m.def(
      "roc_auc", [](const Vec& scores, const std::vector<int>& labels) { return roc_auc(scores, labels); },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "concordance_index",
      [](const Vec& risks, const Vec& times, const std::vector<bool>& events) {
        return concordance_index(risks, times, events);
      },
      py::arg("risks"), py::arg("times"), py::arg("events"));
  m.def(
      "kaplan_meier",
      [](const std::vector<double>& t, const std::vector<bool>& e) {
        const SurvivalCurve c = kaplan_meier(t, e);
        return py::make_tuple(c.times, c.survival);
      },
      py::arg("times"), py::arg("events"));
  m.def(
      "logrank_test",
      [](const std::vector<double>& ta, const std::vector<bool>& ea, const std::vector<double>& tb,
         const std::vector<bool>& eb) {
        const LogRankResult r = logrank_test(ta, ea, tb, eb);
        return py::make_tuple(r.chi_square, r.p_value);
      },
      py::arg("times_a"), py::arg("events_a"), py::arg("times_b"), py::arg("events_b"));
  m.def(
      "cox_loss",
      [](const std::vector<double>& eta, const std::vector<double>& t, const std::vector<bool>& e) {
        return cox_loss(SurvivalBatch{eta, t, e}).loss;
      },
      py::arg("log_hazards"), py::arg("times"), py::arg("events"));
  m.def(
      "bce_loss", [](const Vec& logits, const Vec& labels) { return bce_loss_logits(logits, labels); },
      py::arg("logits"), py::arg("labels"));

  // ---- stain normalization -------------------------------------------------

  py::class_<StainProfile>(m, "StainProfile")
      .def_readonly("stain_matrix", &StainProfile::stain_matrix)
      .def_readonly("max_concentrations", &StainProfile::max_concentrations)
      .def("save", &StainProfile::save)
      .def_static("load", &StainProfile::load);

  m.def(
      "estimate_stains",
      [](const RgbArray& a, double io, double beta, double alpha) {
        return estimate_stains(patch_from_array(a), MacenkoParams{io, beta, alpha});
      },
      py::arg("patch"), py::arg("io") = 255.0, py::arg("beta") = 0.15, py::arg("alpha") = 1.0);
  m.def(
      "normalize_patch",
      [](const RgbArray& a, const StainProfile& reference) {
        return patch_to_array(normalize_patch(patch_from_array(a), reference));
      },
      py::arg("patch"), py::arg("reference"));
  m.def("read_png", [](const std::filesystem::path& p) { return patch_to_array(read_png(p)); });
  m.def("write_png", [](const RgbArray& a, const std::filesystem::path& p) { write_png(patch_from_array(a), p); });
  m.def("stain_angle_deg", &stain_angle_deg);
}
