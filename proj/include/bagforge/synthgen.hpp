#pragma once

// Synthetic cohorts with planted witness patches.
//
// Each patient gets a binary label; every slide of a positive patient holds
// ceil(rho * k) witness patches shifted by delta along a hidden unit
// direction u. Background patches are N(0, I). PFS is exponential with rate
// base_rate * exp(gamma * z), where z is the slide's standardized witness
// indicator, and a fixed fraction of slides is censored.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "bagforge/bag.hpp"
#include "bagforge/cohort.hpp"
#include "bagforge/kvdoc.hpp"

namespace bagforge {

struct SynthSpec {
  int n_patients = 60;
  int slides_per_patient = 2;
  int k = 64;
  int d = 32;
  /// rho in [0, 1].
  double witness_fraction = 0.2;
  /// delta >= 0.
  double separation = 2.0;
  double positive_fraction = 0.5;
  /// gamma: log-hazard slope on the slide score.
  double hazard_scale = 1.0;
  /// Baseline progression rate per month.
  double base_rate = 0.1;
  double censor_fraction = 0.2;
  std::uint64_t seed = 0;
  std::string encoder_name = "synthetic";
  bool with_coords = true;

  void validate() const;
  int witness_count() const;
  int n_slides() const { return n_patients * slides_per_patient; }
  void write(KvDoc& doc, const std::string& prefix = "synth.") const;
  static SynthSpec read(const KvDoc& doc, const std::string& prefix = "synth.");
  static SynthSpec read(const KvDoc& doc, const std::string& prefix, SynthSpec defaults);
};

struct SynthTruth {
  Eigen::VectorXd direction;
  /// Sorted witness patch indices per slide (empty for negative slides).
  std::map<std::string, std::vector<int>> witnesses;
  std::map<std::string, double> slide_scores;
  SynthSpec spec;

  KvDoc to_doc() const;
  static SynthTruth from_doc(const KvDoc& doc);
  void save(const std::filesystem::path& path) const { to_doc().save(path); }
  static SynthTruth load(const std::filesystem::path& path) { return from_doc(KvDoc::load(path)); }
};

struct SynthCohort {
  CohortManifest manifest;
  SynthTruth truth;
  std::vector<EmbeddingBag> bags;
  std::filesystem::path manifest_path;
  std::filesystem::path truth_path;
};

/// In-memory generation; a pure function of the spec.
std::pair<std::vector<EmbeddingBag>, SynthTruth> synthesize(const SynthSpec& spec);

/// Writes out_dir/bags/<slide>.milb, out_dir/manifest.csv and out_dir/truth.txt.
SynthCohort generate_cohort(const SynthSpec& spec, const std::filesystem::path& out_dir);

/// Max over patches of the projection onto the true direction. Throws
/// ValidationError when a bag is unknown to the sidecar or dimensions differ.
std::vector<double> oracle_scores(const std::vector<EmbeddingBag>& bags, const SynthTruth& truth);

/// Softmax-of-projection attention mass on the slide's witness patches.
double oracle_attention_mass(const EmbeddingBag& bag, const SynthTruth& truth);

}  // namespace bagforge
