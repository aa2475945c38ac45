#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bagforge/bag.hpp"
#include "bagforge/kvdoc.hpp"

namespace bagforge {

struct ManifestEntry {
  std::filesystem::path path;
  std::string slide_id;
  std::string patient_id;
  std::optional<int> label;
  std::optional<double> pfs_months;
  /// `censored` column; true = event observed.
  std::optional<bool> event;
  std::optional<std::string> subtype;
};

/// Cohort listing in CSV form:
///   path,slide_id,patient_id,label,pfs_months,censored,subtype
/// Empty cells are missing values. Relative paths resolve against the
/// manifest's directory.
struct CohortManifest {
  std::string cohort_id;
  std::filesystem::path base_dir;
  std::vector<ManifestEntry> entries;

  static CohortManifest load(const std::filesystem::path& csv_path);
  static CohortManifest parse(std::string_view csv_text, std::string cohort_id, std::filesystem::path base_dir);
  std::string to_csv() const;
  void save(const std::filesystem::path& csv_path) const;

  /// Unique slide ids and one patient per slide.
  void validate() const;
  /// Sorted unique patient ids.
  std::vector<std::string> patients() const;
  std::filesystem::path resolve(const ManifestEntry& e) const;
};

enum class Subset { train, val, test };

std::string_view subset_name(Subset s);
Subset parse_subset(std::string_view name);

struct FoldAssignment {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;

  const std::vector<std::string>& get(Subset s) const;
  bool operator==(const FoldAssignment&) const = default;
};

struct SplitOptions {
  int n_folds = 3;
  double train_fraction = 0.70;
  double val_fraction = 0.15;
  double test_fraction = 0.15;
  std::uint64_t seed = 0;
  bool fixed_test = true;
};

struct FoldSplit {
  int n_folds = 0;
  std::uint64_t seed = 0;
  bool fixed_test = true;
  std::vector<FoldAssignment> folds;

  KvDoc to_doc() const;
  static FoldSplit from_doc(const KvDoc& doc);
  void save(const std::filesystem::path& path) const { to_doc().save(path); }
  static FoldSplit load(const std::filesystem::path& path) { return from_doc(KvDoc::load(path)); }
  bool operator==(const FoldSplit&) const = default;
};

/// Patient-level partition into (train, val, test) per fold. With fixed_test
/// the test block is drawn once (label-balanced when every patient has a
/// label) and train/val windows rotate across folds.
FoldSplit make_splits(const CohortManifest& manifest, const SplitOptions& options);

/// Slide-leakage guard: every manifest patient appears in exactly one subset
/// of every fold. Throws ValidationError otherwise.
void check_no_leakage(const CohortManifest& manifest, const FoldSplit& split);

/// Bags for the patients assigned to (fold, subset), in manifest order.
/// Manifest clinical fields, when present, override the values stored in
/// the bag file. An empty subtype filter keeps every bag.
std::vector<EmbeddingBag> load_cohort(const CohortManifest& manifest, const FoldSplit& split, int fold, Subset subset,
                                      const std::vector<std::string>& subtype_filter = {});

}  // namespace bagforge
