#include <doctest.h>

#include <algorithm>
#include <set>

#include "bagforge/cohort.hpp"
#include "bagforge/errors.hpp"
#include "bagforge/rng.hpp"
#include "bagforge/synthgen.hpp"
#include "support/tmpdir.hpp"

using namespace bagforge;

namespace {

/// Manifest of `n` patients with `per` slides each; labels alternate.
CohortManifest make_manifest(int n, int per = 1, bool labels = true) {
  std::string csv = "path,slide_id,patient_id,label,pfs_months,censored,subtype\n";
  int s = 0;
  for (int p = 0; p < n; ++p) {
    for (int j = 0; j < per; ++j, ++s) {
      csv += "b" + std::to_string(s) + ".milb,S" + std::to_string(s) + ",P" + std::to_string(p) + "," +
             (labels ? std::to_string(p % 2) : std::string()) + ",,,\n";
    }
  }
  return CohortManifest::parse(csv, "test", "/nonexistent");
}

std::set<std::string> as_set(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST_CASE("manifest parse and csv round trip") {
  const std::string csv =
      "path,slide_id,patient_id,label,pfs_months,censored,subtype\n"
      "a.milb,S1,P1,1,12.5,1,PsPC\n"
      "\"dir,x/b.milb\",S2,P1,,,,\n";
  const auto m = CohortManifest::parse(csv, "c", "/data");
  REQUIRE(m.entries.size() == 2);
  CHECK(m.entries[0].label == 1);
  CHECK(m.entries[0].event == true);
  CHECK(m.entries[0].pfs_months == 12.5);
  CHECK_FALSE(m.entries[1].label.has_value());
  CHECK_FALSE(m.entries[1].subtype.has_value());
  CHECK(m.entries[1].path == "dir,x/b.milb");
  CHECK(m.resolve(m.entries[0]) == std::filesystem::path("/data/a.milb"));
  const auto again = CohortManifest::parse(m.to_csv(), "c", "/data");
  CHECK(again.to_csv() == m.to_csv());
}

TEST_CASE("manifest rejects malformed rows") {
  const std::string head = "path,slide_id,patient_id,label,pfs_months,censored,subtype\n";
  CHECK_THROWS_AS(CohortManifest::parse("wrong,header\n", "c", "."), ValidationError);
  CHECK_THROWS_AS(CohortManifest::parse(head + "a,S1,P1,3,,,\n", "c", "."), ValidationError);
  CHECK_THROWS_AS(CohortManifest::parse(head + "a,S1,P1,1,5,,\n", "c", "."), ValidationError);
  CHECK_THROWS_AS(CohortManifest::parse(head + "a,S1,P1\n", "c", "."), ValidationError);
  CHECK_THROWS_WITH_AS(CohortManifest::parse(head + "a,S1,P1,,,,\nb,S1,P2,,,,\n", "c", "."),
                       doctest::Contains("duplicate slide_id"), ValidationError);
}

TEST_CASE("10 patients, 1 fold, 70/15/15") {
  SplitOptions o;
  o.n_folds = 1;
  const FoldSplit s = make_splits(make_manifest(10), o);
  REQUIRE(s.folds.size() == 1);
  const auto& f = s.folds[0];
  CHECK(f.train.size() == 7);
  CHECK(f.val.size() >= 1);
  CHECK(f.val.size() <= 2);
  CHECK(f.test.size() >= 1);
  CHECK(f.test.size() <= 2);
  CHECK(f.train.size() + f.val.size() + f.test.size() == 10);
  std::set<std::string> all = as_set(f.train);
  for (const auto& p : f.val) CHECK(all.insert(p).second);
  for (const auto& p : f.test) CHECK(all.insert(p).second);
}

TEST_CASE("splits are deterministic in the seed") {
  const auto m = make_manifest(30, 2);
  SplitOptions o;
  o.seed = 17;
  CHECK(make_splits(m, o) == make_splits(m, o));
  SplitOptions other = o;
  other.seed = 18;
  CHECK_FALSE(make_splits(m, o) == make_splits(m, other));
}

TEST_CASE("fixed test set is shared across folds and label balanced") {
  const auto m = make_manifest(40);
  SplitOptions o;
  o.seed = 3;
  const FoldSplit s = make_splits(m, o);
  REQUIRE(s.folds.size() == 3);
  for (const auto& f : s.folds) CHECK(as_set(f.test) == as_set(s.folds[0].test));
  int pos = 0, neg = 0;
  for (const auto& p : s.folds[0].test) {
    const int id = std::stoi(p.substr(1));
    (id % 2 ? pos : neg) += 1;
  }
  CHECK(pos == neg);
  // Train/val rotate across folds.
  CHECK(as_set(s.folds[0].val) != as_set(s.folds[1].val));
}

TEST_CASE("every patient lands in exactly one subset per fold") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const int n = 5 + static_cast<int>(rng.below(60));
    const auto m = make_manifest(n, 1 + static_cast<int>(rng.below(3)), rng.uniform() < 0.5);
    SplitOptions o;
    o.seed = seed;
    o.fixed_test = rng.uniform() < 0.5;
    const FoldSplit s = make_splits(m, o);
    CHECK_NOTHROW(check_no_leakage(m, s));
    for (const auto& f : s.folds) {
      std::set<std::string> all = as_set(f.train);
      for (const auto& p : f.val) all.insert(p);
      for (const auto& p : f.test) all.insert(p);
      CHECK(all.size() == f.train.size() + f.val.size() + f.test.size());
      CHECK(all == as_set(m.patients()));
    }
  }
}

TEST_CASE("split errors") {
  SplitOptions o;
  CHECK_THROWS_AS(make_splits(make_manifest(4), o), ValidationError);
  SplitOptions bad;
  bad.test_fraction = 0.3;
  CHECK_THROWS_AS(make_splits(make_manifest(20), bad), ValidationError);
}

TEST_CASE("leak guard catches a patient in two subsets") {
  const auto m = make_manifest(20);
  FoldSplit s = make_splits(m, SplitOptions{});
  s.folds[1].val.push_back(s.folds[1].train.front());
  CHECK_THROWS_WITH_AS(check_no_leakage(m, s), doctest::Contains("leak"), ValidationError);
  FoldSplit missing = make_splits(m, SplitOptions{});
  missing.folds[0].train.pop_back();
  CHECK_THROWS_AS(check_no_leakage(m, missing), ValidationError);
}

TEST_CASE("split document round trip") {
  TempDir dir;
  const FoldSplit s = make_splits(make_manifest(25), SplitOptions{});
  s.save(dir / "split.txt");
  CHECK(FoldSplit::load(dir / "split.txt") == s);
}

TEST_CASE("load_cohort returns the assigned bags and filters subtypes") {
  TempDir dir;
  SynthSpec spec;
  spec.n_patients = 24;
  spec.k = 4;
  spec.d = 3;
  const SynthCohort c = generate_cohort(spec, dir.path());
  const FoldSplit s = make_splits(c.manifest, SplitOptions{});

  std::set<std::string> patients;
  std::size_t total = 0;
  for (Subset sub : {Subset::train, Subset::val, Subset::test}) {
    const auto bags = load_cohort(c.manifest, s, 0, sub);
    const auto assigned = as_set(s.folds[0].get(sub));
    for (const auto& b : bags) {
      CHECK(assigned.count(b.patient_id) == 1);
      patients.insert(b.patient_id);
    }
    total += bags.size();
  }
  CHECK(total == c.manifest.entries.size());
  CHECK(patients == as_set(c.manifest.patients()));

  const std::vector<std::string> filter{"PsPC", "PsC"};
  const auto serous = load_cohort(c.manifest, s, 0, Subset::train, filter);
  CHECK_FALSE(serous.empty());
  for (const auto& b : serous) CHECK((b.subtype == "PsPC" || b.subtype == "PsC"));
  CHECK(serous.size() < load_cohort(c.manifest, s, 0, Subset::train).size());

  std::filesystem::remove(c.manifest.resolve(c.manifest.entries[0]));
  const FoldSplit one = make_splits(c.manifest, SplitOptions{});
  bool thrown = false;
  for (Subset sub : {Subset::train, Subset::val, Subset::test}) {
    try {
      load_cohort(c.manifest, one, 0, sub);
    } catch (const IoError& e) {
      thrown = true;
      CHECK(std::string(e.what()).find(c.manifest.entries[0].path.filename().string()) != std::string::npos);
    }
  }
  CHECK(thrown);
}
