#include "bagforge/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "bagforge/errors.hpp"
#include "bagforge/rng.hpp"

namespace bagforge {

namespace {

constexpr std::string_view kManifestHeader = "path,slide_id,patient_id,label,pfs_months,censored,subtype";

// Largest-remainder apportionment of n items to fractions; ties go to the
// earlier slot.
std::vector<int> apportion(int n, const std::vector<double>& fractions) {
  std::vector<int> counts(fractions.size());
  std::vector<std::pair<double, std::size_t>> rem;
  int used = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double exact = fractions[i] * n;
    counts[i] = static_cast<int>(std::floor(exact + 1e-9));
    used += counts[i];
    rem.emplace_back(exact - counts[i], i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first + 1e-12; });
  for (std::size_t j = 0; used < n; ++j, ++used) counts[rem[j % rem.size()].second] += 1;
  // Every subset gets at least one patient, taken from the largest.
  for (auto& c : counts) {
    if (c == 0) {
      auto largest = std::max_element(counts.begin(), counts.end());
      *largest -= 1;
      c = 1;
    }
  }
  return counts;
}

// Round-robin over label classes so contiguous windows stay balanced.
std::vector<std::string> interleave(const std::vector<std::string>& pos, const std::vector<std::string>& neg) {
  std::vector<std::string> out;
  std::size_t i = 0, j = 0;
  while (i < pos.size() || j < neg.size()) {
    if (i < pos.size()) out.push_back(pos[i++]);
    if (j < neg.size()) out.push_back(neg[j++]);
  }
  return out;
}

}  // namespace

CohortManifest CohortManifest::parse(std::string_view csv_text, std::string cohort_id, std::filesystem::path base_dir) {
  CohortManifest m;
  m.cohort_id = std::move(cohort_id);
  m.base_dir = std::move(base_dir);
  auto lines = split(csv_text, '\n');
  std::size_t line_no = 0;
  bool header_seen = false;
  for (auto& raw : lines) {
    ++line_no;
    std::string_view line = raw;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty()) continue;
    if (!header_seen) {
      if (trim(line) != kManifestHeader) {
        throw ValidationError("manifest header must be '" + std::string(kManifestHeader) + "'");
      }
      header_seen = true;
      continue;
    }
    auto cells = parse_csv_row(line, line_no);
    if (cells.size() != 7) {
      throw ValidationError("manifest line " + std::to_string(line_no) + ": expected 7 columns, got " +
                            std::to_string(cells.size()));
    }
    for (auto& c : cells) c = std::string(trim(c));
    ManifestEntry e;
    e.path = cells[0];
    e.slide_id = cells[1];
    e.patient_id = cells[2];
    const std::string where = "manifest line " + std::to_string(line_no);
    if (!cells[3].empty()) {
      const auto v = parse_int(cells[3], where + " label");
      if (v != 0 && v != 1) throw ValidationError(where + ": label must be 0 or 1");
      e.label = static_cast<int>(v);
    }
    if (!cells[4].empty()) e.pfs_months = parse_double(cells[4], where + " pfs_months");
    if (!cells[5].empty()) e.event = parse_bool(cells[5], where + " censored");
    if (!cells[6].empty()) e.subtype = cells[6];
    if (e.path.empty() || e.slide_id.empty() || e.patient_id.empty()) {
      throw ValidationError(where + ": path, slide_id, and patient_id are required");
    }
    if (e.pfs_months.has_value() != e.event.has_value()) {
      throw ValidationError(where + ": pfs_months and censored must be given together");
    }
    if (e.pfs_months && (*e.pfs_months < 0 || !std::isfinite(*e.pfs_months))) {
      throw ValidationError(where + ": pfs_months must be finite and >= 0");
    }
    m.entries.push_back(std::move(e));
  }
  if (!header_seen) throw ValidationError("manifest is empty (missing header)");
  m.validate();
  return m;
}

CohortManifest CohortManifest::load(const std::filesystem::path& csv_path) {
  std::ifstream in(csv_path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + csv_path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), csv_path.stem().string(), csv_path.parent_path());
}

std::string CohortManifest::to_csv() const {
  std::string out(kManifestHeader);
  out += '\n';
  for (const auto& e : entries) {
    out += csv_cell(e.path.generic_string()) + ',' + csv_cell(e.slide_id) + ',' + csv_cell(e.patient_id) + ',';
    out += (e.label ? std::to_string(*e.label) : std::string()) + ',';
    out += (e.pfs_months ? format_double(*e.pfs_months) : std::string()) + ',';
    out += (e.event ? std::string(*e.event ? "1" : "0") : std::string()) + ',';
    out += csv_cell(e.subtype.value_or(std::string()));
    out += '\n';
  }
  return out;
}

void CohortManifest::save(const std::filesystem::path& csv_path) const {
  std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + csv_path.string());
  out << to_csv();
}

void CohortManifest::validate() const {
  std::set<std::string> slides;
  for (const auto& e : entries) {
    if (!slides.insert(e.slide_id).second) throw ValidationError("manifest: duplicate slide_id '" + e.slide_id + "'");
  }
}

std::vector<std::string> CohortManifest::patients() const {
  std::set<std::string> ids;
  for (const auto& e : entries) ids.insert(e.patient_id);
  return {ids.begin(), ids.end()};
}

std::filesystem::path CohortManifest::resolve(const ManifestEntry& e) const {
  if (e.path.is_absolute() || base_dir.empty()) return e.path;
  return base_dir / e.path;
}

std::string_view subset_name(Subset s) {
  switch (s) {
    case Subset::train:
      return "train";
    case Subset::val:
      return "val";
    case Subset::test:
      return "test";
  }
  return "?";
}

Subset parse_subset(std::string_view name) {
  if (name == "train") return Subset::train;
  if (name == "val" || name == "validation") return Subset::val;
  if (name == "test") return Subset::test;
  throw ValidationError("unknown subset '" + std::string(name) + "' (expected train, val, or test)");
}

const std::vector<std::string>& FoldAssignment::get(Subset s) const {
  switch (s) {
    case Subset::train:
      return train;
    case Subset::val:
      return val;
    case Subset::test:
      return test;
  }
  return train;
}

KvDoc FoldSplit::to_doc() const {
  KvDoc doc;
  doc.set("n_folds", n_folds);
  doc.set("seed", static_cast<std::int64_t>(seed));
  doc.set("fixed_test", fixed_test);
  auto join = [](const std::vector<std::string>& ids) {
    std::string s;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) s += ',';
      s += ids[i];
    }
    return s;
  };
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const std::string prefix = "fold." + std::to_string(f) + ".";
    doc.set(prefix + "train", join(folds[f].train));
    doc.set(prefix + "val", join(folds[f].val));
    doc.set(prefix + "test", join(folds[f].test));
  }
  return doc;
}

FoldSplit FoldSplit::from_doc(const KvDoc& doc) {
  FoldSplit s;
  s.n_folds = static_cast<int>(parse_int(doc.at("n_folds"), "n_folds"));
  if (s.n_folds < 1) throw ValidationError("split: n_folds must be >= 1");
  s.seed = static_cast<std::uint64_t>(doc.get_int("seed", 0));
  s.fixed_test = doc.get_bool("fixed_test", true);
  auto ids = [](const std::string& v) {
    std::vector<std::string> out;
    if (trim(v).empty()) return out;
    for (auto& p : split(v, ',')) out.emplace_back(trim(p));
    return out;
  };
  for (int f = 0; f < s.n_folds; ++f) {
    const std::string prefix = "fold." + std::to_string(f) + ".";
    FoldAssignment a;
    a.train = ids(doc.at(prefix + "train"));
    a.val = ids(doc.at(prefix + "val"));
    a.test = ids(doc.at(prefix + "test"));
    s.folds.push_back(std::move(a));
  }
  return s;
}

FoldSplit make_splits(const CohortManifest& manifest, const SplitOptions& opt) {
  manifest.validate();
  if (opt.n_folds < 1) throw ValidationError("n_folds must be >= 1");
  const double fsum = opt.train_fraction + opt.val_fraction + opt.test_fraction;
  if (std::abs(fsum - 1.0) > 1e-9 || opt.train_fraction <= 0 || opt.val_fraction <= 0 || opt.test_fraction <= 0) {
    throw ValidationError("split fractions must be positive and sum to 1");
  }
  std::vector<std::string> patients = manifest.patients();
  const int n = static_cast<int>(patients.size());
  if (n < opt.n_folds + 2) {
    throw ValidationError("too few patients (" + std::to_string(n) + ") for " + std::to_string(opt.n_folds) +
                          " folds; need at least " + std::to_string(opt.n_folds + 2));
  }
  const auto counts = apportion(n, {opt.train_fraction, opt.val_fraction, opt.test_fraction});
  const int n_val = counts[1];
  const int n_test = counts[2];

  // Patient label = majority slide label (ties -> 1); only when every slide is labeled.
  std::map<std::string, std::pair<int, int>> votes;
  bool labeled = true;
  for (const auto& e : manifest.entries) {
    if (!e.label) {
      labeled = false;
      continue;
    }
    auto& v = votes[e.patient_id];
    (*e.label == 1 ? v.first : v.second) += 1;
  }

  Rng rng(Rng::derive(opt.seed, 0x53504c4954ULL));
  rng.shuffle(std::span<std::string>(patients));

  std::vector<std::string> pos, neg;
  if (labeled) {
    for (const auto& p : patients) {
      const auto& v = votes[p];
      (v.first >= v.second ? pos : neg).push_back(p);
    }
  }

  FoldSplit split;
  split.n_folds = opt.n_folds;
  split.seed = opt.seed;
  split.fixed_test = opt.fixed_test;

  auto finish = [](FoldAssignment a) {
    std::sort(a.train.begin(), a.train.end());
    std::sort(a.val.begin(), a.val.end());
    std::sort(a.test.begin(), a.test.end());
    return a;
  };

  if (opt.fixed_test) {
    std::vector<std::string> test, rest;
    if (labeled) {
      // Equal class counts in the test block; the odd one (if any) comes from
      // the larger class, and a short class is topped up from the other.
      int want_pos = n_test / 2, want_neg = n_test / 2;
      if (n_test % 2) (pos.size() >= neg.size() ? want_pos : want_neg) += 1;
      if (want_pos > static_cast<int>(pos.size())) {
        want_neg += want_pos - static_cast<int>(pos.size());
        want_pos = static_cast<int>(pos.size());
      }
      if (want_neg > static_cast<int>(neg.size())) {
        want_pos += want_neg - static_cast<int>(neg.size());
        want_neg = static_cast<int>(neg.size());
      }
      test.assign(pos.begin(), pos.begin() + want_pos);
      test.insert(test.end(), neg.begin(), neg.begin() + want_neg);
      rest = interleave({pos.begin() + want_pos, pos.end()}, {neg.begin() + want_neg, neg.end()});
    } else {
      test.assign(patients.begin(), patients.begin() + n_test);
      rest.assign(patients.begin() + n_test, patients.end());
    }
    const auto r = rest.size();
    for (int f = 0; f < opt.n_folds; ++f) {
      FoldAssignment a;
      a.test = test;
      std::vector<bool> in_val(r, false);
      for (int j = 0; j < n_val; ++j) in_val[(static_cast<std::size_t>(f) * n_val + j) % r] = true;
      for (std::size_t i = 0; i < r; ++i) (in_val[i] ? a.val : a.train).push_back(rest[i]);
      split.folds.push_back(finish(std::move(a)));
    }
  } else {
    const std::vector<std::string> order = labeled ? interleave(pos, neg) : patients;
    const auto total = order.size();
    const int block = n_test + n_val;
    for (int f = 0; f < opt.n_folds; ++f) {
      FoldAssignment a;
      std::vector<int> role(total, 0);
      for (int j = 0; j < block; ++j) role[(static_cast<std::size_t>(f) * block + j) % total] = j < n_test ? 2 : 1;
      for (std::size_t i = 0; i < total; ++i) {
        (role[i] == 2 ? a.test : role[i] == 1 ? a.val : a.train).push_back(order[i]);
      }
      split.folds.push_back(finish(std::move(a)));
    }
  }
  return split;
}

void check_no_leakage(const CohortManifest& manifest, const FoldSplit& split) {
  manifest.validate();
  const auto patients = manifest.patients();
  if (static_cast<int>(split.folds.size()) != split.n_folds) {
    throw ValidationError("split lists " + std::to_string(split.folds.size()) + " folds, expected " +
                          std::to_string(split.n_folds));
  }
  for (std::size_t f = 0; f < split.folds.size(); ++f) {
    std::map<std::string, Subset> where;
    for (Subset s : {Subset::train, Subset::val, Subset::test}) {
      for (const auto& p : split.folds[f].get(s)) {
        auto [it, inserted] = where.emplace(p, s);
        if (!inserted) {
          throw ValidationError("patient leak: '" + p + "' appears in " + std::string(subset_name(it->second)) +
                                " and " + std::string(subset_name(s)) + " of fold " + std::to_string(f));
        }
      }
    }
    for (const auto& p : patients) {
      if (!where.count(p)) {
        throw ValidationError("patient '" + p + "' is not assigned in fold " + std::to_string(f));
      }
    }
    if (where.size() != patients.size()) {
      throw ValidationError("split of fold " + std::to_string(f) + " names patients absent from the manifest");
    }
  }
}

std::vector<EmbeddingBag> load_cohort(const CohortManifest& manifest, const FoldSplit& split, int fold, Subset subset,
                                      const std::vector<std::string>& subtype_filter) {
  if (fold < 0 || fold >= split.n_folds || fold >= static_cast<int>(split.folds.size())) {
    throw ValidationError("fold " + std::to_string(fold) + " out of range");
  }
  const auto& ids = split.folds[static_cast<std::size_t>(fold)].get(subset);
  const std::set<std::string> wanted(ids.begin(), ids.end());
  std::vector<EmbeddingBag> out;
  for (const auto& e : manifest.entries) {
    if (!wanted.count(e.patient_id)) continue;
    auto in_filter = [&](const std::optional<std::string>& tag) {
      return subtype_filter.empty() ||
             (tag && std::find(subtype_filter.begin(), subtype_filter.end(), *tag) != subtype_filter.end());
    };
    // Manifest tags are checked before touching the file; untagged rows fall back to the bag's tag.
    if (e.subtype && !in_filter(e.subtype)) continue;
    const auto path = manifest.resolve(e);
    if (!std::filesystem::exists(path)) throw IoError("missing bag file: " + path.string());
    EmbeddingBag bag = read_bag(path);
    if (bag.slide_id != e.slide_id) {
      throw ValidationError("bag " + path.string() + " has slide_id '" + bag.slide_id + "', manifest says '" +
                            e.slide_id + "'");
    }
    if (bag.patient_id != e.patient_id) {
      throw ValidationError("bag " + path.string() + " has patient_id '" + bag.patient_id + "', manifest says '" +
                            e.patient_id + "'");
    }
    if (e.label) bag.label = e.label;
    if (e.pfs_months) {
      bag.pfs_months = e.pfs_months;
      bag.event = e.event;
    }
    if (e.subtype) bag.subtype = e.subtype;
    if (!in_filter(bag.subtype)) continue;
    out.push_back(std::move(bag));
  }
  return out;
}

}  // namespace bagforge
