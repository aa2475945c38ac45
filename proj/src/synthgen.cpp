#include "bagforge/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "bagforge/errors.hpp"
#include "bagforge/rng.hpp"

namespace bagforge {

namespace {

constexpr std::uint64_t kDirectionStream = 0x444952;
constexpr std::uint64_t kLabelStream = 0x4c4142;
constexpr std::uint64_t kCensorStream = 0x43454e;
constexpr std::uint64_t kSlideStreamBase = 0x10000;

const char* const kSubtypes[] = {"PsPC", "PsC", "CC", "EC", "MC", "UC"};

std::string padded(const char* prefix, int value, int width) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%0*d", prefix, width, value);
  return buf;
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace

void SynthSpec::validate() const {
  if (n_patients < 1) throw ValidationError("synth: n_patients must be >= 1");
  if (slides_per_patient < 1) throw ValidationError("synth: slides_per_patient must be >= 1");
  if (k < 1) throw ValidationError("synth: k must be >= 1");
  if (d < 1) throw ValidationError("synth: d must be >= 1");
  if (!(witness_fraction >= 0.0 && witness_fraction <= 1.0)) throw ValidationError("synth: witness_fraction must be in [0, 1]");
  if (!(separation >= 0.0 && std::isfinite(separation))) throw ValidationError("synth: separation must be >= 0");
  if (!(positive_fraction >= 0.0 && positive_fraction <= 1.0)) {
    throw ValidationError("synth: positive_fraction must be in [0, 1]");
  }
  if (!std::isfinite(hazard_scale)) throw ValidationError("synth: hazard_scale must be finite");
  if (!(base_rate > 0.0 && std::isfinite(base_rate))) throw ValidationError("synth: base_rate must be positive");
  if (!(censor_fraction >= 0.0 && censor_fraction < 1.0)) throw ValidationError("synth: censor_fraction must be in [0, 1)");
}

int SynthSpec::witness_count() const {
  // Guard against ceil(0.2 * 64) picking up representation error.
  return std::min(k, static_cast<int>(std::ceil(witness_fraction * k - 1e-9)));
}

void SynthSpec::write(KvDoc& doc, const std::string& prefix) const {
  doc.set(prefix + "n_patients", n_patients);
  doc.set(prefix + "slides_per_patient", slides_per_patient);
  doc.set(prefix + "k", k);
  doc.set(prefix + "d", d);
  doc.set(prefix + "witness_fraction", witness_fraction);
  doc.set(prefix + "separation", separation);
  doc.set(prefix + "positive_fraction", positive_fraction);
  doc.set(prefix + "hazard_scale", hazard_scale);
  doc.set(prefix + "base_rate", base_rate);
  doc.set(prefix + "censor_fraction", censor_fraction);
  doc.set(prefix + "seed", std::to_string(seed));
  doc.set(prefix + "encoder_name", encoder_name);
  doc.set(prefix + "with_coords", with_coords);
}

SynthSpec SynthSpec::read(const KvDoc& doc, const std::string& prefix) { return read(doc, prefix, SynthSpec{}); }

SynthSpec SynthSpec::read(const KvDoc& doc, const std::string& prefix, SynthSpec s) {
  s.n_patients = static_cast<int>(doc.get_int(prefix + "n_patients", s.n_patients));
  s.slides_per_patient = static_cast<int>(doc.get_int(prefix + "slides_per_patient", s.slides_per_patient));
  s.k = static_cast<int>(doc.get_int(prefix + "k", s.k));
  s.d = static_cast<int>(doc.get_int(prefix + "d", s.d));
  s.witness_fraction = doc.get_double(prefix + "witness_fraction", s.witness_fraction);
  s.separation = doc.get_double(prefix + "separation", s.separation);
  s.positive_fraction = doc.get_double(prefix + "positive_fraction", s.positive_fraction);
  s.hazard_scale = doc.get_double(prefix + "hazard_scale", s.hazard_scale);
  s.base_rate = doc.get_double(prefix + "base_rate", s.base_rate);
  s.censor_fraction = doc.get_double(prefix + "censor_fraction", s.censor_fraction);
  s.seed = static_cast<std::uint64_t>(doc.get_int(prefix + "seed", static_cast<std::int64_t>(s.seed)));
  s.encoder_name = doc.get_string(prefix + "encoder_name", s.encoder_name);
  s.with_coords = doc.get_bool(prefix + "with_coords", s.with_coords);
  s.validate();
  return s;
}

KvDoc SynthTruth::to_doc() const {
  KvDoc doc;
  doc.set("format", "synth-truth 1");
  spec.write(doc, "spec.");
  std::string dir;
  for (Eigen::Index i = 0; i < direction.size(); ++i) {
    if (i) dir += ',';
    dir += format_double(direction(i));
  }
  doc.set("direction", dir);
  doc.set("slides", static_cast<std::int64_t>(witnesses.size()));
  for (const auto& [slide, idx] : witnesses) {
    doc.set("witness." + slide, join_ints(idx));
    doc.set("score." + slide, slide_scores.at(slide));
  }
  return doc;
}

SynthTruth SynthTruth::from_doc(const KvDoc& doc) {
  SynthTruth t;
  t.spec = SynthSpec::read(doc, "spec.");
  const auto parts = split(doc.at("direction"), ',');
  t.direction.resize(static_cast<Eigen::Index>(parts.size()));
  for (std::size_t i = 0; i < parts.size(); ++i) t.direction(static_cast<Eigen::Index>(i)) = parse_double(parts[i], "direction");
  for (const auto& [key, value] : doc.entries()) {
    if (key.rfind("witness.", 0) == 0) {
      std::vector<int> idx;
      if (!trim(value).empty()) {
        for (const auto& p : split(value, ',')) idx.push_back(static_cast<int>(parse_int(p, key)));
      }
      t.witnesses[key.substr(8)] = std::move(idx);
    } else if (key.rfind("score.", 0) == 0) {
      t.slide_scores[key.substr(6)] = parse_double(value, key);
    }
  }
  const auto expected = doc.get_int("slides", static_cast<std::int64_t>(t.witnesses.size()));
  if (expected != static_cast<std::int64_t>(t.witnesses.size())) {
    throw ValidationError("truth sidecar is truncated: slide count mismatch");
  }
  return t;
}

std::pair<std::vector<EmbeddingBag>, SynthTruth> synthesize(const SynthSpec& spec) {
  spec.validate();
  SynthTruth truth;
  truth.spec = spec;

  Rng dir_rng(Rng::derive(spec.seed, kDirectionStream));
  Eigen::VectorXd u(spec.d);
  do {
    for (int j = 0; j < spec.d; ++j) u(j) = dir_rng.normal();
  } while (u.norm() < 1e-12);
  u.normalize();
  truth.direction = u;

  // Positive patients: a fixed count, placed by a seeded shuffle.
  std::vector<int> patient_labels(static_cast<std::size_t>(spec.n_patients), 0);
  const int n_pos = static_cast<int>(std::lround(spec.positive_fraction * spec.n_patients));
  std::fill(patient_labels.begin(), patient_labels.begin() + n_pos, 1);
  Rng label_rng(Rng::derive(spec.seed, kLabelStream));
  label_rng.shuffle(std::span<int>(patient_labels));

  const int n_slides = spec.n_slides();
  const int w = spec.witness_count();
  std::vector<EmbeddingBag> bags(static_cast<std::size_t>(n_slides));
  std::vector<double> indicator(static_cast<std::size_t>(n_slides));
  std::vector<double> raw_times(static_cast<std::size_t>(n_slides));
  std::vector<Rng> slide_rngs;
  slide_rngs.reserve(static_cast<std::size_t>(n_slides));

  const int id_width = std::max(3, static_cast<int>(std::to_string(n_slides).size()));
  for (int s = 0; s < n_slides; ++s) {
    const int p = s / spec.slides_per_patient;
    EmbeddingBag& bag = bags[static_cast<std::size_t>(s)];
    bag.slide_id = padded("S", s + 1, id_width);
    bag.patient_id = padded("P", p + 1, id_width);
    bag.label = patient_labels[static_cast<std::size_t>(p)];
    bag.subtype = kSubtypes[p % 6];
    bag.encoder = {spec.encoder_name, spec.d};

    slide_rngs.emplace_back(Rng::derive(spec.seed, kSlideStreamBase + static_cast<std::uint64_t>(s)));
    Rng& rng = slide_rngs.back();
    bag.features.resize(spec.k, spec.d);
    for (int i = 0; i < spec.k; ++i) {
      for (int j = 0; j < spec.d; ++j) bag.features(i, j) = static_cast<float>(rng.normal());
    }
    std::vector<int> witness;
    if (*bag.label == 1 && w > 0) {
      std::vector<int> all(static_cast<std::size_t>(spec.k));
      std::iota(all.begin(), all.end(), 0);
      rng.shuffle(std::span<int>(all));
      witness.assign(all.begin(), all.begin() + w);
      std::sort(witness.begin(), witness.end());
      for (int i : witness) {
        for (int j = 0; j < spec.d; ++j) {
          bag.features(i, j) = static_cast<float>(static_cast<double>(bag.features(i, j)) + spec.separation * u(j));
        }
      }
    }
    indicator[static_cast<std::size_t>(s)] = witness.empty() ? 0.0 : 1.0;
    truth.witnesses[bag.slide_id] = std::move(witness);

    if (spec.with_coords) {
      CoordMatrix coords(spec.k, 2);
      const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(spec.k))));
      for (int i = 0; i < spec.k; ++i) {
        coords(i, 0) = (i % cols) * 224;
        coords(i, 1) = (i / cols) * 224;
      }
      bag.patch_coords = std::move(coords);
    }
  }

  // Slide score: witness indicator standardized over the cohort.
  const double mean = std::accumulate(indicator.begin(), indicator.end(), 0.0) / n_slides;
  double var = 0.0;
  for (double x : indicator) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / n_slides);
  for (int s = 0; s < n_slides; ++s) {
    auto& bag = bags[static_cast<std::size_t>(s)];
    const double z = sd > 0 ? (indicator[static_cast<std::size_t>(s)] - mean) / sd : 0.0;
    truth.slide_scores[bag.slide_id] = z;
    const double rate = spec.base_rate * std::exp(spec.hazard_scale * z);
    raw_times[static_cast<std::size_t>(s)] = slide_rngs[static_cast<std::size_t>(s)].exponential(rate);
  }

  // Exactly round(c * n) censored slides; observed time is a uniform
  // fraction of the latent progression time.
  std::vector<int> order(static_cast<std::size_t>(n_slides));
  std::iota(order.begin(), order.end(), 0);
  Rng censor_rng(Rng::derive(spec.seed, kCensorStream));
  censor_rng.shuffle(std::span<int>(order));
  const int n_censored = static_cast<int>(std::lround(spec.censor_fraction * n_slides));
  std::vector<bool> censored(static_cast<std::size_t>(n_slides), false);
  for (int i = 0; i < n_censored; ++i) censored[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
  for (int s = 0; s < n_slides; ++s) {
    auto& bag = bags[static_cast<std::size_t>(s)];
    double t = raw_times[static_cast<std::size_t>(s)];
    if (censored[static_cast<std::size_t>(s)]) t *= censor_rng.uniform(0.05, 1.0);
    bag.pfs_months = t;
    bag.event = !censored[static_cast<std::size_t>(s)];
  }
  return {std::move(bags), std::move(truth)};
}

SynthCohort generate_cohort(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  auto [bags, truth] = synthesize(spec);
  fs::create_directories(out_dir / "bags");
  SynthCohort cohort;
  cohort.manifest.cohort_id = "manifest";
  cohort.manifest.base_dir = out_dir;
  for (const auto& bag : bags) {
    const fs::path rel = fs::path("bags") / (bag.slide_id + ".milb");
    write_bag(bag, out_dir / rel);
    ManifestEntry e;
    e.path = rel;
    e.slide_id = bag.slide_id;
    e.patient_id = bag.patient_id;
    e.label = bag.label;
    e.pfs_months = bag.pfs_months;
    e.event = bag.event;
    e.subtype = bag.subtype;
    cohort.manifest.entries.push_back(std::move(e));
  }
  cohort.manifest_path = out_dir / "manifest.csv";
  cohort.truth_path = out_dir / "truth.txt";
  cohort.manifest.save(cohort.manifest_path);
  truth.save(cohort.truth_path);
  cohort.truth = std::move(truth);
  cohort.bags = std::move(bags);
  return cohort;
}

std::vector<double> oracle_scores(const std::vector<EmbeddingBag>& bags, const SynthTruth& truth) {
  std::vector<double> out;
  out.reserve(bags.size());
  for (const auto& bag : bags) {
    if (!truth.witnesses.count(bag.slide_id)) {
      throw ValidationError("sidecar does not match cohort: unknown slide '" + bag.slide_id + "'");
    }
    if (bag.d() != truth.direction.size()) {
      throw ValidationError("sidecar does not match cohort: feature dimension differs for '" + bag.slide_id + "'");
    }
    const Eigen::VectorXd proj = bag.features.cast<double>() * truth.direction;
    out.push_back(proj.maxCoeff());
  }
  return out;
}

double oracle_attention_mass(const EmbeddingBag& bag, const SynthTruth& truth) {
  const auto it = truth.witnesses.find(bag.slide_id);
  if (it == truth.witnesses.end()) {
    throw ValidationError("sidecar does not match cohort: unknown slide '" + bag.slide_id + "'");
  }
  if (bag.d() != truth.direction.size()) throw ValidationError("sidecar does not match cohort: dimension differs");
  const Eigen::VectorXd proj = bag.features.cast<double>() * truth.direction;
  const Eigen::ArrayXd e = (proj.array() - proj.maxCoeff()).exp();
  double mass = 0.0;
  for (int i : it->second) mass += e(i);
  return mass / e.sum();
}

}  // namespace bagforge
