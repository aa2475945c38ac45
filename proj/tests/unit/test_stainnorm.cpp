#include <cmath>
#include <doctest.h>

#include "bagforge/bag.hpp"
#include "bagforge/stainnorm.hpp"
#include "support/beer_lambert.hpp"
#include "support/tmpdir.hpp"

using namespace bagforge;

namespace {

double mean_abs_diff(const RgbPatch& a, const RgbPatch& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) s += std::abs(int(a.pixels[i]) - int(b.pixels[i]));
  return s / static_cast<double>(a.pixels.size());
}

}  // namespace

TEST_CASE("stain estimation rejects white and single-stain patches") {
  CHECK_THROWS_AS(estimate_stains(RgbPatch(64, 64, 255)), TooTransparentError);
  CHECK_THROWS_AS(estimate_stains(RgbPatch(64, 64, 250)), TooTransparentError);
  CHECK_THROWS_AS(estimate_stains(synth_he::make_single_stain({0.65, 0.70, 0.29}, 3)), DegenerateInputError);
}

TEST_CASE("stain estimation recovers Beer-Lambert directions") {
  for (const auto& truth : {synth_he::reference_stains(), synth_he::alternate_stains()}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto patch = synth_he::make_patch(truth, seed);
      const StainProfile p = estimate_stains(patch);
      CHECK(stain_angle_deg(p.stain_matrix, truth) < 5.0);
      CHECK(std::abs(p.stain_matrix.col(0).norm() - 1.0) < 1e-9);
      CHECK(std::abs(p.stain_matrix.col(1).norm() - 1.0) < 1e-9);
      // Hematoxylin is the column closer to the true H direction.
      CHECK(vector_angle_deg(p.stain_matrix.col(0), truth.col(0)) <
            vector_angle_deg(p.stain_matrix.col(0), truth.col(1)));
      CHECK(p.max_concentrations[0] > 0);
      CHECK(p.max_concentrations[1] > 0);
    }
  }
}

TEST_CASE("normalizing a patch to its own profile is near identity") {
  const auto patch = synth_he::make_patch(synth_he::reference_stains(), 11);
  const StainProfile self = estimate_stains(patch);
  const RgbPatch out = normalize_patch(patch, self, self);
  CHECK(mean_abs_diff(patch, out) < 3.0);

  // White background stays white.
  for (std::size_t i = 0; i < patch.pixel_count(); ++i) {
    const bool white = patch.pixels[i * 3] >= 254 && patch.pixels[i * 3 + 1] >= 254 && patch.pixels[i * 3 + 2] >= 254;
    if (!white) continue;
    for (int c = 0; c < 3; ++c) CHECK(out.pixels[i * 3 + c] >= 252);
  }

  // Re-estimating on the self-normalized output barely moves the directions.
  const StainProfile again = estimate_stains(out);
  CHECK(stain_angle_deg(again.stain_matrix, self.stain_matrix) < 1.0);
}

TEST_CASE("normalizing toward a reference moves the stain directions") {
  const auto ref_patch = synth_he::make_patch(synth_he::reference_stains(), 21);
  const StainProfile reference = estimate_stains(ref_patch);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto src = synth_he::make_patch(synth_he::alternate_stains(), 100 + seed);
    const RgbPatch out = normalize_patch(src, reference);
    const StainProfile after = estimate_stains(out);
    CHECK(stain_angle_deg(after.stain_matrix, reference.stain_matrix) < 5.0);
    CHECK(normalize_patch(src, reference) == out);
  }
}

TEST_CASE("stain concentrations are non-negative") {
  const auto patch = synth_he::make_patch(synth_he::reference_stains(), 5);
  const auto c = stain_concentrations(patch, synth_he::reference_stains(), 255.0);
  CHECK(c.cols() == static_cast<Eigen::Index>(patch.pixel_count()));
  CHECK(c.minCoeff() >= 0.0);
}

TEST_CASE("angles between vectors") {
  CHECK(vector_angle_deg({1, 0, 0}, {0, 1, 0}) == doctest::Approx(90.0));
  CHECK(vector_angle_deg({1, 1, 0}, {2, 2, 0}) < 1e-5);
  const auto s = synth_he::reference_stains();
  CHECK(stain_angle_deg(s, s) < 1e-5);
}

TEST_CASE("png and profile round trips") {
  TempDir dir("stain_io");
  const auto patch = synth_he::make_patch(synth_he::reference_stains(), 2, 33);
  write_png(patch, dir / "a.png");
  CHECK(read_png(dir / "a.png") == patch);
  CHECK(encode_png(patch) == encode_png(patch));
  CHECK_THROWS_AS(read_png(dir / "missing.png"), IoError);
  write_file_bytes(dir / "junk.png", std::vector<std::uint8_t>{1, 2, 3, 4});
  CHECK_THROWS(read_png(dir / "junk.png"));

  const StainProfile p = estimate_stains(patch);
  p.save(dir / "ref.profile");
  const StainProfile q = StainProfile::load(dir / "ref.profile");
  CHECK((q.stain_matrix - p.stain_matrix).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(q.max_concentrations == p.max_concentrations);
  CHECK(q.params.beta == p.params.beta);

  const StainProfile from_png = load_reference(dir / "a.png");
  CHECK((from_png.stain_matrix - p.stain_matrix).cwiseAbs().maxCoeff() < 1e-15);
  const StainProfile from_file = load_reference(dir / "ref.profile");
  CHECK(from_file.max_concentrations == p.max_concentrations);

  StainProfile bad = p;
  bad.stain_matrix.col(0) *= 2.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("parameter validation") {
  MacenkoParams p;
  p.io = 0;
  CHECK_THROWS_AS(p.validate(), ValidationError);
  p = {};
  p.alpha = 50;
  CHECK_THROWS_AS(p.validate(), ValidationError);
  p = {};
  p.beta = -1;
  CHECK_THROWS_AS(p.validate(), ValidationError);
}

TEST_CASE("batch normalization reports per-file outcomes") {
  TempDir dir("stain_batch");
  const StainProfile reference = estimate_stains(synth_he::make_patch(synth_he::reference_stains(), 1));

  std::filesystem::create_directories(dir / "empty");
  const auto none = batch_normalize(dir / "empty", reference, dir / "empty_out");
  CHECK(none.empty());
  CHECK(read_file_bytes(dir / "empty_out" / "report.csv").size() == std::string("path,status,angle_deg\n").size());

  std::filesystem::create_directories(dir / "in");
  write_png(synth_he::make_patch(synth_he::alternate_stains(), 7), dir / "in" / "b.png");
  write_png(RgbPatch(40, 40, 255), dir / "in" / "a_white.png");
  write_png(synth_he::make_patch(synth_he::reference_stains(), 8), dir / "in" / "c.png");
  const auto rows = batch_normalize(dir / "in", reference, dir / "out");
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].path == "a_white.png");
  CHECK(rows[0].status.find("too transparent") != std::string::npos);
  CHECK(!rows[0].angle_deg);
  CHECK(rows[1].status == "ok");
  CHECK(rows[2].status == "ok");
  CHECK(rows[1].angle_deg);
  CHECK(std::filesystem::exists(dir / "out" / "b.png"));
  CHECK(!std::filesystem::exists(dir / "out" / "a_white.png"));

  const auto first_b = read_file_bytes(dir / "out" / "b.png");
  const auto first_report = read_file_bytes(dir / "out" / "report.csv");
  batch_normalize(dir / "in", reference, dir / "out2", {}, 3);
  CHECK(read_file_bytes(dir / "out2" / "b.png") == first_b);
  CHECK(read_file_bytes(dir / "out2" / "report.csv") == first_report);

  CHECK_THROWS_AS(batch_normalize(dir / "nope", reference, dir / "x"), IoError);
  CHECK_THROWS_AS(batch_normalize(dir / "in", reference, dir / "in"), ValidationError);
}
