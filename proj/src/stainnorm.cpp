#include "bagforge/stainnorm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <thread>

#include <Eigen/Eigenvalues>

#include "bagforge/bag.hpp"

namespace bagforge {

namespace {

using Stains = Eigen::Matrix<double, 3, 2>;
using OdMatrix = Eigen::Matrix<double, 3, Eigen::Dynamic>;

OdMatrix optical_density(const RgbPatch& patch, double io) {
  const std::size_t n = patch.pixel_count();
  OdMatrix od(3, static_cast<Eigen::Index>(n));
  // 256 possible intensities; a lookup keeps the log out of the pixel loop.
  std::array<double, 256> lut{};
  for (int v = 0; v < 256; ++v) lut[v] = -std::log10((v + 1.0) / io);
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) od(c, static_cast<Eigen::Index>(i)) = lut[patch.pixels[i * 3 + c]];
  }
  return od;
}

// Linear interpolation between order statistics.
double percentile(std::vector<double> values, double p) {
  std::sort(values.begin(), values.end());
  const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  for (auto& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return e;
}

}  // namespace

void MacenkoParams::validate() const {
  if (!(io > 0 && std::isfinite(io))) throw ValidationError("io must be positive");
  if (!(beta >= 0 && std::isfinite(beta))) throw ValidationError("beta must be >= 0");
  if (!(alpha >= 0 && alpha < 50)) throw ValidationError("alpha must be in [0, 50)");
}

void StainProfile::validate() const {
  params.validate();
  for (int s = 0; s < 2; ++s) {
    const double norm = stain_matrix.col(s).norm();
    if (!std::isfinite(norm) || std::abs(norm - 1.0) > 1e-6) throw ValidationError("stain vectors must be unit norm");
    if (!(max_concentrations[s] > 0 && std::isfinite(max_concentrations[s]))) {
      throw ValidationError("max concentrations must be positive");
    }
  }
}

KvDoc StainProfile::to_doc() const {
  KvDoc doc;
  doc.set("format", "stain-profile 1");
  const char* names[2] = {"hematoxylin", "eosin"};
  const char* ch[3] = {"r", "g", "b"};
  for (int s = 0; s < 2; ++s) {
    for (int c = 0; c < 3; ++c) doc.set(std::string(names[s]) + "." + ch[c], stain_matrix(c, s));
  }
  doc.set("max_concentration.hematoxylin", max_concentrations[0]);
  doc.set("max_concentration.eosin", max_concentrations[1]);
  doc.set("io", params.io);
  doc.set("beta", params.beta);
  doc.set("alpha", params.alpha);
  return doc;
}

StainProfile StainProfile::from_doc(const KvDoc& doc) {
  StainProfile p;
  const char* names[2] = {"hematoxylin", "eosin"};
  const char* ch[3] = {"r", "g", "b"};
  for (int s = 0; s < 2; ++s) {
    for (int c = 0; c < 3; ++c) {
      const std::string key = std::string(names[s]) + "." + ch[c];
      p.stain_matrix(c, s) = parse_double(doc.at(key), key);
    }
  }
  p.max_concentrations[0] = parse_double(doc.at("max_concentration.hematoxylin"), "max_concentration.hematoxylin");
  p.max_concentrations[1] = parse_double(doc.at("max_concentration.eosin"), "max_concentration.eosin");
  p.params.io = doc.get_double("io", 255.0);
  p.params.beta = doc.get_double("beta", 0.15);
  p.params.alpha = doc.get_double("alpha", 1.0);
  p.validate();
  return p;
}

void StainProfile::save(const std::filesystem::path& path) const {
  validate();
  to_doc().save(path);
}

StainProfile StainProfile::load(const std::filesystem::path& path) { return from_doc(KvDoc::load(path)); }

double vector_angle_deg(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  const double c = std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

double stain_angle_deg(const Stains& a, const Stains& b) {
  return std::max(vector_angle_deg(a.col(0), b.col(0)), vector_angle_deg(a.col(1), b.col(1)));
}

StainProfile estimate_stains(const RgbPatch& patch, const MacenkoParams& params) {
  patch.validate();
  params.validate();
  const OdMatrix od = optical_density(patch, params.io);

  std::vector<Eigen::Index> tissue;
  for (Eigen::Index i = 0; i < od.cols(); ++i) {
    if (od.col(i).maxCoeff() > params.beta) tissue.push_back(i);
  }
  if (tissue.size() < kMinTissuePixels) {
    throw TooTransparentError("too transparent: " + std::to_string(tissue.size()) +
                              " pixels exceed the OD threshold, need " + std::to_string(kMinTissuePixels));
  }
  OdMatrix t(3, static_cast<Eigen::Index>(tissue.size()));
  for (std::size_t i = 0; i < tissue.size(); ++i) t.col(static_cast<Eigen::Index>(i)) = od.col(tissue[i]);

  const Eigen::Vector3d mean = t.rowwise().mean();
  const OdMatrix centered = t.colwise() - mean;
  const Eigen::Matrix3d cov = centered * centered.transpose() / static_cast<double>(t.cols() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  if (eig.info() != Eigen::Success) throw DegenerateInputError("degenerate input: eigen-decomposition failed");
  const Eigen::Vector3d lambda = eig.eigenvalues();  // ascending
  if (!(lambda(2) > 0) || lambda(1) <= 1e-3 * lambda(2)) {
    throw DegenerateInputError("degenerate input: optical-density scatter is rank-deficient (single stain?)");
  }
  Eigen::Vector3d v1 = eig.eigenvectors().col(2);
  Eigen::Vector3d v2 = eig.eigenvectors().col(1);
  if (v1.sum() < 0) v1 = -v1;
  if (v2.sum() < 0) v2 = -v2;

  std::vector<double> phi(static_cast<std::size_t>(t.cols()));
  for (Eigen::Index i = 0; i < t.cols(); ++i) phi[static_cast<std::size_t>(i)] = std::atan2(t.col(i).dot(v2), t.col(i).dot(v1));
  const double lo = percentile(phi, params.alpha);
  const double hi = percentile(phi, 100.0 - params.alpha);
  Eigen::Vector3d a = (v1 * std::cos(lo) + v2 * std::sin(lo)).normalized();
  Eigen::Vector3d b = (v1 * std::cos(hi) + v2 * std::sin(hi)).normalized();
  if (vector_angle_deg(a, b) < 1e-3) throw DegenerateInputError("degenerate input: stain directions coincide");

  StainProfile profile;
  profile.params = params;
  if (a(0) >= b(0)) {
    profile.stain_matrix.col(0) = a;
    profile.stain_matrix.col(1) = b;
  } else {
    profile.stain_matrix.col(0) = b;
    profile.stain_matrix.col(1) = a;
  }
  const auto conc = stain_concentrations(patch, profile.stain_matrix, params.io);
  for (int s = 0; s < 2; ++s) {
    std::vector<double> row;
    row.reserve(static_cast<std::size_t>(conc.cols()));
    for (Eigen::Index i = 0; i < conc.cols(); ++i) row.push_back(conc(s, i));
    profile.max_concentrations[s] = percentile(std::move(row), 99.0);
    if (!(profile.max_concentrations[s] > 0)) {
      throw DegenerateInputError("degenerate input: stain " + std::to_string(s) + " has no positive concentration");
    }
  }
  return profile;
}

Eigen::Matrix<double, 2, Eigen::Dynamic> stain_concentrations(const RgbPatch& patch, const Stains& stains, double io) {
  const OdMatrix od = optical_density(patch, io);
  const Eigen::Matrix2d gram = stains.transpose() * stains;
  if (std::abs(gram.determinant()) < 1e-12) throw DegenerateInputError("degenerate input: stain matrix is singular");
  const Eigen::Matrix<double, 2, 3> pinv = gram.inverse() * stains.transpose();
  Eigen::Matrix<double, 2, Eigen::Dynamic> c = pinv * od;
  return c.cwiseMax(0.0);
}

RgbPatch normalize_patch(const RgbPatch& patch, const StainProfile& source, const StainProfile& reference) {
  patch.validate();
  source.validate();
  reference.validate();
  auto conc = stain_concentrations(patch, source.stain_matrix, source.params.io);
  for (int s = 0; s < 2; ++s) conc.row(s) *= reference.max_concentrations[s] / source.max_concentrations[s];
  const OdMatrix od = reference.stain_matrix * conc;
  RgbPatch out(patch.width, patch.height);
  const double io = reference.params.io;
  for (Eigen::Index i = 0; i < od.cols(); ++i) {
    for (int c = 0; c < 3; ++c) {
      // Inverse of OD = -log10((I + 1) / io).
      const double v = io * std::pow(10.0, -od(c, i)) - 1.0;
      out.pixels[static_cast<std::size_t>(i) * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
  }
  return out;
}

RgbPatch normalize_patch(const RgbPatch& patch, const StainProfile& reference) {
  return normalize_patch(patch, estimate_stains(patch, reference.params), reference);
}

std::vector<BatchRow> batch_normalize(const std::filesystem::path& input_dir, const StainProfile& reference,
                                      const std::filesystem::path& output_dir, const MacenkoParams& params,
                                      unsigned threads) {
  namespace fs = std::filesystem;
  reference.validate();
  params.validate();
  if (!fs::is_directory(input_dir)) throw IoError("input directory not found: " + input_dir.string());
  fs::create_directories(output_dir);
  if (fs::equivalent(input_dir, output_dir)) throw ValidationError("output directory must differ from input directory");

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(input_dir)) {
    if (entry.is_regular_file() && lower_ext(entry.path()) == ".png") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  std::vector<BatchRow> rows(files.size());
  auto work = [&](std::size_t i) {
    BatchRow& row = rows[i];
    row.path = files[i].filename().string();
    try {
      const RgbPatch patch = read_png(files[i]);
      const StainProfile source = estimate_stains(patch, params);
      write_png(normalize_patch(patch, source, reference), output_dir / files[i].filename());
      row.status = "ok";
      row.angle_deg = stain_angle_deg(source.stain_matrix, reference.stain_matrix);
    } catch (const std::exception& e) {
      row.status = e.what();
    }
  };
  const unsigned n_threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(files.size())));
  if (n_threads <= 1) {
    for (std::size_t i = 0; i < files.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < n_threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < files.size(); i += n_threads) work(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  const std::string csv = batch_report_csv(rows);
  write_file_bytes(output_dir / "report.csv", std::vector<std::uint8_t>(csv.begin(), csv.end()));
  return rows;
}

std::string batch_report_csv(const std::vector<BatchRow>& rows) {
  std::string out = "path,status,angle_deg\n";
  for (const auto& r : rows) {
    out += csv_cell(r.path) + "," + csv_cell(r.status) + "," + (r.angle_deg ? format_double(*r.angle_deg) : "") + "\n";
  }
  return out;
}

StainProfile load_reference(const std::filesystem::path& path, const MacenkoParams& params) {
  if (lower_ext(path) == ".png") return estimate_stains(read_png(path), params);
  return StainProfile::load(path);
}

}  // namespace bagforge
