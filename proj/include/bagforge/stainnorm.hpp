#pragma once

// Macenko stain normalization for 8-bit RGB patches.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bagforge/errors.hpp"
#include "bagforge/kvdoc.hpp"

namespace bagforge {

class TooTransparentError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DegenerateInputError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

struct RgbPatch {
  int width = 0;
  int height = 0;
  /// Row-major interleaved RGB, width * height * 3 bytes.
  std::vector<std::uint8_t> pixels;

  RgbPatch() = default;
  RgbPatch(int w, int h, std::uint8_t fill = 255);

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
  std::uint8_t& at(int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  void validate() const;
  bool operator==(const RgbPatch&) const = default;
};

RgbPatch read_png(const std::filesystem::path& path);
void write_png(const RgbPatch& patch, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_png(const RgbPatch& patch);

struct MacenkoParams {
  double io = 255.0;
  double beta = 0.15;
  double alpha = 1.0;

  void validate() const;
};

struct StainProfile {
  /// Columns: hematoxylin, eosin optical-density directions (unit norm).
  Eigen::Matrix<double, 3, 2> stain_matrix = Eigen::Matrix<double, 3, 2>::Zero();
  std::array<double, 2> max_concentrations{0.0, 0.0};
  MacenkoParams params;

  void validate() const;
  KvDoc to_doc() const;
  static StainProfile from_doc(const KvDoc& doc);
  void save(const std::filesystem::path& path) const;
  static StainProfile load(const std::filesystem::path& path);
};

/// Minimum count of non-transparent pixels needed for estimation.
inline constexpr std::size_t kMinTissuePixels = 100;

StainProfile estimate_stains(const RgbPatch& patch, const MacenkoParams& params = {});

/// Per-pixel concentrations (2 x N) by least squares, negatives clamped to 0.
Eigen::Matrix<double, 2, Eigen::Dynamic> stain_concentrations(const RgbPatch& patch,
                                                              const Eigen::Matrix<double, 3, 2>& stains, double io);

RgbPatch normalize_patch(const RgbPatch& patch, const StainProfile& source, const StainProfile& reference);
/// Estimates the source profile in-line.
RgbPatch normalize_patch(const RgbPatch& patch, const StainProfile& reference);

/// Largest per-stain angle (degrees) between two profiles' directions.
double stain_angle_deg(const Eigen::Matrix<double, 3, 2>& a, const Eigen::Matrix<double, 3, 2>& b);
double vector_angle_deg(const Eigen::Vector3d& a, const Eigen::Vector3d& b);

struct BatchRow {
  std::string path;
  std::string status;
  std::optional<double> angle_deg;
};

/// Normalizes every *.png in `input_dir` (sorted by name) into `output_dir`
/// and writes output_dir/report.csv. Per-file failures become report rows.
/// `params` governs the per-patch source estimates.
std::vector<BatchRow> batch_normalize(const std::filesystem::path& input_dir, const StainProfile& reference,
                                      const std::filesystem::path& output_dir, const MacenkoParams& params = {},
                                      unsigned threads = 1);
std::string batch_report_csv(const std::vector<BatchRow>& rows);

/// Accepts either a PNG reference patch or a saved profile file.
StainProfile load_reference(const std::filesystem::path& path, const MacenkoParams& params = {});

}  // namespace bagforge
