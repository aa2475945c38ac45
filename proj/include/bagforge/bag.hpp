#pragma once

// Embedding bags: one slide as a k x d matrix of patch features plus the
// clinical fields needed by the classification and survival tasks.
//
// On-disk MILB layout (little-endian):
//   0..3    magic "MILB"
//   4..5    version (u16) = 1
//   6..9    metadata length H (u32)
//   10..    H bytes of UTF-8 `key = value` metadata
//   ...     k*d float32 features, row-major
//   ...     CRC-32 (IEEE) of the feature bytes (u32)

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bagforge/errors.hpp"

namespace bagforge {

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CoordMatrix = Eigen::Matrix<std::int32_t, Eigen::Dynamic, 2, Eigen::RowMajor>;

inline constexpr std::uint16_t kMilbVersion = 1;
inline constexpr std::size_t kMilbPreambleBytes = 10;

struct EncoderInfo {
  std::string name;
  std::int64_t dim = 0;
};

struct EmbeddingBag {
  std::string slide_id;
  std::string patient_id;
  FeatureMatrix features;
  /// 1 = treatment effective.
  std::optional<int> label;
  std::optional<double> pfs_months;
  /// Stored under the `censored` key. true (1) means the progression event
  /// was observed; false (0) means the subject is censored.
  std::optional<bool> event;
  std::optional<std::string> subtype;
  EncoderInfo encoder;
  /// Slide-level (x, y) per patch; -1 when unknown.
  std::optional<CoordMatrix> patch_coords;

  Eigen::Index k() const { return features.rows(); }
  Eigen::Index d() const { return features.cols(); }

  /// Throws ValidationError naming the first failed field.
  void validate() const;
};

bool bags_equal(const EmbeddingBag& a, const EmbeddingBag& b);

/// CRC-32 with the IEEE 802.3 polynomial.
std::uint32_t crc32_ieee(const void* data, std::size_t size);

std::vector<std::uint8_t> encode_bag(const EmbeddingBag& bag);
EmbeddingBag decode_bag(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

void write_bag(const EmbeddingBag& bag, const std::filesystem::path& path);
EmbeddingBag read_bag(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

namespace le {
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v);
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);
void put_f64(std::vector<std::uint8_t>& out, double v);
std::uint16_t get_u16(const std::uint8_t* p);
std::uint32_t get_u32(const std::uint8_t* p);
float get_f32(const std::uint8_t* p);
double get_f64(const std::uint8_t* p);
}  // namespace le

}  // namespace bagforge
