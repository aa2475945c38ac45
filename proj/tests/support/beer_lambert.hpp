#pragma once

// Synthetic H&E patches from the Beer-Lambert forward model:
// I = io * 10^(-S c) - 1 for stain matrix S and concentrations c >= 0.

#include <Eigen/Dense>

#include "bagforge/rng.hpp"
#include "bagforge/stainnorm.hpp"

namespace synth_he {

inline Eigen::Matrix<double, 3, 2> stains(Eigen::Vector3d h, Eigen::Vector3d e) {
  Eigen::Matrix<double, 3, 2> s;
  s.col(0) = h.normalized();
  s.col(1) = e.normalized();
  return s;
}

/// Commonly quoted H&E optical-density directions.
inline Eigen::Matrix<double, 3, 2> reference_stains() { return stains({0.65, 0.70, 0.29}, {0.07, 0.99, 0.11}); }
inline Eigen::Matrix<double, 3, 2> alternate_stains() { return stains({0.55, 0.76, 0.35}, {0.15, 0.95, 0.27}); }

/// `background` is the fraction of empty (white) pixels.
inline bagforge::RgbPatch make_patch(const Eigen::Matrix<double, 3, 2>& s, std::uint64_t seed, int size = 64,
                                     double max_h = 1.2, double max_e = 0.8, double background = 0.2,
                                     double io = 255.0) {
  bagforge::Rng rng(seed);
  bagforge::RgbPatch p(size, size);
  for (std::size_t i = 0; i < p.pixel_count(); ++i) {
    Eigen::Vector2d c(0, 0);
    if (rng.uniform() >= background) c = Eigen::Vector2d(rng.uniform() * max_h, rng.uniform() * max_e);
    const Eigen::Vector3d od = s * c;
    for (int ch = 0; ch < 3; ++ch) {
      const double v = io * std::pow(10.0, -od(ch)) - 1.0;
      p.pixels[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
  }
  return p;
}

/// Single-stain patch (rank-1 optical density).
inline bagforge::RgbPatch make_single_stain(const Eigen::Vector3d& dir, std::uint64_t seed, int size = 64) {
  Eigen::Matrix<double, 3, 2> s;
  s.col(0) = dir.normalized();
  s.col(1) = dir.normalized();
  bagforge::Rng rng(seed);
  bagforge::RgbPatch p(size, size);
  for (std::size_t i = 0; i < p.pixel_count(); ++i) {
    const Eigen::Vector3d od = s.col(0) * (0.2 + rng.uniform());
    for (int ch = 0; ch < 3; ++ch) {
      const double v = 255.0 * std::pow(10.0, -od(ch)) - 1.0;
      p.pixels[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
  }
  return p;
}

}  // namespace synth_he
