#pragma once

#include <array>
#include <cmath>
#include <random>
#include <stdexcept>

#include "cimsim/rng.hpp"

namespace cimsim {

inline constexpr int kComparators = 15;
inline constexpr int kAdcStates = kComparators + 1;

using ComparatorArray = std::array<double, kComparators>;

/// Tunable reference generator of the 4-bit flash ADC. Comparator j fires at
/// offset + j * step; v_blt sets the full-scale bitline voltage of the analog
/// front end (see mac_voltage).
struct AdcRefConfig {
  double offset = 0.3 / 16.0;
  double step = 0.3 / 16.0;
  double v_blt = 0.3;

  void validate() const {
    if (!(step > 0.0)) throw std::invalid_argument("AdcRefConfig: step must be > 0");
    if (!(offset >= 0.0)) throw std::invalid_argument("AdcRefConfig: offset must be >= 0");
    if (!(v_blt > offset)) throw std::invalid_argument("AdcRefConfig: v_blt must exceed offset");
  }

  bool valid() const { return step > 0.0 && offset >= 0.0 && v_blt > offset; }

  friend bool operator==(const AdcRefConfig&, const AdcRefConfig&) = default;
};

struct ComparatorMismatch {
  ComparatorArray static_offsets{};
  double dynamic_sigma = 0.0;

  friend bool operator==(const ComparatorMismatch&, const ComparatorMismatch&) = default;
};

/// Mismatch magnitudes used when instantiating ADC lanes.
struct AdcParams {
  AdcRefConfig ref{};
  double sigma_static = 0.25 * (0.3 / 16.0);
  double sigma_dynamic = 0.1 * (0.3 / 16.0);
};

inline ComparatorArray thresholds(const AdcRefConfig& cfg) {
  ComparatorArray t{};
  for (int j = 0; j < kComparators; ++j) t[j] = cfg.offset + j * cfg.step;
  return t;
}

/// Thermometer-to-binary decode given one standard-normal draw per comparator
/// for the dynamic threshold noise.
inline int decode(double v, const AdcRefConfig& cfg, const ComparatorMismatch& mismatch,
                  const ComparatorArray& unit_noise) {
  int code = 0;
  for (int j = 0; j < kComparators; ++j) {
    const double t = cfg.offset + j * cfg.step + mismatch.static_offsets[j] +
                     mismatch.dynamic_sigma * unit_noise[j];
    if (v >= t) ++code;
  }
  return code;
}

inline ComparatorArray draw_comparator_noise(Stream& rng) {
  ComparatorArray z{};
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& x : z) x = n(rng);
  return z;
}

inline int decode(double v, const AdcRefConfig& cfg, const ComparatorMismatch& mismatch,
                  Stream& rng) {
  if (!std::isfinite(v)) throw std::invalid_argument("decode: non-finite voltage");
  if (mismatch.dynamic_sigma == 0.0) return decode(v, cfg, mismatch, ComparatorArray{});
  return decode(v, cfg, mismatch, draw_comparator_noise(rng));
}

inline ComparatorMismatch sample_mismatch(double sigma_static, double sigma_dynamic, Stream& rng) {
  if (!(sigma_static >= 0.0) || !(sigma_dynamic >= 0.0))
    throw std::invalid_argument("sample_mismatch: sigmas must be >= 0");
  ComparatorMismatch m;
  m.dynamic_sigma = sigma_dynamic;
  if (sigma_static > 0.0) {
    std::normal_distribution<double> n(0.0, sigma_static);
    for (auto& o : m.static_offsets) o = n(rng);
  }
  return m;
}

}  // namespace cimsim
