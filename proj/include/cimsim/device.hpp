#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cimsim/rng.hpp"

namespace cimsim {

/// Programmed resistance state. HRS encodes bit 0, LRS encodes bit 1.
enum class CellState : std::uint8_t { kHrs = 0, kLrs = 1 };

inline CellState state_for_bit(int bit) { return bit ? CellState::kLrs : CellState::kHrs; }

/// Log-normal conductance distribution per programmed state, in normalized
/// siemens (LRS nominal = 1).
struct CellDistParams {
  double g_lrs_mu = 0.0;
  double g_lrs_sigma = 0.05;
  double g_hrs_mu = std::log(0.1);
  double g_hrs_sigma = 0.15;

  double g_lrs_nom() const { return std::exp(g_lrs_mu); }
  double g_hrs_nom() const { return std::exp(g_hrs_mu); }

  double mu(CellState s) const { return s == CellState::kLrs ? g_lrs_mu : g_hrs_mu; }
  double sigma(CellState s) const { return s == CellState::kLrs ? g_lrs_sigma : g_hrs_sigma; }
  double nominal(CellState s) const { return std::exp(mu(s)); }

  void validate() const {
    if (!(g_lrs_sigma >= 0.0) || !(g_hrs_sigma >= 0.0))
      throw std::invalid_argument("CellDistParams: sigmas must be >= 0");
    if (!(g_lrs_mu > g_hrs_mu))
      throw std::invalid_argument("CellDistParams: LRS conductance must exceed HRS (on/off ratio > 1)");
  }
};

struct Cell {
  CellState programmed = CellState::kHrs;
  double g = 0.0;
  std::uint64_t stress_cycles = 0;

  int bit() const { return programmed == CellState::kLrs ? 1 : 0; }
};

/// Read-disturb drift law. Under stress, a cell's conductance approaches the
/// nominal LRS conductance geometrically:
///
///   g' = g_lrs_nom - (g_lrs_nom - g) * (1 - r)^cycles,
///   r  = rate * (v_bl / v_ref_bl)^gamma_v,
///
/// with rate = alpha_hrs for HRS cells and beta_lrs for LRS cells.
struct DriftParams {
  double alpha_hrs = 6e-7;
  double beta_lrs = 6e-9;
  double v_ref_bl = 1.3;
  double gamma_v = 12.0;
  /// Conductance the drift approaches.
  double g_lrs_nom = 1.0;
  /// Wall-clock duration of one stress cycle, used only to convert seconds to
  /// cycles. The measured cycle is 5/64M s.
  double seconds_per_cycle = 5.0 / 64e6;

  void validate() const {
    if (!(beta_lrs >= 0.0) || !(alpha_hrs >= beta_lrs))
      throw std::invalid_argument("DriftParams: require alpha_hrs >= beta_lrs >= 0");
    if (!(gamma_v >= 0.0)) throw std::invalid_argument("DriftParams: gamma_v must be >= 0");
    if (!(v_ref_bl > 0.0)) throw std::invalid_argument("DriftParams: v_ref_bl must be > 0");
    if (!(g_lrs_nom > 0.0)) throw std::invalid_argument("DriftParams: g_lrs_nom must be > 0");
    if (!(seconds_per_cycle > 0.0))
      throw std::invalid_argument("DriftParams: seconds_per_cycle must be > 0");
  }

  /// Per-cycle approach rate at the given bitline voltage, capped at 1.
  double rate(CellState s, double v_bl) const {
    const double base = s == CellState::kHrs ? alpha_hrs : beta_lrs;
    if (base == 0.0 || v_bl <= 0.0) return 0.0;
    return std::min(1.0, base * std::pow(v_bl / v_ref_bl, gamma_v));
  }

  std::int64_t cycles_for_seconds(double seconds) const {
    return static_cast<std::int64_t>(std::llround(seconds / seconds_per_cycle));
  }
};

struct StressEvent {
  double v_bl = 0.0;
  /// Accepted for completeness; the drift law does not depend on it.
  double v_wl = 1.1;
  std::int64_t cycles = 0;
};

inline double sample_conductance(CellState state, const CellDistParams& params, Stream& rng) {
  const double sigma = params.sigma(state);
  if (sigma == 0.0) return params.nominal(state);
  std::normal_distribution<double> n(params.mu(state), sigma);
  return std::exp(n(rng));
}

/// Conductance after `cycles` of stress at `v_bl`, without touching the cell.
inline double stressed_conductance(const Cell& cell, double v_bl, std::int64_t cycles,
                                   const DriftParams& params) {
  if (cycles < 0) throw std::invalid_argument("apply_stress: negative cycle count");
  if (cycles == 0) return cell.g;
  const double r = params.rate(cell.programmed, v_bl);
  if (r == 0.0) return cell.g;
  const double keep = r >= 1.0 ? 0.0 : std::exp(static_cast<double>(cycles) * std::log1p(-r));
  double g = params.g_lrs_nom - (params.g_lrs_nom - cell.g) * keep;
  if (cell.programmed == CellState::kHrs) g = std::min(g, std::max(cell.g, params.g_lrs_nom));
  return g;
}

inline Cell apply_stress(const Cell& cell, const StressEvent& stress, const DriftParams& params) {
  if (stress.cycles < 0) throw std::invalid_argument("apply_stress: negative cycle count");
  if (stress.v_bl < 0.0 || stress.v_wl < 0.0)
    throw std::invalid_argument("apply_stress: voltages must be >= 0");
  Cell out = cell;
  out.g = stressed_conductance(cell, stress.v_bl, stress.cycles, params);
  out.stress_cycles += static_cast<std::uint64_t>(stress.cycles);
  return out;
}

inline std::vector<double> drift_trajectory(Cell cell, const std::vector<StressEvent>& schedule,
                                            const DriftParams& params) {
  if (schedule.empty()) throw std::invalid_argument("drift_trajectory: empty schedule");
  std::vector<double> g;
  g.reserve(schedule.size());
  for (const auto& ev : schedule) {
    cell = apply_stress(cell, ev, params);
    g.push_back(cell.g);
  }
  return g;
}

}  // namespace cimsim
