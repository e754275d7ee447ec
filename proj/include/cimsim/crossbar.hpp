#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cimsim/adc.hpp"
#include "cimsim/device.hpp"
#include "cimsim/rng.hpp"

namespace cimsim {

inline constexpr int kRows = 81;
inline constexpr int kCols = 64;
inline constexpr int kGroupSize = 9;
inline constexpr int kGroupsPerColumn = kRows / kGroupSize;
inline constexpr int kLanes = 8;
inline constexpr int kColsPerLane = kCols / kLanes;
inline constexpr int kGroupsPerModule = kGroupsPerColumn * kCols;
inline constexpr int kGoldenValues = kGroupSize + 1;
inline constexpr int kWordlinePatterns = 1 << kGroupSize;

static_assert(kGroupsPerColumn * kGroupSize == kRows);
static_assert(kLanes * kColsPerLane == kCols);

/// Nine-bit wordline input; bit i drives row i of the addressed group.
using Wordlines = std::uint16_t;

inline bool wordline_active(Wordlines wl, int i) { return (wl >> i) & 1u; }

/// One accumulation group: rows 9*group .. 9*group+8 of `column`.
struct AccGroupId {
  int column = 0;
  int group = 0;

  int lane() const { return column / kColsPerLane; }
  int first_row() const { return group * kGroupSize; }
  /// Position in group-row-major order (group * 64 + column).
  int index() const { return group * kCols + column; }

  static AccGroupId from_index(int i) { return {i % kCols, i / kCols}; }

  void validate() const {
    if (column < 0 || column >= kCols || group < 0 || group >= kGroupsPerColumn)
      throw std::out_of_range("AccGroupId out of range");
  }
};

/// Saturating bitline divider: v = v_blt * G / (G + g_half).
struct TransferParams {
  double v_read = 0.1;
  double g_half = 4.5;

  void validate() const {
    if (!(v_read > 0.0)) throw std::invalid_argument("TransferParams: v_read must be > 0");
    if (!(g_half > 0.0)) throw std::invalid_argument("TransferParams: g_half must be > 0");
  }

  double fraction(double g_sum) const { return g_sum / (g_sum + g_half); }
};

struct LaneState {
  AdcRefConfig ref{};
  ComparatorMismatch mismatch{};
};

/// Row-major 81x64 programmed-bit grid.
struct BitPattern {
  int rows = kRows;
  int cols = kCols;
  std::vector<std::uint8_t> bits;

  static BitPattern filled(std::uint8_t bit) {
    BitPattern p;
    p.bits.assign(kRows * kCols, bit);
    return p;
  }

  static BitPattern random(Stream rng, double p_lrs = 0.5) {
    BitPattern p;
    p.bits.resize(kRows * kCols);
    for (auto& b : p.bits) b = rng.uniform() < p_lrs ? 1 : 0;
    return p;
  }

  std::uint8_t at(int row, int col) const { return bits[row * cols + col]; }
};

struct CrossbarModule {
  std::vector<Cell> cells;  // row-major kRows x kCols
  std::array<LaneState, kLanes> lanes{};
  TransferParams xfer{};
  bool track_stress = false;

  const Cell& cell(int row, int col) const { return cells[row * kCols + col]; }
  Cell& cell(int row, int col) { return cells[row * kCols + col]; }

  const Cell& group_cell(const AccGroupId& gid, int i) const {
    return cell(gid.first_row() + i, gid.column);
  }
  Cell& group_cell(const AccGroupId& gid, int i) { return cell(gid.first_row() + i, gid.column); }

  const LaneState& lane_of(const AccGroupId& gid) const { return lanes[gid.lane()]; }

  std::array<std::uint8_t, kGroupSize> group_bits(const AccGroupId& gid) const {
    std::array<std::uint8_t, kGroupSize> b{};
    for (int i = 0; i < kGroupSize; ++i) b[i] = static_cast<std::uint8_t>(group_cell(gid, i).bit());
    return b;
  }
};

/// Programs a module. Conductances come from rng.substream(0); the mismatch of
/// lane l comes from rng.substream(1, l), so lanes never share draws.
inline CrossbarModule build_module(const CellDistParams& dist, const BitPattern& pattern,
                                   const AdcParams& adc, const TransferParams& xfer, Stream rng) {
  if (pattern.rows != kRows || pattern.cols != kCols ||
      pattern.bits.size() != static_cast<std::size_t>(kRows * kCols))
    throw std::invalid_argument("build_module: bit pattern must be exactly 81x64");
  dist.validate();
  xfer.validate();
  adc.ref.validate();

  CrossbarModule m;
  m.xfer = xfer;
  m.cells.resize(kRows * kCols);
  Stream cell_rng = rng.substream(0);
  for (std::size_t i = 0; i < m.cells.size(); ++i) {
    Cell& c = m.cells[i];
    c.programmed = state_for_bit(pattern.bits[i]);
    c.g = sample_conductance(c.programmed, dist, cell_rng);
  }
  for (int l = 0; l < kLanes; ++l) {
    Stream lane_rng = rng.substream(1, static_cast<std::uint64_t>(l));
    m.lanes[l].ref = adc.ref;
    m.lanes[l].mismatch = sample_mismatch(adc.sigma_static, adc.sigma_dynamic, lane_rng);
  }
  return m;
}

inline int golden_sum(const CrossbarModule& m, const AccGroupId& gid, Wordlines wl) {
  int s = 0;
  for (int i = 0; i < kGroupSize; ++i)
    if (wordline_active(wl, i)) s += m.group_cell(gid, i).bit();
  return s;
}

/// Sum of conductances on the activated rows of a group.
inline double activated_conductance(const CrossbarModule& m, const AccGroupId& gid, Wordlines wl) {
  double g = 0.0;
  for (int i = 0; i < kGroupSize; ++i)
    if (wordline_active(wl, i)) g += m.group_cell(gid, i).g;
  return g;
}

inline double mac_voltage(const CrossbarModule& m, const AccGroupId& gid, Wordlines wl) {
  if (wl >= kWordlinePatterns) throw std::invalid_argument("mac_voltage: wordline input exceeds 9 bits");
  return m.lane_of(gid).ref.v_blt * m.xfer.fraction(activated_conductance(m, gid, wl));
}

inline int read_group(const CrossbarModule& m, const AccGroupId& gid, Wordlines wl, Stream& rng) {
  const LaneState& lane = m.lane_of(gid);
  return decode(mac_voltage(m, gid, wl), lane.ref, lane.mismatch, rng);
}

/// read_group plus stress bookkeeping: when tracking is enabled, every HRS
/// cell of the group accrues one read-stress cycle.
inline int read_group_tracked(CrossbarModule& m, const AccGroupId& gid, Wordlines wl, Stream& rng) {
  const int code = read_group(m, gid, wl, rng);
  if (m.track_stress) {
    for (int i = 0; i < kGroupSize; ++i) {
      Cell& c = m.group_cell(gid, i);
      if (c.programmed == CellState::kHrs) ++c.stress_cycles;
    }
  }
  return code;
}

/// Applies a stress event uniformly to every cell of the module.
inline void stress_module(CrossbarModule& m, const StressEvent& ev, const DriftParams& params) {
  for (auto& c : m.cells) c = apply_stress(c, ev, params);
}

/// Noiseless voltage span of golden value k: from k LRS cells alone up to k
/// LRS cells plus every remaining cell in HRS, as fractions of v_blt.
inline std::array<std::array<double, 2>, kGoldenValues> level_spans(const CellDistParams& dist,
                                                                    const TransferParams& xfer) {
  std::array<std::array<double, 2>, kGoldenValues> spans{};
  const double gl = dist.g_lrs_nom();
  const double gh = dist.g_hrs_nom();
  for (int k = 0; k < kGoldenValues; ++k) {
    spans[k][0] = xfer.fraction(k * gl);
    spans[k][1] = xfer.fraction(k * gl + (kGroupSize - k) * gh);
  }
  return spans;
}

/// Reference config that separates all ten noiseless voltage levels with the
/// widest margin achievable by an arithmetic threshold ladder. Throws if no
/// ladder separates them (on/off ratio too small for the transfer curve).
///
/// Every choice of which comparator j_k sits in the gap above level k
/// (j_0 < ... < j_8) is tried; for a fixed choice the best margin is a
/// concave function of the step, maximized by ternary search.
inline AdcRefConfig ideal_reference(const CellDistParams& dist, const TransferParams& xfer,
                                    double v_blt = 0.3) {
  constexpr int kGaps = kGoldenValues - 1;
  const auto spans = level_spans(dist, xfer);
  std::array<double, kGaps> lo{};
  std::array<double, kGaps> hi{};
  for (int k = 0; k < kGaps; ++k) {
    lo[k] = spans[k][1];
    hi[k] = spans[k + 1][0];
  }

  std::array<int, kGaps> slot{};
  // For step s: offsets o satisfy lo_k + m <= o + j_k s <= hi_k - m. Returns
  // (margin, offset) with offset constrained to be > 0.
  auto evaluate = [&](double s) {
    double max_a = -1e300;
    double min_b = 1e300;
    for (int k = 0; k < kGaps; ++k) {
      max_a = std::max(max_a, lo[k] - slot[k] * s);
      min_b = std::min(min_b, hi[k] - slot[k] * s);
    }
    double o = 0.5 * (max_a + min_b);
    double m = 0.5 * (min_b - max_a);
    if (o <= 0.0) {
      // Pin the ladder just above zero so an all-off input reads code 0.
      o = 1e-9;
      m = std::min(min_b - o, o - max_a);
    }
    return std::pair{m, o};
  };

  double best_margin = 0.0;
  double best_offset = 0.0;
  double best_step = 0.0;
  const double s_max = spans[kGoldenValues - 1][0];
  auto search = [&] {
    double a = 1e-9;
    double b = s_max;
    for (int it = 0; it < 100; ++it) {
      const double m1 = a + (b - a) / 3.0;
      const double m2 = b - (b - a) / 3.0;
      if (evaluate(m1).first < evaluate(m2).first)
        a = m1;
      else
        b = m2;
    }
    const double s = 0.5 * (a + b);
    const auto [m, o] = evaluate(s);
    if (m > best_margin) {
      best_margin = m;
      best_offset = o;
      best_step = s;
    }
  };
  // Enumerate strictly increasing comparator slots.
  auto recurse = [&](auto&& self, int k, int first) -> void {
    if (k == kGaps) {
      search();
      return;
    }
    for (int j = first; j <= kComparators - (kGaps - k); ++j) {
      slot[k] = j;
      self(self, k + 1, j + 1);
    }
  };
  recurse(recurse, 0, 0);

  if (best_margin <= 0.0)
    throw std::runtime_error("ideal_reference: no threshold ladder separates the noiseless levels");
  return AdcRefConfig{best_offset * v_blt, best_step * v_blt, v_blt};
}

// ---------------------------------------------------------------------------
// JSON snapshot

inline constexpr int kModuleSnapshotVersion = 1;

inline nlohmann::json to_json(const AdcRefConfig& c) {
  return {{"offset", c.offset}, {"step", c.step}, {"v_blt", c.v_blt}};
}

inline AdcRefConfig ref_config_from_json(const nlohmann::json& j) {
  AdcRefConfig c{j.at("offset").get<double>(), j.at("step").get<double>(),
                 j.at("v_blt").get<double>()};
  c.validate();
  return c;
}

inline nlohmann::json to_json(const CrossbarModule& m) {
  nlohmann::json j;
  j["version"] = kModuleSnapshotVersion;
  j["rows"] = kRows;
  j["cols"] = kCols;
  std::vector<int> bits;
  std::vector<double> g;
  std::vector<std::uint64_t> stress;
  for (const auto& c : m.cells) {
    bits.push_back(c.bit());
    g.push_back(c.g);
    stress.push_back(c.stress_cycles);
  }
  j["bits"] = bits;
  j["g"] = g;
  j["stress_cycles"] = stress;
  j["xfer"] = {{"v_read", m.xfer.v_read}, {"g_half", m.xfer.g_half}};
  j["track_stress"] = m.track_stress;
  auto lanes = nlohmann::json::array();
  for (const auto& l : m.lanes) {
    lanes.push_back({{"ref", to_json(l.ref)},
                     {"static_offsets", l.mismatch.static_offsets},
                     {"dynamic_sigma", l.mismatch.dynamic_sigma}});
  }
  j["lanes"] = lanes;
  return j;
}

inline CrossbarModule module_from_json(const nlohmann::json& j) {
  if (j.at("version").get<int>() != kModuleSnapshotVersion)
    throw std::runtime_error("module snapshot: unsupported version");
  if (j.at("rows").get<int>() != kRows || j.at("cols").get<int>() != kCols)
    throw std::runtime_error("module snapshot: shape must be 81x64");
  const auto bits = j.at("bits").get<std::vector<int>>();
  const auto g = j.at("g").get<std::vector<double>>();
  const auto stress = j.at("stress_cycles").get<std::vector<std::uint64_t>>();
  if (bits.size() != kRows * kCols || g.size() != bits.size() || stress.size() != bits.size())
    throw std::runtime_error("module snapshot: cell arrays have wrong length");
  CrossbarModule m;
  m.cells.resize(bits.size());
  for (std::size_t i = 0; i < bits.size(); ++i)
    m.cells[i] = Cell{state_for_bit(bits[i]), g[i], stress[i]};
  m.xfer.v_read = j.at("xfer").at("v_read").get<double>();
  m.xfer.g_half = j.at("xfer").at("g_half").get<double>();
  m.track_stress = j.value("track_stress", false);
  const auto& lanes = j.at("lanes");
  if (lanes.size() != kLanes) throw std::runtime_error("module snapshot: expected 8 lanes");
  for (int l = 0; l < kLanes; ++l) {
    m.lanes[l].ref = ref_config_from_json(lanes[l].at("ref"));
    m.lanes[l].mismatch.static_offsets = lanes[l].at("static_offsets").get<ComparatorArray>();
    m.lanes[l].mismatch.dynamic_sigma = lanes[l].at("dynamic_sigma").get<double>();
  }
  return m;
}

}  // namespace cimsim
