#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cimsim/adc.hpp"
#include "cimsim/crossbar.hpp"
#include "cimsim/parallel.hpp"
#include "cimsim/rng.hpp"

namespace cimsim {

/// counts[g][s]: how often ADC state s was read when the golden value was g.
struct ResponseCounts {
  std::array<std::array<std::uint64_t, kAdcStates>, kGoldenValues> counts{};

  void add(int golden, int state, std::uint64_t n = 1) { counts[golden][state] += n; }

  std::uint64_t row_sum(int g) const {
    std::uint64_t s = 0;
    for (auto c : counts[g]) s += c;
    return s;
  }

  std::uint64_t column_sum(int state) const {
    std::uint64_t s = 0;
    for (const auto& row : counts) s += row[state];
    return s;
  }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (int g = 0; g < kGoldenValues; ++g) s += row_sum(g);
    return s;
  }

  ResponseCounts& operator+=(const ResponseCounts& o) {
    for (int g = 0; g < kGoldenValues; ++g)
      for (int s = 0; s < kAdcStates; ++s) counts[g][s] += o.counts[g][s];
    return *this;
  }

  friend bool operator==(const ResponseCounts&, const ResponseCounts&) = default;
};

/// ADC state -> golden value assignment. Always a non-decreasing staircase.
struct BinMap {
  std::array<int, kAdcStates> assign{};

  int value(int state) const { return assign[state]; }

  /// State s represents value s; states above 9 saturate at 9.
  static BinMap saturating_identity() {
    BinMap m;
    for (int s = 0; s < kAdcStates; ++s) m.assign[s] = std::min(s, kGoldenValues - 1);
    return m;
  }

  friend bool operator==(const BinMap&, const BinMap&) = default;
};

/// Absolute binning: each state goes to the golden value that produced it most
/// often (ties to the smaller value); never-observed states inherit from the
/// state below; the result is then forced monotone.
inline BinMap absolute_binning(const ResponseCounts& rc) {
  BinMap m;
  for (int s = 0; s < kAdcStates; ++s) {
    if (rc.column_sum(s) == 0) {
      m.assign[s] = s == 0 ? 0 : m.assign[s - 1];
      continue;
    }
    int best = 0;
    for (int g = 1; g < kGoldenValues; ++g)
      if (rc.counts[g][s] > rc.counts[best][s]) best = g;
    m.assign[s] = best;
  }
  for (int s = 1; s < kAdcStates; ++s) m.assign[s] = std::max(m.assign[s], m.assign[s - 1]);
  return m;
}

using GoldenWeights = std::array<double, kGoldenValues>;

inline GoldenWeights uniform_weights() {
  GoldenWeights w;
  w.fill(1.0);
  return w;
}

/// L1 decode error: sum over trials of weight[g] * |assign[s] - g|.
inline double score_config(const ResponseCounts& rc, const BinMap& map,
                           const GoldenWeights& weights = uniform_weights()) {
  double score = 0.0;
  for (int g = 0; g < kGoldenValues; ++g)
    for (int s = 0; s < kAdcStates; ++s)
      if (rc.counts[g][s] != 0)
        score += weights[g] * static_cast<double>(rc.counts[g][s]) * std::abs(map.assign[s] - g);
  return score;
}

enum class TuningScope { kGlobal, kModule, kAdc };

inline std::string to_string(TuningScope s) {
  switch (s) {
    case TuningScope::kGlobal: return "global";
    case TuningScope::kModule: return "module";
    case TuningScope::kAdc: return "adc";
  }
  return "?";
}

inline TuningScope parse_scope(const std::string& s) {
  if (s == "global") return TuningScope::kGlobal;
  if (s == "module" || s == "per-module") return TuningScope::kModule;
  if (s == "adc" || s == "per-adc") return TuningScope::kAdc;
  throw std::invalid_argument("unknown tuning scope '" + s + "' (expected global, module or adc)");
}

// ---------------------------------------------------------------------------
// Characterization

struct TraceEntry {
  std::uint16_t group_index = 0;  // AccGroupId::index()
  Wordlines wl = 0;
  std::uint8_t golden = 0;
  std::uint8_t code = 0;
};

/// Randomness of one characterization trial: the wordline vector, then one
/// standard normal per comparator when the lane has dynamic noise.
inline Stream trial_stream(const Stream& module_rng, int group_index, int vector) {
  return module_rng.substream(static_cast<std::uint64_t>(group_index),
                              static_cast<std::uint64_t>(vector));
}

inline Wordlines draw_wordlines(Stream& s) {
  return static_cast<Wordlines>(s.below(kWordlinePatterns));
}

struct Characterization {
  int n_vectors = 0;
  ResponseCounts counts;
  std::array<ResponseCounts, kLanes> lane_counts{};
  std::vector<TraceEntry> trace;  // group-index major, vector minor
};

/// Drives every acc-9 group of the module with n_vectors uniform 9-bit inputs
/// and records the ADC responses with the lanes' current references.
inline Characterization characterize(const CrossbarModule& m, int n_vectors, const Stream& rng,
                                     bool keep_trace = true) {
  if (n_vectors < 0) throw std::invalid_argument("characterize: n_vectors must be >= 0");
  Characterization out;
  out.n_vectors = n_vectors;
  if (keep_trace) out.trace.resize(static_cast<std::size_t>(kGroupsPerModule) * n_vectors);
  std::vector<ResponseCounts> per_group(kGroupsPerModule);
  parallel_for(kGroupsPerModule, [&](std::size_t gi) {
    const AccGroupId gid = AccGroupId::from_index(static_cast<int>(gi));
    for (int v = 0; v < n_vectors; ++v) {
      Stream s = trial_stream(rng, static_cast<int>(gi), v);
      const Wordlines wl = draw_wordlines(s);
      const int golden = golden_sum(m, gid, wl);
      const int code = read_group(m, gid, wl, s);
      per_group[gi].add(golden, code);
      if (keep_trace)
        out.trace[gi * n_vectors + v] = {static_cast<std::uint16_t>(gi), wl,
                                         static_cast<std::uint8_t>(golden),
                                         static_cast<std::uint8_t>(code)};
    }
  });
  for (int gi = 0; gi < kGroupsPerModule; ++gi) {
    out.counts += per_group[gi];
    out.lane_counts[AccGroupId::from_index(gi).lane()] += per_group[gi];
  }
  return out;
}

inline std::array<std::uint64_t, kGoldenValues> golden_histogram(std::span<const TraceEntry> trace) {
  if (trace.empty()) throw std::invalid_argument("golden_histogram: empty trace");
  std::array<std::uint64_t, kGoldenValues> h{};
  for (const auto& t : trace) ++h[t.golden];
  return h;
}

// ---------------------------------------------------------------------------
// Reference search

/// Exhaustive search space. Axis values are kept sorted and unique.
struct ReferenceGrid {
  std::vector<double> offsets;
  std::vector<double> steps;
  std::vector<double> v_blts;

  /// 16 offsets x 16 steps x 4 full-scale voltages scaled to the base
  /// config's v_blt, with the base config's own values inserted.
  static ReferenceGrid standard(const AdcRefConfig& base) {
    ReferenceGrid g;
    const double v = base.v_blt;
    for (int k = 1; k <= 16; ++k) g.offsets.push_back(v * k / 48.0);
    for (int k = 3; k <= 18; ++k) g.steps.push_back(v * k / 160.0);
    for (double f : {5.0 / 6.0, 1.0, 7.0 / 6.0, 4.0 / 3.0}) g.v_blts.push_back(v * f);
    g.include(base);
    return g;
  }

  static ReferenceGrid singleton(const AdcRefConfig& c) {
    return ReferenceGrid{{c.offset}, {c.step}, {c.v_blt}};
  }

  ReferenceGrid& include(const AdcRefConfig& c) {
    insert(offsets, c.offset);
    insert(steps, c.step);
    insert(v_blts, c.v_blt);
    return *this;
  }

  bool contains(const AdcRefConfig& c) const {
    return std::binary_search(offsets.begin(), offsets.end(), c.offset) &&
           std::binary_search(steps.begin(), steps.end(), c.step) &&
           std::binary_search(v_blts.begin(), v_blts.end(), c.v_blt);
  }

  std::size_t size() const { return offsets.size() * steps.size() * v_blts.size(); }

  std::size_t index(std::size_t oi, std::size_t si, std::size_t vi) const {
    return (oi * steps.size() + si) * v_blts.size() + vi;
  }

  AdcRefConfig at(std::size_t i) const {
    const std::size_t vi = i % v_blts.size();
    const std::size_t si = (i / v_blts.size()) % steps.size();
    const std::size_t oi = i / (v_blts.size() * steps.size());
    return {offsets[oi], steps[si], v_blts[vi]};
  }

  void validate() const {
    if (offsets.empty() || steps.empty() || v_blts.empty())
      throw std::invalid_argument("ReferenceGrid: empty search grid");
    for (auto s : steps)
      if (!(s > 0.0)) throw std::invalid_argument("ReferenceGrid: steps must be > 0");
    for (auto o : offsets)
      if (!(o >= 0.0)) throw std::invalid_argument("ReferenceGrid: offsets must be >= 0");
  }

 private:
  static void insert(std::vector<double>& axis, double x) {
    // Snap near-duplicates onto the exact inserted value.
    for (auto& a : axis) {
      if (std::abs(a - x) <= 1e-12 * std::max(1.0, std::abs(x))) {
        a = x;
        std::sort(axis.begin(), axis.end());
        return;
      }
    }
    axis.push_back(x);
    std::sort(axis.begin(), axis.end());
  }
};

/// Tuning outcome for one scope unit.
struct UnitResult {
  std::string id;  // "global", "module:<m>" or "adc:<m>:<lane>"
  int module = -1;
  int lane = -1;
  AdcRefConfig ref{};
  BinMap map{};
  double score = 0.0;
  double default_score = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t trials = 0;
  /// True when the unit kept the coarser scope's (config, map) pair.
  bool inherited = false;

  double mean_abs_error() const { return trials ? score / static_cast<double>(trials) : 0.0; }
};

struct TuningResult {
  TuningScope scope = TuningScope::kGlobal;
  std::vector<UnitResult> units;

  double total_score() const {
    double s = 0.0;
    for (const auto& u : units) s += u.score;
    return s;
  }
  double total_default_score() const {
    double s = 0.0;
    for (const auto& u : units) s += u.default_score;
    return s;
  }
  std::uint64_t total_trials() const {
    std::uint64_t n = 0;
    for (const auto& u : units) n += u.trials;
    return n;
  }
  double mean_abs_error() const {
    const auto n = total_trials();
    return n ? total_score() / static_cast<double>(n) : 0.0;
  }
  double default_mean_abs_error() const {
    const auto n = total_trials();
    return n ? total_default_score() / static_cast<double>(n) : 0.0;
  }

  /// (ref, map) governing lane `lane` of module `module`.
  const UnitResult& unit_for(int module, int lane) const {
    switch (scope) {
      case TuningScope::kGlobal: return units.at(0);
      case TuningScope::kModule: return units.at(module);
      case TuningScope::kAdc: return units.at(static_cast<std::size_t>(module) * kLanes + lane);
    }
    throw std::logic_error("unit_for: bad scope");
  }
};

struct TuningOptions {
  AdcRefConfig default_config{};
  GoldenWeights weights = uniform_weights();
};

struct ScopedTuning {
  TuningResult global;
  TuningResult module;
  TuningResult adc;

  const TuningResult& at(TuningScope s) const {
    switch (s) {
      case TuningScope::kGlobal: return global;
      case TuningScope::kModule: return module;
      case TuningScope::kAdc: return adc;
    }
    throw std::logic_error("ScopedTuning: bad scope");
  }
};

namespace detail {

/// Per (config, lane) response counts of one module, 32-bit packed.
class LaneCountTable {
 public:
  LaneCountTable(std::size_t configs) : data_(configs * kLanes * kCells, 0) {}

  std::uint32_t* at(std::size_t config, int lane) {
    return data_.data() + (config * kLanes + lane) * kCells;
  }
  const std::uint32_t* at(std::size_t config, int lane) const {
    return data_.data() + (config * kLanes + lane) * kCells;
  }

  void add_to(ResponseCounts& rc, std::size_t config, int lane) const {
    const std::uint32_t* p = at(config, lane);
    for (int g = 0; g < kGoldenValues; ++g)
      for (int s = 0; s < kAdcStates; ++s) rc.counts[g][s] += p[g * kAdcStates + s];
  }

  static constexpr int kCells = kGoldenValues * kAdcStates;

 private:
  std::vector<std::uint32_t> data_;
};

struct PreparedTrial {
  double fraction;                  // G / (G + g_half)
  std::array<double, kComparators> skew;  // static offset + dynamic draw, volts
  std::uint8_t golden;
  std::uint8_t lane;
};

inline std::vector<PreparedTrial> prepare_trials(const CrossbarModule& m, int n_vectors,
                                                 const Stream& rng) {
  std::vector<PreparedTrial> trials(static_cast<std::size_t>(kGroupsPerModule) * n_vectors);
  parallel_for(kGroupsPerModule, [&](std::size_t gi) {
    const AccGroupId gid = AccGroupId::from_index(static_cast<int>(gi));
    const LaneState& lane = m.lane_of(gid);
    for (int v = 0; v < n_vectors; ++v) {
      Stream s = trial_stream(rng, static_cast<int>(gi), v);
      const Wordlines wl = draw_wordlines(s);
      PreparedTrial& t = trials[gi * n_vectors + v];
      t.fraction = m.xfer.fraction(activated_conductance(m, gid, wl));
      t.golden = static_cast<std::uint8_t>(golden_sum(m, gid, wl));
      t.lane = static_cast<std::uint8_t>(gid.lane());
      ComparatorArray z{};
      if (lane.mismatch.dynamic_sigma != 0.0) z = draw_comparator_noise(s);
      for (int j = 0; j < kComparators; ++j)
        t.skew[j] = lane.mismatch.static_offsets[j] + lane.mismatch.dynamic_sigma * z[j];
    }
  });
  return trials;
}

/// Fills the count table for every grid config. For a fixed (step, v_blt) the
/// code as a function of offset is a count over the sorted per-comparator
/// slack values, so each trial is sorted once and swept over all offsets.
inline void count_grid(const std::vector<PreparedTrial>& trials, const ReferenceGrid& grid,
                       LaneCountTable& table) {
  const std::size_t n_step = grid.steps.size();
  const std::size_t n_vblt = grid.v_blts.size();
  const std::size_t n_off = grid.offsets.size();
  parallel_for(n_step * n_vblt, [&](std::size_t task) {
    const std::size_t si = task / n_vblt;
    const std::size_t vi = task % n_vblt;
    const double step = grid.steps[si];
    const double v_blt = grid.v_blts[vi];
    std::array<double, kComparators> w{};
    for (const auto& t : trials) {
      const double v = v_blt * t.fraction;
      for (int j = 0; j < kComparators; ++j) w[j] = v - t.skew[j] - j * step;
      // Descending insertion sort; w is nearly sorted already.
      for (int a = 1; a < kComparators; ++a) {
        const double x = w[a];
        int b = a - 1;
        while (b >= 0 && w[b] < x) {
          w[b + 1] = w[b];
          --b;
        }
        w[b + 1] = x;
      }
      int c = kComparators;
      for (std::size_t k = 0; k < n_off; ++k) {
        const double o = grid.offsets[k];
        while (c > 0 && w[c - 1] < o) --c;
        const std::size_t cfg = grid.index(k, si, vi);
        table.at(cfg, t.lane)[t.golden * kAdcStates + c] += 1;
      }
    }
  });
}

struct Candidate {
  double score = std::numeric_limits<double>::infinity();
  std::size_t config = 0;
  BinMap map{};
  bool inherited = false;
};

}  // namespace detail

/// Exhaustive reference search at all three scopes over one shared trace.
///
/// Every grid config is scored with its own absolute-binning map; the
/// lowest score wins, ties going to the earlier config in (offset, step,
/// v_blt) order. A module-scope unit additionally considers the global
/// (config, map) pair and an ADC-scope unit its module's pair, so a finer
/// scope never scores worse than the coarser one.
inline ScopedTuning tune_all_scopes(std::span<const CrossbarModule> modules,
                                    const ReferenceGrid& grid, int n_vectors, const Stream& rng,
                                    const TuningOptions& options = {}) {
  grid.validate();
  if (modules.empty()) throw std::invalid_argument("tune_references: no modules");
  if (n_vectors < 1) throw std::invalid_argument("tune_references: n_vectors must be >= 1");
  const std::size_t n_cfg = grid.size();
  const int n_mod = static_cast<int>(modules.size());

  std::vector<bool> valid(n_cfg);
  for (std::size_t c = 0; c < n_cfg; ++c) valid[c] = grid.at(c).valid();

  std::size_t default_cfg = n_cfg;
  for (std::size_t c = 0; c < n_cfg; ++c)
    if (grid.at(c) == options.default_config) default_cfg = c;

  std::vector<detail::LaneCountTable> tables;
  tables.reserve(modules.size());
  for (int m = 0; m < n_mod; ++m) {
    tables.emplace_back(n_cfg);
    const auto trials =
        detail::prepare_trials(modules[m], n_vectors, rng.substream(static_cast<std::uint64_t>(m)));
    detail::count_grid(trials, grid, tables.back());
  }

  const std::uint64_t trials_per_lane = static_cast<std::uint64_t>(kGroupsPerColumn) *
                                        kColsPerLane * static_cast<std::uint64_t>(n_vectors);

  auto pick = [&](auto&& counts_at, const detail::Candidate* inherit) {
    detail::Candidate best;
    double default_score = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t c = 0; c < n_cfg; ++c) {
      if (!valid[c]) continue;
      const ResponseCounts rc = counts_at(c);
      const BinMap map = absolute_binning(rc);
      const double s = score_config(rc, map, options.weights);
      if (c == default_cfg) default_score = s;
      if (s < best.score) best = {s, c, map, false};
    }
    if (inherit) {
      const double s = score_config(counts_at(inherit->config), inherit->map, options.weights);
      if (s < best.score) best = {s, inherit->config, inherit->map, true};
    }
    return std::pair{best, default_score};
  };

  auto make_unit = [&](std::string id, int module, int lane, const detail::Candidate& c,
                       double default_score, std::uint64_t trials) {
    UnitResult u;
    u.id = std::move(id);
    u.module = module;
    u.lane = lane;
    u.ref = grid.at(c.config);
    u.map = c.map;
    u.score = c.score;
    u.default_score = default_score;
    u.trials = trials;
    u.inherited = c.inherited;
    return u;
  };

  ScopedTuning out;
  out.global.scope = TuningScope::kGlobal;
  out.module.scope = TuningScope::kModule;
  out.adc.scope = TuningScope::kAdc;

  auto [g_best, g_default] = pick(
      [&](std::size_t c) {
        ResponseCounts rc;
        for (int m = 0; m < n_mod; ++m)
          for (int l = 0; l < kLanes; ++l) tables[m].add_to(rc, c, l);
        return rc;
      },
      nullptr);
  out.global.units.push_back(
      make_unit("global", -1, -1, g_best, g_default, trials_per_lane * kLanes * n_mod));

  std::vector<detail::Candidate> module_best(n_mod);
  out.module.units.resize(n_mod);
  parallel_for(n_mod, [&](std::size_t m) {
    auto [best, def] = pick(
        [&](std::size_t c) {
          ResponseCounts rc;
          for (int l = 0; l < kLanes; ++l) tables[m].add_to(rc, c, l);
          return rc;
        },
        &g_best);
    module_best[m] = best;
    out.module.units[m] = make_unit("module:" + std::to_string(m), static_cast<int>(m), -1, best,
                                    def, trials_per_lane * kLanes);
  });

  out.adc.units.resize(static_cast<std::size_t>(n_mod) * kLanes);
  parallel_for(static_cast<std::size_t>(n_mod) * kLanes, [&](std::size_t i) {
    const int m = static_cast<int>(i / kLanes);
    const int l = static_cast<int>(i % kLanes);
    auto [best, def] = pick(
        [&](std::size_t c) {
          ResponseCounts rc;
          tables[m].add_to(rc, c, l);
          return rc;
        },
        &module_best[m]);
    out.adc.units[i] = make_unit("adc:" + std::to_string(m) + ":" + std::to_string(l), m, l, best,
                                 def, trials_per_lane);
  });
  return out;
}

inline TuningResult tune_references(std::span<const CrossbarModule> modules, TuningScope scope,
                                    const ReferenceGrid& grid, int n_vectors, const Stream& rng,
                                    const TuningOptions& options = {}) {
  ScopedTuning all = tune_all_scopes(modules, grid, n_vectors, rng, options);
  switch (scope) {
    case TuningScope::kGlobal: return std::move(all.global);
    case TuningScope::kModule: return std::move(all.module);
    case TuningScope::kAdc: return std::move(all.adc);
  }
  throw std::logic_error("tune_references: bad scope");
}

/// Installs tuned references into the modules' ADC lanes.
inline void apply_tuning(std::span<CrossbarModule> modules, const TuningResult& result) {
  for (std::size_t m = 0; m < modules.size(); ++m)
    for (int l = 0; l < kLanes; ++l)
      modules[m].lanes[l].ref = result.unit_for(static_cast<int>(m), l).ref;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const UnitResult& u) {
  return {{"scope", u.id},
          {"offset", u.ref.offset},
          {"step", u.ref.step},
          {"v_blt", u.ref.v_blt},
          {"binmap", u.map.assign},
          {"score", u.score},
          {"default_score", std::isnan(u.default_score) ? nlohmann::json(nullptr)
                                                        : nlohmann::json(u.default_score)},
          {"trials", u.trials},
          {"inherited", u.inherited}};
}

inline nlohmann::json to_json(const TuningResult& r) {
  nlohmann::json units = nlohmann::json::array();
  for (const auto& u : r.units) units.push_back(to_json(u));
  return {{"scope", to_string(r.scope)},
          {"total_score", r.total_score()},
          {"mean_abs_error", r.mean_abs_error()},
          {"default_mean_abs_error", r.default_mean_abs_error()},
          {"units", units}};
}

inline TuningResult tuning_from_json(const nlohmann::json& j) {
  TuningResult r;
  r.scope = parse_scope(j.at("scope").get<std::string>());
  for (const auto& ju : j.at("units")) {
    UnitResult u;
    u.id = ju.at("scope").get<std::string>();
    u.ref = ref_config_from_json(ju);
    u.map.assign = ju.at("binmap").get<std::array<int, kAdcStates>>();
    u.score = ju.at("score").get<double>();
    if (!ju.at("default_score").is_null()) u.default_score = ju.at("default_score").get<double>();
    u.trials = ju.at("trials").get<std::uint64_t>();
    u.inherited = ju.value("inherited", false);
    r.units.push_back(std::move(u));
  }
  for (std::size_t i = 0; i < r.units.size(); ++i) {
    if (r.scope == TuningScope::kModule) r.units[i].module = static_cast<int>(i);
    if (r.scope == TuningScope::kAdc) {
      r.units[i].module = static_cast<int>(i / kLanes);
      r.units[i].lane = static_cast<int>(i % kLanes);
    }
  }
  return r;
}

}  // namespace cimsim
