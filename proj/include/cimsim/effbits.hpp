#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "cimsim/calib.hpp"
#include "cimsim/crossbar.hpp"
#include "cimsim/lad.hpp"
#include "cimsim/parallel.hpp"
#include "cimsim/rng.hpp"

namespace cimsim {

struct FitSample {
  Wordlines wl = 0;
  double y = 0.0;  // BinMap-mapped read value
};

/// Effective bits of one acc-9 group and the residuals of the fit that
/// produced them.
struct EffBitGroup {
  std::array<double, kGroupSize> eb{};
  double intercept = 0.0;  // stays 0 unless the intercept option is on
  std::vector<double> residuals;
  double objective = 0.0;
};

struct EffBitOptions {
  bool intercept = false;
  LadOptions lad{};
};

class UnidentifiableCellsError : public std::runtime_error {
 public:
  UnidentifiableCellsError(std::vector<int> cells, const std::string& what)
      : std::runtime_error(what), cells_(std::move(cells)) {}
  const std::vector<int>& cells() const { return cells_; }

 private:
  std::vector<int> cells_;
};

/// L1 fit of y ~ sum_i eb_i * wl_i over the samples.
inline EffBitGroup fit_effective_bits(std::span<const FitSample> samples,
                                      const EffBitOptions& opt = {}) {
  const int unknowns = kGroupSize + (opt.intercept ? 1 : 0);
  if (static_cast<int>(samples.size()) < unknowns)
    throw std::invalid_argument("fit_effective_bits: need at least as many samples as unknowns");
  Eigen::MatrixXd a(static_cast<Eigen::Index>(samples.size()), unknowns);
  Eigen::VectorXd y(static_cast<Eigen::Index>(samples.size()));
  for (std::size_t v = 0; v < samples.size(); ++v) {
    for (int i = 0; i < kGroupSize; ++i) a(v, i) = wordline_active(samples[v].wl, i) ? 1.0 : 0.0;
    if (opt.intercept) a(v, kGroupSize) = 1.0;
    y(v) = samples[v].y;
  }
  LadResult fit;
  try {
    fit = solve_lad(a, y, opt.lad);
  } catch (const RankDeficientError& e) {
    std::vector<int> cells;
    std::string msg = "fit_effective_bits: unidentifiable cells:";
    for (int c : e.columns()) {
      cells.push_back(c);
      msg += c < kGroupSize ? " " + std::to_string(c) : " intercept";
    }
    throw UnidentifiableCellsError(std::move(cells), msg);
  }
  EffBitGroup g;
  for (int i = 0; i < kGroupSize; ++i) g.eb[i] = fit.x(i);
  if (opt.intercept) g.intercept = fit.x(kGroupSize);
  g.residuals.assign(fit.residuals.data(), fit.residuals.data() + fit.residuals.size());
  g.objective = fit.objective;
  return g;
}

/// Pooled fitting residuals: an equal-width histogram over the observed range
/// plus the exact samples (as sorted value/count pairs) for bootstrap draws.
struct ResidualDistribution {
  std::vector<double> edges;   // bins + 1 entries
  std::vector<double> masses;  // sums to 1
  std::vector<double> support;              // distinct residual values, ascending
  std::vector<std::uint64_t> cumulative;    // running sample counts over support

  std::uint64_t sample_count() const { return cumulative.empty() ? 0 : cumulative.back(); }

  bool degenerate_at_zero() const { return support.size() == 1 && support[0] == 0.0; }

  double mean() const {
    double s = 0.0;
    std::uint64_t prev = 0;
    for (std::size_t i = 0; i < support.size(); ++i) {
      s += support[i] * static_cast<double>(cumulative[i] - prev);
      prev = cumulative[i];
    }
    return sample_count() ? s / static_cast<double>(sample_count()) : 0.0;
  }

  /// Bootstrap draw: one stored residual, uniformly over samples.
  double draw(Stream& rng) const {
    if (support.size() <= 1) return support.empty() ? 0.0 : support[0];
    const std::uint64_t k = rng.below(sample_count());
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), k);
    return support[static_cast<std::size_t>(it - cumulative.begin())];
  }

  static ResidualDistribution zero() {
    ResidualDistribution d;
    d.edges = {0.0, 0.0};
    d.masses = {1.0};
    d.support = {0.0};
    d.cumulative = {1};
    return d;
  }
};

inline ResidualDistribution residual_distribution_of(std::span<const double> residuals, int bins) {
  if (residuals.empty()) throw std::invalid_argument("residual_distribution: no residuals");
  if (bins < 1) throw std::invalid_argument("residual_distribution: bins must be >= 1");
  std::map<double, std::uint64_t> tally;
  for (double r : residuals) ++tally[r];
  ResidualDistribution d;
  std::uint64_t run = 0;
  for (const auto& [v, c] : tally) {
    d.support.push_back(v);
    run += c;
    d.cumulative.push_back(run);
  }
  const double lo = d.support.front();
  const double hi = d.support.back();
  const double n = static_cast<double>(run);
  if (lo == hi) {
    d.edges = {lo, hi};
    d.masses = {1.0};
    return d;
  }
  const double width = (hi - lo) / bins;
  d.edges.resize(bins + 1);
  for (int b = 0; b <= bins; ++b) d.edges[b] = lo + width * b;
  d.edges[bins] = hi;
  d.masses.assign(bins, 0.0);
  for (const auto& [v, c] : tally) {
    int b = static_cast<int>((v - lo) / width);
    b = std::clamp(b, 0, bins - 1);
    d.masses[b] += static_cast<double>(c);
  }
  for (auto& m : d.masses) m /= n;
  return d;
}

inline ResidualDistribution residual_distribution(std::span<const EffBitGroup> groups, int bins = 41) {
  if (groups.empty()) throw std::invalid_argument("residual_distribution: no groups");
  std::vector<double> pooled;
  for (const auto& g : groups) pooled.insert(pooled.end(), g.residuals.begin(), g.residuals.end());
  return residual_distribution_of(pooled, bins);
}

/// Statistics of injected noise for one scope unit. Population estimators.
struct NoiseProfile {
  std::string scope;
  double mu0 = 0.0;
  double sigma0 = 0.0;
  double mu1 = 1.0;
  double sigma1 = 0.0;
  ResidualDistribution residual = ResidualDistribution::zero();

  static NoiseProfile ideal(std::string scope = "ideal") {
    NoiseProfile p;
    p.scope = std::move(scope);
    return p;
  }

  bool is_ideal() const {
    return mu0 == 0.0 && sigma0 == 0.0 && mu1 == 1.0 && sigma1 == 0.0 &&
           residual.degenerate_at_zero();
  }

  double mu(int bit) const { return bit ? mu1 : mu0; }
  double sigma(int bit) const { return bit ? sigma1 : sigma0; }
};

/// A fitted acc-9 group together with where it lives and what it stores.
struct FittedGroup {
  int module = 0;
  AccGroupId gid{};
  std::array<std::uint8_t, kGroupSize> bits{};
  EffBitGroup fit;
};

/// Characterizes each module with its tuned references and fits every
/// group. The response y of a read is the tuned BinMap value of its code.
inline std::vector<FittedGroup> extract_effective_bits(std::span<const CrossbarModule> modules,
                                                       const TuningResult& tuning, int n_vectors,
                                                       const Stream& rng,
                                                       const EffBitOptions& opt = {}) {
  if (n_vectors < kGroupSize)
    throw std::invalid_argument("extract_effective_bits: need at least 9 vectors per group");
  std::vector<FittedGroup> out(modules.size() * kGroupsPerModule);
  for (std::size_t m = 0; m < modules.size(); ++m) {
    CrossbarModule tuned = modules[m];
    for (int l = 0; l < kLanes; ++l) tuned.lanes[l].ref = tuning.unit_for(static_cast<int>(m), l).ref;
    const Characterization ch =
        characterize(tuned, n_vectors, rng.substream(static_cast<std::uint64_t>(m)), true);
    parallel_for(kGroupsPerModule, [&](std::size_t gi) {
      const AccGroupId gid = AccGroupId::from_index(static_cast<int>(gi));
      const BinMap& map = tuning.unit_for(static_cast<int>(m), gid.lane()).map;
      std::vector<FitSample> samples(n_vectors);
      for (int v = 0; v < n_vectors; ++v) {
        const TraceEntry& t = ch.trace[gi * n_vectors + v];
        samples[v] = {t.wl, static_cast<double>(map.value(t.code))};
      }
      FittedGroup& fg = out[m * kGroupsPerModule + gi];
      fg.module = static_cast<int>(m);
      fg.gid = gid;
      fg.bits = tuned.group_bits(gid);
      fg.fit = fit_effective_bits(samples, opt);
    });
  }
  return out;
}

inline std::string scope_unit_id(TuningScope scope, int module, int lane) {
  switch (scope) {
    case TuningScope::kGlobal: return "global";
    case TuningScope::kModule: return "module:" + std::to_string(module);
    case TuningScope::kAdc: return "adc:" + std::to_string(module) + ":" + std::to_string(lane);
  }
  return "?";
}

/// Per scope unit: mean/std of effective bits over programmed-0 cells and,
/// independently, over programmed-1 cells, plus the unit's residual pool.
/// Units are ordered global | module 0..M-1 | (module, lane) row-major.
inline std::vector<NoiseProfile> eb_statistics(std::span<const FittedGroup> groups,
                                               TuningScope scope, int residual_bins = 41) {
  if (groups.empty()) throw std::invalid_argument("eb_statistics: no fitted groups");
  int n_modules = 0;
  for (const auto& g : groups) n_modules = std::max(n_modules, g.module + 1);
  const int n_units = scope == TuningScope::kGlobal ? 1
                      : scope == TuningScope::kModule ? n_modules
                                                      : n_modules * kLanes;
  auto unit_of = [&](const FittedGroup& g) {
    switch (scope) {
      case TuningScope::kGlobal: return 0;
      case TuningScope::kModule: return g.module;
      case TuningScope::kAdc: return g.module * kLanes + g.gid.lane();
    }
    return 0;
  };

  struct Acc {
    std::vector<double> eb[2];
    std::vector<double> residuals;
  };
  std::vector<Acc> acc(n_units);
  for (const auto& g : groups) {
    Acc& a = acc[unit_of(g)];
    for (int i = 0; i < kGroupSize; ++i) a.eb[g.bits[i]].push_back(g.fit.eb[i]);
    a.residuals.insert(a.residuals.end(), g.fit.residuals.begin(), g.fit.residuals.end());
  }

  auto moments = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::pair{mean, std::sqrt(var / static_cast<double>(v.size()))};
  };

  std::vector<NoiseProfile> out(n_units);
  for (int u = 0; u < n_units; ++u) {
    const int module = scope == TuningScope::kAdc ? u / kLanes : u;
    const int lane = scope == TuningScope::kAdc ? u % kLanes : -1;
    NoiseProfile& p = out[u];
    p.scope = scope_unit_id(scope, module, lane);
    if (acc[u].eb[0].empty() || acc[u].eb[1].empty())
      throw std::runtime_error("eb_statistics: scope unit " + p.scope +
                               " lacks programmed-0 or programmed-1 cells");
    std::tie(p.mu0, p.sigma0) = moments(acc[u].eb[0]);
    std::tie(p.mu1, p.sigma1) = moments(acc[u].eb[1]);
    p.residual = residual_distribution_of(acc[u].residuals, residual_bins);
  }
  return out;
}

/// Fitted effective bits of one module laid out like the array, plus the
/// accumulated |residual| of each ADC lane.
struct EbMap {
  std::vector<double> eb;            // row-major kRows x kCols
  std::vector<std::uint8_t> bits;    // row-major kRows x kCols
  std::array<double, kLanes> lane_error{};
};

inline EbMap eb_map(std::span<const FittedGroup> groups, int module) {
  EbMap map;
  map.eb.assign(kRows * kCols, 0.0);
  map.bits.assign(kRows * kCols, 0);
  int seen = 0;
  for (const auto& g : groups) {
    if (g.module != module) continue;
    ++seen;
    for (int i = 0; i < kGroupSize; ++i) {
      const int idx = (g.gid.first_row() + i) * kCols + g.gid.column;
      map.eb[idx] = g.fit.eb[i];
      map.bits[idx] = g.bits[i];
    }
    for (double r : g.fit.residuals) map.lane_error[g.gid.lane()] += std::abs(r);
  }
  if (seen != kGroupsPerModule)
    throw std::invalid_argument("eb_map: module " + std::to_string(module) + " not fully fitted");
  return map;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const ResidualDistribution& d) {
  return {{"edges", d.edges},
          {"masses", d.masses},
          {"support", d.support},
          {"cumulative", d.cumulative}};
}

inline ResidualDistribution residual_from_json(const nlohmann::json& j) {
  ResidualDistribution d;
  d.edges = j.at("edges").get<std::vector<double>>();
  d.masses = j.at("masses").get<std::vector<double>>();
  d.support = j.at("support").get<std::vector<double>>();
  d.cumulative = j.at("cumulative").get<std::vector<std::uint64_t>>();
  if (d.support.size() != d.cumulative.size() || d.support.empty())
    throw std::runtime_error("residual distribution: malformed sample table");
  return d;
}

inline nlohmann::json to_json(const NoiseProfile& p) {
  return {{"scope", p.scope},         {"mu0", p.mu0},       {"sigma0", p.sigma0},
          {"mu1", p.mu1},             {"sigma1", p.sigma1}, {"residual_hist", to_json(p.residual)}};
}

inline NoiseProfile profile_from_json(const nlohmann::json& j) {
  NoiseProfile p;
  p.scope = j.at("scope").get<std::string>();
  p.mu0 = j.at("mu0").get<double>();
  p.sigma0 = j.at("sigma0").get<double>();
  p.mu1 = j.at("mu1").get<double>();
  p.sigma1 = j.at("sigma1").get<double>();
  if (p.sigma0 < 0.0 || p.sigma1 < 0.0) throw std::runtime_error("noise profile: negative sigma");
  p.residual = residual_from_json(j.at("residual_hist"));
  return p;
}

}  // namespace cimsim
