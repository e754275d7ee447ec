#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cimsim/calib.hpp"
#include "cimsim/effbits.hpp"

namespace cimsim {

enum class PlotKind { kHeatmap, kHistogram, kTrajectory, kEbMap };

inline PlotKind parse_plot_kind(const std::string& s) {
  if (s == "heatmap") return PlotKind::kHeatmap;
  if (s == "histogram") return PlotKind::kHistogram;
  if (s == "trajectory") return PlotKind::kTrajectory;
  if (s == "ebmap") return PlotKind::kEbMap;
  throw std::invalid_argument("unknown plot kind '" + s + "' (heatmap, histogram, trajectory, ebmap)");
}

struct TrajectoryPoint {
  std::int64_t cycle = 0;
  double mu0 = 0.0;
  double mu1 = 0.0;
  double accuracy = 0.0;
};

// Artifact JSON records. Each carries a "kind" so emit_plotdata can reject
// artifacts of the wrong type.

inline nlohmann::json counts_artifact(const ResponseCounts& rc, const std::array<std::uint64_t, kGoldenValues>& golden) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : rc.counts) rows.push_back(r);
  return {{"kind", "response_counts"}, {"counts", rows}, {"golden_histogram", golden}};
}

inline nlohmann::json ebmap_artifact(const EbMap& m, int module) {
  return {{"kind", "eb_map"}, {"module", module}, {"eb", m.eb}, {"bits", m.bits}};
}

inline nlohmann::json trajectory_artifact(const std::vector<TrajectoryPoint>& pts) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : pts)
    arr.push_back({{"cycle", p.cycle}, {"mu0", p.mu0}, {"mu1", p.mu1}, {"accuracy", p.accuracy}});
  return {{"kind", "drift_trajectory"}, {"points", arr}};
}

inline nlohmann::json profiles_artifact(const std::vector<NoiseProfile>& ps, TuningScope scope) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : ps) arr.push_back(to_json(p));
  return {{"kind", "noise_profiles"}, {"scope", to_string(scope)}, {"profiles", arr}};
}

inline std::string csv_number(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

inline std::string heatmap_csv(const ResponseCounts& rc) {
  std::string out = "golden,state,count\n";
  for (int g = 0; g < kGoldenValues; ++g)
    for (int s = 0; s < kAdcStates; ++s)
      out += std::to_string(g) + "," + std::to_string(s) + "," + std::to_string(rc.counts[g][s]) + "\n";
  return out;
}

inline std::string golden_histogram_csv(const std::array<std::uint64_t, kGoldenValues>& h) {
  std::string out = "value,count\n";
  for (int g = 0; g < kGoldenValues; ++g) out += std::to_string(g) + "," + std::to_string(h[g]) + "\n";
  return out;
}

/// Residual histogram: bin centres and sample counts.
inline std::string residual_histogram_csv(const ResidualDistribution& d) {
  std::string out = "value,count\n";
  const double n = static_cast<double>(d.sample_count());
  for (std::size_t b = 0; b < d.masses.size(); ++b)
    out += csv_number(0.5 * (d.edges[b] + d.edges[b + 1])) + "," +
           std::to_string(std::llround(d.masses[b] * n)) + "\n";
  return out;
}

inline std::string trajectory_csv(const std::vector<TrajectoryPoint>& pts) {
  std::string out = "cycle,mu0,mu1,accuracy\n";
  for (const auto& p : pts)
    out += std::to_string(p.cycle) + "," + csv_number(p.mu0) + "," + csv_number(p.mu1) + "," +
           csv_number(p.accuracy) + "\n";
  return out;
}

/// One row per cell, in group order; within a (group, column) block the k-th
/// row is cell k of the acc-9 group.
inline std::string ebmap_csv(const EbMap& m) {
  std::string out = "group,column,eb,bit\n";
  for (int col = 0; col < kCols; ++col)
    for (int g = 0; g < kGroupsPerColumn; ++g)
      for (int i = 0; i < kGroupSize; ++i) {
        const int idx = (g * kGroupSize + i) * kCols + col;
        out += std::to_string(AccGroupId{col, g}.index()) + "," + std::to_string(col) + "," +
               csv_number(m.eb[idx]) + "," + std::to_string(m.bits[idx]) + "\n";
      }
  return out;
}

/// CSV for a stored artifact. Heatmap and histogram read response counts
/// (the histogram is the golden-value histogram); a noise-profile artifact
/// also yields a histogram (residuals pooled over its first profile).
inline std::string emit_plotdata(const nlohmann::json& artifact, PlotKind kind) {
  const std::string ak = artifact.value("kind", "");
  auto mismatch = [&](const char* want) {
    return std::invalid_argument("emit_plotdata: artifact kind '" + ak + "' does not provide " + want);
  };
  switch (kind) {
    case PlotKind::kHeatmap: {
      if (ak != "response_counts") throw mismatch("a heatmap");
      ResponseCounts rc;
      const auto& rows = artifact.at("counts");
      if (rows.size() != kGoldenValues) throw std::invalid_argument("emit_plotdata: counts must have 10 rows");
      for (int g = 0; g < kGoldenValues; ++g) {
        if (rows[g].size() != kAdcStates) throw std::invalid_argument("emit_plotdata: counts rows need 16 states");
        for (int s = 0; s < kAdcStates; ++s) rc.counts[g][s] = rows[g][s].get<std::uint64_t>();
      }
      return heatmap_csv(rc);
    }
    case PlotKind::kHistogram: {
      if (ak == "response_counts")
        return golden_histogram_csv(artifact.at("golden_histogram").get<std::array<std::uint64_t, kGoldenValues>>());
      if (ak == "noise_profiles") {
        const auto& ps = artifact.at("profiles");
        if (ps.empty()) throw std::invalid_argument("emit_plotdata: no profiles");
        return residual_histogram_csv(residual_from_json(ps.at(0).at("residual_hist")));
      }
      throw mismatch("a histogram");
    }
    case PlotKind::kTrajectory: {
      if (ak != "drift_trajectory") throw mismatch("a trajectory");
      std::vector<TrajectoryPoint> pts;
      for (const auto& p : artifact.at("points"))
        pts.push_back({p.at("cycle").get<std::int64_t>(), p.at("mu0").get<double>(), p.at("mu1").get<double>(),
                       p.at("accuracy").get<double>()});
      return trajectory_csv(pts);
    }
    case PlotKind::kEbMap: {
      if (ak != "eb_map") throw mismatch("an eb map");
      EbMap m;
      m.eb = artifact.at("eb").get<std::vector<double>>();
      m.bits = artifact.at("bits").get<std::vector<std::uint8_t>>();
      if (m.eb.size() != kRows * kCols || m.bits.size() != kRows * kCols)
        throw std::invalid_argument("emit_plotdata: eb map must be 81x64");
      return ebmap_csv(m);
    }
  }
  throw std::logic_error("emit_plotdata: bad kind");
}

}  // namespace cimsim
