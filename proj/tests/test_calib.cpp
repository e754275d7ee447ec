#include <algorithm>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "cimsim/calib.hpp"

using namespace cimsim;

namespace {

std::vector<CrossbarModule> small_chip(std::uint64_t seed, int modules, double sigma_dynamic = 0.0) {
  AdcParams adc;
  adc.sigma_dynamic = sigma_dynamic;
  std::vector<CrossbarModule> out;
  const Stream root(seed);
  for (int m = 0; m < modules; ++m)
    out.push_back(build_module(CellDistParams{}, BitPattern::random(root.substream(m, 0)), adc, {},
                               root.substream(m, 1)));
  return out;
}

ReferenceGrid small_grid() {
  ReferenceGrid g{{0.01, 0.02, 0.03}, {0.012, 0.018, 0.025}, {0.25, 0.3}};
  g.include(AdcRefConfig{});
  return g;
}

// Score of one config recomputed from scratch: set every lane to the config,
// characterize with the same trial streams and bin absolutely.
double oracle_score(std::vector<CrossbarModule> mods, const AdcRefConfig& cfg, int n, const Stream& rng,
                    int only_module = -1, int only_lane = -1) {
  ResponseCounts rc;
  for (std::size_t m = 0; m < mods.size(); ++m) {
    if (only_module >= 0 && static_cast<int>(m) != only_module) continue;
    for (auto& l : mods[m].lanes) l.ref = cfg;
    const auto ch = characterize(mods[m], n, rng.substream(m), false);
    if (only_lane >= 0)
      rc += ch.lane_counts[only_lane];
    else
      rc += ch.counts;
  }
  return score_config(rc, absolute_binning(rc));
}

}  // namespace

TEST(AbsoluteBinning, MajorityWinsColumn) {
  ResponseCounts rc;
  rc.counts[5][15] = 2190;
  rc.counts[6][15] = 1700;
  EXPECT_EQ(absolute_binning(rc).assign[15], 5);
}

TEST(AbsoluteBinning, TiesGoToSmallerValue) {
  ResponseCounts rc;
  rc.counts[3][4] = 10;
  rc.counts[7][4] = 10;
  EXPECT_EQ(absolute_binning(rc).assign[4], 3);
}

TEST(AbsoluteBinning, UnseenStatesInheritAndStayMonotone) {
  Stream rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    ResponseCounts rc;
    for (int k = 0; k < 30; ++k) rc.add(rng.below(kGoldenValues), rng.below(kAdcStates), 1 + rng.below(50));
    const BinMap m = absolute_binning(rc);
    for (int s = 1; s < kAdcStates; ++s) EXPECT_GE(m.assign[s], m.assign[s - 1]);
    for (int s = 0; s < kAdcStates; ++s) {
      EXPECT_GE(m.assign[s], 0);
      EXPECT_LT(m.assign[s], kGoldenValues);
    }
  }
  ResponseCounts sparse;
  sparse.add(2, 3, 5);
  const BinMap m = absolute_binning(sparse);
  EXPECT_EQ(m.assign[0], 0);
  EXPECT_EQ(m.assign[4], 2);
  EXPECT_EQ(m.assign[15], 2);
}

TEST(ScoreConfig, ZeroOnDiagonalAndWeighted) {
  ResponseCounts rc;
  for (int g = 0; g < kGoldenValues; ++g) rc.add(g, g, 100);
  EXPECT_EQ(score_config(rc, BinMap::saturating_identity()), 0.0);
  rc.add(2, 5, 4);
  EXPECT_EQ(score_config(rc, BinMap::saturating_identity()), 12.0);
  GoldenWeights w = uniform_weights();
  w[2] = 0.5;
  EXPECT_EQ(score_config(rc, BinMap::saturating_identity(), w), 6.0);
}

TEST(ScoreConfig, BoundedBelowByColumnOptimum) {
  Stream rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    ResponseCounts rc;
    for (int g = 0; g < kGoldenValues; ++g) {
      const int centre = g + static_cast<int>(rng.below(4));
      for (int d = -1; d <= 1; ++d) {
        const int s = std::clamp(centre + d, 0, kAdcStates - 1);
        rc.add(g, s, 1 + rng.below(100));
      }
    }
    const double best = score_config(rc, absolute_binning(rc));
    // Per state, the column-wise optimal choice bounds any other map from below.
    double lower = 0.0;
    for (int s = 0; s < kAdcStates; ++s) {
      double col = std::numeric_limits<double>::infinity();
      for (int v = 0; v < kGoldenValues; ++v) {
        double c = 0.0;
        for (int g = 0; g < kGoldenValues; ++g) c += static_cast<double>(rc.counts[g][s]) * std::abs(v - g);
        col = std::min(col, c);
      }
      lower += col;
    }
    EXPECT_GE(best + 1e-9, lower);
  }
}

TEST(Scope, ParseAndPrint) {
  for (auto s : {TuningScope::kGlobal, TuningScope::kModule, TuningScope::kAdc})
    EXPECT_EQ(parse_scope(to_string(s)), s);
  EXPECT_EQ(parse_scope("per-adc"), TuningScope::kAdc);
  EXPECT_THROW(parse_scope("lane"), std::invalid_argument);
}

TEST(Characterize, ReplaysAndCountsEveryTrial) {
  const auto mods = small_chip(3, 1, 0.002);
  const Stream rng(99);
  const auto a = characterize(mods[0], 8, rng);
  const auto b = characterize(mods[0], 8, rng);
  EXPECT_EQ(a.counts, b.counts);
  EXPECT_EQ(a.counts.total(), 8u * kGroupsPerModule);
  ResponseCounts sum;
  for (const auto& l : a.lane_counts) sum += l;
  EXPECT_EQ(sum, a.counts);
  const auto h = golden_histogram(a.trace);
  std::uint64_t total = 0;
  for (int g = 0; g < kGoldenValues; ++g) {
    EXPECT_EQ(h[g], a.counts.row_sum(g));
    total += h[g];
  }
  EXPECT_EQ(total, a.trace.size());
  EXPECT_THROW(golden_histogram({}), std::invalid_argument);
}

TEST(ReferenceGridTest, StandardShape) {
  const auto g = ReferenceGrid::standard(AdcRefConfig{});
  EXPECT_TRUE(g.contains(AdcRefConfig{}));
  EXPECT_EQ(g.size(), 1024u);
  CellDistParams exact;
  exact.g_lrs_sigma = 0.0;
  exact.g_hrs_sigma = 0.0;
  auto with_ideal = g;
  with_ideal.include(ideal_reference(exact, TransferParams{}));
  EXPECT_EQ(with_ideal.size(), 17u * 17u * 4u);
  for (std::size_t i = 0; i < g.size(); i += 37) {
    const auto c = g.at(i);
    EXPECT_TRUE(g.contains(c));
  }
  EXPECT_THROW((ReferenceGrid{{}, {0.1}, {0.3}}).validate(), std::invalid_argument);
  auto s = ReferenceGrid::singleton(AdcRefConfig{});
  EXPECT_EQ(s.size(), 1u);
  EXPECT_EQ(s.at(0), AdcRefConfig{});
}

TEST(Tuning, GridCountsMatchDirectCharacterization) {
  const auto mods = small_chip(5, 2);
  const auto grid = small_grid();
  const Stream rng(6);
  const int n = 12;
  const auto t = tune_all_scopes(mods, grid, n, rng);

  double best = std::numeric_limits<double>::infinity();
  double def = 0.0;
  for (std::size_t c = 0; c < grid.size(); ++c) {
    const double s = oracle_score(mods, grid.at(c), n, rng);
    best = std::min(best, s);
    if (grid.at(c) == AdcRefConfig{}) def = s;
  }
  EXPECT_DOUBLE_EQ(t.global.units[0].score, best);
  EXPECT_DOUBLE_EQ(t.global.units[0].default_score, def);
  EXPECT_DOUBLE_EQ(oracle_score(mods, t.global.units[0].ref, n, rng), best);

  for (int m = 0; m < 2; ++m) {
    const auto& u = t.module.units[m];
    EXPECT_DOUBLE_EQ(u.default_score, oracle_score(mods, AdcRefConfig{}, n, rng, m));
    if (!u.inherited) EXPECT_DOUBLE_EQ(u.score, oracle_score(mods, u.ref, n, rng, m));
  }
  const auto& a = t.adc.units[3];
  EXPECT_DOUBLE_EQ(a.default_score, oracle_score(mods, AdcRefConfig{}, n, rng, 0, 3));
}

TEST(Tuning, FinerScopesNeverScoreWorse) {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const auto mods = small_chip(seed, 2, 0.003);
    const auto t = tune_all_scopes(mods, small_grid(), 6, Stream(seed + 100));
    const double g = t.global.total_score();
    const double m = t.module.total_score();
    const double a = t.adc.total_score();
    EXPECT_LE(a, m + 1e-9);
    EXPECT_LE(m, g + 1e-9);
    EXPECT_LE(g, t.global.total_default_score());
    for (const auto& r : {t.global, t.module, t.adc})
      for (const auto& u : r.units) EXPECT_LE(u.score, u.default_score);
    EXPECT_EQ(t.global.total_trials(), t.adc.total_trials());
  }
}

TEST(Tuning, ApplyAndJsonRoundTrip) {
  auto mods = small_chip(8, 2);
  const auto t = tune_references(mods, TuningScope::kAdc, small_grid(), 4, Stream(1));
  ASSERT_EQ(t.units.size(), 2u * kLanes);
  apply_tuning(mods, t);
  EXPECT_EQ(mods[1].lanes[5].ref, t.unit_for(1, 5).ref);
  const auto back = tuning_from_json(nlohmann::json::parse(to_json(t).dump()));
  ASSERT_EQ(back.units.size(), t.units.size());
  for (std::size_t i = 0; i < t.units.size(); ++i) {
    EXPECT_EQ(back.units[i].ref, t.units[i].ref);
    EXPECT_EQ(back.units[i].map, t.units[i].map);
    EXPECT_EQ(back.units[i].score, t.units[i].score);
    EXPECT_EQ(back.units[i].module, t.units[i].module);
    EXPECT_EQ(back.units[i].lane, t.units[i].lane);
  }
  EXPECT_THROW(tune_all_scopes({}, small_grid(), 4, Stream(1)), std::invalid_argument);
}
