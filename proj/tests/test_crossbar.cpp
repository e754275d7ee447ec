#include <cmath>

#include <gtest/gtest.h>

#include "cimsim/calib.hpp"
#include "cimsim/crossbar.hpp"

using namespace cimsim;

namespace {

CellDistParams exact_cells() {
  CellDistParams d;
  d.g_lrs_sigma = 0.0;
  d.g_hrs_sigma = 0.0;
  return d;
}

AdcParams no_mismatch(AdcRefConfig ref = {}) {
  AdcParams a;
  a.ref = ref;
  a.sigma_static = 0.0;
  a.sigma_dynamic = 0.0;
  return a;
}

BitPattern pattern_with_group(std::array<std::uint8_t, kGroupSize> bits, AccGroupId gid) {
  BitPattern p = BitPattern::filled(0);
  for (int i = 0; i < kGroupSize; ++i) p.bits[(gid.first_row() + i) * kCols + gid.column] = bits[i];
  return p;
}

}  // namespace

TEST(Geometry, GroupsAndLanes) {
  EXPECT_EQ(kGroupsPerColumn, 9);
  EXPECT_EQ(kGroupsPerModule, 576);
  EXPECT_EQ((AccGroupId{63, 8}).lane(), 7);
  EXPECT_EQ((AccGroupId{8, 0}).lane(), 1);
  for (int i = 0; i < kGroupsPerModule; ++i) EXPECT_EQ(AccGroupId::from_index(i).index(), i);
  EXPECT_THROW((AccGroupId{64, 0}).validate(), std::out_of_range);
}

TEST(BuildModule, AllLrsExact) {
  const auto m = build_module(exact_cells(), BitPattern::filled(1), no_mismatch(), {}, Stream(1));
  for (const auto& c : m.cells) EXPECT_EQ(c.g, 1.0);
}

TEST(BuildModule, HalfLrsWithinBinomialBand) {
  const auto p = BitPattern::random(Stream(3), 0.5);
  int ones = 0;
  for (auto b : p.bits) ones += b;
  const double n = kRows * kCols;
  EXPECT_LT(std::abs(ones - 0.5 * n), 3.0 * std::sqrt(n * 0.25));
}

TEST(BuildModule, RebuildIsIdentical) {
  const auto p = BitPattern::random(Stream(4));
  const auto a = build_module(CellDistParams{}, p, AdcParams{}, {}, Stream(5));
  const auto b = build_module(CellDistParams{}, p, AdcParams{}, {}, Stream(5));
  for (std::size_t i = 0; i < a.cells.size(); ++i) EXPECT_EQ(a.cells[i].g, b.cells[i].g);
  BitPattern bad = p;
  bad.bits.pop_back();
  EXPECT_THROW(build_module(CellDistParams{}, bad, AdcParams{}, {}, Stream(5)), std::invalid_argument);
}

TEST(GoldenSum, HandExamples) {
  const AccGroupId gid{5, 2};
  const auto all = build_module(exact_cells(), BitPattern::filled(1), no_mismatch(), {}, Stream(1));
  EXPECT_EQ(golden_sum(all, gid, 0x1FF), 9);
  EXPECT_EQ(golden_sum(all, gid, 0), 0);
  const auto alt = build_module(exact_cells(), pattern_with_group({1, 0, 1, 0, 1, 0, 1, 0, 1}, gid), no_mismatch(),
                                {}, Stream(1));
  EXPECT_EQ(golden_sum(alt, gid, 0x1FF), 5);
}

TEST(MacVoltage, DividerProperties) {
  const auto m = build_module(exact_cells(), BitPattern::random(Stream(2)), no_mismatch(), {}, Stream(1));
  const AccGroupId gid{0, 0};
  EXPECT_EQ(mac_voltage(m, gid, 0), 0.0);
  EXPECT_THROW(mac_voltage(m, gid, 512), std::invalid_argument);
  TransferParams x;
  EXPECT_DOUBLE_EQ(x.fraction(x.g_half), 0.5);

  // Strictly monotone in the activated conductance.
  double prev = -1.0;
  for (int k = 0; k <= 9; ++k) {
    const auto all = build_module(exact_cells(), BitPattern::filled(1), no_mismatch(), {}, Stream(1));
    const double v = mac_voltage(all, gid, static_cast<Wordlines>((1u << k) - 1));
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(ReadGroup, IdealReferenceRecoversGolden) {
  const CellDistParams d = exact_cells();
  const TransferParams x;
  const AdcRefConfig ideal = ideal_reference(d, x);
  const auto m = build_module(d, BitPattern::random(Stream(8)), no_mismatch(ideal), x, Stream(9));
  // Absolute binning of the noiseless responses is the decode map.
  ResponseCounts rc;
  Stream rng(10);
  for (int gi = 0; gi < kGroupsPerModule; gi += 7)
    for (int wl = 0; wl < kWordlinePatterns; ++wl) {
      const AccGroupId gid = AccGroupId::from_index(gi);
      rc.add(golden_sum(m, gid, wl), read_group(m, gid, static_cast<Wordlines>(wl), rng));
    }
  const BinMap map = absolute_binning(rc);
  EXPECT_EQ(score_config(rc, map), 0.0);
}

TEST(ReadGroup, ZeroInputAndSaturation) {
  const auto m = build_module(exact_cells(), BitPattern::filled(1), no_mismatch({0.001, 0.001, 0.3}), {}, Stream(1));
  Stream rng(2);
  const AccGroupId gid{3, 3};
  EXPECT_EQ(read_group(m, gid, 0, rng), 0);
  EXPECT_EQ(read_group(m, gid, 0x1FF, rng), 15);
}

TEST(ReadGroup, IdealCodesSeparateGoldenValues) {
  const AdcRefConfig ideal = ideal_reference(exact_cells(), TransferParams{});
  const auto m = build_module(exact_cells(), BitPattern::random(Stream(12)), no_mismatch(ideal), {}, Stream(1));
  Stream rng(0);
  std::array<int, kGoldenValues> lo, hi;
  lo.fill(kAdcStates);
  hi.fill(-1);
  for (int gi = 0; gi < kGroupsPerModule; gi += 5)
    for (int wl = 0; wl < kWordlinePatterns; wl += 3) {
      const AccGroupId gid = AccGroupId::from_index(gi);
      const int g = golden_sum(m, gid, static_cast<Wordlines>(wl));
      const int c = read_group(m, gid, static_cast<Wordlines>(wl), rng);
      lo[g] = std::min(lo[g], c);
      hi[g] = std::max(hi[g], c);
    }
  for (int g = 0; g + 1 < kGoldenValues; ++g)
    if (hi[g] >= 0 && hi[g + 1] >= 0) EXPECT_LT(hi[g], lo[g + 1]) << g;
}

TEST(ReadGroup, IsolatedFromOtherGroups) {
  auto m = build_module(CellDistParams{}, BitPattern::random(Stream(13)), no_mismatch(), {}, Stream(14));
  const AccGroupId gid{10, 4};
  std::vector<int> before;
  for (int wl = 0; wl < kWordlinePatterns; ++wl) {
    Stream s(wl);
    before.push_back(read_group(m, gid, static_cast<Wordlines>(wl), s));
  }
  for (int r = 0; r < kRows; ++r)
    for (int c = 0; c < kCols; ++c)
      if (c != gid.column || r / kGroupSize != gid.group) m.cell(r, c).g *= 3.0;
  for (int wl = 0; wl < kWordlinePatterns; ++wl) {
    Stream s(wl);
    EXPECT_EQ(read_group(m, gid, static_cast<Wordlines>(wl), s), before[wl]);
  }
}

TEST(ReadGroup, TrackedReadsStressHrsOnly) {
  auto m = build_module(exact_cells(), pattern_with_group({1, 0, 1, 0, 1, 0, 1, 0, 1}, {0, 0}), no_mismatch(), {},
                        Stream(1));
  m.track_stress = true;
  Stream rng(1);
  read_group_tracked(m, {0, 0}, 0x1FF, rng);
  for (int i = 0; i < kGroupSize; ++i) EXPECT_EQ(m.cell(i, 0).stress_cycles, i % 2 ? 1u : 0u);
}

TEST(IdealReference, SeparatesNoiselessLevels) {
  const CellDistParams d = exact_cells();
  const TransferParams x;
  const AdcRefConfig ref = ideal_reference(d, x);
  const auto spans = level_spans(d, x);
  const auto t = thresholds(ref);
  // Every gap between consecutive levels holds at least one threshold.
  for (int k = 0; k + 1 < kGoldenValues; ++k) {
    bool found = false;
    for (double tj : t) found |= tj > spans[k][1] * ref.v_blt && tj <= spans[k + 1][0] * ref.v_blt;
    EXPECT_TRUE(found) << k;
  }

  CellDistParams weak = d;
  weak.g_hrs_mu = std::log(0.9);
  EXPECT_THROW(ideal_reference(weak, x), std::runtime_error);
}

TEST(ModuleJson, RoundTrip) {
  auto m = build_module(CellDistParams{}, BitPattern::random(Stream(1)), AdcParams{}, {}, Stream(2));
  m.cells[17].stress_cycles = 99;
  const auto back = module_from_json(nlohmann::json::parse(to_json(m).dump()));
  for (std::size_t i = 0; i < m.cells.size(); ++i) {
    EXPECT_EQ(back.cells[i].g, m.cells[i].g);
    EXPECT_EQ(back.cells[i].programmed, m.cells[i].programmed);
    EXPECT_EQ(back.cells[i].stress_cycles, m.cells[i].stress_cycles);
  }
  for (int l = 0; l < kLanes; ++l) EXPECT_EQ(back.lanes[l].mismatch, m.lanes[l].mismatch);
}
