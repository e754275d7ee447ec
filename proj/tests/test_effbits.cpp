#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "cimsim/effbits.hpp"
#include "lp_oracle.hpp"

using namespace cimsim;

namespace {

struct Instance {
  Eigen::MatrixXd a;
  Eigen::VectorXd y;
};

// 0/1 design with a forced identity block so the system has full rank, and
// integer-perturbed responses.
Instance random_instance(Stream& rng, int rows = 64, int cols = 9) {
  Instance in{Eigen::MatrixXd(rows, cols), Eigen::VectorXd(rows)};
  Eigen::VectorXd x(cols);
  for (int j = 0; j < cols; ++j) x(j) = rng.uniform() < 0.5 ? 0.0 : 1.0;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) in.a(i, j) = i < cols ? (i == j) : (rng.uniform() < 0.5 ? 1.0 : 0.0);
  in.y = in.a * x;
  for (int i = 0; i < rows; ++i) {
    const double u = rng.uniform();
    if (u < 0.15) in.y(i) += 1.0;
    else if (u < 0.3) in.y(i) -= 1.0;
  }
  return in;
}

double lp_objective(const Instance& in) {
  std::vector<std::vector<double>> a(in.a.rows(), std::vector<double>(in.a.cols()));
  std::vector<double> y(in.y.data(), in.y.data() + in.y.size());
  for (int i = 0; i < in.a.rows(); ++i)
    for (int j = 0; j < in.a.cols(); ++j) a[i][j] = in.a(i, j);
  return cimsim::testing::lp_lad(a, y).objective;
}

std::vector<FitSample> exhaustive_samples(const std::array<double, kGroupSize>& eb) {
  std::vector<FitSample> s;
  for (int wl = 0; wl < kWordlinePatterns; ++wl) {
    double y = 0.0;
    for (int i = 0; i < kGroupSize; ++i)
      if (wordline_active(static_cast<Wordlines>(wl), i)) y += eb[i];
    s.push_back({static_cast<Wordlines>(wl), y});
  }
  return s;
}

}  // namespace

TEST(Lad, MatchesLinearProgramOnRandomInstances) {
  Stream rng(2024);
  for (int k = 0; k < 120; ++k) {
    const Instance in = random_instance(rng);
    const double lp = lp_objective(in);
    const LadResult r = solve_lad(in.a, in.y);
    EXPECT_LE(std::abs(r.objective - lp), 1e-6 * std::max(1.0, lp)) << "instance " << k;
    EXPECT_NEAR(r.objective, (in.y - in.a * r.x).cwiseAbs().sum(), 1e-9);
  }
}

TEST(Lad, ExactSystemHasZeroObjective) {
  Stream rng(5);
  Eigen::MatrixXd a = Eigen::MatrixXd::Random(30, 4);
  const Eigen::Vector4d x(1.0, -2.0, 0.5, 3.0);
  const LadResult r = solve_lad(a, a * x);
  EXPECT_LT((r.x - x).norm(), 1e-8);
  EXPECT_LT(r.objective, 1e-8);
}

TEST(Lad, RobustToOneOutlier) {
  Eigen::MatrixXd a(7, 1);
  a.setOnes();
  Eigen::VectorXd y(7);
  y << 1, 1, 1, 1, 1, 1, 100;
  const LadResult r = solve_lad(a, y);
  EXPECT_NEAR(r.x(0), 1.0, 1e-8);
  EXPECT_NEAR(r.objective, 99.0, 1e-6);
}

TEST(Lad, RankDeficientNamesColumns) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Ones(10, 3);
  a.col(1).setZero();
  for (int i = 0; i < 10; ++i) a(i, 2) = i;
  try {
    solve_lad(a, Eigen::VectorXd::Ones(10));
    FAIL() << "expected RankDeficientError";
  } catch (const RankDeficientError& e) {
    EXPECT_EQ(e.columns(), std::vector<int>{1});
  }
}

TEST(FitEffectiveBits, RecoversExactBits) {
  const std::array<double, kGroupSize> bits{1, 0, 0, 1, 1, 0, 1, 0, 1};
  const auto samples = exhaustive_samples(bits);
  const EffBitGroup g = fit_effective_bits(samples);
  for (int i = 0; i < kGroupSize; ++i) EXPECT_NEAR(g.eb[i], bits[i], 1e-6);
  EXPECT_NEAR(g.objective, 0.0, 1e-9);
  EXPECT_EQ(g.intercept, 0.0);
  EXPECT_EQ(g.residuals.size(), 512u);
}

TEST(FitEffectiveBits, InterceptAbsorbsConstantShift) {
  const std::array<double, kGroupSize> eb{0.9, 0.1, 0.0, 1.0, 0.2, 0.0, 1.1, 0.0, 0.8};
  auto samples = exhaustive_samples(eb);
  for (auto& s : samples) s.y += 0.5;
  const EffBitGroup g = fit_effective_bits(samples, {.intercept = true});
  EXPECT_NEAR(g.intercept, 0.5, 1e-6);
  for (int i = 0; i < kGroupSize; ++i) EXPECT_NEAR(g.eb[i], eb[i], 1e-6);
}

TEST(FitEffectiveBits, NeverDrivenCellIsUnidentifiable) {
  std::vector<FitSample> samples;
  for (int wl = 0; wl < kWordlinePatterns; ++wl)
    if (!wordline_active(static_cast<Wordlines>(wl), 3)) samples.push_back({static_cast<Wordlines>(wl), 1.0});
  try {
    fit_effective_bits(samples);
    FAIL() << "expected UnidentifiableCellsError";
  } catch (const UnidentifiableCellsError& e) {
    EXPECT_EQ(e.cells(), std::vector<int>{3});
  }
  EXPECT_THROW(fit_effective_bits(std::span<const FitSample>(samples.data(), 4)), std::invalid_argument);
}

TEST(Residuals, HistogramAndBootstrapTables) {
  const std::vector<double> r{-1, 0, 0, 0, 1, 1, 2};
  const auto d = residual_distribution_of(r, 3);
  EXPECT_EQ(d.support, (std::vector<double>{-1, 0, 1, 2}));
  EXPECT_EQ(d.cumulative, (std::vector<std::uint64_t>{1, 4, 6, 7}));
  EXPECT_EQ(d.edges.size(), 4u);
  double mass = 0.0;
  for (double m : d.masses) mass += m;
  EXPECT_NEAR(mass, 1.0, 1e-12);
  EXPECT_NEAR(d.mean(), 3.0 / 7.0, 1e-12);

  Stream rng(1);
  std::array<int, 4> hits{};
  const int n = 70000;
  for (int i = 0; i < n; ++i) {
    const double v = d.draw(rng);
    ++hits[static_cast<int>(v) + 1];
  }
  const std::array<double, 4> p{1.0 / 7, 3.0 / 7, 2.0 / 7, 1.0 / 7};
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(hits[k] / double(n), p[k], 4.0 * std::sqrt(p[k] * (1 - p[k]) / n));

  EXPECT_THROW(residual_distribution_of({}, 3), std::invalid_argument);
  EXPECT_TRUE(residual_distribution_of(std::vector<double>{0, 0}, 5).degenerate_at_zero());
}

TEST(NoiseProfileTest, Ideal) {
  const auto p = NoiseProfile::ideal();
  EXPECT_TRUE(p.is_ideal());
  EXPECT_EQ(p.mu(0), 0.0);
  EXPECT_EQ(p.mu(1), 1.0);
  Stream rng(3);
  EXPECT_EQ(p.residual.draw(rng), 0.0);
  NoiseProfile q = p;
  q.sigma1 = 0.01;
  EXPECT_FALSE(q.is_ideal());
}

TEST(EbStatistics, PopulationMomentsPerScope) {
  std::vector<FittedGroup> groups;
  for (int m = 0; m < 2; ++m)
    for (int gi = 0; gi < kGroupsPerModule; ++gi) {
      FittedGroup g;
      g.module = m;
      g.gid = AccGroupId::from_index(gi);
      for (int i = 0; i < kGroupSize; ++i) {
        g.bits[i] = i % 2;
        g.fit.eb[i] = i % 2 ? 0.9 + 0.1 * m : (gi % 2 ? 0.1 : 0.3);
      }
      g.fit.residuals = {static_cast<double>(m)};
      groups.push_back(g);
    }
  const auto global = eb_statistics(groups, TuningScope::kGlobal);
  ASSERT_EQ(global.size(), 1u);
  EXPECT_NEAR(global[0].mu0, 0.2, 1e-12);
  EXPECT_NEAR(global[0].sigma0, 0.1, 1e-12);
  EXPECT_NEAR(global[0].mu1, 0.95, 1e-12);
  EXPECT_NEAR(global[0].sigma1, 0.05, 1e-12);

  const auto mod = eb_statistics(groups, TuningScope::kModule);
  ASSERT_EQ(mod.size(), 2u);
  EXPECT_EQ(mod[1].scope, "module:1");
  EXPECT_NEAR(mod[1].mu1, 1.0, 1e-12);
  EXPECT_NEAR(mod[1].sigma1, 0.0, 1e-12);
  EXPECT_EQ(mod[1].residual.support, std::vector<double>{1.0});

  const auto adc = eb_statistics(groups, TuningScope::kAdc);
  ASSERT_EQ(adc.size(), 2u * kLanes);
  EXPECT_EQ(adc[kLanes + 2].scope, "adc:1:2");

  const EbMap map = eb_map(groups, 0);
  EXPECT_EQ(map.bits[1 * kCols + 5], 1);
  EXPECT_NEAR(map.lane_error[0], 0.0, 1e-12);
  groups.pop_back();
  EXPECT_THROW(eb_map(groups, 1), std::invalid_argument);
}

TEST(Extract, IdealPipelineRecoversProgrammedBits) {
  CellDistParams d;
  d.g_lrs_sigma = 0.0;
  d.g_hrs_sigma = 0.0;
  AdcParams adc;
  adc.sigma_static = 0.0;
  adc.sigma_dynamic = 0.0;
  adc.ref = ideal_reference(d, TransferParams{});
  const std::vector<CrossbarModule> mods{build_module(d, BitPattern::random(Stream(4)), adc, {}, Stream(5))};
  const auto t = tune_references(mods, TuningScope::kGlobal, ReferenceGrid::singleton(adc.ref), 64, Stream(6));
  const auto fitted = extract_effective_bits(mods, t, 64, Stream(7));
  ASSERT_EQ(fitted.size(), static_cast<std::size_t>(kGroupsPerModule));
  for (const auto& g : fitted) {
    EXPECT_NEAR(g.fit.objective, 0.0, 1e-9);
    for (int i = 0; i < kGroupSize; ++i) EXPECT_NEAR(g.fit.eb[i], g.bits[i], 1e-6);
  }
  const auto p = eb_statistics(fitted, TuningScope::kGlobal);
  EXPECT_NEAR(p[0].mu0, 0.0, 1e-6);
  EXPECT_NEAR(p[0].mu1, 1.0, 1e-6);
}
