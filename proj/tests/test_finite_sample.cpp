#include "cmrisk/finite_sample.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace cmrisk;

namespace {

AteConfig base_config(std::int64_t n) {
  AteConfig c;
  c.n = n;
  return c;
}

AteDataset from_pairs(const std::vector<std::pair<int, int>>& yd) {
  AteDataset data;
  for (auto [y, d] : yd) data.units.push_back({y, d, 1});
  return data;
}

}  // namespace

TEST(AteConfig, Validation) {
  AteConfig c = base_config(100);
  EXPECT_NO_THROW(c.validate());
  c.mu1 = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = base_config(0);
  EXPECT_THROW(c.validate(), ConfigError);
  c = base_config(4);
  c.h << 2.0, 0.0;  // 0.5 + 2 / 2 leaves the unit interval
  EXPECT_THROW(c.validate(), ConfigError);
  c = base_config(4);
  c.pi1 = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Simulate, DeterministicAndBalancedDesign) {
  const AteConfig c = base_config(100000);
  const AteDataset a = simulate_ate(c, 11), b = simulate_ate(c, 11);
  ASSERT_EQ(a.size(), 100000u);
  double treated = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a.units[i].y, b.units[i].y);
    ASSERT_EQ(a.units[i].d, b.units[i].d);
    ASSERT_EQ(a.units[i].c, b.units[i].c);
    treated += a.units[i].d;
  }
  EXPECT_NEAR(treated / 1e5, 0.5, 3.0 * std::sqrt(0.25 / 1e5));
  const AteDataset other = simulate_ate(c, 12);
  int differing = 0;
  for (std::size_t i = 0; i < 100; ++i) differing += a.units[i].d != other.units[i].d;
  EXPECT_GT(differing, 0);
}

TEST(Simulate, NearDegenerateOutcomeProbability) {
  AteConfig c = base_config(2000);
  c.mu1 = 1.0 - 1e-12;
  const AteDataset data = simulate_ate(c, 3);
  for (const AteUnit& u : data.units) {
    if (u.d == 1) {
      EXPECT_EQ(u.y, 1);
    }
  }
}

TEST(Simulate, CountSimulatorMatchesUnitSimulatorInLaw) {
  AteConfig c = base_config(40);
  c.mu0 = 0.3;
  c.mu1 = 0.7;
  c.pi1 = 0.4;
  const int reps = 20000;
  double a_team1 = 0, b_team1 = 0, a_s11 = 0, b_s11 = 0, a_s20 = 0, b_s20 = 0;
  for (int r = 0; r < reps; ++r) {
    const AteCounts a = AteCounts::from(simulate_ate(c, 1000 + static_cast<std::uint64_t>(r)));
    const AteCounts b = simulate_ate_counts(c, 5, static_cast<std::uint64_t>(r));
    a_team1 += a.team1();
    b_team1 += b.team1();
    a_s11 += a.successes[0][1];
    b_s11 += b.successes[0][1];
    a_s20 += a.successes[1][0];
    b_s20 += b.successes[1][0];
  }
  // means: 16, 40 * 0.4 * 0.5 * 0.7 = 5.6, 40 * 0.6 * 0.5 * 0.3 = 3.6
  const double se_team = std::sqrt(40 * 0.24 / reps);
  EXPECT_NEAR(a_team1 / reps, 16.0, 4 * se_team);
  EXPECT_NEAR(b_team1 / reps, 16.0, 4 * se_team);
  EXPECT_NEAR(a_s11 / reps, 5.6, 4 * std::sqrt(5.6 / reps));
  EXPECT_NEAR(b_s11 / reps, 5.6, 4 * std::sqrt(5.6 / reps));
  EXPECT_NEAR(a_s20 / reps, 3.6, 4 * std::sqrt(3.6 / reps));
  EXPECT_NEAR(b_s20 / reps, 3.6, 4 * std::sqrt(3.6 / reps));
}

TEST(Mle, ArmMeansAndFallback) {
  const MleResult m = mle(from_pairs({{1, 1}, {0, 1}, {1, 0}, {1, 0}}));
  EXPECT_DOUBLE_EQ(m.theta[0], 1.0);
  EXPECT_DOUBLE_EQ(m.theta[1], 0.5);
  EXPECT_FALSE(m.fallback);
  const MleResult all_treated = mle(from_pairs({{1, 1}, {1, 1}, {0, 1}}));
  EXPECT_DOUBLE_EQ(all_treated.theta[0], 0.5);
  EXPECT_NEAR(all_treated.theta[1], 2.0 / 3.0, 1e-15);
  EXPECT_TRUE(all_treated.fallback);
}

TEST(Mle, PoolsTeams) {
  AteDataset data;
  data.units = {{1, 0, 1}, {0, 0, 2}, {0, 0, 2}, {1, 1, 2}};
  const MleResult m = mle(data);
  EXPECT_NEAR(m.theta[0], 1.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(m.theta[1], 1.0);
}

TEST(Mle, ConsistentAtLargeN) {
  const AteConfig c = base_config(1000000);
  const MleResult m = mle(simulate_ate_counts(c, 42));
  EXPECT_NEAR(m.theta[0], 0.5, 3e-3);
  EXPECT_NEAR(m.theta[1], 0.5, 3e-3);
}

TEST(Psi, UnitEvaluations) {
  Vec theta(2);
  theta << 0.5, 0.5;
  const Vec a = psi_eval(theta, 0.5, {1, 1, 1});
  EXPECT_DOUBLE_EQ(a[0], 0.0);
  EXPECT_DOUBLE_EQ(a[1], 0.5);
  EXPECT_DOUBLE_EQ(a[2], 0.5);
  EXPECT_DOUBLE_EQ(a[3], 0.5);
  const Vec b = psi_eval(theta, 0.5, {1, 1, 2});
  EXPECT_DOUBLE_EQ(b[0], 0.0);
  EXPECT_DOUBLE_EQ(b[1], 0.0);
  EXPECT_DOUBLE_EQ(b[2], 0.0);
  EXPECT_DOUBLE_EQ(b[3], -0.5);
}

TEST(Psi, CountSumMatchesUnitSumAndIsCentred) {
  AteConfig c = base_config(3000);
  c.mu0 = 0.4;
  c.mu1 = 0.65;
  c.pi1 = 0.3;
  const AteDataset data = simulate_ate(c, 8);
  Vec theta(2);
  theta << 0.42, 0.61;
  Vec unit_sum = Vec::Zero(4);
  for (const AteUnit& u : data.units) unit_sum += psi_eval(theta, c.pi1, u);
  const Vec count_sum = psi_sum(theta, c.pi1, AteCounts::from(data));
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(unit_sum[j], count_sum[j], 1e-9);

  // E psi(theta0, X) = 0 at h = 0: sample mean of the scaled sums over replications
  const Vec theta0 = c.theta_nh();
  const LimitExperimentConfig lim = ate_limit_matrices(c.mu0, c.mu1, c.pi1);
  const int reps = 4000;
  Vec mean = Vec::Zero(4);
  for (int r = 0; r < reps; ++r)
    mean += psi_sum(theta0, c.pi1, simulate_ate_counts(c, 77, static_cast<std::uint64_t>(r))) / std::sqrt(3000.0);
  mean /= reps;
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(mean[j], 0.0, 3.5 * std::sqrt(lim.omega(j, j) / reps)) << j;
}

TEST(AteMatrices, HalfHalfValues) {
  const LimitExperimentConfig cfg = ate_limit_matrices(0.5, 0.5, 0.5);
  const Mat i0_inv = cfg.i0_inv();
  EXPECT_NEAR(i0_inv(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(i0_inv(1, 1), 0.5, 1e-15);
  EXPECT_NEAR(i0_inv(0, 1), 0.0, 1e-15);
  EXPECT_NEAR(cfg.omega(0, 0), 1.0 / 16, 1e-15);
  EXPECT_NEAR(cfg.omega(1, 1), 1.0 / 16, 1e-15);
  EXPECT_NEAR(cfg.omega(2, 2), 1.0 / 8, 1e-15);
  EXPECT_NEAR(cfg.omega(3, 3), 1.0 / 4, 1e-15);
  EXPECT_NEAR((cfg.k_mat * i0_inv * cfg.k_mat.transpose())(0, 0), 1.0, 1e-14);
  EXPECT_TRUE(cfg.psi.row(2).isZero(0.0));
  EXPECT_TRUE(cfg.psi.row(3).isZero(0.0));
  EXPECT_DOUBLE_EQ(cfg.psi(0, 0), -0.25);
  EXPECT_DOUBLE_EQ(cfg.psi(1, 1), -0.25);
}

TEST(AteMatrices, GeneralValuesAndBoundary) {
  const LimitExperimentConfig cfg = ate_limit_matrices(0.2, 0.7, 0.3);
  // K I0^-1 K' = 2 (s0 + s1)
  EXPECT_NEAR((cfg.k_mat * cfg.i0_inv() * cfg.k_mat.transpose())(0, 0), 2.0 * (0.16 + 0.21), 1e-14);
  EXPECT_NEAR(cfg.omega(3, 3), 0.21, 1e-15);
  EXPECT_THROW(ate_limit_matrices(0.0, 0.5, 0.5), ConfigError);
  EXPECT_THROW(ate_limit_matrices(0.5, 1.0, 0.5), ConfigError);
  EXPECT_THROW(ate_limit_matrices(0.5, 0.5, 1.0), ConfigError);
}

TEST(PlugIn, ZeroRuleIsDifferenceInMeans) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const AteConfig c = base_config(57);
    const AteDataset data = simulate_ate(c, seed);
    const MleResult m = mle(data);
    const PluginEstimate est = plug_in_estimator(data, c, RuleSpec::zero());
    EXPECT_EQ(est.kappa_hat, m.theta[1] - m.theta[0]);
  }
}

TEST(PlugIn, LinearRuleShift) {
  const AteConfig c = base_config(400);
  const AteCounts counts = simulate_ate_counts(c, 3);
  Mat cm(1, 4);
  cm << 0.3, -0.7, 0.2, 0.1;
  const PluginEstimate est = plug_in_estimator(counts, c, RuleSpec::linear(cm));
  const MleResult m = mle(counts);
  const Vec y = psi_sum(m.theta, c.pi1, counts) / 20.0;
  EXPECT_NEAR(est.kappa_hat, m.theta[1] - m.theta[0] + (cm * y)(0, 0) / 20.0, 1e-14);
  EXPECT_FALSE(est.clamped);
}

TEST(PlugIn, ClampsToActionSpaceAndFlagsFallback) {
  AteCounts counts;
  counts.n = 4;
  counts.units[0][1] = 4;  // everyone treated, team 1
  counts.successes[0][1] = 4;
  AteConfig c = base_config(4);
  Mat cm = Mat::Zero(1, 4);
  cm(0, 2) = 50.0;
  const PluginEstimate est = plug_in_estimator(counts, c, RuleSpec::linear(cm));
  EXPECT_TRUE(est.mle_fallback);
  EXPECT_TRUE(est.variance_floored);
  EXPECT_TRUE(est.clamped);
  EXPECT_DOUBLE_EQ(est.kappa_hat, 1.0);
}

TEST(PlugIn, ScaledErrorMatchesLimitLaw) {
  const AteConfig c = base_config(2000);
  const LimitExperimentConfig lim = ate_limit_matrices(0.5, 0.5, 0.5);
  Mat cm(1, 4);
  cm << -1.0, 1.0, 0.5, 0.0;
  for (const RuleSpec& rule : {RuleSpec::zero(), RuleSpec::linear(cm)}) {
    // limit law of delta(X, Y) at h = 0
    const JointGaussianLaw law = joint_law(lim, Vec::Zero(2));
    const Mat tail = rule.tail_coefficient(1, 4);
    Mat map(1, 6);
    map << lim.k_mat + tail * lim.psi, tail;
    const double var_limit = (map * law.cov * map.transpose())(0, 0);
    const int reps = 10000;
    double s = 0, s2 = 0;
    for (int r = 0; r < reps; ++r) {
      const PluginEstimate est = plug_in_estimator(simulate_ate_counts(c, 99, static_cast<std::uint64_t>(r)), c, rule);
      const double e = std::sqrt(2000.0) * (est.kappa_hat - c.kappa_nh());
      s += e;
      s2 += e * e;
    }
    const double mean = s / reps, var = s2 / reps - mean * mean;
    EXPECT_LT(std::abs(mean), 0.1 * std::sqrt(var_limit));
    EXPECT_NEAR(var, var_limit, 0.1 * var_limit);
  }
}

TEST(MomentStatistic, CentredUnderLocalAlternative) {
  AteConfig c = base_config(2000);
  c.h << 1.0, -1.0;
  const LimitExperimentConfig lim = ate_limit_matrices(0.5, 0.5, 0.5);
  const MomentVectorSpec spec = MomentVectorSpec::make(lim.omega, 2);
  const Vec theta = c.theta_nh();
  const int reps = 20000;
  Vec sum = Vec::Zero(spec.b()), sum2 = Vec::Zero(spec.b());
  for (int r = 0; r < reps; ++r) {
    const Vec w =
        w_vector(spec, psi_sum(theta, c.pi1, simulate_ate_counts(c, 5, static_cast<std::uint64_t>(r))) / std::sqrt(2000.0));
    sum += w;
    sum2 += w.cwiseProduct(w);
  }
  for (Eigen::Index j = 0; j < spec.b(); ++j) {
    const double mean = sum[j] / reps, sd = std::sqrt(sum2[j] / reps - mean * mean);
    // the finite-n variance of the moment statistic differs from Omega at O(1/n)
    EXPECT_LT(std::abs(mean), 3.0 * sd / std::sqrt(reps) + 2e-3) << j;
  }
}

TEST(ExactTiltedRisk, SingleUnitByHand) {
  // one unit: the empty arm falls back to 1/2 and the other mean is 0 or 1,
  // so the squared error is 1/4 with certainty
  EXPECT_NEAR(exact_difference_in_means_tilted_risk(base_config(1), 3.0), 0.25, 1e-14);
}

TEST(ExactTiltedRisk, ApproachesLimitValue) {
  const double limit = -4.0 * std::log(0.75);
  double prev = kInf;
  for (std::int64_t n : {100, 500, 2000}) {
    const double gap = exact_difference_in_means_tilted_risk(base_config(n), 8.0) - limit;
    EXPECT_GT(gap, 0.0);
    EXPECT_LT(gap, prev);
    prev = gap;
  }
  EXPECT_NEAR(exact_difference_in_means_tilted_risk(base_config(500), 8.0), limit + 0.00224, 2e-5);
}

TEST(Attainability, ZeroRuleMatchesLimitAndExactValue) {
  const AteConfig c = base_config(2000);
  const AttainabilityReport r = mc_attainability(c, RuleSpec::zero(), 0, 8.0, 10000, 2024);
  EXPECT_NEAR(r.limit_value, -4.0 * std::log(0.75), 1e-12);
  EXPECT_LT(r.relative_gap, 0.10);
  EXPECT_GT(r.mc_standard_error, 0.0);
  EXPECT_LT(r.mc_standard_error, 0.05);
  const double exact = exact_difference_in_means_tilted_risk(c, 8.0);
  EXPECT_NEAR(r.finite_value, exact, 4.0 * r.mc_standard_error);
  EXPECT_EQ(r.fallback_count, 0);
}

TEST(Attainability, EquivariantInLocalParameter) {
  AteConfig c = base_config(2000);
  const AttainabilityReport at_zero = mc_attainability(c, RuleSpec::zero(), 0, 8.0, 20000, 1);
  c.h << 1.0, -1.0;
  const AttainabilityReport shifted = mc_attainability(c, RuleSpec::zero(), 0, 8.0, 20000, 2);
  EXPECT_DOUBLE_EQ(at_zero.limit_value, shifted.limit_value);
  const double se = std::hypot(at_zero.mc_standard_error, shifted.mc_standard_error);
  EXPECT_NEAR(at_zero.finite_value, shifted.finite_value, 4.0 * se);
}

TEST(Attainability, WithMomentTiltAtOrderTwo) {
  const AteConfig c = base_config(2000);
  IntegratorSettings s;
  s.mc_draws = 200000;
  const AttainabilityReport r = mc_attainability(c, RuleSpec::zero(), 2, 8.0, 10000, 3, s);
  ASSERT_TRUE(std::isfinite(r.limit_value));
  EXPECT_EQ(r.beta_star.size(), 14);
  EXPECT_LT(r.relative_gap, 0.10);
}

TEST(Attainability, RejectsTooFewReplications) {
  EXPECT_THROW(mc_attainability(base_config(100), RuleSpec::zero(), 0, 8.0, 5, 1), ConfigError);
}
