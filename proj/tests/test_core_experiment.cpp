#include "cmrisk/core_experiment.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace cmrisk;

namespace {

LimitExperimentConfig ate_half() {
  // mu_0 = mu_1 = 1/2, pi_1 = 1/2
  Mat i0 = Mat::Identity(2, 2) * 2.0;
  Mat psi = Mat::Zero(4, 2);
  psi(0, 0) = -0.25;
  psi(1, 1) = -0.25;
  Mat omega = Vec((Vec(4) << 1.0 / 16, 1.0 / 16, 1.0 / 8, 1.0 / 4).finished()).asDiagonal();
  Mat k(1, 2);
  k << -1.0, 1.0;
  return LimitExperimentConfig::make(i0, psi, omega, k, 8.0);
}

}  // namespace

TEST(JointLaw, NormalizedScalarAtZero) {
  const auto cfg = LimitExperimentConfig::normalized_scalar(2.0, 4.0);
  const auto law = joint_law(cfg, Vec::Zero(1));
  EXPECT_DOUBLE_EQ(law.mean[0], 0.0);
  EXPECT_DOUBLE_EQ(law.mean[1], 0.0);
  EXPECT_DOUBLE_EQ(law.cov(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(law.cov(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(law.cov(1, 0), 1.0);
  EXPECT_DOUBLE_EQ(law.cov(1, 1), 2.0);
}

TEST(JointLaw, MeanShiftsWithH) {
  const auto cfg = LimitExperimentConfig::normalized_scalar(2.0, 4.0);
  const auto law = joint_law(cfg, Vec::Constant(1, 3.0));
  EXPECT_DOUBLE_EQ(law.mean[0], 3.0);
  EXPECT_DOUBLE_EQ(law.mean[1], 3.0);
}

TEST(JointLaw, AteCrossCovariance) {
  const auto law = joint_law(ate_half(), Vec::Zero(2));
  // -I0^-1 Psi' puts pi_1 sigma_d^2 = 1/8 on the first two moment rows
  Mat expected = Mat::Zero(2, 4);
  expected(0, 0) = 0.125;
  expected(1, 1) = 0.125;
  EXPECT_LT((law.cov_xy() - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(JointLaw, InvariantIsUncorrelatedWithX) {
  const auto cfg = ate_half();
  const auto law = joint_law(cfg, Vec::Zero(2));
  // Cov(X, Y + Psi X) = Cov(X,Y) + Var(X) Psi'
  const Mat c = law.cov_xy() + law.cov_xx() * cfg.psi.transpose();
  EXPECT_EQ(c.cwiseAbs().maxCoeff(), 0.0);
  const Mat vz = law.cov_yy() + cfg.psi * law.cov_xy() + law.cov_xy().transpose() * cfg.psi.transpose() +
                 cfg.psi * law.cov_xx() * cfg.psi.transpose();
  EXPECT_LT((vz - invariant_covariance(cfg)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(JointLaw, RejectsBadConfigs) {
  EXPECT_THROW(LimitExperimentConfig::normalized_scalar(-1.0, 4.0), ConfigError);
  EXPECT_THROW(LimitExperimentConfig::normalized_scalar(2.0, 0.0), ConfigError);
  EXPECT_THROW(LimitExperimentConfig::make(Mat::Identity(2, 2), Mat::Zero(1, 1), Mat::Identity(1, 1),
                                           Mat::Ones(1, 2), 1.0),
               ConfigError);
  Mat indefinite(2, 2);
  indefinite << 1.0, 2.0, 2.0, 1.0;
  EXPECT_THROW(LimitExperimentConfig::make(indefinite, Mat::Zero(1, 2), Mat::Identity(1, 1), Mat::Ones(1, 2), 1.0),
               ConfigError);
}

TEST(ConditionalLaw, ScalarValues) {
  auto c2 = conditional_x_given_y(LimitExperimentConfig::normalized_scalar(2.0, 1.0));
  EXPECT_NEAR(c2.slope(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(c2.cond_cov(0, 0), 0.5, 1e-15);
  auto c6 = conditional_x_given_y(LimitExperimentConfig::normalized_scalar(6.0, 1.0));
  EXPECT_NEAR(c6.slope(0, 0), 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(c6.cond_cov(0, 0), 5.0 / 6.0, 1e-15);
}

TEST(ConditionalLaw, UninformativeMoments) {
  const auto cfg = LimitExperimentConfig::make(Mat::Constant(1, 1, 4.0), Mat::Zero(1, 1), Mat::Constant(1, 1, 2.0),
                                               Mat::Ones(1, 1), 1.0);
  const auto c = conditional_x_given_y(cfg);
  EXPECT_EQ(c.slope(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(c.cond_cov(0, 0), 0.25);
}

TEST(ConditionalLaw, TotalCovarianceIdentity) {
  const auto cfg = ate_half();
  const auto law = joint_law(cfg, Vec::Zero(2));
  const auto c = conditional_x_given_y(cfg);
  EXPECT_LT((c.slope * cfg.omega - law.cov_xy()).cwiseAbs().maxCoeff(), 1e-15);
  const Mat total = c.cond_cov + c.slope * cfg.omega * c.slope.transpose();
  EXPECT_LT((total - law.cov_xx()).cwiseAbs().maxCoeff(), 1e-12);
  const Vec h = (Vec(2) << 0.3, -1.1).finished();
  const Vec y = (Vec(4) << 0.1, 0.2, -0.3, 0.4).finished();
  const Vec m = c.conditional_mean(h, y);
  const Vec expected = h + law.cov_xy() * cfg.omega.inverse() * (y + cfg.psi * h);
  EXPECT_LT((m - expected).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(InvariantStatistic, Values) {
  const auto cfg = LimitExperimentConfig::normalized_scalar(2.0, 1.0);
  EXPECT_DOUBLE_EQ(invariant_statistic(cfg, Vec::Constant(1, 1.0), Vec::Constant(1, 1.0))[0], 0.0);
  EXPECT_DOUBLE_EQ(invariant_statistic(cfg, Vec::Constant(1, 0.5), Vec::Constant(1, 2.0))[0], 1.5);
  const double g = 2.7;
  const Vec x = Vec::Constant(1, 0.4), y = Vec::Constant(1, -1.3);
  EXPECT_NEAR(invariant_statistic(cfg, x.array() + g, y - cfg.psi * Vec::Constant(1, g))[0],
              invariant_statistic(cfg, x, y)[0], 1e-15);
  EXPECT_THROW(invariant_statistic(cfg, Vec::Zero(2), Vec::Zero(1)), ConfigError);
}

TEST(Sample, DeterministicPerSeed) {
  const auto cfg = LimitExperimentConfig::normalized_scalar(2.0, 1.0);
  const auto a = sample(cfg, Vec::Zero(1), 100, 42);
  const auto b = sample(cfg, Vec::Zero(1), 100, 42);
  const auto c = sample(cfg, Vec::Zero(1), 100, 43);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].x[0], b[i].x[0]);
    EXPECT_EQ(a[i].y[0], b[i].y[0]);
    differs = differs || a[i].x[0] != c[i].x[0];
  }
  EXPECT_TRUE(differs);
}

TEST(Sample, InvariantUncorrelatedWithX) {
  const auto cfg = LimitExperimentConfig::normalized_scalar(2.0, 1.0);
  const auto draws = sample(cfg, Vec::Zero(1), 1'000'000, 7);
  double sx = 0, sz = 0, sxx = 0, szz = 0, sxz = 0;
  for (const auto& d : draws) {
    const double x = d.x[0], z = d.y[0] - x;
    sx += x;
    sz += z;
    sxx += x * x;
    szz += z * z;
    sxz += x * z;
  }
  const double n = static_cast<double>(draws.size());
  const double cov = sxz / n - sx * sz / (n * n);
  const double corr = cov / std::sqrt((sxx / n - sx * sx / (n * n)) * (szz / n - sz * sz / (n * n)));
  EXPECT_LT(std::abs(corr), 3e-3);
  EXPECT_NEAR(szz / n - sz * sz / (n * n), 1.0, 0.01);  // Omega - 1
}

TEST(Sample, MeanOfYFollowsH) {
  const auto cfg = LimitExperimentConfig::normalized_scalar(2.0, 1.0);
  const auto draws = sample(cfg, Vec::Constant(1, 2.0), 200'000, 11);
  double sy = 0;
  for (const auto& d : draws) sy += d.y[0];
  const double n = static_cast<double>(draws.size());
  EXPECT_NEAR(sy / n, 2.0, 3.0 * std::sqrt(2.0 / n) + 1e-12);
  EXPECT_THROW(sample(cfg, Vec::Zero(1), 0, 1), ConfigError);
}
