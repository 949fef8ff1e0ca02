#include "cmrisk/adaptive.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace cmrisk;

namespace {

IntegratorSettings coarse() {
  IntegratorSettings s;
  s.nodes = 48;
  return s;
}

// E[soft(Z, tau)^2] for Z ~ N(0, v).
double soft_threshold_second_moment(double tau, double v) {
  const double sd = std::sqrt(v), t = tau / sd;
  const double tail = 0.5 * std::erfc(t / std::sqrt(2.0));
  const double dens = std::exp(-0.5 * t * t) / std::sqrt(2.0 * M_PI);
  return 2.0 * v * ((1.0 + t * t) * tail - t * dens);
}

}  // namespace

TEST(LambdaGrid, DefaultSpansEminus3ToE6) {
  const LambdaGrid g;
  ASSERT_EQ(g.size(), 37u);
  EXPECT_NEAR(g.lambda(0), std::exp(-3.0), 1e-14);
  EXPECT_NEAR(g.lambda(36), std::exp(6.0), 1e-9);
  EXPECT_NEAR(g.log_lambda(4), -2.0, 1e-14);
}

TEST(LambdaGrid, SingleAndInvalid) {
  const LambdaGrid g = LambdaGrid::single(4.0);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_NEAR(g.lambda(0), 4.0, 1e-14);
  EXPECT_THROW(LambdaGrid::single(0.0), ConfigError);
  EXPECT_THROW(LambdaGrid(1.0, 0.0, 5), ConfigError);
  EXPECT_THROW(LambdaGrid(0.0, 1.0, 0), ConfigError);
}

TEST(PointwiseOptimum, RejectsUninformativeMoments) {
  EXPECT_THROW(pointwise_optimal_risk(1.0, 2.0), ConfigError);
  EXPECT_THROW(pointwise_optimal_risk(0.5, 2.0), ConfigError);
  EXPECT_THROW(rule_risk_curve(RuleSpec::zero(), 1.0, LambdaGrid()), ConfigError);
}

TEST(PointwiseOptimum, GridEndpoints) {
  // independent dense-grid minimization of the closed form
  EXPECT_NEAR(pointwise_optimal_risk(2.0, std::exp(-3.0)), 1.9754, 2e-4);
  EXPECT_NEAR(pointwise_optimal_risk(2.0, std::exp(6.0)), 1.00186, 2e-5);
  EXPECT_NEAR(pointwise_optimal_risk(6.0, std::exp(-3.0)), 5.876, 1e-3);
  EXPECT_NEAR(pointwise_optimal_risk(6.0, std::exp(6.0)), 1.0024, 1e-4);
}

TEST(PointwiseOptimum, DecreasesInLambdaTowardVarianceOfX) {
  double prev = kInf;
  for (double ll = -3.0; ll <= 8.0; ll += 0.5) {
    const double r = pointwise_optimal_risk(3.0, std::exp(ll));
    EXPECT_LT(r, prev + 1e-12);
    EXPECT_GT(r, 1.0);
    prev = r;
  }
  EXPECT_NEAR(pointwise_optimal_risk(3.0, std::exp(12.0)), 1.0, 1e-4);
}

TEST(RiskCurve, ZeroRuleInfiniteBelowThreshold) {
  // Var(X | Y) = 1 - 1/omega = 1/2, so the zero rule has finite risk iff lambda > 1.
  const LambdaGrid g(-1.0, 1.0, 5);
  const AdaptiveReport rep = rule_risk_curve(RuleSpec::zero(), 2.0, g, coarse());
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g.lambda(i) <= 1.0) {
      EXPECT_TRUE(std::isinf(rep.ratio[i])) << g.lambda(i);
    } else {
      EXPECT_TRUE(std::isfinite(rep.ratio[i])) << g.lambda(i);
    }
  }
  EXPECT_TRUE(std::isinf(rep.regret));
  EXPECT_TRUE(std::isfinite(rep.regret_finite));
  EXPECT_NEAR(rep.argmax_lambda, std::exp(0.5), 1e-12);
}

TEST(RiskCurve, LinearRuleMatchesClosedForm) {
  const LambdaGrid g(-3.0, 5.0, 9);
  const RuleSpec rule = RuleSpec::linear_scalar(0.4);
  const AdaptiveReport rep = rule_risk_curve(rule, 2.5, g);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double exact =
        linear_rule_risk_closed_form(LimitExperimentConfig::normalized_scalar(2.5, g.lambda(i)), rule.c());
    if (std::isinf(exact)) {
      EXPECT_TRUE(std::isinf(rep.risk_rule[i]));
      continue;
    }
    EXPECT_NEAR(rep.risk_rule[i], exact, 1e-7 * exact);
    EXPECT_GE(rep.ratio[i], 1.0 - 1e-9);
  }
}

TEST(RiskCurve, SoftThresholdAtLargeLambdaIsSecondMoment) {
  // For lambda -> infinity the risk is E[(X + gamma(Z))^2] = 1 + E gamma(Z)^2.
  const double tau = 0.4;
  const AdaptiveReport rep = rule_risk_curve(RuleSpec::soft_threshold(tau), 2.0, LambdaGrid::single(std::exp(9.0)));
  EXPECT_NEAR(rep.risk_rule[0], 1.0 + soft_threshold_second_moment(tau, 1.0), 2e-3);
}

TEST(TuneThreshold, RejectsOtherFamilies) {
  EXPECT_THROW(tune_threshold(RuleFamily::spline, 2.0, LambdaGrid()), ConfigError);
  EXPECT_THROW(tune_threshold(RuleFamily::linear, 2.0, LambdaGrid()), ConfigError);
}

TEST(TuneThreshold, TunedTauBeatsNeighbours) {
  const LambdaGrid g(-3.0, 6.0, 19);
  for (RuleFamily fam : {RuleFamily::soft_threshold, RuleFamily::erm}) {
    const TunedRule t = tune_threshold(fam, 2.0, g, coarse());
    const double tau = t.rule.tau();
    EXPECT_GT(tau, 1e-3);
    EXPECT_LT(tau, 10.0);
    for (double f : {0.9, 0.98, 1.02, 1.1}) {
      const RuleSpec other = fam == RuleFamily::erm ? RuleSpec::erm(tau * f) : RuleSpec::soft_threshold(tau * f);
      EXPECT_GE(rule_risk_curve(other, 2.0, g, coarse()).regret, t.report.regret - 1e-7) << to_string(fam) << " " << f;
    }
    for (double r : t.report.ratio) EXPECT_GE(r, 1.0 - 1e-6);
  }
}

TEST(TuneThreshold, SingleLambdaNearlyAttainsOptimum) {
  // At very large lambda the optimal shrinkage is almost total and a large
  // threshold reproduces it.
  const TunedRule t = tune_threshold(RuleFamily::soft_threshold, 2.0, LambdaGrid::single(std::exp(6.0)), coarse());
  EXPECT_LT(t.report.regret, 1.01);
  EXPECT_GE(t.report.regret, 1.0 - 1e-6);
  EXPECT_GT(t.rule.tau(), 2.0);
}

TEST(SplineModel, MatchesNestedQuadratureAndDerivatives) {
  const double omega = 2.0;
  const IntegratorSettings s = coarse();
  const std::vector<double> knots{-3.0, -1.5, 0.0, 1.5, 3.0};
  const detail::SplineRiskModel model(omega, knots, s);
  Vec v(5);
  v << -2.5, -0.8, 0.1, 1.0, 2.2;
  const double lambda = 3.0;
  double risk = 0.0;
  Vec g;
  Mat h;
  model.evaluate(v, lambda, risk, &g, &h);
  const RuleSpec rule = RuleSpec::spline(knots, std::vector<double>(v.data(), v.data() + 5));
  const double nested =
      infinite_m_risk(LimitExperimentConfig::normalized_scalar(omega, lambda), rule, LossSpec::squared(), s).value;
  EXPECT_NEAR(risk, nested, 1e-10 * nested);
  const double step = 1e-5;
  for (Eigen::Index j = 0; j < 5; ++j) {
    Vec up = v, dn = v;
    up[j] += step;
    dn[j] -= step;
    double ru = 0.0, rd = 0.0;
    Vec gu, gd;
    model.evaluate(up, lambda, ru, &gu, nullptr);
    model.evaluate(dn, lambda, rd, &gd, nullptr);
    EXPECT_NEAR(g[j], (ru - rd) / (2 * step), 1e-6);
    for (Eigen::Index i = 0; i < 5; ++i) EXPECT_NEAR(h(i, j), (gu[i] - gd[i]) / (2 * step), 1e-5);
  }
}

TEST(Spline, BeatsSimpleFamiliesAndIsAntisymmetric) {
  const LambdaGrid g(-3.0, 6.0, 19);
  const IntegratorSettings s = coarse();
  const SplineFit fit = optimize_spline(2.0, g, 11, s);
  EXPECT_EQ(fit.status, SolverStatus::converged);
  const TunedRule st = tune_threshold(RuleFamily::soft_threshold, 2.0, g, s);
  EXPECT_LE(fit.report.regret, st.report.regret + 1e-6);
  for (double r : fit.report.ratio) EXPECT_GE(r, 1.0 - 1e-6);
  // the smoothed maximum overstates the true maximum by at most mu log(n)
  EXPECT_LE(fit.report.regret, fit.smoothed_regret + 1e-9);
  EXPECT_GE(fit.report.regret, fit.smoothed_regret - 2e-5 * std::log(19.0) - 1e-9);

  const auto& vals = fit.rule.values();
  for (std::size_t i = 0; i < vals.size(); ++i) EXPECT_NEAR(vals[i], -vals[vals.size() - 1 - i], 1e-3);

  const SplineFit sym = optimize_spline(2.0, g, 11, s, true);
  EXPECT_NEAR(sym.report.regret, fit.report.regret, 1e-5);
}

TEST(Spline, RejectsBadInputs) {
  EXPECT_THROW(optimize_spline(1.0, LambdaGrid()), ConfigError);
  EXPECT_THROW(optimize_spline(2.0, LambdaGrid(), 1), ConfigError);
}

TEST(TuneLinear, BestCoefficientIsInteriorAndBeatsGmm) {
  const LambdaGrid g(-3.0, 6.0, 19);
  const TunedRule t = tune_linear(2.0, g, coarse());
  const double c = t.rule.c()(0, 0);
  EXPECT_GT(c, 0.0);
  EXPECT_LT(c, 1.0);
  const AdaptiveReport gmm = rule_risk_curve(RuleSpec::linear_scalar(1.0), 2.0, g, coarse());
  EXPECT_LE(t.report.regret, gmm.regret + 1e-9);
  EXPECT_NEAR(gmm.ratio.back(), 2.0 / pointwise_optimal_risk(2.0, std::exp(6.0)), 1e-9);
  for (double f : {0.99, 1.01}) {
    EXPECT_GE(rule_risk_curve(RuleSpec::linear_scalar(c * f), 2.0, g, coarse()).regret, t.report.regret - 1e-7);
  }
}
