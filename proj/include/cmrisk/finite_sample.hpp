#pragma once

// Two-team average-treatment-effect model as a finite-sample test bed.
// Unit i has team C in {1, 2} (team 1 with probability pi1), a fair-coin
// treatment D, and a Bernoulli(mu_D) outcome Y. The target is mu1 - mu0 and
// team-1 units carry the extra moment conditions.

#include "cmrisk/core_experiment.hpp"
#include "cmrisk/dual_risk.hpp"
#include "cmrisk/gaussian_moments.hpp"
#include "cmrisk/quadrature.hpp"
#include "cmrisk/rng.hpp"
#include "cmrisk/rules.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace cmrisk {

struct AteConfig {
  double mu0 = 0.5;
  double mu1 = 0.5;
  double pi1 = 0.5;
  std::int64_t n = 1000;
  Vec h = Vec::Zero(2);

  /// theta_{n,h} = theta0 + h / sqrt(n)
  Vec theta_nh() const {
    Vec t(2);
    t << mu0, mu1;
    return t + h / std::sqrt(static_cast<double>(n));
  }
  double kappa_nh() const {
    const Vec t = theta_nh();
    return t[1] - t[0];
  }

  void validate() const {
    if (n < 1) throw ConfigError("sample size n must be at least 1");
    if (h.size() != 2 || !h.allFinite()) throw ConfigError("local parameter h must be a finite 2-vector");
    auto interior = [](double v) { return v > 0.0 && v < 1.0; };
    if (!interior(mu0) || !interior(mu1)) throw ConfigError("mu0 and mu1 must lie strictly inside (0, 1)");
    if (!interior(pi1)) throw ConfigError("pi1 must lie strictly inside (0, 1)");
    const Vec t = theta_nh();
    if (!interior(t[0]) || !interior(t[1])) throw ConfigError("theta0 + h / sqrt(n) leaves (0, 1)");
  }
};

struct AteUnit {
  int y = 0;  ///< outcome in {0, 1}
  int d = 0;  ///< treatment in {0, 1}
  int c = 1;  ///< team in {1, 2}
};

struct AteDataset {
  std::vector<AteUnit> units;
  std::size_t size() const { return units.size(); }
};

/// Sufficient statistics: units and successes by (team, arm); team index 0 is C = 1.
struct AteCounts {
  std::int64_t n = 0;
  std::array<std::array<std::int64_t, 2>, 2> units{};
  std::array<std::array<std::int64_t, 2>, 2> successes{};

  std::int64_t team1() const { return units[0][0] + units[0][1]; }
  std::int64_t arm(int d) const { return units[0][d] + units[1][d]; }
  std::int64_t arm_successes(int d) const { return successes[0][d] + successes[1][d]; }

  static AteCounts from(const AteDataset& data) {
    AteCounts out;
    out.n = static_cast<std::int64_t>(data.size());
    for (const AteUnit& u : data.units) {
      const int team = u.c == 1 ? 0 : 1;
      out.units[team][u.d] += 1;
      out.successes[team][u.d] += u.y;
    }
    return out;
  }
};

inline AteDataset simulate_ate(const AteConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Vec theta = cfg.theta_nh();
  CounterRng rng(seed, 0);
  AteDataset data;
  data.units.resize(static_cast<std::size_t>(cfg.n));
  for (AteUnit& u : data.units) {
    u.c = rng.bernoulli(cfg.pi1) ? 1 : 2;
    u.d = rng.bernoulli(0.5) ? 1 : 0;
    u.y = rng.bernoulli(theta[u.d]) ? 1 : 0;
  }
  return data;
}

/// Draws the sufficient statistics directly; same law as counting simulate_ate.
inline AteCounts simulate_ate_counts(const AteConfig& cfg, std::uint64_t seed, std::uint64_t stream = 0) {
  const Vec theta = cfg.theta_nh();
  CounterRng rng(seed, stream);
  AteCounts out;
  out.n = cfg.n;
  const auto n = static_cast<std::uint64_t>(cfg.n);
  const std::uint64_t team1 = rng.binomial(n, cfg.pi1);
  const std::array<std::uint64_t, 2> teams{team1, n - team1};
  for (int t = 0; t < 2; ++t) {
    const std::uint64_t treated = rng.binomial(teams[static_cast<std::size_t>(t)], 0.5);
    out.units[t][1] = static_cast<std::int64_t>(treated);
    out.units[t][0] = static_cast<std::int64_t>(teams[static_cast<std::size_t>(t)] - treated);
    for (int d = 0; d < 2; ++d)
      out.successes[t][d] = static_cast<std::int64_t>(rng.binomial(static_cast<std::uint64_t>(out.units[t][d]), theta[d]));
  }
  return out;
}

struct MleResult {
  Vec theta = Vec::Constant(2, 0.5);
  bool fallback = false;  ///< an arm was empty and its mean set to 1/2
};

/// Arm means of Y pooling both teams.
inline MleResult mle(const AteCounts& counts) {
  MleResult r;
  for (int d = 0; d < 2; ++d) {
    if (counts.arm(d) == 0) {
      r.fallback = true;
      continue;
    }
    r.theta[d] = static_cast<double>(counts.arm_successes(d)) / static_cast<double>(counts.arm(d));
  }
  return r;
}
inline MleResult mle(const AteDataset& data) { return mle(AteCounts::from(data)); }

inline Vec psi_eval(const Vec& theta, double pi1, const AteUnit& u) {
  const double team1 = u.c == 1 ? 1.0 : 0.0;
  Vec out(4);
  out << (u.y - theta[0]) * (1 - u.d) * team1, (u.y - theta[1]) * u.d * team1, (u.d - 0.5) * team1, team1 - pi1;
  return out;
}

/// Sum of psi(theta, X_i) over the sample.
inline Vec psi_sum(const Vec& theta, double pi1, const AteCounts& c) {
  Vec out(4);
  out << static_cast<double>(c.successes[0][0]) - theta[0] * static_cast<double>(c.units[0][0]),
      static_cast<double>(c.successes[0][1]) - theta[1] * static_cast<double>(c.units[0][1]),
      static_cast<double>(c.units[0][1]) - 0.5 * static_cast<double>(c.team1()),
      static_cast<double>(c.team1()) - pi1 * static_cast<double>(c.n);
  return out;
}

/// Limit-experiment matrices of the model at (mu0, mu1, pi1); lambda is left at 1.
inline LimitExperimentConfig ate_limit_matrices(double mu0, double mu1, double pi1, double lambda = 1.0) {
  auto interior = [](double v) { return v > 0.0 && v < 1.0; };
  if (!interior(mu0) || !interior(mu1) || !interior(pi1))
    throw ConfigError("ate_limit_matrices needs mu0, mu1, pi1 strictly inside (0, 1)");
  const double s0 = mu0 * (1.0 - mu0), s1 = mu1 * (1.0 - mu1);
  Mat i0 = Mat::Zero(2, 2);
  i0(0, 0) = 1.0 / (2.0 * s0);
  i0(1, 1) = 1.0 / (2.0 * s1);
  Mat psi = Mat::Zero(4, 2);
  psi(0, 0) = -pi1 / 2.0;
  psi(1, 1) = -pi1 / 2.0;
  Mat omega = Mat::Zero(4, 4);
  omega(0, 0) = pi1 * s0 / 2.0;
  omega(1, 1) = pi1 * s1 / 2.0;
  omega(2, 2) = pi1 / 4.0;
  omega(3, 3) = pi1 * (1.0 - pi1);
  Mat k(1, 2);
  k << -1.0, 1.0;
  return LimitExperimentConfig::make(i0, psi, omega, k, lambda);
}

struct PluginEstimate {
  Vec theta_hat;
  Vec y_stat;                   ///< n^{-1/2} sum psi(theta_hat, X_i)
  LimitExperimentConfig sigma;  ///< estimated limit matrices (K fixed at (-1, 1))
  double kappa_hat = 0.0;
  bool mle_fallback = false;
  bool variance_floored = false;  ///< theta_hat or the team share sat on the boundary
  bool clamped = false;           ///< estimate was pulled back into [-1, 1]
};

/// kappa(theta_hat) + n^{-1/2} delta(0, y_stat) with the limit rule evaluated
/// under matrices estimated at theta_hat and the sample team-1 share.
inline PluginEstimate plug_in_estimator(const AteCounts& counts, const AteConfig& cfg, const RuleSpec& rule) {
  const MleResult m = mle(counts);
  const double n = static_cast<double>(counts.n);
  PluginEstimate est{m.theta, psi_sum(m.theta, cfg.pi1, counts) / std::sqrt(n), {}, 0.0, m.fallback, false, false};
  // Estimated variances vanish on the boundary; keep them half a unit away.
  const double floor = 0.5 / n;
  auto inside = [&](double v) {
    const double c = std::clamp(v, floor, 1.0 - floor);
    if (c != v) est.variance_floored = true;
    return c;
  };
  const double pi_hat = inside(static_cast<double>(counts.team1()) / n);
  est.sigma = ate_limit_matrices(inside(m.theta[0]), inside(m.theta[1]), pi_hat);
  rule.check_compatible(est.sigma);
  const double base = m.theta[1] - m.theta[0];
  const double shift = rule.family() == RuleFamily::zero ? 0.0 : rule.evaluate(est.sigma, Vec::Zero(2), est.y_stat)[0];
  const double raw = base + shift / std::sqrt(n);
  est.kappa_hat = std::clamp(raw, -1.0, 1.0);
  est.clamped = est.kappa_hat != raw;
  return est;
}

inline PluginEstimate plug_in_estimator(const AteDataset& data, const AteConfig& cfg, const RuleSpec& rule) {
  return plug_in_estimator(AteCounts::from(data), cfg, rule);
}

namespace detail {

// Unconstrained multiplier risk of a linear rule under squared loss: the error
// is N(0, V) and the risk is -(lambda / 2) log det(I - 2 V / lambda).
inline RiskReport linear_rule_multiplier_risk(const LimitExperimentConfig& config, const RuleSpec& rule) {
  const JointGaussianLaw law = joint_law(config, Vec::Zero(config.p()));
  Mat map(config.d(), config.p() + config.k());
  const Mat c = rule.tail_coefficient(config.d(), config.k());
  map << config.k_mat + c * config.psi, c;
  const Mat v = map * law.cov * map.transpose();
  const Mat n_mat = Mat::Identity(config.d(), config.d()) - 2.0 * v / config.lambda;
  if (!linalg::is_spd(n_mat)) return RiskReport::infinite();
  RiskReport r;
  r.value = -0.5 * config.lambda * std::log(n_mat.determinant());
  return r;
}

}  // namespace detail

struct AttainabilityReport {
  std::int64_t n = 0;
  std::int64_t reps = 0;
  double limit_value = kInf;
  Vec beta_star;
  double finite_value = kInf;
  double mc_standard_error = kInf;  ///< batch means, propagated through lambda * log
  double relative_gap = kInf;
  std::int64_t fallback_count = 0;
  std::int64_t clamp_count = 0;
  SolverStatus status = SolverStatus::converged;
};

/// Squared-loss tilted risk of the plug-in estimator under Q_{n,h},
///   lambda log E[exp(n (delta_n - kappa)^2 / lambda + beta*' W)],
/// with beta* the limit-experiment dual optimum at order M and W built from
/// n^{-1/2} sum psi(theta_{n,h}, X_i). Compared to the limit-experiment risk.
inline AttainabilityReport mc_attainability(const AteConfig& cfg, const RuleSpec& rule, int max_order, double lambda,
                                            std::int64_t reps, std::uint64_t seed,
                                            const IntegratorSettings& settings = {}, int batches = 20) {
  cfg.validate();
  if (reps < batches || batches < 2) throw ConfigError("need at least as many replications as batches (>= 2)");
  const LimitExperimentConfig limit = ate_limit_matrices(cfg.mu0, cfg.mu1, cfg.pi1, lambda);
  const RiskReport lim = max_order == 0 && rule.is_linear_class()
                             ? detail::linear_rule_multiplier_risk(limit, rule)
                             : finite_m_dual_risk(limit, rule, LossSpec::squared(), max_order, settings);
  AttainabilityReport out;
  out.n = cfg.n;
  out.reps = reps;
  out.limit_value = lim.value;
  out.status = lim.status;
  if (!lim.finite()) return out;
  const MomentVectorSpec spec = MomentVectorSpec::make(limit.omega, max_order);
  out.beta_star = lim.beta_star.value_or(Vec::Zero(spec.b()));

  const double root_n = std::sqrt(static_cast<double>(cfg.n));
  const double kappa = cfg.kappa_nh();
  const Vec theta = cfg.theta_nh();
  Vec expo(reps);
  for (std::int64_t r = 0; r < reps; ++r) {
    const AteCounts counts = simulate_ate_counts(cfg, seed, static_cast<std::uint64_t>(r));
    const PluginEstimate est = plug_in_estimator(counts, cfg, rule);
    out.fallback_count += est.mle_fallback;
    out.clamp_count += est.clamped;
    const double err = root_n * (est.kappa_hat - kappa);
    double a = err * err / lambda;
    if (spec.b() > 0) a += out.beta_star.dot(w_vector(spec, psi_sum(theta, cfg.pi1, counts) / root_n));
    expo[r] = a;
  }
  if (expo.maxCoeff() > kExponentGuard) {
    out.status = SolverStatus::diverged_to_infinity;
    return out;
  }
  const double top = expo.maxCoeff();
  const Vec scaled = (expo.array() - top).exp().matrix();
  const double mean = scaled.mean();
  out.finite_value = lambda * (top + std::log(mean));
  const std::int64_t per = reps / batches;
  Vec batch_means(batches);
  for (int b = 0; b < batches; ++b) batch_means[b] = scaled.segment(b * per, per).mean();
  const double centre = batch_means.mean();
  const double var = (batch_means.array() - centre).square().sum() / (batches - 1);
  out.mc_standard_error = lambda * std::sqrt(var / batches) / mean;
  out.relative_gap = std::abs(out.finite_value - out.limit_value) / std::abs(out.limit_value);
  return out;
}

/// Exact lambda log E[exp(n (dm - kappa)^2 / lambda)] for the difference in
/// means dm, by summing over the binomial laws of the arm counts. Counts more
/// than eight standard deviations from their means are dropped.
inline double exact_difference_in_means_tilted_risk(const AteConfig& cfg, double lambda) {
  cfg.validate();
  const Vec theta = cfg.theta_nh();
  const double kappa = cfg.kappa_nh();
  const std::int64_t n = cfg.n;
  struct Window {
    std::int64_t lo = 0;
    std::vector<double> log_pmf;
  };
  auto window = [](std::int64_t m, double p) {
    const double mean = m * p, sd = std::sqrt(m * p * (1 - p));
    Window w;
    w.lo = static_cast<std::int64_t>(std::max(0.0, std::floor(mean - 8.0 * sd - 1.0)));
    const auto hi = static_cast<std::int64_t>(std::min(static_cast<double>(m), std::ceil(mean + 8.0 * sd + 1.0)));
    for (std::int64_t k = w.lo; k <= hi; ++k)
      w.log_pmf.push_back(std::lgamma(m + 1.0) - std::lgamma(k + 1.0) - std::lgamma(m - k + 1.0) + k * std::log(p) +
                          (m - k) * std::log1p(-p));
    return w;
  };
  double top = -kInf, total = 0.0;  // running log-sum-exp
  auto add = [&](double a) {
    if (a <= top) {
      total += std::exp(a - top);
    } else {
      total = total * std::exp(top - a) + 1.0;
      top = a;
    }
  };
  const Window arms = window(n, 0.5);
  for (std::size_t i = 0; i < arms.log_pmf.size(); ++i) {
    const std::int64_t treated = arms.lo + static_cast<std::int64_t>(i), control = n - treated;
    const Window w0 = window(control, theta[0]), w1 = window(treated, theta[1]);
    for (std::size_t a = 0; a < w0.log_pmf.size(); ++a) {
      const double m0 = control > 0 ? static_cast<double>(w0.lo + static_cast<std::int64_t>(a)) / control : 0.5;
      const double lp0 = arms.log_pmf[i] + w0.log_pmf[a];
      for (std::size_t b = 0; b < w1.log_pmf.size(); ++b) {
        const double m1 = treated > 0 ? static_cast<double>(w1.lo + static_cast<std::int64_t>(b)) / treated : 0.5;
        const double err = m1 - m0 - kappa;
        add(lp0 + w1.log_pmf[b] + n * err * err / lambda);
      }
    }
  }
  return lambda * (top + std::log(total));
}

}  // namespace cmrisk
