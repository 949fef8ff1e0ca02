#pragma once

// Constrained-multiplier risk of an equivariant rule in the limit experiment.
//
//   finite M :  lambda * log inf_beta E_{Q_h}[ exp(l(delta - K h)/lambda + beta' W_{M,h}) ]
//   M = inf  :  lambda * E_Y[ log E_{X|Y}[ exp(l(delta)/lambda) | Y ] ]   (h = 0)
//
// Expectations use a fixed Gauss-Hermite grid (dimension <= 3) or fixed
// seeded draws, so the beta objective is deterministic and smooth.

#include "cmrisk/core_experiment.hpp"
#include "cmrisk/gaussian_moments.hpp"
#include "cmrisk/newton.hpp"
#include "cmrisk/quadrature.hpp"
#include "cmrisk/rules.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace cmrisk {

struct RiskReport {
  double value = kInf;
  std::optional<Vec> beta_star;
  int iterations = 0;
  double gradient_norm = 0.0;
  SolverStatus status = SolverStatus::converged;

  bool finite() const { return std::isfinite(value); }

  static RiskReport infinite() {
    RiskReport r;
    r.value = kInf;
    r.status = SolverStatus::diverged_to_infinity;
    return r;
  }
};

/// Share of the total mass carried by the outermost grid nodes above which an
/// integral is treated as divergent.
inline constexpr double kBoundaryShareLimit = 1e-3;
/// Exponent guard for Monte Carlo integrands.
inline constexpr double kExponentGuard = 700.0;

/// E[exp(a U^2)] for U ~ N(mean, var), +inf when 2 a var >= 1.
inline double mgf_squared_gaussian(double mean, double var, double a) {
  if (var < 0.0) throw std::invalid_argument("mgf_squared_gaussian: negative variance");
  if (var == 0.0) return std::exp(a * mean * mean);
  const double shrink = 1.0 - 2.0 * a * var;
  if (shrink <= 0.0) return kInf;
  return std::exp(a * mean * mean / shrink) / std::sqrt(shrink);
}

/// Whether some beta can make the squared-loss risk finite, judged from the
/// rule's asymptotically linear tail map delta ~ B X + C_t Y with B = K + C_t Psi.
/// With moments of order >= 2 fixed only the X | Y direction can diverge;
/// otherwise the full variance of the tail map must satisfy 2 Var < lambda.
inline bool squared_loss_risk_can_be_finite(const LimitExperimentConfig& config, const RuleSpec& rule,
                                            bool second_moments_fixed) {
  const Mat c_tail = rule.tail_coefficient(config.d(), config.k());
  const Mat b = config.k_mat + c_tail * config.psi;
  if (second_moments_fixed) {
    const ConditionalLawXGivenY cond = conditional_x_given_y(config);
    return 2.0 * linalg::max_eigenvalue_symmetric(b * cond.cond_cov * b.transpose()) < config.lambda;
  }
  const JointGaussianLaw law = joint_law(config, Vec::Zero(config.p()));
  Mat a(config.d(), config.p() + config.k());
  a << b, c_tail;
  return 2.0 * linalg::max_eigenvalue_symmetric(a * law.cov * a.transpose()) < config.lambda;
}

namespace detail {

// Per-node data for the beta objective: base = log weight + loss/lambda.
struct TiltedSample {
  Vec base;
  Vec loss_over_lambda;
  Mat w;  // b x N
  std::vector<char> boundary;
  bool quadrature = true;
};

inline TiltedSample build_tilted_sample(const LimitExperimentConfig& config, const RuleSpec& rule,
                                        const LossSpec& loss, const MomentVectorSpec& spec, const Vec& h,
                                        const IntegratorSettings& settings) {
  const JointGaussianLaw law = joint_law(config, h);
  const Mat factor = linalg::psd_factor(law.cov);
  const auto p = config.p(), k = config.k();
  const StandardNormalCloud cloud = standard_normal_cloud(static_cast<int>(p + k), settings);
  const Eigen::Index n = cloud.size();
  TiltedSample s;
  s.base.resize(n);
  s.loss_over_lambda.resize(n);
  s.w.resize(spec.b(), n);
  s.boundary = cloud.on_boundary;
  s.quadrature = cloud.quadrature;
  const Vec kh = config.k_mat * h;
  const Vec psi_h = config.psi * h;
  for (Eigen::Index j = 0; j < n; ++j) {
    const Vec v = law.mean + factor * cloud.points.col(j);
    const Vec x = v.head(p);
    const Vec y = v.tail(k);
    const double l = loss(rule.evaluate(config, x, y) - kh) / config.lambda;
    s.loss_over_lambda[j] = l;
    s.base[j] = cloud.log_weights[j] + l;
    if (spec.b() > 0) s.w.col(j) = w_vector(spec, y + psi_h);
  }
  return s;
}

inline SmoothEval tilted_log_objective(const TiltedSample& s, const Vec& beta) {
  SmoothEval out;
  const Eigen::Index b = s.w.rows();
  Vec a = s.base;
  if (b > 0) a.noalias() += s.w.transpose() * beta;
  const double lse = log_sum_exp(a);
  if (!std::isfinite(lse)) return out;
  Vec prob = (a.array() - lse).exp().matrix();
  if (s.quadrature) {
    double edge = 0.0;
    for (Eigen::Index j = 0; j < prob.size(); ++j)
      if (s.boundary[static_cast<std::size_t>(j)]) edge += prob[j];
    if (edge > kBoundaryShareLimit) return out;
  } else {
    Vec expo = s.loss_over_lambda;
    if (b > 0) expo.noalias() += s.w.transpose() * beta;
    if (expo.maxCoeff() > kExponentGuard) return out;
  }
  out.value = lse;
  out.gradient = s.w * prob;
  out.hessian = s.w * prob.asDiagonal() * s.w.transpose() - out.gradient * out.gradient.transpose();
  return out;
}

// Starting multipliers inside the effective domain: zero when finite,
// otherwise increasingly negative weights on the pure squares.
inline std::optional<Vec> feasible_start(const TiltedSample& s, const MomentVectorSpec& spec, const Mat& omega) {
  const Vec zero = Vec::Zero(spec.b());
  if (std::isfinite(tilted_log_objective(s, zero).value)) return zero;
  std::vector<std::pair<Eigen::Index, int>> squares;
  for (Eigen::Index j = 0; j < spec.b(); ++j) {
    const MultiIndex& m = spec.indices[static_cast<std::size_t>(j)];
    for (int c = 0; c < spec.k; ++c)
      if (m[static_cast<std::size_t>(c)] == 2 && order_of(m) == 2) squares.emplace_back(j, c);
  }
  if (squares.empty()) return std::nullopt;
  for (int step = 0; step < 24; ++step) {
    Vec beta = zero;
    for (auto [j, c] : squares) beta[j] = -std::ldexp(1.0, step) / (8.0 * omega(c, c));
    if (std::isfinite(tilted_log_objective(s, beta).value)) return beta;
  }
  return std::nullopt;
}

}  // namespace detail

/// Finite-M constrained-multiplier risk by minimizing the log of the tilted
/// expectation over beta. With nonneg_beta the multipliers are restricted to
/// beta >= 0, the dual of the inequality set {P : E_P[W] >= 0}.
inline RiskReport finite_m_dual_risk(const LimitExperimentConfig& config, const RuleSpec& rule, const LossSpec& loss,
                                     int max_order, const IntegratorSettings& settings = {}, bool nonneg_beta = false,
                                     std::optional<Vec> h = std::nullopt) {
  config.validate();
  rule.check_compatible(config);
  if (max_order < 0) throw ConfigError("moment order M must be nonnegative");
  const Vec local = h.value_or(Vec::Zero(config.p()));
  if (local.size() != config.p()) throw ConfigError("local parameter h must have length p");
  if (loss.is_squared() && !squared_loss_risk_can_be_finite(config, rule, max_order >= 2)) {
    RiskReport r = RiskReport::infinite();
    return r;
  }
  const MomentVectorSpec spec = MomentVectorSpec::make(config.omega, max_order);
  const detail::TiltedSample sample = detail::build_tilted_sample(config, rule, loss, spec, local, settings);

  RiskReport report;
  if (spec.b() == 0) {
    const SmoothEval e = detail::tilted_log_objective(sample, Vec::Zero(0));
    if (!std::isfinite(e.value)) return RiskReport::infinite();
    report.value = config.lambda * e.value;
    report.status = SolverStatus::converged;
    return report;
  }
  std::optional<Vec> start = detail::feasible_start(sample, spec, config.omega);
  if (!start) return RiskReport::infinite();
  if (nonneg_beta) {
    start = start->cwiseMax(0.0);
    if (!std::isfinite(detail::tilted_log_objective(sample, *start).value)) return RiskReport::infinite();
  }
  NewtonOptions opts;
  opts.grad_tol = settings.tol;
  opts.nonnegative = nonneg_beta;
  const NewtonResult res =
      newton_minimize([&](const Vec& beta) { return detail::tilted_log_objective(sample, beta); }, *start, opts);
  if (res.status == SolverStatus::diverged_to_infinity) return RiskReport::infinite();
  report.value = config.lambda * res.value;
  report.beta_star = res.x;
  report.iterations = res.iterations;
  report.gradient_norm = res.gradient_norm;
  report.status = res.status;
  return report;
}

/// Risk with all moments of Y fixed: the adversary distorts only X | Y.
/// Nested expectation at h = 0, inner over X | Y, outer over Y.
inline RiskReport infinite_m_risk(const LimitExperimentConfig& config, const RuleSpec& rule, const LossSpec& loss,
                                  const IntegratorSettings& settings = {}) {
  config.validate();
  rule.check_compatible(config);
  if (loss.is_squared() && !squared_loss_risk_can_be_finite(config, rule, true)) return RiskReport::infinite();

  const ConditionalLawXGivenY cond = conditional_x_given_y(config);
  const Mat outer_factor = linalg::psd_factor(config.omega);
  const Mat inner_factor = linalg::psd_factor(cond.cond_cov);
  const auto p = config.p(), k = config.k();
  const StandardNormalCloud outer = standard_normal_cloud(static_cast<int>(k), settings, 1);
  const StandardNormalCloud inner = standard_normal_cloud(static_cast<int>(p), settings, 2);
  if (static_cast<double>(outer.size()) * static_cast<double>(inner.size()) > 4e8)
    throw NumericalError("infinite_m_risk: nested integration exceeds the evaluation budget; lower --nodes or --mc-draws");

  const double lambda = config.lambda;
  const double outer_relevant = std::log(1e-8);
  const bool scalar = p == 1 && k == 1 && config.d() == 1;
  Vec inner_terms(inner.size());
  double total = 0.0;
  for (Eigen::Index a = 0; a < outer.size(); ++a) {
    if (scalar) {
      const double y = outer_factor(0, 0) * outer.points(0, a);
      const double mean_x = cond.slope(0, 0) * y;
      const double sx = inner_factor(0, 0);
      const double kk = config.k_mat(0, 0), ps = config.psi(0, 0);
      for (Eigen::Index b = 0; b < inner.size(); ++b) {
        const double x = mean_x + sx * inner.points(0, b);
        const double delta = kk * x + rule.gamma_scalar(y + ps * x);
        inner_terms[b] = inner.log_weights[b] + loss.scalar(delta) / lambda;
      }
    } else {
      const Vec y = outer_factor * outer.points.col(a);
      const Vec mean_x = cond.slope * y;
      for (Eigen::Index b = 0; b < inner.size(); ++b) {
        const Vec x = mean_x + inner_factor * inner.points.col(b);
        inner_terms[b] = inner.log_weights[b] + loss(rule.evaluate(config, x, y)) / lambda;
      }
    }
    const double log_g = log_sum_exp(inner_terms);
    if (!std::isfinite(log_g)) return RiskReport::infinite();
    if (!loss.is_squared() && outer.log_weights[a] > outer_relevant) {
      if (inner.quadrature) {
        double edge = 0.0;
        for (Eigen::Index b = 0; b < inner.size(); ++b)
          if (inner.on_boundary[static_cast<std::size_t>(b)]) edge += std::exp(inner_terms[b] - log_g);
        if (edge > kBoundaryShareLimit) return RiskReport::infinite();
      } else if ((inner_terms.array() - inner.log_weights.array()).maxCoeff() > kExponentGuard) {
        return RiskReport::infinite();
      }
    }
    total += std::exp(outer.log_weights[a]) * log_g;
  }
  RiskReport report;
  report.value = lambda * total;
  report.status = SolverStatus::converged;
  return report;
}

/// Number of fixed moments: a finite order or all of them.
struct MomentOrder {
  int order = 0;
  bool all = false;

  static MomentOrder finite(int m) {
    if (m < 0) throw ConfigError("moment order M must be nonnegative");
    return {m, false};
  }
  static MomentOrder infinite() { return {0, true}; }

  bool fixes_second_moments() const { return all || order >= 2; }
  std::string to_string() const { return all ? "inf" : std::to_string(order); }
};

/// Parses "0", "1", ..., or "inf".
inline MomentOrder parse_moment_order(const std::string& text) {
  if (text == "inf" || text == "Inf" || text == "infinity") return MomentOrder::infinite();
  std::size_t used = 0;
  int m = -1;
  try {
    m = std::stoi(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || m < 0) throw ConfigError("moment order must be a nonnegative integer or 'inf', got '" + text + "'");
  return MomentOrder::finite(m);
}

/// Dispatches to finite_m_dual_risk or infinite_m_risk.
inline RiskReport constrained_risk(const LimitExperimentConfig& config, const RuleSpec& rule, const LossSpec& loss,
                                   MomentOrder m, const IntegratorSettings& settings = {}) {
  if (m.all) return infinite_m_risk(config, rule, loss, settings);
  return finite_m_dual_risk(config, rule, loss, m.order, settings);
}

/// E_{Q_0}[l(delta(X, Y))], the risk when the adversary does not move.
inline double expected_loss(const LimitExperimentConfig& config, const RuleSpec& rule, const LossSpec& loss,
                            const IntegratorSettings& settings = {}) {
  config.validate();
  rule.check_compatible(config);
  const JointGaussianLaw law = joint_law(config, Vec::Zero(config.p()));
  const Mat factor = linalg::psd_factor(law.cov);
  const StandardNormalCloud cloud = standard_normal_cloud(static_cast<int>(config.p() + config.k()), settings);
  double total = 0.0;
  for (Eigen::Index j = 0; j < cloud.size(); ++j) {
    const Vec v = factor * cloud.points.col(j);
    total += std::exp(cloud.log_weights[j]) * loss(rule.evaluate(config, v.head(config.p()), v.tail(config.k())));
  }
  return total;
}

}  // namespace cmrisk
