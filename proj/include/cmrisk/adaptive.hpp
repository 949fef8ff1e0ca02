#pragma once

// Adaptation across lambda in the normalized scalar experiment (I0 = 1,
// Psi = -1, K = 1): risk curves of shrinkage rules, their worst-case ratio to
// the pointwise optimum, and tuning of the rule families against that ratio.

#include "cmrisk/core_experiment.hpp"
#include "cmrisk/dual_risk.hpp"
#include "cmrisk/newton.hpp"
#include "cmrisk/optimal_rules.hpp"
#include "cmrisk/quadrature.hpp"
#include "cmrisk/rules.hpp"
#include "cmrisk/scalar_search.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace cmrisk {

class LambdaGrid {
 public:
  LambdaGrid() : LambdaGrid(-3.0, 6.0, 37) {}

  /// n points evenly spaced in log(lambda) from log_min to log_max inclusive.
  LambdaGrid(double log_min, double log_max, int n_points) {
    if (n_points < 1) throw ConfigError("lambda grid needs at least one point");
    if (n_points > 1 && !(log_max > log_min)) throw ConfigError("lambda grid needs log_max > log_min");
    log_values_.resize(static_cast<std::size_t>(n_points));
    for (int i = 0; i < n_points; ++i)
      log_values_[static_cast<std::size_t>(i)] =
          n_points == 1 ? log_min : log_min + (log_max - log_min) * i / static_cast<double>(n_points - 1);
    log_values_.back() = n_points == 1 ? log_min : log_max;
  }

  static LambdaGrid single(double lambda) {
    if (!(lambda > 0.0)) throw ConfigError("lambda must be positive");
    return LambdaGrid(std::log(lambda), std::log(lambda), 1);
  }

  std::size_t size() const { return log_values_.size(); }
  double log_lambda(std::size_t i) const { return log_values_[i]; }
  double lambda(std::size_t i) const { return std::exp(log_values_[i]); }
  std::vector<double> lambdas() const {
    std::vector<double> out;
    for (double l : log_values_) out.push_back(std::exp(l));
    return out;
  }

 private:
  std::vector<double> log_values_;
};

struct AdaptiveReport {
  LambdaGrid grid;
  std::vector<double> risk_rule;
  std::vector<double> risk_opt;
  std::vector<double> ratio;
  double regret = kInf;         ///< sup of the ratio, +inf if any entry is infinite
  double regret_finite = kInf;  ///< max over the finite ratios
  double argmax_lambda = 0.0;   ///< lambda attaining regret_finite

  /// Max ratio over grid points with log(lambda) in [log_lo, log_hi].
  double regret_on(double log_lo, double log_hi) const {
    double worst = -kInf;
    for (std::size_t i = 0; i < grid.size(); ++i)
      if (grid.log_lambda(i) >= log_lo - 1e-12 && grid.log_lambda(i) <= log_hi + 1e-12) worst = std::max(worst, ratio[i]);
    return worst;
  }
};

inline void require_informative_moments(double omega) {
  if (!(omega > 1.0) || !std::isfinite(omega))
    throw ConfigError("omega must exceed 1 so that the moment statistic carries information beyond X");
}

/// Minimum over linear rules of the all-moments risk at (omega, lambda) in the
/// normalized setting; the best equivariant risk for squared loss.
inline double pointwise_optimal_risk(double omega, double lambda) {
  require_informative_moments(omega);
  const auto cfg = LimitExperimentConfig::normalized_scalar(omega, lambda);
  return optimize_linear_scalar(cfg, MomentOrder::infinite(), LossSpec::squared()).r_star;
}

inline double gamma_eval(const RuleSpec& rule, double z) { return rule.gamma_scalar(z); }

namespace detail {

inline void fill_ratios(AdaptiveReport& rep) {
  rep.ratio.resize(rep.grid.size());
  rep.regret = -kInf;
  rep.regret_finite = -kInf;
  for (std::size_t i = 0; i < rep.grid.size(); ++i) {
    rep.ratio[i] = std::isfinite(rep.risk_rule[i]) ? rep.risk_rule[i] / rep.risk_opt[i] : kInf;
    rep.regret = std::max(rep.regret, rep.ratio[i]);
    if (std::isfinite(rep.ratio[i]) && rep.ratio[i] > rep.regret_finite) {
      rep.regret_finite = rep.ratio[i];
      rep.argmax_lambda = rep.grid.lambda(i);
    }
  }
}

inline std::vector<double> optimal_curve(double omega, const LambdaGrid& grid) {
  std::vector<double> out;
  for (std::size_t i = 0; i < grid.size(); ++i) out.push_back(pointwise_optimal_risk(omega, grid.lambda(i)));
  return out;
}

}  // namespace detail

/// All-moments risk of a scalar rule across the grid and its ratio to the
/// pointwise optimum.
inline AdaptiveReport rule_risk_curve(const RuleSpec& rule, double omega, const LambdaGrid& grid,
                                      const IntegratorSettings& settings = {},
                                      const std::vector<double>* optimum = nullptr) {
  require_informative_moments(omega);
  AdaptiveReport rep;
  rep.grid = grid;
  rep.risk_opt = optimum ? *optimum : detail::optimal_curve(omega, grid);
  if (rep.risk_opt.size() != grid.size()) throw ConfigError("optimal risk curve does not match the grid");
  const LossSpec loss = LossSpec::squared();
  for (std::size_t i = 0; i < grid.size(); ++i)
    rep.risk_rule.push_back(
        infinite_m_risk(LimitExperimentConfig::normalized_scalar(omega, grid.lambda(i)), rule, loss, settings).value);
  detail::fill_ratios(rep);
  return rep;
}

struct TunedRule {
  RuleSpec rule;
  AdaptiveReport report;
};

/// Chooses tau in [1e-3, 10] to minimize the regret of the soft-threshold or
/// ERM family: a log-spaced scan followed by golden section around the best
/// scan point.
inline TunedRule tune_threshold(RuleFamily family, double omega, const LambdaGrid& grid,
                                const IntegratorSettings& settings = {}) {
  require_informative_moments(omega);
  if (family != RuleFamily::soft_threshold && family != RuleFamily::erm)
    throw ConfigError("tune_threshold supports the soft_threshold and erm families");
  auto make = [&](double tau) { return family == RuleFamily::erm ? RuleSpec::erm(tau) : RuleSpec::soft_threshold(tau); };
  const std::vector<double> optimum = detail::optimal_curve(omega, grid);
  auto regret = [&](double tau) { return rule_risk_curve(make(tau), omega, grid, settings, &optimum).regret; };
  const ScalarMinimum best = log_scan_then_golden(regret, 1e-3, 10.0, 25, 1e-7);
  const RuleSpec rule = make(best.x);
  return {rule, rule_risk_curve(rule, omega, grid, settings, &optimum)};
}

/// Chooses the coefficient of the linear rule X + C Z by a scan of [0, 2]
/// followed by golden section; the regret is +inf wherever some grid lambda
/// sits below the rule's finiteness threshold, so the scan locates the finite part.
inline TunedRule tune_linear(double omega, const LambdaGrid& grid, const IntegratorSettings& settings = {}) {
  require_informative_moments(omega);
  const std::vector<double> optimum = detail::optimal_curve(omega, grid);
  const auto cfg = LimitExperimentConfig::normalized_scalar(omega, 1.0);
  // closed-form curve; the reported curve below uses the nested quadrature like the other families
  auto regret = [&](double c) {
    double worst = 1.0;
    for (std::size_t i = 0; i < grid.size(); ++i)
      worst = std::max(worst, linear_rule_risk_closed_form(cfg.with_lambda(grid.lambda(i)), Mat::Constant(1, 1, c)) /
                                  optimum[i]);
    return worst;
  };
  const int scan = 81;
  double best_c = 1.0, best = regret(1.0);
  for (int i = 0; i < scan; ++i) {
    const double c = 2.0 * i / (scan - 1);
    const double r = regret(c);
    if (r < best) {
      best = r;
      best_c = c;
    }
  }
  const double step = 2.0 / (scan - 1);
  const ScalarMinimum m = golden_section_minimize(regret, std::max(0.0, best_c - step), best_c + step, 1e-9);
  const RuleSpec rule = RuleSpec::linear_scalar(m.value <= best ? m.x : best_c);
  return {rule, rule_risk_curve(rule, omega, grid, settings, &optimum)};
}

struct SplineFit {
  RuleSpec rule;
  AdaptiveReport report;
  double smoothed_regret = kInf;
  SolverStatus status = SolverStatus::max_iterations;
};

namespace detail {

// All-moments squared-loss risk of delta = X + gamma(Z) with gamma a
// unit-tail linear spline, as a function of the knot values. Nodes are fixed,
// so value, gradient and Hessian are exact for the quadrature.
class SplineRiskModel {
 public:
  SplineRiskModel(double omega, std::vector<double> knots, const IntegratorSettings& settings)
      : knots_(std::move(knots)) {
    const auto cfg = LimitExperimentConfig::normalized_scalar(omega, 1.0);
    const ConditionalLawXGivenY cond = conditional_x_given_y(cfg);
    const QuadratureRule gh = gauss_hermite(settings.nodes);
    const double sd_y = std::sqrt(omega), slope = cond.slope(0, 0), sd_x = std::sqrt(cond.cond_cov(0, 0));
    const std::size_t n = gh.size();
    outer_w_.resize(n);
    for (std::size_t a = 0; a < n; ++a) {
      outer_w_[a] = std::exp(gh.log_weights[a]);
      const double y = sd_y * gh.nodes[a];
      for (std::size_t b = 0; b < n; ++b) {
        const double x = slope * y + sd_x * gh.nodes[b];
        Pair p;
        p.log_w = gh.log_weights[b];
        p.x = x;
        locate(y - x, p);  // Z = Y + Psi X
        pairs_.push_back(p);
      }
    }
    inner_ = n;
  }

  std::size_t parameters() const { return knots_.size(); }
  const std::vector<double>& knots() const { return knots_; }

  /// lambda * E_Y log E_{X|Y} exp(delta^2 / lambda) with derivatives in the knot values.
  void evaluate(const Vec& values, double lambda, double& risk, Vec* grad, Mat* hess) const {
    const std::size_t m = knots_.size();
    risk = 0.0;
    if (grad) *grad = Vec::Zero(static_cast<Eigen::Index>(m));
    if (hess) *hess = Mat::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
    std::vector<double> a_val(inner_), u_val(inner_);
    Vec g_inner(static_cast<Eigen::Index>(m));
    Mat h_inner(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
    for (std::size_t a = 0; a < outer_w_.size(); ++a) {
      double top = -kInf;
      for (std::size_t b = 0; b < inner_; ++b) {
        const Pair& p = pairs_[a * inner_ + b];
        const double gamma = p.offset + p.w_lo * values[p.lo] + p.w_hi * values[p.hi];
        const double u = p.x + gamma;
        u_val[b] = u;
        a_val[b] = p.log_w + u * u / lambda;
        top = std::max(top, a_val[b]);
      }
      double total = 0.0;
      for (std::size_t b = 0; b < inner_; ++b) total += std::exp(a_val[b] - top);
      const double log_g = top + std::log(total);
      risk += outer_w_[a] * lambda * log_g;
      if (!grad) continue;
      g_inner.setZero();
      if (hess) h_inner.setZero();
      for (std::size_t b = 0; b < inner_; ++b) {
        const Pair& p = pairs_[a * inner_ + b];
        const double prob = std::exp(a_val[b] - log_g);
        if (prob < 1e-300) continue;
        const double du = 2.0 * u_val[b] / lambda;
        g_inner[p.lo] += prob * du * p.w_lo;
        g_inner[p.hi] += prob * du * p.w_hi;
        if (hess) {
          const double c = prob * (2.0 / lambda + du * du);
          h_inner(p.lo, p.lo) += c * p.w_lo * p.w_lo;
          h_inner(p.hi, p.hi) += c * p.w_hi * p.w_hi;
          h_inner(p.lo, p.hi) += c * p.w_lo * p.w_hi;
          h_inner(p.hi, p.lo) += c * p.w_lo * p.w_hi;
        }
      }
      *grad += outer_w_[a] * lambda * g_inner;
      if (hess) *hess += outer_w_[a] * lambda * (h_inner - g_inner * g_inner.transpose());
    }
  }

 private:
  struct Pair {
    double log_w;
    double x;
    double offset;  // gamma = offset + w_lo v[lo] + w_hi v[hi]
    Eigen::Index lo, hi;
    double w_lo, w_hi;
  };

  void locate(double z, Pair& p) const {
    const std::size_t n = knots_.size();
    if (z <= knots_.front()) {
      p.lo = p.hi = 0;
      p.w_lo = 1.0;
      p.w_hi = 0.0;
      p.offset = z - knots_.front();
      return;
    }
    if (z >= knots_.back()) {
      p.lo = p.hi = static_cast<Eigen::Index>(n - 1);
      p.w_lo = 1.0;
      p.w_hi = 0.0;
      p.offset = z - knots_.back();
      return;
    }
    const auto it = std::upper_bound(knots_.begin(), knots_.end(), z);
    const auto j = static_cast<std::size_t>(it - knots_.begin());
    const double t = (z - knots_[j - 1]) / (knots_[j] - knots_[j - 1]);
    p.lo = static_cast<Eigen::Index>(j - 1);
    p.hi = static_cast<Eigen::Index>(j);
    p.w_lo = 1.0 - t;
    p.w_hi = t;
    p.offset = 0.0;
  }

  std::vector<double> knots_;
  std::vector<double> outer_w_;
  std::vector<Pair> pairs_;
  std::size_t inner_ = 0;
};

}  // namespace detail

/// Minimizes the regret max_i R_i(values) / R*_i over spline knot values.
/// Each ratio is convex in the values, so the smoothed maximum
///   mu log sum_i exp(ratio_i / mu)
/// is convex and is minimized by Newton along a decreasing sequence of mu.
/// With `antisymmetric` the values are constrained to gamma(-z) = -gamma(z).
inline SplineFit optimize_spline(double omega, const LambdaGrid& grid, int n_knots = 11,
                                 const IntegratorSettings& settings = {}, bool antisymmetric = false) {
  require_informative_moments(omega);
  if (n_knots < 2) throw ConfigError("spline needs at least two knots");
  const double reach = 4.0 * std::sqrt(omega - 1.0);
  std::vector<double> knots(static_cast<std::size_t>(n_knots));
  for (int i = 0; i < n_knots; ++i) knots[static_cast<std::size_t>(i)] = -reach + 2.0 * reach * i / (n_knots - 1);
  const detail::SplineRiskModel model(omega, knots, settings);
  const std::vector<double> optimum = detail::optimal_curve(omega, grid);

  // values = basis * theta
  const auto m = static_cast<Eigen::Index>(n_knots);
  Mat basis;
  if (antisymmetric) {
    const Eigen::Index free = m / 2;
    basis = Mat::Zero(m, free);
    for (Eigen::Index j = 0; j < free; ++j) {
      basis(m - 1 - j, j) = 1.0;
      basis(j, j) = -1.0;
    }
  } else {
    basis = Mat::Identity(m, m);
  }
  // start from gamma(z) = z / 2 projected onto the parameterization
  Vec start_values(m);
  for (Eigen::Index i = 0; i < m; ++i) start_values[i] = 0.5 * knots[static_cast<std::size_t>(i)];
  Vec theta = basis.completeOrthogonalDecomposition().solve(start_values);

  double mu = 0.05;
  SplineFit fit{RuleSpec::zero(), {}, kInf, SolverStatus::max_iterations};
  NewtonResult res;
  const std::size_t n_lambda = grid.size();
  for (int stage = 0; stage < 12; ++stage) {
    auto objective = [&](const Vec& t) {
      SmoothEval e;
      const Vec values = basis * t;
      std::vector<double> r(n_lambda);
      std::vector<Vec> g(n_lambda);
      std::vector<Mat> h(n_lambda);
      double top = -kInf;
      for (std::size_t i = 0; i < n_lambda; ++i) {
        double risk = 0.0;
        model.evaluate(values, grid.lambda(i), risk, &g[i], &h[i]);
        if (!std::isfinite(risk)) return e;
        r[i] = risk / optimum[i];
        g[i] = basis.transpose() * g[i] / optimum[i];
        h[i] = basis.transpose() * h[i] * basis / optimum[i];
        top = std::max(top, r[i] / mu);
      }
      double total = 0.0;
      for (std::size_t i = 0; i < n_lambda; ++i) total += std::exp(r[i] / mu - top);
      e.value = mu * (top + std::log(total));
      const Eigen::Index dim = t.size();
      e.gradient = Vec::Zero(dim);
      e.hessian = Mat::Zero(dim, dim);
      Mat outer = Mat::Zero(dim, dim);
      for (std::size_t i = 0; i < n_lambda; ++i) {
        const double pi = std::exp(r[i] / mu - top) / total;
        e.gradient += pi * g[i];
        e.hessian += pi * h[i];
        outer += pi * g[i] * g[i].transpose();
      }
      e.hessian += (outer - e.gradient * e.gradient.transpose()) / mu;
      return e;
    };
    NewtonOptions opts;
    opts.grad_tol = 1e-8;  // the ratios are O(1); tighter stalls on rounding
    opts.max_iter = mu > 2e-5 ? 30 : 100;  // intermediate stages only warm-start the next
    res = newton_minimize(objective, theta, opts);
    if (res.status == SolverStatus::diverged_to_infinity) break;
    theta = res.x;
    fit.smoothed_regret = res.value;
    fit.status = res.status;
    if (mu <= 2e-5) break;
    mu = std::max(mu * 0.3, 2e-5);
  }
  const Vec values = basis * theta;
  fit.rule = RuleSpec::spline(knots, std::vector<double>(values.data(), values.data() + values.size()));
  fit.report = rule_risk_curve(fit.rule, omega, grid, settings, &optimum);
  return fit;
}

}  // namespace cmrisk
