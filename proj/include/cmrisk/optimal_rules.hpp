#pragma once

// Optimal equivariant rules under the constrained-multiplier risk.
//
// With M <= 1 the adversary can inflate the variance of Y, and the best rule
// ignores Z entirely (delta = K X). Once second moments are fixed only X | Y
// can be distorted and, for squared loss, the optimum is linear in Z.

#include "cmrisk/core_experiment.hpp"
#include "cmrisk/dual_risk.hpp"
#include "cmrisk/gaussian_moments.hpp"
#include "cmrisk/newton.hpp"
#include "cmrisk/quadrature.hpp"
#include "cmrisk/rules.hpp"
#include "cmrisk/scalar_search.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cmrisk {

class IntegrabilityError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {

struct LinearRiskTerms {
  Mat b;      // K + C Psi
  Mat a;      // conditional-mean coefficient of delta on Y
  Mat s;      // Var(X | Y)
  Mat slope;  // E[X | Y] = slope Y
  Eigen::LLT<Mat> n_llt;
  bool finite = false;
};

inline LinearRiskTerms linear_terms(const LimitExperimentConfig& config, const Mat& c) {
  if (c.rows() != config.d() || c.cols() != config.k()) throw ConfigError("linear rule C must be d x k");
  const ConditionalLawXGivenY cond = conditional_x_given_y(config);
  LinearRiskTerms t;
  t.s = cond.cond_cov;
  t.slope = cond.slope;
  t.b = config.k_mat + c * config.psi;
  t.a = t.b * cond.slope + c;
  const Mat v = t.b * t.s * t.b.transpose();
  const Mat n = Mat::Identity(config.d(), config.d()) - (2.0 / config.lambda) * v;
  t.n_llt.compute(n);
  t.finite = t.n_llt.info() == Eigen::Success && t.n_llt.matrixL().toDenseMatrix().diagonal().minCoeff() > 0.0;
  return t;
}

}  // namespace detail

/// Squared-loss risk with all moments of Y fixed for delta = K X + C Z.
/// Given Y, delta ~ N(A Y, V) with V = B S B'; with N = I - 2V/lambda,
///   R(C) = -(lambda/2) log det N + tr(N^-1 A Omega A'),
/// and +inf unless N is positive definite.
inline double linear_rule_risk_closed_form(const LimitExperimentConfig& config, const Mat& c) {
  config.validate();
  const detail::LinearRiskTerms t = detail::linear_terms(config, c);
  if (!t.finite) return kInf;
  const Mat l = t.n_llt.matrixL();
  const double log_det = 2.0 * l.diagonal().array().log().sum();
  const Mat gain = t.n_llt.solve(t.a * config.omega * t.a.transpose());
  return -0.5 * config.lambda * log_det + gain.trace();
}

/// dR/dC of linear_rule_risk_closed_form (d x k); undefined outside the finite domain.
inline Mat linear_rule_risk_gradient(const LimitExperimentConfig& config, const Mat& c) {
  config.validate();
  const detail::LinearRiskTerms t = detail::linear_terms(config, c);
  if (!t.finite) throw NumericalError("linear_rule_risk_gradient: C is outside the finite-risk domain");
  const Mat g = t.n_llt.solve(Mat::Identity(config.d(), config.d()));
  const Mat p = g * t.a * config.omega * t.a.transpose() * g;
  const Mat d_b = 2.0 * g * t.b * t.s + (4.0 / config.lambda) * p * t.b * t.s;
  const Mat d_a = 2.0 * g * t.a * config.omega;
  const Mat a_map = config.psi * t.slope + Mat::Identity(config.k(), config.k());
  return d_b * config.psi.transpose() + d_a * a_map.transpose();
}

/// C with K + C Psi = 0 (least squares), the rule that uses only Y.
inline Mat gmm_projection(const LimitExperimentConfig& config) {
  return -config.k_mat * config.psi.completeOrthogonalDecomposition().pseudoInverse();
}

struct LinearRiskProfile {
  std::vector<std::pair<double, double>> trace;  ///< evaluated (C, R(C))
  double lo = 0.0, hi = 0.0;                     ///< searched bracket
  Mat c_star;
  double r_star = kInf;
};

namespace detail {

// {c : alpha c^2 + 2 beta c + gamma < t}, shrunk to the 0.999 interior and
// capped at |c| <= 10; nullopt when empty.
inline std::optional<std::pair<double, double>> quadratic_sublevel(double alpha, double beta, double gamma, double t) {
  constexpr double cap = 10.0;
  if (alpha <= 1e-14 * (std::abs(beta) + std::abs(gamma) + 1.0)) {
    if (std::abs(beta) > 1e-14) {
      const double root = (t - gamma) / (2.0 * beta);
      return beta > 0 ? std::make_pair(-cap, std::min(cap, root)) : std::make_pair(std::max(-cap, root), cap);
    }
    if (gamma < t) return std::make_pair(-cap, cap);
    return std::nullopt;
  }
  const double centre = -beta / alpha;
  const double disc = beta * beta - alpha * (gamma - t);
  if (disc <= 0.0) return std::nullopt;
  const double half = 0.999 * std::sqrt(disc) / alpha;
  double lo = std::max(centre - half, -cap), hi = std::min(centre + half, cap);
  if (lo >= hi) {
    const double w = std::min(half, cap);
    lo = centre - w;
    hi = centre + w;
  }
  return std::make_pair(lo, hi);
}

}  // namespace detail

/// Golden-section minimization of the risk over scalar linear rules
/// delta = K X + c Z (k = d = 1) on the finite-risk domain of c. Squared loss
/// with fixed second moments uses the closed form; otherwise each candidate
/// is scored by the numerical dual.
inline LinearRiskProfile optimize_linear_scalar(const LimitExperimentConfig& config, MomentOrder m,
                                                const LossSpec& loss, const IntegratorSettings& settings = {}) {
  config.validate();
  if (config.k() != 1 || config.d() != 1) throw ConfigError("optimize_linear_scalar requires k = d = 1");
  LinearRiskProfile prof;
  const double half_lambda = 0.5 * config.lambda;
  std::optional<std::pair<double, double>> range;
  if (m.fixes_second_moments()) {
    const Mat s = conditional_x_given_y(config).cond_cov;
    const Mat& k = config.k_mat;
    const Mat& psi = config.psi;
    range = detail::quadratic_sublevel((psi * s * psi.transpose())(0, 0), (psi * s * k.transpose())(0, 0),
                                       (k * s * k.transpose())(0, 0), half_lambda);
  } else {
    const double var_z = invariant_covariance(config)(0, 0);
    const double var_kx = (config.k_mat * config.i0_inv() * config.k_mat.transpose())(0, 0);
    range = detail::quadratic_sublevel(var_z, 0.0, var_kx, half_lambda);
  }
  if (!range) {
    prof.c_star = gmm_projection(config);
    return prof;
  }
  prof.lo = range->first;
  prof.hi = range->second;
  const bool closed = loss.is_squared() && m.fixes_second_moments();
  auto risk = [&](double c) {
    const Mat cm = Mat::Constant(1, 1, c);
    const double r = closed ? linear_rule_risk_closed_form(config, cm)
                            : constrained_risk(config, RuleSpec::linear(cm), loss, m, settings).value;
    prof.trace.emplace_back(c, r);
    return r;
  };
  const ScalarMinimum best = golden_section_minimize(risk, prof.lo, prof.hi, 1e-8);
  prof.c_star = Mat::Constant(1, 1, best.x);
  prof.r_star = best.value;
  return prof;
}

/// Convex minimization of the closed-form risk over d x k matrices C by Newton
/// with the analytic gradient and a differenced Hessian.
inline LinearRiskProfile optimize_linear_matrix(const LimitExperimentConfig& config, double grad_tol = 1e-9) {
  config.validate();
  const auto d = config.d(), k = config.k();
  LinearRiskProfile prof;
  auto unpack = [&](const Vec& v) { return Mat(Eigen::Map<const Mat>(v.data(), d, k)); };
  auto objective = [&](const Vec& v) {
    SmoothEval e;
    const Mat c = unpack(v);
    const double r = linear_rule_risk_closed_form(config, c);
    if (!std::isfinite(r)) return e;
    e.value = r;
    const Mat g = linear_rule_risk_gradient(config, c);
    e.gradient = Eigen::Map<const Vec>(g.data(), g.size());
    const Eigen::Index n = v.size();
    e.hessian.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double step = 1e-6 * std::max(1.0, std::abs(v[i]));
      Vec up = v, down = v;
      up[i] += step;
      down[i] -= step;
      const Mat cu = unpack(up), cd = unpack(down);
      if (!std::isfinite(linear_rule_risk_closed_form(config, cu)) ||
          !std::isfinite(linear_rule_risk_closed_form(config, cd))) {
        e.hessian.col(i) = Vec::Unit(n, i) * 1e6;
        continue;
      }
      const Mat gu = linear_rule_risk_gradient(config, cu), gd = linear_rule_risk_gradient(config, cd);
      e.hessian.col(i) = (Eigen::Map<const Vec>(gu.data(), n) - Eigen::Map<const Vec>(gd.data(), n)) / (2.0 * step);
    }
    e.hessian = 0.5 * (e.hessian + e.hessian.transpose());
    return e;
  };
  const Mat gmm = gmm_projection(config);
  std::vector<Mat> starts{Mat::Zero(d, k), gmm};
  for (const Mat& start : starts) {
    if (!std::isfinite(linear_rule_risk_closed_form(config, start))) continue;
    NewtonOptions opts;
    opts.grad_tol = grad_tol;
    const NewtonResult res = newton_minimize(objective, Eigen::Map<const Vec>(start.data(), start.size()), opts);
    prof.c_star = unpack(res.x);
    prof.r_star = res.value;
    return prof;
  }
  prof.c_star = gmm;
  return prof;
}

struct OptimalRule {
  RuleSpec rule;
  RiskReport report;
  std::optional<Mat> c_star;
};

/// Optimal equivariant rule for squared loss. M <= 1 gives delta = K X;
/// otherwise delta = K X + C* Z with C* minimizing the closed-form risk, and
/// for finite M the multipliers come from the dual at C*.
inline OptimalRule optimal_rule(const LimitExperimentConfig& config, MomentOrder m, const LossSpec& loss,
                                const IntegratorSettings& settings = {}) {
  config.validate();
  if (!loss.is_squared())
    throw ConfigError("optimal_rule covers squared loss; use joint_optimize or best_equivariant_rule for other losses");
  if (!m.fixes_second_moments()) {
    return {RuleSpec::zero(), finite_m_dual_risk(config, RuleSpec::zero(), loss, m.order, settings), std::nullopt};
  }
  const bool scalar = config.p() == 1 && config.k() == 1 && config.d() == 1;
  const LinearRiskProfile prof =
      scalar ? optimize_linear_scalar(config, MomentOrder::infinite(), loss, settings) : optimize_linear_matrix(config);
  OptimalRule out{RuleSpec::linear(prof.c_star), RiskReport::infinite(), prof.c_star};
  if (!std::isfinite(prof.r_star)) return out;
  if (m.all) {
    out.report.value = prof.r_star;
    out.report.status = SolverStatus::converged;
    out.report.gradient_norm = linear_rule_risk_gradient(config, prof.c_star).norm();
  } else {
    out.report = finite_m_dual_risk(config, out.rule, loss, m.order, settings);
  }
  return out;
}

namespace detail {

using Poly = std::vector<double>;  // ascending coefficients

inline Poly poly_mul(const Poly& a, const Poly& b) {
  Poly out(a.size() + b.size() - 1, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out[i + j] += a[i] * b[j];
  return out;
}

inline double poly_eval(const Poly& p, double x) {
  double v = 0.0;
  for (auto it = p.rbegin(); it != p.rend(); ++it) v = v * x + *it;
  return v;
}

// log posterior density of h (up to a constant) as a polynomial:
//   -I0/2 (h - x)^2 + beta' W(y + Psi h).
inline Poly log_posterior_poly(const LimitExperimentConfig& config, const MomentVectorSpec& spec, const Vec& beta,
                               double x, const Vec& y) {
  const double i0 = config.i0(0, 0);
  Poly total{-0.5 * i0 * x * x, i0 * x, -0.5 * i0};
  for (Eigen::Index j = 0; j < spec.b(); ++j) {
    if (beta[j] == 0.0) continue;
    Poly term{1.0};
    const MultiIndex& m = spec.indices[static_cast<std::size_t>(j)];
    for (int s = 0; s < spec.k; ++s)
      for (int r = 0; r < m[static_cast<std::size_t>(s)]; ++r) term = poly_mul(term, Poly{y[s], config.psi(s, 0)});
    term[0] -= spec.targets[j];
    if (term.size() > total.size()) total.resize(term.size(), 0.0);
    for (std::size_t i = 0; i < term.size(); ++i) total[i] += beta[j] * term[i];
  }
  return total;
}

inline std::string describe(const Vec& beta) {
  std::ostringstream os;
  os << "beta = (";
  for (Eigen::Index j = 0; j < beta.size(); ++j) os << (j ? ", " : "") << beta[j];
  os << ")";
  return os.str();
}

inline void require_integrable(const Poly& p, const Vec& beta) {
  double scale = 0.0;
  for (double c : p) scale = std::max(scale, std::abs(c));
  std::size_t deg = p.size();
  while (deg > 0 && std::abs(p[deg - 1]) <= 1e-13 * scale) --deg;
  if (deg < 3 || (deg - 1) % 2 == 1 || p[deg - 1] >= 0.0)
    throw IntegrabilityError("tilted posterior is not integrable at " + describe(beta));
}

struct PosteriorGrid {
  std::vector<double> h;
  Vec log_weight;  // normalized trapezoid weights times density, in logs
};

inline PosteriorGrid posterior_grid(const Poly& logp, double centre, double sd, int points = 1201) {
  double lo = centre - 8.0 * sd, hi = centre + 8.0 * sd;
  PosteriorGrid g;
  for (int pass = 0; pass < 12; ++pass) {
    g.h.resize(static_cast<std::size_t>(points));
    g.log_weight.resize(points);
    const double step = (hi - lo) / (points - 1);
    for (int i = 0; i < points; ++i) {
      g.h[static_cast<std::size_t>(i)] = lo + step * i;
      g.log_weight[i] = poly_eval(logp, g.h[static_cast<std::size_t>(i)]) + std::log(step) +
                        ((i == 0 || i == points - 1) ? std::log(0.5) : 0.0);
    }
    const double top = g.log_weight.maxCoeff();
    const Vec w = (g.log_weight.array() - top).exp().matrix();
    double mass = w.sum(), mean = 0.0, var = 0.0;
    for (int i = 0; i < points; ++i) mean += w[i] * g.h[static_cast<std::size_t>(i)];
    mean /= mass;
    for (int i = 0; i < points; ++i) var += w[i] * std::pow(g.h[static_cast<std::size_t>(i)] - mean, 2);
    const double new_sd = std::sqrt(var / mass);
    const bool edges_negligible = std::max(g.log_weight[0], g.log_weight[points - 1]) < top - 40.0;
    const bool resolved = new_sd > 40.0 * step;
    if (edges_negligible && resolved) break;
    if (!edges_negligible) {
      const double w2 = hi - lo;
      lo -= w2;
      hi += w2;
    } else {
      lo = mean - 10.0 * new_sd;
      hi = mean + 10.0 * new_sd;
    }
  }
  g.log_weight.array() -= log_sum_exp(g.log_weight);
  return g;
}

}  // namespace detail

/// Bayes rule under the tilted flat-prior posterior
///   pi_beta(h | x, y) ~ q_0(x - h, y + Psi h) exp(beta' W_{M,h}),
/// minimizing the posterior expectation of exp(l(a - K h)/lambda) over a.
/// Requires p = d = 1. A flat minimizing interval returns its midpoint.
inline double bayes_rule_tilted(const LimitExperimentConfig& config, const Vec& beta, const LossSpec& loss,
                                int max_order, const Vec& x, const Vec& y) {
  config.validate();
  if (config.p() != 1 || config.d() != 1) throw ConfigError("bayes_rule_tilted requires p = d = 1");
  if (x.size() != 1 || y.size() != config.k()) throw ConfigError("bayes_rule_tilted: x must have length 1 and y length k");
  const MomentVectorSpec spec = MomentVectorSpec::make(config.omega, max_order);
  if (beta.size() != spec.b()) throw ConfigError("bayes_rule_tilted: beta must have length b = " + std::to_string(spec.b()));
  const detail::Poly logp = detail::log_posterior_poly(config, spec, beta, x[0], y);
  detail::require_integrable(logp, beta);
  const double sd = 1.0 / std::sqrt(config.i0(0, 0));
  const detail::PosteriorGrid grid = detail::posterior_grid(logp, x[0], sd);

  const double kk = config.k_mat(0, 0);
  const double lambda = config.lambda;
  const auto n = static_cast<Eigen::Index>(grid.h.size());
  double lo = kInf, hi = -kInf;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (grid.log_weight[i] < -50.0) continue;
    const double v = kk * grid.h[static_cast<std::size_t>(i)];
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  Vec terms(n);
  auto objective = [&](double a) {
    for (Eigen::Index i = 0; i < n; ++i)
      terms[i] = grid.log_weight[i] + loss.scalar(a - kk * grid.h[static_cast<std::size_t>(i)]) / lambda;
    return log_sum_exp(terms);
  };
  const double span = std::max(hi - lo, 1e-12);
  const ScalarMinimum best = golden_section_minimize(objective, lo, hi, 1e-11 * span + 1e-14);
  // Midpoint of the numerically flat set {a : f(a) <= f* + eps}.
  const double level = best.value + 1e-13 * (1.0 + std::abs(best.value));
  auto edge = [&](double inside, double outside) {
    if (objective(outside) <= level) return outside;
    for (int it = 0; it < 50; ++it) {
      const double mid = 0.5 * (inside + outside);
      (objective(mid) <= level ? inside : outside) = mid;
    }
    return inside;
  };
  const double left = edge(best.x, lo), right = edge(best.x, hi);
  return 0.5 * (left + right);
}

struct BestEquivariant {
  Vec beta;
  double value = kInf;  ///< lambda log E[exp(l(delta_beta)/lambda + beta' W)]
  std::vector<double> z_nodes;
  std::vector<double> gamma_at_nodes;  ///< delta_beta(0, z)
  NewtonResult diagnostics;
};

/// Best equivariant rule at finite M: the multipliers minimize the envelope
///   F(beta) = min_delta log E_{Q_0}[exp(l(delta)/lambda + beta' W)],
/// whose inner minimizer is the tilted-posterior Bayes rule. Gradients use the
/// envelope identity; the Hessian is differenced. Requires p = k = d = 1.
inline BestEquivariant best_equivariant_rule(const LimitExperimentConfig& config, int max_order, const LossSpec& loss,
                                             const IntegratorSettings& settings = {}, double grad_tol = 1e-7) {
  config.validate();
  if (config.p() != 1 || config.k() != 1 || config.d() != 1)
    throw ConfigError("best_equivariant_rule requires p = k = d = 1");
  const MomentVectorSpec spec = MomentVectorSpec::make(config.omega, max_order);
  const Eigen::Index b = spec.b();
  IntegratorSettings grid_settings = settings;
  grid_settings.nodes = std::min(settings.nodes, 48);
  const QuadratureRule gh = gauss_hermite(grid_settings.nodes);
  const double sd_x = std::sqrt(config.i0_inv()(0, 0));
  const double sd_z = std::sqrt(invariant_covariance(config)(0, 0));
  const double kk = config.k_mat(0, 0), psi = config.psi(0, 0), lambda = config.lambda;
  const std::size_t nq = gh.size();

  // Odd top-order multipliers must vanish for the tilt to be integrable.
  std::vector<Eigen::Index> free;
  for (Eigen::Index j = 0; j < b; ++j)
    if (!(max_order % 2 == 1 && order_of(spec.indices[static_cast<std::size_t>(j)]) == max_order)) free.push_back(j);
  const auto nf = static_cast<Eigen::Index>(free.size());
  auto embed = [&](const Vec& v) {
    Vec full = Vec::Zero(b);
    for (Eigen::Index i = 0; i < nf; ++i) full[free[static_cast<std::size_t>(i)]] = v[i];
    return full;
  };

  struct Eval {
    double value = kInf;
    Vec grad;
    std::vector<double> gamma;
  };
  auto evaluate = [&](const Vec& v) {
    Eval e;
    const Vec beta = embed(v);
    std::vector<double> gamma(nq);
    try {
      for (std::size_t a = 0; a < nq; ++a)
        gamma[a] = bayes_rule_tilted(config, beta, loss, max_order, Vec::Zero(1), Vec::Constant(1, sd_z * gh.nodes[a]));
    } catch (const IntegrabilityError&) {
      return e;
    }
    Vec terms(static_cast<Eigen::Index>(nq * nq));
    Mat w(b, static_cast<Eigen::Index>(nq * nq));
    std::vector<char> boundary(nq * nq);
    for (std::size_t a = 0; a < nq; ++a) {
      const double z = sd_z * gh.nodes[a];
      for (std::size_t c = 0; c < nq; ++c) {
        const double x = sd_x * gh.nodes[c];
        const auto j = static_cast<Eigen::Index>(a * nq + c);
        const Vec wj = b > 0 ? w_vector(spec, Vec::Constant(1, z - psi * x)) : Vec();
        if (b > 0) w.col(j) = wj;
        terms[j] = gh.log_weights[a] + gh.log_weights[c] + loss.scalar(kk * x + gamma[a]) / lambda +
                   (b > 0 ? beta.dot(wj) : 0.0);
        boundary[static_cast<std::size_t>(j)] = (a == 0 || c == 0 || a + 1 == nq || c + 1 == nq) ? 1 : 0;
      }
    }
    const double lse = log_sum_exp(terms);
    if (!std::isfinite(lse)) return e;
    const Vec prob = (terms.array() - lse).exp().matrix();
    double edge = 0.0;
    for (Eigen::Index j = 0; j < prob.size(); ++j)
      if (boundary[static_cast<std::size_t>(j)]) edge += prob[j];
    if (edge > kBoundaryShareLimit) return e;
    e.value = lse;
    const Vec g = b > 0 ? Vec(w * prob) : Vec();
    e.grad.resize(nf);
    for (Eigen::Index i = 0; i < nf; ++i) e.grad[i] = g[free[static_cast<std::size_t>(i)]];
    e.gamma = std::move(gamma);
    return e;
  };

  BestEquivariant out;
  auto record = [&](const Vec& v, const Eval& e) {
    out.beta = embed(v);
    out.value = lambda * e.value;
    out.gamma_at_nodes = e.gamma;
  };
  out.z_nodes.resize(nq);
  for (std::size_t a = 0; a < nq; ++a) out.z_nodes[a] = sd_z * gh.nodes[a];

  // starting point: zero, else negative weight on the square
  Vec start = Vec::Zero(nf);
  Eval first = evaluate(start);
  if (!std::isfinite(first.value)) {
    Eigen::Index sq = -1;
    for (Eigen::Index i = 0; i < nf; ++i)
      if (spec.indices[static_cast<std::size_t>(free[static_cast<std::size_t>(i)])] == MultiIndex{2}) sq = i;
    for (int step = 0; sq >= 0 && step < 24 && !std::isfinite(first.value); ++step) {
      start = Vec::Zero(nf);
      start[sq] = -std::ldexp(1.0, step) / (8.0 * config.omega(0, 0));
      first = evaluate(start);
    }
  }
  if (!std::isfinite(first.value)) {
    out.beta = embed(start);
    out.diagnostics.status = SolverStatus::diverged_to_infinity;
    return out;
  }
  if (nf == 0) {
    record(start, first);
    out.diagnostics.status = SolverStatus::converged;
    out.diagnostics.gradient_norm = 0.0;
    return out;
  }
  auto hessian_at = [&](const Vec& v, const Eval& e) {
    Mat h(nf, nf);
    for (Eigen::Index i = 0; i < nf; ++i) {
      const double step = 1e-5 * std::max(1.0, std::abs(v[i]));
      Vec up = v, down = v;
      up[i] += step;
      down[i] -= step;
      const Eval eu = evaluate(up), ed = evaluate(down);
      if (std::isfinite(eu.value) && std::isfinite(ed.value))
        h.col(i) = (eu.grad - ed.grad) / (2.0 * step);
      else if (std::isfinite(eu.value))
        h.col(i) = (eu.grad - e.grad) / step;
      else if (std::isfinite(ed.value))
        h.col(i) = (e.grad - ed.grad) / step;
      else
        h.col(i) = Vec::Unit(nf, i);
    }
    return Mat(0.5 * (h + h.transpose()));
  };
  // Objective values carry quadrature noise from the posterior grid while the
  // envelope gradient stays accurate, so a step is also accepted when it
  // shrinks the gradient norm (F is convex).
  Vec v = start;
  Eval cur = first;
  NewtonResult& diag = out.diagnostics;
  diag.status = SolverStatus::max_iterations;
  for (int it = 0; it <= 50; ++it) {
    diag.iterations = it;
    diag.gradient_norm = cur.grad.norm();
    if (diag.gradient_norm <= grad_tol) {
      diag.status = SolverStatus::converged;
      break;
    }
    if (it == 50) break;
    const Vec dir = detail::newton_direction(hessian_at(v, cur), cur.grad,
                                             Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(nf, false));
    double step = 1.0;
    bool accepted = false;
    for (int bt = 0; bt < 40 && !accepted; ++bt, step *= 0.5) {
      const Vec trial = v + step * dir;
      Eval next = evaluate(trial);
      if (!std::isfinite(next.value)) continue;
      if (next.value <= cur.value + 1e-4 * step * cur.grad.dot(dir) ||
          next.grad.norm() < (1.0 - 1e-4 * step) * diag.gradient_norm) {
        v = trial;
        cur = std::move(next);
        accepted = true;
      }
    }
    if (!accepted) break;
  }
  diag.x = v;
  diag.value = cur.value;
  record(v, cur);
  return out;
}

using FeatureMap = std::function<double(const Vec& z)>;

/// Coordinates of Z as features, the basis of the linear class.
inline std::vector<FeatureMap> coordinate_basis(Eigen::Index k) {
  std::vector<FeatureMap> basis;
  for (Eigen::Index s = 0; s < k; ++s) basis.push_back([s](const Vec& z) { return z[s]; });
  return basis;
}

struct JointOptimum {
  Mat gamma;  ///< d x (number of features)
  Vec beta;
  RiskReport report;
};

namespace detail {

struct JointSample {
  Mat kx;   // d x N
  Mat phi;  // F x N
  Mat w;    // b x N
  Vec log_weights;
  std::vector<char> boundary;
  bool quadrature = true;
};

inline JointSample build_joint_sample(const LimitExperimentConfig& config, const MomentVectorSpec& spec,
                                      const std::vector<FeatureMap>& basis, const IntegratorSettings& settings) {
  const JointGaussianLaw law = joint_law(config, Vec::Zero(config.p()));
  const Mat factor = linalg::psd_factor(law.cov);
  const auto p = config.p(), k = config.k();
  const StandardNormalCloud cloud = standard_normal_cloud(static_cast<int>(p + k), settings);
  const Eigen::Index n = cloud.size();
  JointSample s;
  s.kx.resize(config.d(), n);
  s.phi.resize(static_cast<Eigen::Index>(basis.size()), n);
  s.w.resize(spec.b(), n);
  s.log_weights = cloud.log_weights;
  s.boundary = cloud.on_boundary;
  s.quadrature = cloud.quadrature;
  for (Eigen::Index j = 0; j < n; ++j) {
    const Vec v = factor * cloud.points.col(j);
    const Vec x = v.head(p), y = v.tail(k);
    const Vec z = invariant_statistic(config, x, y);
    s.kx.col(j) = config.k_mat * x;
    for (std::size_t f = 0; f < basis.size(); ++f) s.phi(static_cast<Eigen::Index>(f), j) = basis[f](z);
    if (spec.b() > 0) s.w.col(j) = w_vector(spec, y);
  }
  return s;
}

}  // namespace detail

/// log E_{Q_0}[exp(l(K X + Gamma phi(Z))/lambda + beta' W)] at theta = (vec Gamma, beta),
/// with analytic gradient and Hessian; value +inf outside the numerical domain.
inline SmoothEval joint_log_objective(const detail::JointSample& s, const LossSpec& loss, double lambda,
                                      const Vec& theta) {
  SmoothEval out;
  const Eigen::Index d = s.kx.rows(), f = s.phi.rows(), b = s.w.rows(), n = s.kx.cols();
  const Eigen::Index ng = d * f;
  const Mat gamma = Eigen::Map<const Mat>(theta.data(), d, f);
  const Vec beta = theta.tail(b);
  Vec a(n);
  Mat u = s.kx;
  if (f > 0) u.noalias() += gamma * s.phi;
  for (Eigen::Index j = 0; j < n; ++j) a[j] = s.log_weights[j] + loss(u.col(j)) / lambda;
  if (b > 0) a.noalias() += s.w.transpose() * beta;
  const double lse = log_sum_exp(a);
  if (!std::isfinite(lse)) return out;
  const Vec prob = (a.array() - lse).exp().matrix();
  if (s.quadrature) {
    double edge = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (s.boundary[static_cast<std::size_t>(j)]) edge += prob[j];
    if (edge > kBoundaryShareLimit) return out;
  } else if ((a - s.log_weights).maxCoeff() > kExponentGuard) {
    return out;
  }
  const Eigen::Index dim = ng + b;
  Mat grads(dim, n);
  Mat curv = Mat::Zero(dim, dim);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Vec g = loss.gradient(u.col(j)) / lambda;
    for (Eigen::Index c = 0; c < f; ++c) grads.col(j).segment(c * d, d) = g * s.phi(c, j);
    if (b > 0) grads.col(j).tail(b) = s.w.col(j);
    if (f > 0 && prob[j] > 0.0) {
      const Mat h = loss.hessian(u.col(j)) / lambda;
      for (Eigen::Index c = 0; c < f; ++c)
        for (Eigen::Index c2 = 0; c2 < f; ++c2)
          curv.block(c * d, c2 * d, d, d).noalias() += prob[j] * s.phi(c, j) * s.phi(c2, j) * h;
    }
  }
  out.value = lse;
  out.gradient = grads * prob;
  out.hessian = curv + grads * prob.asDiagonal() * grads.transpose() - out.gradient * out.gradient.transpose();
  return out;
}

/// Jointly minimizes over (Gamma, beta) for the rule delta = K X + Gamma phi(Z).
inline JointOptimum joint_optimize(const LimitExperimentConfig& config, int max_order, const LossSpec& loss,
                                   const std::vector<FeatureMap>& basis, const IntegratorSettings& settings = {}) {
  config.validate();
  if (max_order < 0) throw ConfigError("moment order M must be nonnegative");
  const MomentVectorSpec spec = MomentVectorSpec::make(config.omega, max_order);
  const detail::JointSample s = detail::build_joint_sample(config, spec, basis, settings);
  const Eigen::Index d = config.d(), f = static_cast<Eigen::Index>(basis.size()), b = spec.b();
  JointOptimum out;
  out.gamma = Mat::Zero(d, f);
  out.beta = Vec::Zero(b);
  out.report = RiskReport::infinite();

  // Start at Gamma = 0 with multipliers inside the domain.
  detail::TiltedSample tilted;
  tilted.base.resize(s.log_weights.size());
  tilted.loss_over_lambda.resize(s.log_weights.size());
  for (Eigen::Index j = 0; j < s.log_weights.size(); ++j) {
    tilted.loss_over_lambda[j] = loss(s.kx.col(j)) / config.lambda;
    tilted.base[j] = s.log_weights[j] + tilted.loss_over_lambda[j];
  }
  tilted.w = s.w;
  tilted.boundary = s.boundary;
  tilted.quadrature = s.quadrature;
  const std::optional<Vec> beta0 = detail::feasible_start(tilted, spec, config.omega);
  if (!beta0) return out;
  Vec theta = Vec::Zero(d * f + b);
  theta.tail(b) = *beta0;
  NewtonOptions opts;
  opts.grad_tol = settings.tol;
  const NewtonResult res =
      newton_minimize([&](const Vec& t) { return joint_log_objective(s, loss, config.lambda, t); }, theta, opts);
  if (res.status == SolverStatus::diverged_to_infinity) return out;
  out.gamma = Eigen::Map<const Mat>(res.x.data(), d, f);
  out.beta = res.x.tail(b);
  out.report.value = config.lambda * res.value;
  out.report.beta_star = out.beta;
  out.report.iterations = res.iterations;
  out.report.gradient_norm = res.gradient_norm;
  out.report.status = res.status;
  return out;
}

}  // namespace cmrisk
