#pragma once

// Finite state spaces: exact constrained-multiplier value
//   sup_{p : sum p_i phi_i = 0}  sum p_i L_i - lambda KL(p || q)
// and its multiplier dual
//   inf_beta lambda log sum q_i exp(L_i / lambda - beta' phi_i).

#include "cmrisk/dual_risk.hpp"
#include "cmrisk/linalg.hpp"
#include "cmrisk/newton.hpp"
#include "cmrisk/quadrature.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cmrisk {

class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FiniteSpacePrimal {
  Vec q;        ///< baseline probabilities, strictly positive, summing to one
  Vec loss;     ///< L_i
  Mat phi;      ///< n x b moment rows
  double lambda = 1.0;

  Eigen::Index atoms() const { return q.size(); }
  Eigen::Index b() const { return phi.cols(); }

  void validate() const {
    const auto n = q.size();
    if (n < 1) throw ConfigError("finite space needs at least one atom");
    if (loss.size() != n) throw ConfigError("loss vector length differs from the number of atoms");
    if (phi.rows() != n) throw ConfigError("moment matrix must have one row per atom");
    if (!q.allFinite() || !loss.allFinite() || !phi.allFinite()) throw ConfigError("finite space entries must be finite");
    if ((q.array() <= 0.0).any()) throw ConfigError("baseline probabilities must be strictly positive");
    if (std::abs(q.sum() - 1.0) > 1e-9) throw ConfigError("baseline probabilities must sum to one");
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be positive");
  }

  /// Moments of the baseline, zero when the constraint set contains q.
  Vec baseline_moments() const { return phi.transpose() * q; }
};

struct PrimalSolution {
  double value = 0.0;
  Vec worst_case;          ///< attaining p
  Vec beta;                ///< tilt parameter of the attaining p
  double moment_residual = 0.0;
  int iterations = 0;
};

namespace detail {

inline Vec tilted_probabilities(const FiniteSpacePrimal& prob, const Vec& beta) {
  Vec a = prob.q.array().log().matrix() + prob.loss / prob.lambda;
  if (prob.b() > 0) a -= prob.phi * beta;
  const double lse = log_sum_exp(a);
  return (a.array() - lse).exp().matrix();
}

}  // namespace detail

/// Solves the primal over the simplex. The maximizer lies in the tilted
/// family p(beta) ~ q exp(L/lambda - beta' phi); beta is found as the root of
/// the moment map sum_i p_i(beta) phi_i = 0 (damped Newton on the residual),
/// and the value is evaluated from the primal expression directly.
inline PrimalSolution primal_risk_finite_space(const FiniteSpacePrimal& prob) {
  prob.validate();
  const Eigen::Index b = prob.b();
  PrimalSolution sol;
  sol.beta = Vec::Zero(b);
  auto residual_of = [&](const Vec& beta, Vec& p) {
    p = detail::tilted_probabilities(prob, beta);
    return Vec(prob.phi.transpose() * p);
  };
  Vec p;
  Vec r = b > 0 ? residual_of(sol.beta, p) : Vec();
  if (b == 0) p = detail::tilted_probabilities(prob, sol.beta);
  const double scale = prob.phi.size() > 0 ? std::max(1.0, prob.phi.cwiseAbs().maxCoeff()) : 1.0;
  int it = 0;
  for (; b > 0 && it < 500 && r.norm() > 1e-13 * scale; ++it) {
    const Vec mean = r;
    Mat cov = prob.phi.transpose() * p.asDiagonal() * prob.phi - mean * mean.transpose();
    // d residual / d beta = -cov
    Vec step;
    Eigen::LDLT<Mat> ldlt(cov);
    step = ldlt.solve(r);
    if (!step.allFinite() || ldlt.info() != Eigen::Success) {
      step = cov.completeOrthogonalDecomposition().solve(r);
    }
    double t = 1.0;
    bool moved = false;
    for (int bt = 0; bt < 60; ++bt, t *= 0.5) {
      const Vec trial = sol.beta + t * step;
      Vec p_trial;
      const Vec r_trial = residual_of(trial, p_trial);
      if (r_trial.allFinite() && r_trial.norm() < (1.0 - 1e-4 * t) * r.norm()) {
        sol.beta = trial;
        p = std::move(p_trial);
        r = r_trial;
        moved = true;
        break;
      }
    }
    if (!moved || sol.beta.norm() > 1e8) break;
  }
  sol.iterations = it;
  if (b > 0 && (!(r.norm() <= 1e-9 * scale) || sol.beta.norm() > 1e8))
    throw InfeasibleError("moment constraints are infeasible: no distribution on the atoms sets E_P[phi] = 0 "
                          "(residual " + std::to_string(r.norm()) + ")");
  sol.worst_case = p;
  sol.moment_residual = b > 0 ? r.norm() : 0.0;
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * std::log(p[i] / prob.q[i]);
  sol.value = p.dot(prob.loss) - prob.lambda * kl;
  return sol;
}

/// Multiplier dual over beta (beta >= 0 under nonneg_beta, the dual of the
/// inequality set {P : E_P[phi] <= 0}).
inline RiskReport dual_risk_finite_space(const FiniteSpacePrimal& prob, bool nonneg_beta = false,
                                         double grad_tol = 1e-10) {
  prob.validate();
  const Vec base = prob.q.array().log().matrix() + prob.loss / prob.lambda;
  auto objective = [&](const Vec& beta) {
    SmoothEval e;
    Vec a = base;
    if (prob.b() > 0) a -= prob.phi * beta;
    e.value = log_sum_exp(a);
    const Vec p = (a.array() - e.value).exp().matrix();
    const Vec mean = prob.phi.transpose() * p;
    e.gradient = -mean;
    e.hessian = prob.phi.transpose() * p.asDiagonal() * prob.phi - mean * mean.transpose();
    return e;
  };
  RiskReport report;
  if (prob.b() == 0) {
    report.value = prob.lambda * objective(Vec()).value;
    return report;
  }
  NewtonOptions opts;
  opts.grad_tol = grad_tol;
  opts.nonnegative = nonneg_beta;
  const NewtonResult res = newton_minimize(objective, Vec::Zero(prob.b()), opts);
  if (res.x.norm() > 1e8 || res.value < -1e12)
    throw InfeasibleError("dual is unbounded below: the moment constraints are infeasible");
  if (res.status != SolverStatus::converged && res.gradient_norm > 1e-6) {
    // an unbounded dual drives beta off to infinity without meeting the tolerance
    const SmoothEval far = objective(res.x * 2.0);
    if (far.value < res.value - 1e-8) throw InfeasibleError("dual is unbounded below: the moment constraints are infeasible");
  }
  report.value = prob.lambda * res.value;
  report.beta_star = res.x;
  report.iterations = res.iterations;
  report.gradient_norm = res.gradient_norm;
  report.status = res.status;
  return report;
}

}  // namespace cmrisk
