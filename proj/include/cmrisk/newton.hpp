#pragma once

#include "cmrisk/linalg.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace cmrisk {

enum class SolverStatus { converged, diverged_to_infinity, max_iterations };

inline std::string to_string(SolverStatus s) {
  switch (s) {
    case SolverStatus::converged: return "converged";
    case SolverStatus::diverged_to_infinity: return "diverged_to_infinity";
    case SolverStatus::max_iterations: return "max_iterations";
  }
  return "unknown";
}

/// Value with first and second derivatives. value == +inf marks a point
/// outside the effective domain; derivatives are then ignored.
struct SmoothEval {
  double value = kInf;
  Vec gradient;
  Mat hessian;
};

using SmoothObjective = std::function<SmoothEval(const Vec&)>;

struct NewtonOptions {
  double grad_tol = 1e-8;
  int max_iter = 200;
  bool nonnegative = false;   ///< projected Newton onto the nonnegative orthant
  double armijo = 1e-4;
  int max_backtracks = 60;
};

struct NewtonResult {
  Vec x;
  double value = kInf;
  int iterations = 0;
  double gradient_norm = kInf;
  SolverStatus status = SolverStatus::max_iterations;
};

namespace detail {

// Components pinned at the lower bound with a gradient pushing outward.
inline Eigen::Array<bool, Eigen::Dynamic, 1> active_set(const Vec& x, const Vec& g, bool nonnegative) {
  Eigen::Array<bool, Eigen::Dynamic, 1> active = Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(x.size(), false);
  if (!nonnegative) return active;
  for (Eigen::Index i = 0; i < x.size(); ++i) active[i] = x[i] <= 0.0 && g[i] > 0.0;
  return active;
}

inline double projected_gradient_norm(const Vec& x, const Vec& g, bool nonnegative) {
  const auto active = active_set(x, g, nonnegative);
  double s = 0.0;
  for (Eigen::Index i = 0; i < g.size(); ++i)
    if (!active[i]) s += g[i] * g[i];
  return std::sqrt(s);
}

// Solve H d = -g on the free coordinates, regularizing until the step is a
// descent direction.
inline Vec newton_direction(const Mat& h, const Vec& g, const Eigen::Array<bool, Eigen::Dynamic, 1>& active) {
  const Eigen::Index n = g.size();
  std::vector<Eigen::Index> free;
  for (Eigen::Index i = 0; i < n; ++i)
    if (!active[i]) free.push_back(i);
  Vec d = Vec::Zero(n);
  if (free.empty()) return d;
  const auto m = static_cast<Eigen::Index>(free.size());
  Mat hf(m, m);
  Vec gf(m);
  for (Eigen::Index a = 0; a < m; ++a) {
    gf[a] = g[free[a]];
    for (Eigen::Index b = 0; b < m; ++b) hf(a, b) = h(free[a], free[b]);
  }
  hf = 0.5 * (hf + hf.transpose());
  const double scale = std::max(1e-300, hf.diagonal().cwiseAbs().maxCoeff());
  double mu = 0.0;
  for (int attempt = 0; attempt < 40; ++attempt) {
    Mat reg = hf;
    reg.diagonal().array() += mu;
    Eigen::LLT<Mat> llt(reg);
    if (llt.info() == Eigen::Success) {
      Vec df = -llt.solve(gf);
      if (df.allFinite() && df.dot(gf) < 0.0) {
        for (Eigen::Index a = 0; a < m; ++a) d[free[a]] = df[a];
        return d;
      }
    }
    mu = mu == 0.0 ? 1e-10 * scale : mu * 10.0;
  }
  for (Eigen::Index a = 0; a < m; ++a) d[free[a]] = -gf[a];
  return d;
}

}  // namespace detail

/// Damped Newton with Armijo backtracking for smooth convex objectives over
/// R^n (or the nonnegative orthant). Trial points with value +inf are
/// treated as failed steps and shrunk.
inline NewtonResult newton_minimize(const SmoothObjective& objective, Vec x0, const NewtonOptions& opts = {}) {
  NewtonResult res;
  if (opts.nonnegative) x0 = x0.cwiseMax(0.0);
  res.x = x0;
  SmoothEval cur = objective(res.x);
  if (!std::isfinite(cur.value)) {
    res.status = SolverStatus::diverged_to_infinity;
    return res;
  }
  for (int it = 0; it <= opts.max_iter; ++it) {
    res.iterations = it;
    res.value = cur.value;
    res.gradient_norm = detail::projected_gradient_norm(res.x, cur.gradient, opts.nonnegative);
    if (res.gradient_norm <= opts.grad_tol) {
      res.status = SolverStatus::converged;
      return res;
    }
    if (it == opts.max_iter) break;
    const auto active = detail::active_set(res.x, cur.gradient, opts.nonnegative);
    const Vec dir = detail::newton_direction(cur.hessian, cur.gradient, active);
    double step = 1.0;
    bool accepted = false;
    for (int bt = 0; bt < opts.max_backtracks; ++bt, step *= 0.5) {
      Vec trial = res.x + step * dir;
      if (opts.nonnegative) trial = trial.cwiseMax(0.0);
      SmoothEval next = objective(trial);
      if (!std::isfinite(next.value)) continue;
      const double decrease = cur.gradient.dot(trial - res.x);
      if (next.value <= cur.value + opts.armijo * decrease || next.value < cur.value - 1e-15 * std::abs(cur.value)) {
        res.x = std::move(trial);
        cur = std::move(next);
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // no representable decrease left along the Newton direction
      res.status = SolverStatus::max_iterations;
      return res;
    }
  }
  res.value = cur.value;
  res.gradient_norm = detail::projected_gradient_norm(res.x, cur.gradient, opts.nonnegative);
  res.status = res.gradient_norm <= opts.grad_tol ? SolverStatus::converged : SolverStatus::max_iterations;
  return res;
}

}  // namespace cmrisk
