#pragma once

// Equivariant decision rules delta(X, Y) = K X + gamma(Z), Z = Y + Psi X, and
// convex losses with their exponential tilt exp(loss / lambda).

#include "cmrisk/core_experiment.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace cmrisk {

enum class RuleFamily { zero, linear, soft_threshold, erm, spline };

inline std::string to_string(RuleFamily f) {
  switch (f) {
    case RuleFamily::zero: return "zero";
    case RuleFamily::linear: return "linear";
    case RuleFamily::soft_threshold: return "soft_threshold";
    case RuleFamily::erm: return "erm";
    case RuleFamily::spline: return "spline";
  }
  return "unknown";
}

inline double soft_threshold(double z, double tau) {
  const double excess = std::abs(z) - tau;
  if (excess <= 0.0) return 0.0;
  return z > 0.0 ? excess : -excess;
}

inline double erm_shrink(double z, double tau) { return z * z * z / (z * z + tau); }

/// Piecewise-linear interpolation through (knots, values) with slope exactly
/// one beyond the outermost knots.
inline double spline_eval(const std::vector<double>& knots, const std::vector<double>& values, double z) {
  const std::size_t n = knots.size();
  if (z <= knots.front()) return values.front() + (z - knots.front());
  if (z >= knots.back()) return values.back() + (z - knots.back());
  const auto it = std::upper_bound(knots.begin(), knots.end(), z);
  const std::size_t j = static_cast<std::size_t>(it - knots.begin());  // knots[j-1] <= z < knots[j]
  const std::size_t lo = std::min(j, n - 1) - 1;
  const double t = (z - knots[lo]) / (knots[lo + 1] - knots[lo]);
  return (1.0 - t) * values[lo] + t * values[lo + 1];
}

class RuleSpec {
 public:
  static RuleSpec zero() { return RuleSpec(RuleFamily::zero); }

  static RuleSpec linear(Mat c) {
    RuleSpec r(RuleFamily::linear);
    if (c.size() == 0 || !c.allFinite()) throw ConfigError("linear rule needs a finite, non-empty C matrix");
    r.c_ = std::move(c);
    return r;
  }

  static RuleSpec linear_scalar(double c) { return linear(Mat::Constant(1, 1, c)); }

  static RuleSpec soft_threshold(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("soft_threshold rule needs tau > 0");
    RuleSpec r(RuleFamily::soft_threshold);
    r.tau_ = tau;
    return r;
  }

  static RuleSpec erm(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("erm rule needs tau > 0");
    RuleSpec r(RuleFamily::erm);
    r.tau_ = tau;
    return r;
  }

  static RuleSpec spline(std::vector<double> knots, std::vector<double> values) {
    if (knots.size() < 2) throw ConfigError("spline rule needs at least two knots");
    if (knots.size() != values.size()) throw ConfigError("spline knots and values must have equal length");
    for (std::size_t i = 1; i < knots.size(); ++i)
      if (!(knots[i] > knots[i - 1])) throw ConfigError("spline knots must be strictly increasing");
    RuleSpec r(RuleFamily::spline);
    r.knots_ = std::move(knots);
    r.values_ = std::move(values);
    return r;
  }

  RuleFamily family() const { return family_; }
  std::string name() const { return to_string(family_); }
  double tau() const { return tau_; }
  const Mat& c() const { return c_; }
  const std::vector<double>& knots() const { return knots_; }
  const std::vector<double>& values() const { return values_; }

  bool is_scalar_family() const {
    return family_ == RuleFamily::soft_threshold || family_ == RuleFamily::erm || family_ == RuleFamily::spline;
  }
  bool is_linear_class() const { return family_ == RuleFamily::zero || family_ == RuleFamily::linear; }

  void check_compatible(const LimitExperimentConfig& config) const {
    if (is_scalar_family() && (config.k() != 1 || config.d() != 1))
      throw ConfigError(name() + " rule requires k = d = 1");
    if (family_ == RuleFamily::linear && (c_.rows() != config.d() || c_.cols() != config.k()))
      throw ConfigError("linear rule C must be d x k");
  }

  /// gamma(z) for the scalar families.
  double gamma_scalar(double z) const {
    switch (family_) {
      case RuleFamily::zero: return 0.0;
      case RuleFamily::linear: return c_(0, 0) * z;
      case RuleFamily::soft_threshold: return cmrisk::soft_threshold(z, tau_);
      case RuleFamily::erm: return erm_shrink(z, tau_);
      case RuleFamily::spline: return spline_eval(knots_, values_, z);
    }
    return 0.0;
  }

  Vec gamma(const Vec& z, Eigen::Index d) const {
    switch (family_) {
      case RuleFamily::zero: return Vec::Zero(d);
      case RuleFamily::linear: return c_ * z;
      default: return Vec::Constant(1, gamma_scalar(z[0]));
    }
  }

  Vec evaluate(const LimitExperimentConfig& config, const Vec& x, const Vec& y) const {
    return config.k_mat * x + gamma(invariant_statistic(config, x, y), config.d());
  }

  /// Linear map that gamma approaches for large |z|: zero -> 0, linear -> C,
  /// the scalar families -> 1 (unit-slope tails).
  Mat tail_coefficient(Eigen::Index d, Eigen::Index k) const {
    switch (family_) {
      case RuleFamily::zero: return Mat::Zero(d, k);
      case RuleFamily::linear: return c_;
      default: return Mat::Identity(d, k);
    }
  }

 private:
  explicit RuleSpec(RuleFamily f) : family_(f) {}

  RuleFamily family_;
  Mat c_;
  double tau_ = 0.0;
  std::vector<double> knots_;
  std::vector<double> values_;
};

/// Convex loss with its minimum at zero. Squared loss carries a flag that
/// enables closed-form paths elsewhere.
class LossSpec {
 public:
  using Evaluator = std::function<double(const Vec&)>;

  static LossSpec squared() {
    LossSpec l;
    l.squared_ = true;
    l.name_ = "squared";
    l.fn_ = [](const Vec& u) { return u.squaredNorm(); };
    return l;
  }

  static LossSpec custom(Evaluator fn, std::string name) {
    if (!fn) throw ConfigError("custom loss needs an evaluator");
    LossSpec l;
    l.squared_ = false;
    l.name_ = std::move(name);
    l.fn_ = std::move(fn);
    return l;
  }

  /// Loss on scalar actions (d = 1), evaluated without vector allocation.
  static LossSpec custom_scalar(std::function<double(double)> fn, std::string name) {
    if (!fn) throw ConfigError("custom loss needs an evaluator");
    LossSpec l;
    l.squared_ = false;
    l.name_ = std::move(name);
    l.scalar_fn_ = fn;
    l.fn_ = [f = std::move(fn)](const Vec& u) {
      if (u.size() != 1) throw ConfigError("scalar loss applied to a vector action");
      return f(u[0]);
    };
    return l;
  }

  bool is_squared() const { return squared_; }
  const std::string& name() const { return name_; }

  double operator()(const Vec& u) const { return fn_(u); }
  double scalar(double u) const {
    if (squared_) return u * u;
    return scalar_fn_ ? scalar_fn_(u) : fn_(Vec::Constant(1, u));
  }
  double tilted(const Vec& u, double lambda) const { return std::exp(fn_(u) / lambda); }

  /// Gradient; central differences for custom losses.
  Vec gradient(const Vec& u) const {
    if (squared_) return 2.0 * u;
    Vec g(u.size());
    Vec v = u;
    for (Eigen::Index i = 0; i < u.size(); ++i) {
      const double step = 1e-6 * std::max(1.0, std::abs(u[i]));
      v[i] = u[i] + step;
      const double up = fn_(v);
      v[i] = u[i] - step;
      const double down = fn_(v);
      v[i] = u[i];
      g[i] = (up - down) / (2.0 * step);
    }
    return g;
  }

  Mat hessian(const Vec& u) const {
    const auto d = u.size();
    if (squared_) return 2.0 * Mat::Identity(d, d);
    Mat h(d, d);
    Vec v = u;
    for (Eigen::Index i = 0; i < d; ++i) {
      const double step = 1e-4 * std::max(1.0, std::abs(u[i]));
      v[i] = u[i] + step;
      const Vec up = gradient(v);
      v[i] = u[i] - step;
      const Vec down = gradient(v);
      v[i] = u[i];
      h.col(i) = (up - down) / (2.0 * step);
    }
    return 0.5 * (h + h.transpose());
  }

 private:
  LossSpec() = default;

  bool squared_ = true;
  std::string name_;
  Evaluator fn_;
  std::function<double(double)> scalar_fn_;
};

}  // namespace cmrisk
