#pragma once

// Gaussian limit experiment: X ~ N(h, I0^-1) jointly normal with
// Y ~ N(-Psi h, Omega), Cov(X, Y) = -I0^-1 Psi'.

#include "cmrisk/linalg.hpp"
#include "cmrisk/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace cmrisk {

struct LimitExperimentConfig {
  Mat i0;     ///< p x p Fisher information
  Mat psi;    ///< k x p moment Jacobian
  Mat omega;  ///< k x k moment variance
  Mat k_mat;  ///< d x p derivative of the target
  double lambda = 1.0;

  Eigen::Index p() const { return i0.rows(); }
  Eigen::Index k() const { return omega.rows(); }
  Eigen::Index d() const { return k_mat.rows(); }

  /// Throws ConfigError on any violated invariant.
  void validate() const {
    if (i0.rows() < 1 || i0.rows() != i0.cols()) throw ConfigError("I0 must be a non-empty square matrix");
    if (omega.rows() < 1 || omega.rows() != omega.cols()) throw ConfigError("Omega must be a non-empty square matrix");
    if (psi.rows() != omega.rows() || psi.cols() != i0.rows())
      throw ConfigError("Psi must be k x p (" + std::to_string(omega.rows()) + " x " + std::to_string(i0.rows()) +
                        "), got " + std::to_string(psi.rows()) + " x " + std::to_string(psi.cols()));
    if (k_mat.rows() < 1 || k_mat.cols() != i0.rows())
      throw ConfigError("K must be d x p with p = " + std::to_string(i0.rows()));
    if (!i0.allFinite() || !psi.allFinite() || !omega.allFinite() || !k_mat.allFinite())
      throw ConfigError("configuration matrices must be finite");
    if (!linalg::is_spd(i0)) throw ConfigError("I0 is not symmetric positive definite");
    if (!linalg::is_spd(omega)) throw ConfigError("Omega is not symmetric positive definite");
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be a positive finite number");
  }

  Mat i0_inv() const { return linalg::spd_inverse(i0, "I0"); }

  LimitExperimentConfig with_lambda(double new_lambda) const {
    LimitExperimentConfig c = *this;
    c.lambda = new_lambda;
    c.validate();
    return c;
  }

  static LimitExperimentConfig make(Mat i0, Mat psi, Mat omega, Mat k_mat, double lambda) {
    LimitExperimentConfig c{std::move(i0), std::move(psi), std::move(omega), std::move(k_mat), lambda};
    c.validate();
    return c;
  }

  /// Scalar setting with I0 = 1, Psi = -1, K = 1.
  static LimitExperimentConfig normalized_scalar(double omega, double lambda) {
    return make(Mat::Constant(1, 1, 1.0), Mat::Constant(1, 1, -1.0), Mat::Constant(1, 1, omega),
                Mat::Constant(1, 1, 1.0), lambda);
  }
};

struct JointGaussianLaw {
  Vec mean;  ///< (h, -Psi h)
  Mat cov;   ///< [[I0^-1, -I0^-1 Psi'], [-Psi I0^-1, Omega]]
  Eigen::Index p = 0;
  Eigen::Index k = 0;

  Mat cov_xx() const { return cov.topLeftCorner(p, p); }
  Mat cov_xy() const { return cov.topRightCorner(p, k); }
  Mat cov_yy() const { return cov.bottomRightCorner(k, k); }
};

inline JointGaussianLaw joint_law(const LimitExperimentConfig& config, const Vec& h) {
  config.validate();
  const auto p = config.p(), k = config.k();
  if (h.size() != p) throw ConfigError("local parameter h must have length p");
  const Mat i0_inv = config.i0_inv();
  JointGaussianLaw law;
  law.p = p;
  law.k = k;
  law.mean.resize(p + k);
  law.mean << h, -config.psi * h;
  law.cov.resize(p + k, p + k);
  const Mat cross = -i0_inv * config.psi.transpose();
  law.cov << i0_inv, cross, cross.transpose(), config.omega;
  law.cov = 0.5 * (law.cov + law.cov.transpose());
  return law;
}

/// Law of X given Y at local parameter h:
/// X | Y=y ~ N(h + slope (y + Psi h), cond_cov).
struct ConditionalLawXGivenY {
  Mat slope;     ///< p x k, -I0^-1 Psi' Omega^-1
  Mat cond_cov;  ///< I0^-1 - I0^-1 Psi' Omega^-1 Psi I0^-1
  Mat y_mean_map;  ///< k x p, Y mean is y_mean_map * h = -Psi h

  Vec conditional_mean(const Vec& h, const Vec& y) const { return h + slope * (y - y_mean_map * h); }
};

inline ConditionalLawXGivenY conditional_x_given_y(const LimitExperimentConfig& config) {
  config.validate();
  const Mat i0_inv = config.i0_inv();
  const Mat omega_inv = linalg::spd_inverse(config.omega, "Omega");
  ConditionalLawXGivenY law;
  const Mat cross = -i0_inv * config.psi.transpose();
  law.slope = cross * omega_inv;
  law.cond_cov = i0_inv - cross * omega_inv * cross.transpose();
  law.cond_cov = 0.5 * (law.cond_cov + law.cond_cov.transpose());
  law.y_mean_map = -config.psi;
  return law;
}

/// Maximal invariant Z = y + Psi x under the shift group.
inline Vec invariant_statistic(const LimitExperimentConfig& config, const Vec& x, const Vec& y) {
  if (x.size() != config.p() || y.size() != config.k())
    throw ConfigError("invariant_statistic: expected x of length p and y of length k");
  return y + config.psi * x;
}

/// Covariance of Z under Q_h: Omega - Psi I0^-1 Psi'.
inline Mat invariant_covariance(const LimitExperimentConfig& config) {
  Mat v = config.omega - config.psi * config.i0_inv() * config.psi.transpose();
  return 0.5 * (v + v.transpose());
}

struct Draw {
  Vec x;
  Vec y;
};

/// Seeded draws from Q_h. Draw j depends only on (seed, j).
inline std::vector<Draw> sample(const LimitExperimentConfig& config, const Vec& h, std::size_t n_draws,
                                std::uint64_t seed) {
  if (n_draws < 1) throw ConfigError("sample: n_draws must be at least 1");
  const JointGaussianLaw law = joint_law(config, h);
  const Mat factor = linalg::psd_factor(law.cov);
  const auto dim = law.mean.size();
  std::vector<Draw> out;
  out.reserve(n_draws);
  Vec u(dim);
  for (std::size_t j = 0; j < n_draws; ++j) {
    CounterRng rng(seed, j);
    for (Eigen::Index i = 0; i < dim; ++i) u[i] = rng.normal();
    const Vec v = law.mean + factor * u;
    out.push_back({v.head(law.p), v.tail(law.k)});
  }
  return out;
}

}  // namespace cmrisk
