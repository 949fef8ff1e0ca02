#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>

namespace cmrisk {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Raised for malformed or inconsistent experiment / problem descriptions.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a numerical routine cannot produce a trustworthy answer.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace linalg {

inline bool is_symmetric(const Mat& a, double tol = 1e-10) {
  if (a.rows() != a.cols()) return false;
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  return (a - a.transpose()).cwiseAbs().maxCoeff() <= tol * scale;
}

/// Cholesky factor of a symmetric matrix, or nullopt when factorization
/// fails. Factorization failure is the definition of "not SPD" here.
inline std::optional<Mat> cholesky_lower(const Mat& a) {
  if (!is_symmetric(a)) return std::nullopt;
  Eigen::LLT<Mat> llt(a);
  if (llt.info() != Eigen::Success) return std::nullopt;
  Mat l = llt.matrixL();
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    if (!(l(i, i) > 0.0) || !std::isfinite(l(i, i))) return std::nullopt;
  }
  return l;
}

inline bool is_spd(const Mat& a) { return cholesky_lower(a).has_value(); }

/// Square-root factor F with F F' = a for a symmetric PSD matrix. Uses the
/// Cholesky factor when it exists and falls back to the eigen square root
/// (negative rounding-level eigenvalues clamped to zero).
inline Mat psd_factor(const Mat& a) {
  if (a.size() == 0) return Mat(0, 0);
  if (auto l = cholesky_lower(a)) return *l;
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (a + a.transpose()));
  if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  const double floor = -1e-10 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < floor) throw ConfigError("covariance matrix is not positive semidefinite");
  Vec root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal();
}

inline Mat spd_inverse(const Mat& a, const std::string& what) {
  auto l = cholesky_lower(a);
  if (!l) throw ConfigError(what + " is not symmetric positive definite");
  Eigen::LLT<Mat> llt(a);
  return llt.solve(Mat::Identity(a.rows(), a.cols()));
}

inline double max_eigenvalue_symmetric(const Mat& a) {
  if (a.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (a + a.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

}  // namespace linalg
}  // namespace cmrisk
