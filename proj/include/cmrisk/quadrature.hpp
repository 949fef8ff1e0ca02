#pragma once

#include "cmrisk/linalg.hpp"
#include "cmrisk/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace cmrisk {

/// Nodes and log-weights for E[f(U)], U ~ N(0, 1).
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> log_weights;

  std::size_t size() const { return nodes.size(); }
};

/// n-point Gauss-Hermite rule for the standard normal weight. Roots of the
/// orthonormal Hermite polynomials are found by Newton iteration on the
/// three-term recurrence; weights are returned in log form so the extreme
/// nodes keep full relative precision.
inline QuadratureRule gauss_hermite(int n) {
  if (n < 1) throw std::invalid_argument("gauss_hermite: n must be positive");
  constexpr double kPiM4 = 0.7511255444649425;  // pi^(-1/4)
  std::vector<double> x(n), log_w(n);
  const int half = (n + 1) / 2;
  double z = 0.0;
  for (int i = 0; i < half; ++i) {
    if (i == 0) {
      z = std::sqrt(2.0 * n + 1.0) - 1.85575 * std::pow(2.0 * n + 1.0, -0.16667);
    } else if (i == 1) {
      z -= 1.14 * std::pow(static_cast<double>(n), 0.426) / z;
    } else if (i == 2) {
      z = 1.86 * z - 0.86 * x[0];
    } else if (i == 3) {
      z = 1.91 * z - 0.91 * x[1];
    } else {
      z = 2.0 * z - x[i - 2];
    }
    double pp = 0.0;
    for (int it = 0; it < 200; ++it) {
      double p1 = kPiM4, p2 = 0.0;
      for (int j = 0; j < n; ++j) {
        const double p3 = p2;
        p2 = p1;
        p1 = z * std::sqrt(2.0 / (j + 1)) * p2 - std::sqrt(static_cast<double>(j) / (j + 1)) * p3;
      }
      pp = std::sqrt(2.0 * n) * p2;
      const double step = p1 / pp;
      z -= step;
      if (std::abs(step) <= 1e-15 * std::max(1.0, std::abs(z))) break;
    }
    x[i] = z;
    x[n - 1 - i] = -z;
    // physicists' weight 2/pp^2 for exp(-t^2); rescale to N(0,1).
    log_w[i] = std::log(2.0) - 2.0 * std::log(std::abs(pp)) - 0.5 * std::log(std::numbers::pi);
    log_w[n - 1 - i] = log_w[i];
  }
  QuadratureRule rule;
  rule.nodes.resize(n);
  rule.log_weights = log_w;
  for (int i = 0; i < n; ++i) rule.nodes[i] = std::numbers::sqrt2 * x[n - 1 - i];
  std::reverse(rule.log_weights.begin(), rule.log_weights.end());
  return rule;
}

/// Controls every Gaussian expectation in the library.
struct IntegratorSettings {
  int nodes = 128;                    ///< Gauss-Hermite nodes per dimension.
  std::size_t mc_draws = 1'000'000;   ///< Monte Carlo draws when dimension > max_quadrature_dim.
  std::uint64_t seed = 20250101;
  double tol = 1e-8;                  ///< Gradient tolerance for inner solvers.
  int max_quadrature_dim = 3;
};

/// A fixed set of weighted points representing N(0, I_dim). Either a tensor
/// Gauss-Hermite grid or seeded Monte Carlo draws; the same cloud is reused for
/// every evaluation within one solve (common random numbers).
struct StandardNormalCloud {
  int dim = 0;
  Mat points;              ///< dim x N
  Vec log_weights;         ///< N, log of weights summing to one
  std::vector<char> on_boundary;  ///< tensor-grid nodes with an outermost coordinate
  bool quadrature = true;

  Eigen::Index size() const { return log_weights.size(); }
};

inline StandardNormalCloud standard_normal_cloud(int dim, const IntegratorSettings& settings,
                                                 std::uint64_t stream = 0) {
  StandardNormalCloud cloud;
  cloud.dim = dim;
  if (dim == 0) {
    cloud.points = Mat(0, 1);
    cloud.log_weights = Vec::Zero(1);
    cloud.on_boundary = {0};
    return cloud;
  }
  if (dim <= settings.max_quadrature_dim) {
    const QuadratureRule rule = gauss_hermite(settings.nodes);
    const std::size_t n = rule.size();
    std::size_t total = 1;
    for (int d = 0; d < dim; ++d) total *= n;
    cloud.points.resize(dim, static_cast<Eigen::Index>(total));
    cloud.log_weights.resize(static_cast<Eigen::Index>(total));
    cloud.on_boundary.assign(total, 0);
    std::vector<std::size_t> idx(dim, 0);
    for (std::size_t j = 0; j < total; ++j) {
      double lw = 0.0;
      bool edge = false;
      for (int d = 0; d < dim; ++d) {
        cloud.points(d, static_cast<Eigen::Index>(j)) = rule.nodes[idx[d]];
        lw += rule.log_weights[idx[d]];
        edge = edge || idx[d] == 0 || idx[d] + 1 == n;
      }
      cloud.log_weights[static_cast<Eigen::Index>(j)] = lw;
      cloud.on_boundary[j] = edge ? 1 : 0;
      for (int d = dim - 1; d >= 0; --d) {
        if (++idx[d] < n) break;
        idx[d] = 0;
      }
    }
    cloud.quadrature = true;
    return cloud;
  }
  const auto draws = static_cast<Eigen::Index>(settings.mc_draws);
  if (draws < 1) throw std::invalid_argument("mc_draws must be positive");
  CounterRng rng(settings.seed, stream);
  cloud.points.resize(dim, draws);
  for (Eigen::Index j = 0; j < draws; ++j)
    for (int d = 0; d < dim; ++d) cloud.points(d, j) = rng.normal();
  cloud.log_weights = Vec::Constant(draws, -std::log(static_cast<double>(draws)));
  cloud.on_boundary.assign(static_cast<std::size_t>(draws), 0);
  cloud.quadrature = false;
  return cloud;
}

/// log(sum_j exp(a_j)) with the usual max shift; -inf for empty input.
inline double log_sum_exp(const Vec& a) {
  if (a.size() == 0) return -kInf;
  const double m = a.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((a.array() - m).exp().sum());
}

}  // namespace cmrisk
