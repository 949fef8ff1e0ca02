#pragma once

// Centered monomials of a Gaussian vector up to total order M. Components are
// ordered graded-lexicographically: by total order, then by exponent tuples in
// descending lexicographic order, e.g. (1,0),(0,1),(2,0),(1,1),(0,2).

#include "cmrisk/linalg.hpp"

#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmrisk {

using MultiIndex = std::vector<int>;

inline constexpr int kMaxMomentOrder = 8;

class UnsupportedOrderError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline int order_of(const MultiIndex& m) { return std::accumulate(m.begin(), m.end(), 0); }

namespace detail {
inline void exponents_of_order(int k, int remaining, std::size_t pos, MultiIndex& cur,
                               std::vector<MultiIndex>& out) {
  if (pos + 1 == static_cast<std::size_t>(k)) {
    cur[pos] = remaining;
    out.push_back(cur);
    return;
  }
  for (int e = remaining; e >= 0; --e) {
    cur[pos] = e;
    exponents_of_order(k, remaining - e, pos + 1, cur, out);
  }
}
}  // namespace detail

inline std::vector<MultiIndex> enumerate_multi_indices(int k, int max_order) {
  if (k < 1) throw std::invalid_argument("enumerate_multi_indices: k must be at least 1");
  if (max_order < 0) throw std::invalid_argument("enumerate_multi_indices: M must be nonnegative");
  std::vector<MultiIndex> out;
  MultiIndex cur(k, 0);
  for (int g = 1; g <= max_order; ++g) detail::exponents_of_order(k, g, 0, cur, out);
  return out;
}

namespace detail {
// Sum over perfect matchings of the coordinate multiset `coords` (sorted).
inline double isserlis(const std::vector<int>& coords, const Mat& omega,
                       std::map<std::vector<int>, double>& memo) {
  if (coords.empty()) return 1.0;
  if (coords.size() % 2 == 1) return 0.0;
  if (auto it = memo.find(coords); it != memo.end()) return it->second;
  const int first = coords[0];
  double total = 0.0;
  for (std::size_t j = 1; j < coords.size(); ++j) {
    if (j > 1 && coords[j] == coords[j - 1]) {
      // identical partner coordinates give identical sub-multisets
      continue;
    }
    std::size_t multiplicity = 1;
    while (j + multiplicity < coords.size() && coords[j + multiplicity] == coords[j]) ++multiplicity;
    std::vector<int> rest;
    rest.reserve(coords.size() - 2);
    for (std::size_t i = 1; i < coords.size(); ++i)
      if (i != j) rest.push_back(coords[i]);
    total += static_cast<double>(multiplicity) * omega(first, coords[j]) * isserlis(rest, omega, memo);
  }
  memo.emplace(coords, total);
  return total;
}
}  // namespace detail

/// E[prod_s xi_s^{m_s}] for xi ~ N(0, omega), via Isserlis' pairing formula.
inline double gaussian_central_moment(const Mat& omega, const MultiIndex& m) {
  if (omega.rows() != omega.cols() || static_cast<std::size_t>(omega.rows()) != m.size())
    throw ConfigError("gaussian_central_moment: Omega must be k x k with k = length of the multi-index");
  for (int e : m)
    if (e < 0) throw std::invalid_argument("gaussian_central_moment: negative exponent");
  const int order = order_of(m);
  if (order > kMaxMomentOrder)
    throw UnsupportedOrderError("moment order " + std::to_string(order) + " exceeds supported maximum " +
                                std::to_string(kMaxMomentOrder));
  if (order % 2 == 1) return 0.0;
  std::vector<int> coords;
  for (std::size_t s = 0; s < m.size(); ++s)
    for (int r = 0; r < m[s]; ++r) coords.push_back(static_cast<int>(s));
  std::map<std::vector<int>, double> memo;
  return detail::isserlis(coords, omega, memo);
}

struct MomentVectorSpec {
  int k = 0;
  int max_order = 0;
  std::vector<MultiIndex> indices;
  Vec targets;

  Eigen::Index b() const { return static_cast<Eigen::Index>(indices.size()); }

  static MomentVectorSpec make(const Mat& omega, int max_order) {
    MomentVectorSpec spec;
    spec.k = static_cast<int>(omega.rows());
    spec.max_order = max_order;
    spec.indices = enumerate_multi_indices(spec.k, max_order);
    spec.targets.resize(spec.b());
    for (Eigen::Index j = 0; j < spec.b(); ++j)
      spec.targets[j] = gaussian_central_moment(omega, spec.indices[static_cast<std::size_t>(j)]);
    return spec;
  }
};

/// W component j = prod_s y_s^{m_js} - target_j, with y the centered statistic Y + Psi h.
inline Vec w_vector(const MomentVectorSpec& spec, const Vec& y_h) {
  if (y_h.size() != spec.k) throw ConfigError("w_vector: statistic has wrong dimension");
  Vec w(spec.b());
  for (Eigen::Index j = 0; j < spec.b(); ++j) {
    const MultiIndex& m = spec.indices[static_cast<std::size_t>(j)];
    double prod = 1.0;
    for (int s = 0; s < spec.k; ++s)
      for (int r = 0; r < m[static_cast<std::size_t>(s)]; ++r) prod *= y_h[s];
    w[j] = prod - spec.targets[j];
  }
  return w;
}

}  // namespace cmrisk
