#pragma once

#include <cmath>
#include <functional>
#include <limits>

namespace cmrisk {

struct ScalarMinimum {
  double x = 0.0;
  double value = std::numeric_limits<double>::infinity();
  int evaluations = 0;
};

/// Golden-section search for a unimodal f on [lo, hi]; +inf values are
/// allowed and compare as larger than any finite value.
inline ScalarMinimum golden_section_minimize(const std::function<double(double)>& f, double lo, double hi,
                                             double tol = 1e-8, int max_iter = 200) {
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  ScalarMinimum out;
  double a = lo, b = hi;
  double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  double fc = f(c), fd = f(d);
  out.evaluations = 2;
  for (int it = 0; it < max_iter && (b - a) > tol; ++it) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
    ++out.evaluations;
  }
  if (fc <= fd) {
    out.x = c;
    out.value = fc;
  } else {
    out.x = d;
    out.value = fd;
  }
  return out;
}

/// Minimizer of f over a log-spaced scan of [lo, hi] refined by golden
/// section in log coordinates around the best scan point.
inline ScalarMinimum log_scan_then_golden(const std::function<double(double)>& f, double lo, double hi, int scan = 25,
                                          double log_tol = 1e-6) {
  const double llo = std::log(lo), lhi = std::log(hi);
  const double step = (lhi - llo) / (scan - 1);
  int best = 0;
  double best_value = std::numeric_limits<double>::infinity();
  for (int i = 0; i < scan; ++i) {
    const double v = f(std::exp(llo + step * i));
    if (v < best_value) {
      best_value = v;
      best = i;
    }
  }
  const double a = llo + step * std::max(best - 1, 0), b = llo + step * std::min(best + 1, scan - 1);
  ScalarMinimum refined = golden_section_minimize([&](double t) { return f(std::exp(t)); }, a, b, log_tol);
  refined.evaluations += scan;
  if (!(refined.value <= best_value)) {
    refined.value = best_value;
    refined.x = llo + step * best;
  }
  refined.x = std::exp(refined.x);
  return refined;
}

}  // namespace cmrisk
