#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

#include "porofem/elements.hpp"
#include "porofem/errors.hpp"

namespace porofem {

/// Terzaghi consolidation series for a column drained at z = 0 and
/// impervious at z = h_drain, with uniform initial pressure p0:
///   p(z,t) = sum_m (2 p0 / M_m) sin(M_m z / H) exp(-M_m^2 c_v t / H^2),
///   M_m = pi (2m+1) / 2.
inline double terzaghi_series(double z, double t, double c_v, double h_drain,
                              double p0, int n_terms = 200) {
  const double tv = c_v * t / (h_drain * h_drain);
  double p = 0.0;
  for (int m = n_terms - 1; m >= 0; --m) {  // small terms first
    const double big_m = std::numbers::pi * (2 * m + 1) / 2.0;
    p += (2.0 * p0 / big_m) * std::sin(big_m * z / h_drain) *
         std::exp(-big_m * big_m * tv);
  }
  return p;
}

/// Degree of consolidation U(T_v) = 1 - sum_m (2/M_m^2) exp(-M_m^2 T_v).
inline double terzaghi_degree_of_consolidation(double time_factor,
                                               int n_terms = 200) {
  double s = 0.0;
  for (int m = n_terms - 1; m >= 0; --m) {
    const double big_m = std::numbers::pi * (2 * m + 1) / 2.0;
    s += 2.0 / (big_m * big_m) * std::exp(-big_m * big_m * time_factor);
  }
  return 1.0 - s;
}

/// L2 / Linf errors of a sampled profile against a reference function.
struct ErrorReport {
  double l2_rel = 0.0;
  double linf_rel = 0.0;
  double l2_abs = 0.0;    // integral norm of the difference
  double ref_norm = 0.0;  // integral norm of the reference
  std::vector<double> sample_times;
  std::vector<double> per_time_l2;
  std::vector<double> per_time_linf;
};

/// Relative L2 error of a piecewise-linear profile (sorted coordinates)
/// against a reference function, by Gauss quadrature per interval.
/// Falls back to the absolute norm when the reference is identically zero.
inline ErrorReport l2_error(std::span<const double> coords,
                            std::span<const double> values,
                            const std::function<double(double)>& ref,
                            int quad_points_per_interval = 2) {
  if (coords.size() < 2 || coords.size() != values.size())
    throw InvalidConfigError("l2_error: profile needs >= 2 matching samples");
  const QuadratureRule rule = gauss_rule(1, quad_points_per_interval);

  double num = 0.0, den = 0.0;
  double max_diff = 0.0, max_ref = 0.0;
  for (std::size_t e = 0; e + 1 < coords.size(); ++e) {
    const double a = coords[e], b = coords[e + 1];
    const double h = b - a;
    for (int q = 0; q < rule.size(); ++q) {
      const double x = 0.5 * (a + b) + 0.5 * h * rule.points[q][0];
      const double wq = 0.5 * h * rule.weights[q];
      const double ph =
          values[e] + (values[e + 1] - values[e]) * (x - a) / h;
      const double pr = ref(x);
      num += wq * (ph - pr) * (ph - pr);
      den += wq * pr * pr;
      max_diff = std::max(max_diff, std::abs(ph - pr));
      max_ref = std::max(max_ref, std::abs(pr));
    }
  }

  ErrorReport r;
  r.l2_abs = std::sqrt(num);
  r.ref_norm = std::sqrt(den);
  r.l2_rel = r.ref_norm > 0.0 ? r.l2_abs / r.ref_norm : r.l2_abs;
  r.linf_rel = max_ref > 0.0 ? max_diff / max_ref : max_diff;
  r.per_time_l2 = {r.l2_rel};
  r.per_time_linf = {r.linf_rel};
  return r;
}

struct ConvergenceReport {
  double order = 0.0;
  bool monotone = true;  // false flags a non-monotone error sequence
};

/// Least-squares slope of log(error) versus log(h).
inline ConvergenceReport convergence_order(std::span<const double> h,
                                           std::span<const double> errors) {
  if (h.size() != errors.size() || h.size() < 2)
    throw InvalidConfigError("convergence_order: need >= 2 (h, error) pairs");
  ConvergenceReport rep;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const int n = static_cast<int>(h.size());
  for (int i = 0; i < n; ++i) {
    if (!(errors[i] > 0.0))
      throw InvalidConfigError("convergence_order: errors must be > 0");
    const double x = std::log(h[i]);
    const double y = std::log(errors[i]);
    sx += x; sy += y; sxx += x * x; sxy += x * y;
  }
  rep.order = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  for (int i = 0; i + 1 < n; ++i) {
    const bool h_desc = h[i] > h[i + 1];
    const bool e_desc = errors[i] > errors[i + 1];
    if (h_desc != e_desc) rep.monotone = false;
  }
  return rep;
}

}  // namespace porofem
