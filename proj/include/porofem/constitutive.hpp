#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "porofem/errors.hpp"
#include "porofem/types.hpp"

namespace porofem {

constexpr double kInfiniteModulus = std::numeric_limits<double>::infinity();

/// van Genuchten retention parameters. alpha is a suction scale in Pa;
/// m defaults to the standard constraint m = 1 - 1/n when tied.
struct VanGenuchtenParams {
  double alpha = 1.0e4;
  double n = 2.0;
  double m = 0.5;
  double s_res = 0.0;
  double s_max = 1.0;
};

/// All constitutive and mixture constants. Incompressible constituents are
/// expressed with the explicit infinity sentinel in k_s / k_w so the derived
/// limits (B -> 1, 1/M -> 0) are exact.
struct MaterialParams {
  double lambda = 0.0;  // Pa
  double mu = 0.0;      // Pa
  double k_s = kInfiniteModulus;  // Pa
  double k_w = kInfiniteModulus;  // Pa
  double k = 0.0;       // m^2
  double mu_w = 1.0e-3; // Pa s
  double rho_s = 2650.0;  // kg/m^3
  double rho_w = 1000.0;  // kg/m^3
  double phi0 = 0.4;      // porosity (= 1 - reference solid fraction)
  double gravity = 0.0;   // m/s^2, magnitude, acts along -y
  VanGenuchtenParams vg;

  double bulk_modulus() const { return lambda + 2.0 * mu / 3.0; }
  double solid_fraction0() const { return 1.0 - phi0; }
  bool incompressible_constituents() const {
    return std::isinf(k_s) && std::isinf(k_w);
  }
  Vec2 gravity_vector() const { return {0.0, -gravity}; }

  std::vector<std::string> validation_issues() const {
    std::vector<std::string> bad;
    if (!(mu > 0.0)) bad.push_back("material.mu must be > 0");
    if (!(bulk_modulus() > 0.0)) bad.push_back("material bulk modulus lambda + 2mu/3 must be > 0");
    if (!(k > 0.0)) bad.push_back("material.k must be > 0");
    if (!(mu_w > 0.0)) bad.push_back("material.mu_w must be > 0");
    if (!(k_s > 0.0)) bad.push_back("material.k_s must be > 0");
    if (!(k_w > 0.0)) bad.push_back("material.k_w must be > 0");
    if (!(phi0 > 0.0 && phi0 < 1.0)) bad.push_back("material.phi0 must be in (0,1)");
    if (!(rho_s > 0.0)) bad.push_back("material.rho_s must be > 0");
    if (!(rho_w > 0.0)) bad.push_back("material.rho_w must be > 0");
    if (gravity < 0.0) bad.push_back("material.gravity must be >= 0");
    if (!(vg.alpha > 0.0)) bad.push_back("vangenuchten.alpha must be > 0");
    if (!(vg.n > 1.0)) bad.push_back("vangenuchten.n must be > 1");
    if (!(vg.m > 0.0 && vg.m < 1.0)) bad.push_back("vangenuchten.m must be in (0,1)");
    if (!(vg.s_res >= 0.0 && vg.s_res < vg.s_max && vg.s_max <= 1.0))
      bad.push_back("vangenuchten saturations must satisfy 0 <= s_res < s_max <= 1");
    if (bulk_modulus() > k_s)
      bad.push_back("skeleton bulk modulus exceeds k_s (Biot coefficient would be negative)");
    return bad;
  }

  void validate() const {
    auto bad = validation_issues();
    if (!bad.empty()) throw InvalidConfigError("invalid material parameters", bad);
  }
};

/// Constitutive state at one quadrature point.
struct PointState {
  SymTensor2 strain;
  double p_w = 0.0;
  double s_w = 1.0;
  double k_r = 1.0;
  SymTensor2 sigma_eff;
  Vec2 darcy = {0.0, 0.0};
};

struct DerivedCoefficients {
  double biot_b = 1.0;       // B = 1 - K/K_s
  double biot_m = kInfiniteModulus;  // M
  double inv_biot_m = 0.0;   // 1/M, exact 0 in the incompressible limit
  double c_v = 0.0;          // K k / mu_w
};

/// Biot coefficient, Biot modulus and coefficient of consolidation derived
/// from the primary constants; infinite moduli resolve to exact limits.
inline DerivedCoefficients derived_coefficients(const MaterialParams& p) {
  DerivedCoefficients d;
  const double bulk = p.bulk_modulus();
  d.biot_b = 1.0 - bulk / p.k_s;
  d.inv_biot_m = (d.biot_b - p.phi0) / p.k_s + p.phi0 / p.k_w;
  d.biot_m = d.inv_biot_m == 0.0 ? kInfiniteModulus : 1.0 / d.inv_biot_m;
  d.c_v = bulk * p.k / p.mu_w;
  if (d.inv_biot_m < 0.0 || !(d.biot_m > 0.0))
    throw InvalidConfigError("derived Biot modulus M is non-positive");
  return d;
}

/// Linear-elastic effective stress, plane strain in 2D.
inline SymTensor2 effective_stress(const SymTensor2& strain,
                                   const MaterialParams& p) {
  const double lt = p.lambda * strain.trace();
  return {lt + 2.0 * p.mu * strain.xx, lt + 2.0 * p.mu * strain.yy,
          2.0 * p.mu * strain.xy};
}

/// Generalized Darcy velocity w = -(k_r k / mu_w) (grad p_w - rho_w g).
inline Vec2 darcy_velocity(const Vec2& grad_pw, double k_r,
                           const MaterialParams& p) {
  const double mobility = k_r * p.k / p.mu_w;
  const Vec2 g = p.gravity_vector();
  return {-mobility * (grad_pw[0] - p.rho_w * g[0]),
          -mobility * (grad_pw[1] - p.rho_w * g[1])};
}

/// van Genuchten saturation; the p_w >= 0 branch returns s_max and the
/// result is hard-clamped to [s_res, s_max].
inline double vg_saturation(double p_w, const MaterialParams& p) {
  const auto& vg = p.vg;
  if (p_w >= 0.0) return vg.s_max;
  const double s = -p_w / vg.alpha;
  const double a = 1.0 + std::pow(s, vg.n);
  double sw = vg.s_res + (vg.s_max - vg.s_res) * std::pow(a, -vg.m);
  return std::min(std::max(sw, vg.s_res), vg.s_max);
}

/// dS^w/dp_w; exactly 0 on the clamped p_w >= 0 branch.
inline double vg_dSw_dpw(double p_w, const MaterialParams& p) {
  const auto& vg = p.vg;
  if (p_w >= 0.0) return 0.0;
  const double s = -p_w / vg.alpha;
  const double sn = std::pow(s, vg.n);
  const double a = 1.0 + sn;
  // guard against the hard clamp binding at extreme suction
  const double sw = vg.s_res + (vg.s_max - vg.s_res) * std::pow(a, -vg.m);
  if (sw <= vg.s_res || sw >= vg.s_max) return 0.0;
  return (vg.s_max - vg.s_res) * vg.m * vg.n / vg.alpha *
         std::pow(s, vg.n - 1.0) * std::pow(a, -vg.m - 1.0);
}

/// van Genuchten-Mualem relative permeability on the effective saturation
/// S_e = (S^w - s_res)/(s_max - s_res), clamped to [0, 1].
inline double vg_relative_permeability(double s_w, const MaterialParams& p) {
  const auto& vg = p.vg;
  if (s_w < -1.0e-9 || s_w > 1.0 + 1.0e-9)
    throw DomainError("vg_relative_permeability: saturation " +
                      std::to_string(s_w) + " outside [0,1]");
  double se = (s_w - vg.s_res) / (vg.s_max - vg.s_res);
  se = std::min(std::max(se, 0.0), 1.0);
  if (se <= 0.0) return 0.0;
  if (se >= 1.0) return 1.0;
  const double f = 1.0 - std::pow(1.0 - std::pow(se, 1.0 / vg.m), vg.m);
  const double kr = std::sqrt(se) * f * f;
  return std::min(std::max(kr, 0.0), 1.0);
}

/// dk_r/dS^w; 0 on the clamped branches (S_e <= 0 or >= 1).
inline double vg_dkr_dSw(double s_w, const MaterialParams& p) {
  const auto& vg = p.vg;
  const double dse_dsw = 1.0 / (vg.s_max - vg.s_res);
  const double se = (s_w - vg.s_res) * dse_dsw;
  if (se <= 0.0 || se >= 1.0) return 0.0;
  const double se_pow = std::pow(se, 1.0 / vg.m);     // S_e^{1/m}
  const double q = 1.0 - se_pow;
  const double f = 1.0 - std::pow(q, vg.m);
  const double df_dse = std::pow(q, vg.m - 1.0) * se_pow / se;
  const double dkr_dse =
      0.5 / std::sqrt(se) * f * f + 2.0 * std::sqrt(se) * f * df_dse;
  return dkr_dse * dse_dsw;
}

/// Chain derivative dk_r/dp_w through the retention curve.
inline double vg_dkr_dpw(double p_w, const MaterialParams& p) {
  if (p_w >= 0.0) return 0.0;
  const double sw = vg_saturation(p_w, p);
  return vg_dkr_dSw(sw, p) * vg_dSw_dpw(p_w, p);
}

/// Total mixture density with the air density neglected.
inline double mixture_density(double phi_s, double s_w,
                              const MaterialParams& p) {
  return phi_s * p.rho_s + (1.0 - phi_s) * s_w * p.rho_w;
}

/// Geometrically linear solid volume fraction phi^s = phi^s_0 (1 - div u).
inline double solid_volume_fraction(double div_u, const MaterialParams& p) {
  return p.solid_fraction0() * (1.0 - div_u);
}

}  // namespace porofem
