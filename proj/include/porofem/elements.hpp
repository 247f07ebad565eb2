#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "porofem/errors.hpp"
#include "porofem/types.hpp"

namespace porofem {

// ---------------------------------------------------------------------------
// Gauss-Legendre quadrature on the reference line [-1,1] / square [-1,1]^2
// ---------------------------------------------------------------------------

struct QuadratureRule {
  int dim = 1;
  std::vector<Vec2> points;    // reference coordinates; [1] unused in 1D
  std::vector<double> weights;

  int size() const { return static_cast<int>(weights.size()); }
};

namespace detail {

inline void gauss_1d(int n, std::vector<double>& x, std::vector<double>& w) {
  switch (n) {
    case 1:
      x = {0.0};
      w = {2.0};
      break;
    case 2:
      x = {-0.5773502691896257, 0.5773502691896257};
      w = {1.0, 1.0};
      break;
    case 3:
      x = {-0.7745966692414834, 0.0, 0.7745966692414834};
      w = {5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0};
      break;
    case 4:
      x = {-0.8611363115940526, -0.3399810435848563, 0.3399810435848563,
           0.8611363115940526};
      w = {0.3478548451374538, 0.6521451548625461, 0.6521451548625461,
           0.3478548451374538};
      break;
    case 5:
      x = {-0.9061798459386640, -0.5384693101056831, 0.0, 0.5384693101056831,
           0.9061798459386640};
      w = {0.2369268850561891, 0.4786286704993665, 0.5688888888888889,
           0.4786286704993665, 0.2369268850561891};
      break;
    default:
      throw InvalidConfigError("gauss_rule: unsupported points per axis " +
                               std::to_string(n) + " (supported: 1..5)");
  }
}

}  // namespace detail

/// Tensor-product Gauss-Legendre rule, exact for polynomials of degree
/// <= 2*n_per_axis - 1 per axis.
inline QuadratureRule gauss_rule(int dim, int n_per_axis) {
  if (dim != 1 && dim != 2)
    throw InvalidConfigError("gauss_rule: dim must be 1 or 2, got " +
                             std::to_string(dim));
  std::vector<double> x, w;
  detail::gauss_1d(n_per_axis, x, w);

  QuadratureRule rule;
  rule.dim = dim;
  if (dim == 1) {
    for (int i = 0; i < n_per_axis; ++i) {
      rule.points.push_back({x[i], 0.0});
      rule.weights.push_back(w[i]);
    }
  } else {
    for (int j = 0; j < n_per_axis; ++j)
      for (int i = 0; i < n_per_axis; ++i) {
        rule.points.push_back({x[i], x[j]});
        rule.weights.push_back(w[i] * w[j]);
      }
  }
  return rule;
}

// ---------------------------------------------------------------------------
// Lagrange shape functions
// ---------------------------------------------------------------------------

enum class ElementKind { line2, quad4, quad9 };

inline int node_count(ElementKind k) {
  switch (k) {
    case ElementKind::line2: return 2;
    case ElementKind::quad4: return 4;
    case ElementKind::quad9: return 9;
  }
  return 0;
}

inline int element_dim(ElementKind k) {
  return k == ElementKind::line2 ? 1 : 2;
}

/// Reference-element Lagrange basis for the supported element kinds.
///
/// Node ordering:
///   line2:   0 (xi=-1), 1 (xi=+1)
///   quad4:   counterclockwise corners (-1,-1),(1,-1),(1,1),(-1,1)
///   quad9:   corners 0..3 as quad4, edge midpoints 4..7
///            (bottom,right,top,left), center 8
class ElementBasis {
 public:
  explicit ElementBasis(ElementKind kind) : kind_(kind) {}

  ElementKind kind() const { return kind_; }
  int n_nodes() const { return node_count(kind_); }
  int dim() const { return element_dim(kind_); }

  /// Shape values N_i(xi); out must hold n_nodes() entries.
  void eval(const Vec2& xi, std::span<double> out) const {
    switch (kind_) {
      case ElementKind::line2: {
        out[0] = 0.5 * (1.0 - xi[0]);
        out[1] = 0.5 * (1.0 + xi[0]);
        return;
      }
      case ElementKind::quad4: {
        const double x = xi[0], y = xi[1];
        out[0] = 0.25 * (1.0 - x) * (1.0 - y);
        out[1] = 0.25 * (1.0 + x) * (1.0 - y);
        out[2] = 0.25 * (1.0 + x) * (1.0 + y);
        out[3] = 0.25 * (1.0 - x) * (1.0 + y);
        return;
      }
      case ElementKind::quad9: {
        double lx[3], ly[3];
        lagrange_quadratic(xi[0], lx);
        lagrange_quadratic(xi[1], ly);
        out[0] = lx[0] * ly[0];
        out[1] = lx[2] * ly[0];
        out[2] = lx[2] * ly[2];
        out[3] = lx[0] * ly[2];
        out[4] = lx[1] * ly[0];
        out[5] = lx[2] * ly[1];
        out[6] = lx[1] * ly[2];
        out[7] = lx[0] * ly[1];
        out[8] = lx[1] * ly[1];
        return;
      }
    }
  }

  /// Reference gradients dN_i/dxi; out must hold n_nodes() entries.
  void eval_grad(const Vec2& xi, std::span<Vec2> out) const {
    switch (kind_) {
      case ElementKind::line2: {
        out[0] = {-0.5, 0.0};
        out[1] = {0.5, 0.0};
        return;
      }
      case ElementKind::quad4: {
        const double x = xi[0], y = xi[1];
        out[0] = {-0.25 * (1.0 - y), -0.25 * (1.0 - x)};
        out[1] = {0.25 * (1.0 - y), -0.25 * (1.0 + x)};
        out[2] = {0.25 * (1.0 + y), 0.25 * (1.0 + x)};
        out[3] = {-0.25 * (1.0 + y), 0.25 * (1.0 - x)};
        return;
      }
      case ElementKind::quad9: {
        double lx[3], ly[3], dx[3], dy[3];
        lagrange_quadratic(xi[0], lx);
        lagrange_quadratic(xi[1], ly);
        lagrange_quadratic_deriv(xi[0], dx);
        lagrange_quadratic_deriv(xi[1], dy);
        const int ix[9] = {0, 2, 2, 0, 1, 2, 1, 0, 1};
        const int iy[9] = {0, 0, 2, 2, 0, 1, 2, 1, 1};
        for (int i = 0; i < 9; ++i)
          out[i] = {dx[ix[i]] * ly[iy[i]], lx[ix[i]] * dy[iy[i]]};
        return;
      }
    }
  }

 private:
  // 1D quadratic Lagrange on nodes {-1, 0, +1}
  static void lagrange_quadratic(double x, double l[3]) {
    l[0] = 0.5 * x * (x - 1.0);
    l[1] = 1.0 - x * x;
    l[2] = 0.5 * x * (x + 1.0);
  }
  static void lagrange_quadratic_deriv(double x, double d[3]) {
    d[0] = x - 0.5;
    d[1] = -2.0 * x;
    d[2] = x + 0.5;
  }

  ElementKind kind_;
};

// ---------------------------------------------------------------------------
// Isoparametric mapping
// ---------------------------------------------------------------------------

/// Geometry data at one quadrature point: Jacobian, its determinant, and the
/// physical shape-function gradients grad N_i = J^{-T} gradref N_i.
struct IsoparametricFrame {
  double j[2][2] = {{0, 0}, {0, 0}};  // 1D uses j[0][0] only
  double det_j = 0.0;
  std::array<Vec2, 9> grad{};  // physical gradients, first n entries valid
  int n = 0;
};

inline IsoparametricFrame jacobian(std::span<const Vec2> coords,
                                   const ElementBasis& basis, const Vec2& xi,
                                   int element_index = -1) {
  IsoparametricFrame f;
  f.n = basis.n_nodes();
  std::array<Vec2, 9> dref;
  basis.eval_grad(xi, std::span<Vec2>(dref.data(), f.n));

  if (basis.dim() == 1) {
    double jz = 0.0;
    for (int i = 0; i < f.n; ++i) jz += coords[i][0] * dref[i][0];
    f.j[0][0] = jz;
    f.det_j = jz;
    if (!(f.det_j > 0.0))
      throw DegenerateElementError(
          "degenerate element " + std::to_string(element_index) +
              ": det J = " + std::to_string(f.det_j),
          element_index);
    for (int i = 0; i < f.n; ++i) f.grad[i] = {dref[i][0] / jz, 0.0};
    return f;
  }

  // J_ab = sum_i x_i[a] * dN_i/dxi[b]
  for (int i = 0; i < f.n; ++i) {
    f.j[0][0] += coords[i][0] * dref[i][0];
    f.j[0][1] += coords[i][0] * dref[i][1];
    f.j[1][0] += coords[i][1] * dref[i][0];
    f.j[1][1] += coords[i][1] * dref[i][1];
  }
  f.det_j = f.j[0][0] * f.j[1][1] - f.j[0][1] * f.j[1][0];
  if (!(f.det_j > 0.0))
    throw DegenerateElementError(
        "degenerate element " + std::to_string(element_index) +
            ": det J = " + std::to_string(f.det_j),
        element_index);

  // J^{-T} rows
  const double inv = 1.0 / f.det_j;
  const double it00 = f.j[1][1] * inv, it01 = -f.j[1][0] * inv;
  const double it10 = -f.j[0][1] * inv, it11 = f.j[0][0] * inv;
  for (int i = 0; i < f.n; ++i)
    f.grad[i] = {it00 * dref[i][0] + it01 * dref[i][1],
                 it10 * dref[i][0] + it11 * dref[i][1]};
  return f;
}

}  // namespace porofem
