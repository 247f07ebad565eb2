#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "porofem/constitutive.hpp"
#include "porofem/elements.hpp"
#include "porofem/errors.hpp"
#include "porofem/mesh.hpp"

namespace porofem {

using SparseRM = Eigen::SparseMatrix<double, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Boundary conditions
// ---------------------------------------------------------------------------

enum class BcKind { dirichlet, neumann };
enum class BcField { pressure, disp_x, disp_y, traction_x, traction_y, flux };

inline const char* to_string(BcField f) {
  switch (f) {
    case BcField::pressure: return "p";
    case BcField::disp_x: return "ux";
    case BcField::disp_y: return "uy";
    case BcField::traction_x: return "traction_x";
    case BcField::traction_y: return "traction_y";
    case BcField::flux: return "w";
  }
  return "?";
}

/// One boundary condition: a value (function of time) attached to a named
/// boundary tag. Neumann entries may restrict the loaded edges to a
/// coordinate interval along the boundary (footing strips); an edge is
/// loaded only if it lies entirely inside the interval.
struct BcEntry {
  std::string tag;
  BcField field = BcField::pressure;
  std::function<double(double)> value;
  bool has_range = false;
  double range_lo = 0.0, range_hi = 0.0;

  static BcEntry constant(std::string tag, BcField field, double v) {
    BcEntry e;
    e.tag = std::move(tag);
    e.field = field;
    e.value = [v](double) { return v; };
    return e;
  }
};

struct BoundaryConditionSet {
  std::vector<BcEntry> dirichlet;
  std::vector<BcEntry> neumann;

  void validate(const Mesh& mesh) const {
    std::vector<std::string> bad;
    auto check_tag = [&](const BcEntry& e) {
      if (!mesh.boundary_nodes.count(e.tag))
        bad.push_back("unknown boundary tag '" + e.tag + "'");
    };
    for (const auto& e : dirichlet) {
      check_tag(e);
      if (e.field != BcField::pressure && e.field != BcField::disp_x &&
          e.field != BcField::disp_y)
        bad.push_back(std::string("dirichlet bc cannot prescribe ") +
                      to_string(e.field));
    }
    for (const auto& e : neumann) {
      check_tag(e);
      if (e.field == BcField::pressure || e.field == BcField::disp_x ||
          e.field == BcField::disp_y)
        bad.push_back(std::string("neumann bc cannot prescribe ") +
                      to_string(e.field));
    }
    if (!bad.empty())
      throw InvalidConfigError("invalid boundary conditions", bad);
  }
};

/// Prescribed value at one global dof.
struct DirichletBc {
  int dof = -1;
  std::function<double(double)> value;
};

/// Expand tag-level Dirichlet entries to per-dof constraints, rejecting
/// conflicting prescriptions of the same dof. Deterministic (sorted by dof).
inline std::vector<DirichletBc> build_dirichlet_set(
    const Mesh& mesh, const DofMap& dofmap, const BoundaryConditionSet& bcs) {
  bcs.validate(mesh);
  std::vector<DirichletBc> out;
  std::vector<int> seen_dof;
  std::vector<double> seen_v0;
  for (const auto& e : bcs.dirichlet) {
    const auto& nodes = mesh.boundary_nodes.at(e.tag);
    for (int node : nodes) {
      int dof = -1;
      if (e.field == BcField::pressure) {
        if (dofmap.pressure_index[node] < 0) continue;  // midside Q2 node
        dof = dofmap.dof_pressure_of_node(node);
      } else {
        dof = dofmap.dof_disp(node, e.field == BcField::disp_x ? 0 : 1);
      }
      const double v0 = e.value(0.0);
      auto it = std::find(seen_dof.begin(), seen_dof.end(), dof);
      if (it != seen_dof.end()) {
        const double prev = seen_v0[it - seen_dof.begin()];
        if (prev != v0)
          throw InvalidConfigError(
              "conflicting dirichlet values at dof " + std::to_string(dof) +
              ": " + std::to_string(prev) + " vs " + std::to_string(v0));
        continue;  // same value from a second tag (corner node)
      }
      seen_dof.push_back(dof);
      seen_v0.push_back(v0);
      out.push_back({dof, e.value});
    }
  }
  std::sort(out.begin(), out.end(),
            [](const DirichletBc& a, const DirichletBc& b) { return a.dof < b.dof; });
  return out;
}

// ---------------------------------------------------------------------------
// Dirichlet elimination
// ---------------------------------------------------------------------------

/// Symmetric elimination of prescribed dofs: constrained rows become the
/// identity, constrained columns are snapshotted so their contribution can
/// be moved to the right-hand side each step.
class DirichletProjector {
 public:
  DirichletProjector(const SparseRM& a, std::vector<int> dofs)
      : dofs_(std::move(dofs)), is_constrained_(a.rows(), 0) {
    std::sort(dofs_.begin(), dofs_.end());
    std::vector<int> slot(a.rows(), -1);
    for (std::size_t s = 0; s < dofs_.size(); ++s) {
      is_constrained_[dofs_[s]] = 1;
      slot[dofs_[s]] = static_cast<int>(s);
    }
    columns_.resize(dofs_.size());
    for (int r = 0; r < a.outerSize(); ++r) {
      if (is_constrained_[r]) continue;
      for (SparseRM::InnerIterator it(a, r); it; ++it)
        if (is_constrained_[it.col()])
          columns_[slot[it.col()]].push_back({r, it.value()});
    }
  }

  const std::vector<int>& dofs() const { return dofs_; }

  /// Zero constrained rows and columns in place, unit diagonal. Keeps the
  /// sparsity pattern (values are zeroed, not pruned).
  void apply_to_matrix(SparseRM& a) const {
    for (int r = 0; r < a.outerSize(); ++r) {
      const bool row_c = is_constrained_[r] != 0;
      for (SparseRM::InnerIterator it(a, r); it; ++it) {
        if (row_c)
          it.valueRef() = it.col() == r ? 1.0 : 0.0;
        else if (is_constrained_[it.col()])
          it.valueRef() = 0.0;
      }
    }
  }

  /// b_free -= A_col * value; b_constrained = value.
  void apply_to_rhs(Eigen::VectorXd& b, std::span<const double> values) const {
    for (std::size_t s = 0; s < dofs_.size(); ++s) {
      for (const auto& [row, val] : columns_[s]) b[row] -= val * values[s];
      b[dofs_[s]] = values[s];
    }
  }

  std::vector<double> evaluate(std::span<const DirichletBc> set, double t) const {
    std::vector<double> v(dofs_.size());
    for (const auto& bc : set) {
      auto it = std::lower_bound(dofs_.begin(), dofs_.end(), bc.dof);
      v[it - dofs_.begin()] = bc.value(t);
    }
    return v;
  }

 private:
  std::vector<int> dofs_;
  std::vector<char> is_constrained_;
  std::vector<std::vector<std::pair<int, double>>> columns_;
};

struct SystemMatrices {
  SparseRM a;
  Eigen::VectorXd b;
};

/// Spec surface: eliminate the given (dof, value) prescriptions from an
/// assembled system at time t.
inline void apply_dirichlet(SystemMatrices& sys,
                            std::span<const DirichletBc> set, double t) {
  std::vector<int> dofs;
  dofs.reserve(set.size());
  for (const auto& bc : set) dofs.push_back(bc.dof);
  for (int d : dofs)
    if (d < 0 || d >= sys.a.rows())
      throw InternalError("apply_dirichlet: dof " + std::to_string(d) +
                          " out of range");
  DirichletProjector proj(sys.a, dofs);
  proj.apply_to_matrix(sys.a);
  sys.b.conservativeResize(sys.a.rows());
  proj.apply_to_rhs(sys.b, proj.evaluate(set, t));
}

// ---------------------------------------------------------------------------
// Deterministic (worker-count independent) element loops
// ---------------------------------------------------------------------------

/// Per-worker scratch: triplets for the operator and for the time-history
/// operator, plus right-hand-side contributions in coordinate form. Buffers
/// are merged in element-index order so the folded result is bitwise
/// independent of the worker count.
struct AssemblyBuffers {
  std::vector<Eigen::Triplet<double>> a;
  std::vector<Eigen::Triplet<double>> h;
  std::vector<std::pair<int, double>> rhs;
};

namespace detail {

template <class Fn>
void run_element_loop(int n_elements, int n_workers,
                      std::vector<AssemblyBuffers>& buffers, Fn&& fn) {
  n_workers = std::max(1, std::min(n_workers, n_elements));
  buffers.assign(n_workers, {});
  if (n_workers == 1) {
    for (int e = 0; e < n_elements; ++e) fn(e, buffers[0]);
    return;
  }
  std::vector<std::exception_ptr> errors(n_workers);
  std::vector<std::thread> pool;
  const int chunk = (n_elements + n_workers - 1) / n_workers;
  for (int w = 0; w < n_workers; ++w) {
    const int begin = w * chunk;
    const int end = std::min(n_elements, begin + chunk);
    pool.emplace_back([&, w, begin, end] {
      try {
        for (int e = begin; e < end; ++e) fn(e, buffers[w]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);
}

inline SparseRM matrix_from_triplets(
    int n, const std::vector<AssemblyBuffers>& buffers, bool history) {
  std::vector<Eigen::Triplet<double>> all;
  std::size_t total = 0;
  for (const auto& b : buffers) total += history ? b.h.size() : b.a.size();
  all.reserve(total);
  for (const auto& b : buffers) {
    const auto& src = history ? b.h : b.a;
    all.insert(all.end(), src.begin(), src.end());
  }
  SparseRM m(n, n);
  m.setFromTriplets(all.begin(), all.end());
  return m;
}

inline Eigen::VectorXd rhs_from_buffers(
    int n, const std::vector<AssemblyBuffers>& buffers) {
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
  for (const auto& buf : buffers)
    for (const auto& [i, v] : buf.rhs) b[i] += v;
  return b;
}

// 1D quadratic Lagrange along a boundary edge, nodes at s = {-1, 0, +1}
inline void edge_quadratic(double s, double l[3], double d[3]) {
  l[0] = 0.5 * s * (s - 1.0);
  l[1] = 1.0 - s * s;
  l[2] = 0.5 * s * (s + 1.0);
  d[0] = s - 0.5;
  d[1] = -2.0 * s;
  d[2] = s + 0.5;
}

inline int range_axis(const std::string& tag) {
  return (tag == "left" || tag == "right") ? 1 : 0;
}

inline bool edge_in_range(const Mesh& mesh, const BoundaryEdge& edge,
                          const BcEntry& bc) {
  if (!bc.has_range) return true;
  const int axis = range_axis(bc.tag);
  const double tol = 1e-12 * std::max(1.0, std::abs(bc.range_hi));
  const double c0 = mesh.node_coords[edge.nodes[0]][axis];
  const double c1 = mesh.node_coords[edge.nodes[edge.n_nodes - 1]][axis];
  const double lo = std::min(c0, c1), hi = std::max(c0, c1);
  return lo >= bc.range_lo - tol && hi <= bc.range_hi + tol;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Neumann (traction / prescribed-influx) contributions
// ---------------------------------------------------------------------------

/// Assemble the natural-boundary right-hand side at time t. The prescribed
/// flux follows the sign convention w_hat = -w . n (influx positive); in the
/// 1D problem the weak-form flux term carries the skeleton bulk modulus, so
/// scale_flux_by_bulk is set there.
inline Eigen::VectorXd assemble_neumann_rhs(const Mesh& mesh,
                                            const DofMap& dofmap,
                                            const MaterialParams& params,
                                            const BoundaryConditionSet& bcs,
                                            double t,
                                            bool scale_flux_by_bulk) {
  Eigen::VectorXd f = Eigen::VectorXd::Zero(dofmap.n_dofs);
  if (mesh.dim == 1) {
    for (const auto& bc : bcs.neumann) {
      if (bc.field != BcField::flux)
        throw InvalidConfigError("1D problems only take flux neumann bcs");
      const double scale = scale_flux_by_bulk ? params.bulk_modulus() : 1.0;
      for (int node : mesh.boundary_nodes.at(bc.tag))
        f[dofmap.dof_pressure_of_node(node)] += scale * bc.value(t);
    }
    return f;
  }

  const QuadratureRule rule = gauss_rule(1, 3);
  for (const auto& bc : bcs.neumann) {
    const auto& edges = mesh.boundary_edges.at(bc.tag);
    const double v = bc.value(t);
    for (const auto& edge : edges) {
      if (!detail::edge_in_range(mesh, edge, bc)) continue;
      const Vec2 x0 = mesh.node_coords[edge.nodes[0]];
      const Vec2 x1 = mesh.node_coords[edge.nodes[edge.n_nodes - 1]];
      const Vec2 xm = edge.n_nodes == 3 ? mesh.node_coords[edge.nodes[1]]
                                        : Vec2{0.0, 0.0};
      for (int q = 0; q < rule.size(); ++q) {
        const double s = rule.points[q][0];
        double l[3], d[3];
        detail::edge_quadratic(s, l, d);
        double tx, ty;
        if (edge.n_nodes == 3) {
          tx = d[0] * x0[0] + d[1] * xm[0] + d[2] * x1[0];
          ty = d[0] * x0[1] + d[1] * xm[1] + d[2] * x1[1];
        } else {
          tx = 0.5 * (x1[0] - x0[0]);
          ty = 0.5 * (x1[1] - x0[1]);
        }
        const double ds = std::hypot(tx, ty) * rule.weights[q];

        if (bc.field == BcField::flux) {
          // pressure trace is linear along the edge (Q1 vertices)
          const double lin[2] = {0.5 * (1.0 - s), 0.5 * (1.0 + s)};
          f[dofmap.dof_pressure_of_node(edge.nodes[0])] += lin[0] * v * ds;
          f[dofmap.dof_pressure_of_node(edge.nodes[edge.n_nodes - 1])] +=
              lin[1] * v * ds;
        } else {
          const int comp = bc.field == BcField::traction_x ? 0 : 1;
          if (edge.n_nodes == 3) {
            for (int k = 0; k < 3; ++k)
              f[dofmap.dof_disp(edge.nodes[k], comp)] += l[k] * v * ds;
          } else {
            f[dofmap.dof_disp(edge.nodes[0], comp)] += 0.5 * (1.0 - s) * v * ds;
            f[dofmap.dof_disp(edge.nodes[1], comp)] += 0.5 * (1.0 + s) * v * ds;
          }
        }
      }
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// MP1: 1D pressure diffusion, linear elements, consistent mass
// ---------------------------------------------------------------------------

/// Backward-Euler operator split A x^{n+1} = history x^n + f_ext with
/// A = M/dt + c_v K, history = M/dt.
struct LinearTransientSystem {
  SparseRM a;
  SparseRM history;
  Eigen::VectorXd f_ext;

  Eigen::VectorXd rhs(const Eigen::VectorXd& x_prev) const {
    return history * x_prev + f_ext;
  }
};

inline LinearTransientSystem assemble_mp1_system(const Mesh& mesh,
                                                 const DofMap& dofmap,
                                                 const MaterialParams& params,
                                                 const BoundaryConditionSet& bcs,
                                                 double dt, double t_new = 0.0,
                                                 int n_workers = 1) {
  if (mesh.dim != 1)
    throw InvalidConfigError("assemble_mp1: requires a 1D mesh");
  if (!(dt > 0.0)) throw InvalidConfigError("assemble_mp1: dt must be > 0");
  const double c_v = derived_coefficients(params).c_v;
  if (!(c_v > 0.0)) throw InvalidConfigError("assemble_mp1: c_v must be > 0");

  const ElementBasis basis(ElementKind::line2);
  const QuadratureRule rule = gauss_rule(1, 2);

  std::vector<AssemblyBuffers> buffers;
  detail::run_element_loop(
      mesh.n_elements(), n_workers, buffers,
      [&](int e, AssemblyBuffers& buf) {
        std::array<Vec2, 2> coords;
        mesh.element_coords(e, coords);
        const auto nodes = mesh.element_nodes(e);
        double m_e[2][2] = {{0, 0}, {0, 0}};
        double k_e[2][2] = {{0, 0}, {0, 0}};
        std::array<double, 2> shp;
        for (int q = 0; q < rule.size(); ++q) {
          const auto frame = jacobian(coords, basis, rule.points[q], e);
          basis.eval(rule.points[q], shp);
          const double w = rule.weights[q] * frame.det_j;
          for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) {
              m_e[i][j] += shp[i] * shp[j] * w;
              k_e[i][j] += frame.grad[i][0] * frame.grad[j][0] * w;
            }
        }
        for (int i = 0; i < 2; ++i)
          for (int j = 0; j < 2; ++j) {
            buf.a.emplace_back(nodes[i], nodes[j],
                               m_e[i][j] / dt + c_v * k_e[i][j]);
            buf.h.emplace_back(nodes[i], nodes[j], m_e[i][j] / dt);
          }
      });

  LinearTransientSystem sys;
  sys.a = detail::matrix_from_triplets(dofmap.n_dofs, buffers, false);
  sys.history = detail::matrix_from_triplets(dofmap.n_dofs, buffers, true);
  sys.f_ext = assemble_neumann_rhs(mesh, dofmap, params, bcs, t_new, true);
  return sys;
}

inline SystemMatrices assemble_mp1(const Mesh& mesh, const DofMap& dofmap,
                                   const MaterialParams& params,
                                   const Eigen::VectorXd& p_prev, double dt,
                                   const BoundaryConditionSet& bcs = {},
                                   double t_new = 0.0, int n_workers = 1) {
  auto sys = assemble_mp1_system(mesh, dofmap, params, bcs, dt, t_new, n_workers);
  return {std::move(sys.a), sys.rhs(p_prev)};
}

// ---------------------------------------------------------------------------
// Taylor-Hood element scratch shared by MP2 / MP3
// ---------------------------------------------------------------------------

namespace detail {

struct ThQuadPoint {
  double w = 0.0;           // quadrature weight * |J|
  Vec2 x = {0.0, 0.0};      // physical position
  std::array<double, 9> n9{};
  std::array<Vec2, 9> g9{};  // physical Q2 gradients
  std::array<double, 4> n4{};
  std::array<Vec2, 4> g4{};  // physical Q1 gradients
};

/// Geometry and basis data for all quadrature points of one Q9 element.
inline void th_element_frames(const Mesh& mesh, int e,
                              const QuadratureRule& rule,
                              const ElementBasis& q9, const ElementBasis& q1,
                              std::span<ThQuadPoint> out) {
  std::array<Vec2, 9> coords;
  mesh.element_coords(e, coords);
  const std::array<Vec2, 4> corners = {coords[0], coords[1], coords[2],
                                       coords[3]};
  for (int q = 0; q < rule.size(); ++q) {
    ThQuadPoint& qp = out[q];
    const auto f9 = jacobian(coords, q9, rule.points[q], e);
    const auto f1 = jacobian(corners, q1, rule.points[q], e);
    qp.w = rule.weights[q] * f9.det_j;
    q9.eval(rule.points[q], qp.n9);
    q1.eval(rule.points[q], qp.n4);
    for (int i = 0; i < 9; ++i) qp.g9[i] = f9.grad[i];
    for (int i = 0; i < 4; ++i) qp.g4[i] = f1.grad[i];
    qp.x = {0.0, 0.0};
    for (int i = 0; i < 9; ++i) {
      qp.x[0] += qp.n9[i] * coords[i][0];
      qp.x[1] += qp.n9[i] * coords[i][1];
    }
  }
}

/// Local dof order: u (node-major, x then y interleaved: 2i, 2i+1), then 4 p.
inline void th_global_dofs(const Mesh& mesh, const DofMap& dofmap, int e,
                           std::array<int, 22>& gdof) {
  const auto nodes = mesh.element_nodes(e);
  for (int i = 0; i < 9; ++i) {
    gdof[2 * i] = dofmap.dof_disp(nodes[i], 0);
    gdof[2 * i + 1] = dofmap.dof_disp(nodes[i], 1);
  }
  for (int c = 0; c < 4; ++c)
    gdof[18 + c] = dofmap.dof_pressure_of_node(nodes[c]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MP2: saturated u-p_w, monolithic backward Euler (linear)
// ---------------------------------------------------------------------------

/// Block system for x = [u; p]:
///   [ K    -B_c Q        ] x^{n+1} = [ f_u ] + history x^n
///   [ B_c Q^T/dt  S/dt+H ]           [ f_p ]
/// where history carries the (S p^n + B_c Q^T u^n)/dt mass terms.
inline LinearTransientSystem assemble_mp2_system(const Mesh& mesh,
                                                 const DofMap& dofmap,
                                                 const MaterialParams& params,
                                                 const BoundaryConditionSet& bcs,
                                                 double dt, double t_new = 0.0,
                                                 int n_workers = 1) {
  if (mesh.element_kind != ElementKind::quad9 ||
      dofmap.n_disp_nodes != mesh.n_nodes())
    throw InvalidConfigError("assemble_mp2: Taylor-Hood dofmap/mesh required");
  if (!(dt > 0.0)) throw InvalidConfigError("assemble_mp2: dt must be > 0");
  const auto derived = derived_coefficients(params);
  const double biot_b = derived.biot_b;
  const double inv_m = derived.inv_biot_m;
  const double mobility = params.k / params.mu_w;
  const double rho0 = mixture_density(params.solid_fraction0(), 1.0, params);
  const Vec2 g = params.gravity_vector();

  const ElementBasis q9(ElementKind::quad9), q1(ElementKind::quad4);
  const QuadratureRule rule = gauss_rule(2, 3);

  std::vector<AssemblyBuffers> buffers;
  detail::run_element_loop(
      mesh.n_elements(), n_workers, buffers,
      [&](int e, AssemblyBuffers& buf) {
        std::array<detail::ThQuadPoint, 9> qps;
        detail::th_element_frames(mesh, e, rule, q9, q1, qps);
        std::array<int, 22> gdof;
        detail::th_global_dofs(mesh, dofmap, e, gdof);

        double a_e[22][22] = {};
        double h_e[22][22] = {};
        double f_e[22] = {};
        for (const auto& qp : qps) {
          for (int i = 0; i < 9; ++i) {
            for (int j = 0; j < 9; ++j) {
              const double gdot = qp.g9[i][0] * qp.g9[j][0] +
                                  qp.g9[i][1] * qp.g9[j][1];
              for (int a = 0; a < 2; ++a)
                for (int b = 0; b < 2; ++b)
                  a_e[2 * i + a][2 * j + b] +=
                      qp.w * (params.lambda * qp.g9[i][a] * qp.g9[j][b] +
                              params.mu * (qp.g9[i][b] * qp.g9[j][a] +
                                           (a == b ? gdot : 0.0)));
            }
            for (int c = 0; c < 4; ++c) {
              const double cpl = biot_b * qp.n4[c] * qp.w;
              for (int a = 0; a < 2; ++a) {
                a_e[2 * i + a][18 + c] -= cpl * qp.g9[i][a];
                a_e[18 + c][2 * i + a] += cpl * qp.g9[i][a] / dt;
                h_e[18 + c][2 * i + a] += cpl * qp.g9[i][a] / dt;
              }
            }
            for (int a = 0; a < 2; ++a)
              f_e[2 * i + a] += qp.w * qp.n9[i] * rho0 * g[a];
          }
          for (int c = 0; c < 4; ++c) {
            for (int d = 0; d < 4; ++d) {
              const double mass = inv_m * qp.n4[c] * qp.n4[d] * qp.w / dt;
              a_e[18 + c][18 + d] +=
                  mass + mobility * qp.w *
                             (qp.g4[c][0] * qp.g4[d][0] +
                              qp.g4[c][1] * qp.g4[d][1]);
              h_e[18 + c][18 + d] += mass;
            }
            f_e[18 + c] += mobility * params.rho_w * qp.w *
                           (qp.g4[c][0] * g[0] + qp.g4[c][1] * g[1]);
          }
        }
        for (int i = 0; i < 22; ++i) {
          for (int j = 0; j < 22; ++j) {
            if (a_e[i][j] != 0.0)
              buf.a.emplace_back(gdof[i], gdof[j], a_e[i][j]);
            if (h_e[i][j] != 0.0)
              buf.h.emplace_back(gdof[i], gdof[j], h_e[i][j]);
          }
          if (f_e[i] != 0.0) buf.rhs.emplace_back(gdof[i], f_e[i]);
        }
      });

  LinearTransientSystem sys;
  sys.a = detail::matrix_from_triplets(dofmap.n_dofs, buffers, false);
  sys.history = detail::matrix_from_triplets(dofmap.n_dofs, buffers, true);
  sys.f_ext = detail::rhs_from_buffers(dofmap.n_dofs, buffers) +
              assemble_neumann_rhs(mesh, dofmap, params, bcs, t_new, false);
  return sys;
}

inline SystemMatrices assemble_mp2(const Mesh& mesh, const DofMap& dofmap,
                                   const MaterialParams& params,
                                   const Eigen::VectorXd& x_prev, double dt,
                                   const BoundaryConditionSet& bcs = {},
                                   double t_new = 0.0, int n_workers = 1) {
  auto sys = assemble_mp2_system(mesh, dofmap, params, bcs, dt, t_new, n_workers);
  return {std::move(sys.a), sys.rhs(x_prev)};
}

// ---------------------------------------------------------------------------
// MP3: unsaturated u-p_w, nonlinear residual and consistent Jacobian
// ---------------------------------------------------------------------------

namespace detail {

struct Mp3PointData {
  double div_u = 0.0, div_u_prev = 0.0;
  double p = 0.0, p_prev = 0.0;
  Vec2 grad_p = {0.0, 0.0};
  SymTensor2 strain;
  double s_w = 1.0, s_w_prev = 1.0, k_r = 1.0;
  double phi = 0.0, phi_s = 0.0, rho = 0.0;
  SymTensor2 sigma;
  Vec2 darcy = {0.0, 0.0};
};

inline Mp3PointData mp3_point(const ThQuadPoint& qp,
                              const MaterialParams& params,
                              std::span<const double> ue,
                              std::span<const double> pe,
                              std::span<const double> ue_prev,
                              std::span<const double> pe_prev) {
  Mp3PointData d;
  for (int i = 0; i < 9; ++i) {
    d.strain.xx += qp.g9[i][0] * ue[2 * i];
    d.strain.yy += qp.g9[i][1] * ue[2 * i + 1];
    d.strain.xy += 0.5 * (qp.g9[i][1] * ue[2 * i] + qp.g9[i][0] * ue[2 * i + 1]);
    d.div_u_prev +=
        qp.g9[i][0] * ue_prev[2 * i] + qp.g9[i][1] * ue_prev[2 * i + 1];
  }
  d.div_u = d.strain.trace();
  for (int c = 0; c < 4; ++c) {
    d.p += qp.n4[c] * pe[c];
    d.p_prev += qp.n4[c] * pe_prev[c];
    d.grad_p[0] += qp.g4[c][0] * pe[c];
    d.grad_p[1] += qp.g4[c][1] * pe[c];
  }
  d.s_w = vg_saturation(d.p, params);
  d.s_w_prev = vg_saturation(d.p_prev, params);
  d.k_r = vg_relative_permeability(d.s_w, params);
  d.phi_s = solid_volume_fraction(d.div_u, params);
  d.phi = 1.0 - d.phi_s;
  d.rho = mixture_density(d.phi_s, d.s_w, params);
  d.sigma = effective_stress(d.strain, params);
  d.darcy = darcy_velocity(d.grad_p, d.k_r, params);
  if (!std::isfinite(d.p) || !std::isfinite(d.s_w) || !std::isfinite(d.k_r) ||
      !std::isfinite(d.darcy[0]) || !std::isfinite(d.darcy[1]) ||
      !std::isfinite(d.sigma.xx))
    throw DivergedStateError("non-finite constitutive state at quadrature point (" +
                             std::to_string(qp.x[0]) + ", " +
                             std::to_string(qp.x[1]) + ")");
  return d;
}

inline void mp3_gather(const Mesh& mesh, const DofMap& dofmap, int e,
                       const Eigen::VectorXd& x, std::span<double> ue,
                       std::span<double> pe) {
  const auto nodes = mesh.element_nodes(e);
  for (int i = 0; i < 9; ++i) {
    ue[2 * i] = x[dofmap.dof_disp(nodes[i], 0)];
    ue[2 * i + 1] = x[dofmap.dof_disp(nodes[i], 1)];
  }
  for (int c = 0; c < 4; ++c) pe[c] = x[dofmap.dof_pressure_of_node(nodes[c])];
}

inline void mp3_check_inputs(const Mesh& mesh, const DofMap& dofmap,
                             const MaterialParams& params, double dt) {
  if (mesh.element_kind != ElementKind::quad9 ||
      dofmap.n_disp_nodes != mesh.n_nodes())
    throw InvalidConfigError("assemble_mp3: Taylor-Hood dofmap/mesh required");
  if (!(dt > 0.0)) throw InvalidConfigError("assemble_mp3: dt must be > 0");
  if (!params.incompressible_constituents())
    throw InvalidConfigError(
        "assemble_mp3: requires the incompressible-constituent sentinel "
        "(k_s = k_w = inf)");
}

}  // namespace detail

inline Eigen::VectorXd assemble_mp3_residual(
    const Mesh& mesh, const DofMap& dofmap, const MaterialParams& params,
    const Eigen::VectorXd& x_iter, const Eigen::VectorXd& x_prev, double dt,
    const BoundaryConditionSet& bcs = {}, double t_new = 0.0,
    int n_workers = 1) {
  detail::mp3_check_inputs(mesh, dofmap, params, dt);
  const Vec2 g = params.gravity_vector();
  const ElementBasis q9(ElementKind::quad9), q1(ElementKind::quad4);
  const QuadratureRule rule = gauss_rule(2, 3);

  std::vector<AssemblyBuffers> buffers;
  detail::run_element_loop(
      mesh.n_elements(), n_workers, buffers,
      [&](int e, AssemblyBuffers& buf) {
        std::array<detail::ThQuadPoint, 9> qps;
        detail::th_element_frames(mesh, e, rule, q9, q1, qps);
        std::array<int, 22> gdof;
        detail::th_global_dofs(mesh, dofmap, e, gdof);
        std::array<double, 18> ue, ue_prev;
        std::array<double, 4> pe, pe_prev;
        detail::mp3_gather(mesh, dofmap, e, x_iter, ue, pe);
        detail::mp3_gather(mesh, dofmap, e, x_prev, ue_prev, pe_prev);

        double r_e[22] = {};
        for (const auto& qp : qps) {
          const auto d = detail::mp3_point(qp, params, ue, pe, ue_prev, pe_prev);
          for (int i = 0; i < 9; ++i) {
            r_e[2 * i] += qp.w * (qp.g9[i][0] * d.sigma.xx +
                                  qp.g9[i][1] * d.sigma.xy -
                                  d.s_w * d.p * qp.g9[i][0] -
                                  qp.n9[i] * d.rho * g[0]);
            r_e[2 * i + 1] += qp.w * (qp.g9[i][0] * d.sigma.xy +
                                      qp.g9[i][1] * d.sigma.yy -
                                      d.s_w * d.p * qp.g9[i][1] -
                                      qp.n9[i] * d.rho * g[1]);
          }
          const double storage =
              (d.phi * (d.s_w - d.s_w_prev) +
               d.s_w * (d.div_u - d.div_u_prev)) / dt;
          for (int c = 0; c < 4; ++c)
            r_e[18 + c] += qp.w * (qp.n4[c] * storage -
                                   (qp.g4[c][0] * d.darcy[0] +
                                    qp.g4[c][1] * d.darcy[1]));
        }
        for (int i = 0; i < 22; ++i)
          if (r_e[i] != 0.0) buf.rhs.emplace_back(gdof[i], r_e[i]);
      });

  Eigen::VectorXd r = detail::rhs_from_buffers(dofmap.n_dofs, buffers);
  r -= assemble_neumann_rhs(mesh, dofmap, params, bcs, t_new, false);
  return r;
}

/// Consistent linearization of the MP3 residual, including the saturation,
/// relative-permeability and mixture-density chain terms.
inline SparseRM assemble_mp3_jacobian(
    const Mesh& mesh, const DofMap& dofmap, const MaterialParams& params,
    const Eigen::VectorXd& x_iter, const Eigen::VectorXd& x_prev, double dt,
    const BoundaryConditionSet& = {}, double = 0.0, int n_workers = 1) {
  detail::mp3_check_inputs(mesh, dofmap, params, dt);
  const Vec2 g = params.gravity_vector();
  const double phi_s0 = params.solid_fraction0();
  const double mobility0 = params.k / params.mu_w;
  const ElementBasis q9(ElementKind::quad9), q1(ElementKind::quad4);
  const QuadratureRule rule = gauss_rule(2, 3);

  std::vector<AssemblyBuffers> buffers;
  detail::run_element_loop(
      mesh.n_elements(), n_workers, buffers,
      [&](int e, AssemblyBuffers& buf) {
        std::array<detail::ThQuadPoint, 9> qps;
        detail::th_element_frames(mesh, e, rule, q9, q1, qps);
        std::array<int, 22> gdof;
        detail::th_global_dofs(mesh, dofmap, e, gdof);
        std::array<double, 18> ue, ue_prev;
        std::array<double, 4> pe, pe_prev;
        detail::mp3_gather(mesh, dofmap, e, x_iter, ue, pe);
        detail::mp3_gather(mesh, dofmap, e, x_prev, ue_prev, pe_prev);

        double a_e[22][22] = {};
        for (const auto& qp : qps) {
          const auto d = detail::mp3_point(qp, params, ue, pe, ue_prev, pe_prev);
          const double dsw_dp = vg_dSw_dpw(d.p, params);
          const double dkr_dp = vg_dkr_dSw(d.s_w, params) * dsw_dp;
          const double drho_ddivu = -phi_s0 * (params.rho_s - d.s_w * params.rho_w);
          const double drho_dp = d.phi * params.rho_w * dsw_dp;

          for (int i = 0; i < 9; ++i) {
            for (int j = 0; j < 9; ++j) {
              const double gdot = qp.g9[i][0] * qp.g9[j][0] +
                                  qp.g9[i][1] * qp.g9[j][1];
              for (int a = 0; a < 2; ++a)
                for (int b = 0; b < 2; ++b)
                  a_e[2 * i + a][2 * j + b] +=
                      qp.w * (params.lambda * qp.g9[i][a] * qp.g9[j][b] +
                              params.mu * (qp.g9[i][b] * qp.g9[j][a] +
                                           (a == b ? gdot : 0.0)) -
                              qp.n9[i] * g[a] * drho_ddivu * qp.g9[j][b]);
            }
            for (int c = 0; c < 4; ++c) {
              const double dcoef = (d.s_w + d.p * dsw_dp) * qp.n4[c];
              for (int a = 0; a < 2; ++a)
                a_e[2 * i + a][18 + c] -=
                    qp.w * (dcoef * qp.g9[i][a] +
                            qp.n9[i] * g[a] * drho_dp * qp.n4[c]);
            }
          }

          const double ds_term = (d.s_w - d.s_w_prev) / dt;
          const double ddiv_term = (d.div_u - d.div_u_prev) / dt;
          for (int c = 0; c < 4; ++c) {
            for (int j = 0; j < 9; ++j)
              for (int b = 0; b < 2; ++b)
                a_e[18 + c][2 * j + b] +=
                    qp.w * qp.n4[c] *
                    (phi_s0 * ds_term + d.s_w / dt) * qp.g9[j][b];
            for (int dd = 0; dd < 4; ++dd) {
              const double storage_dp =
                  qp.n4[c] * dsw_dp * (d.phi / dt + ddiv_term) * qp.n4[dd];
              const double darcy_dp =
                  mobility0 *
                  (d.k_r * (qp.g4[c][0] * qp.g4[dd][0] +
                            qp.g4[c][1] * qp.g4[dd][1]) +
                   dkr_dp * qp.n4[dd] *
                       (qp.g4[c][0] * (d.grad_p[0] - params.rho_w * g[0]) +
                        qp.g4[c][1] * (d.grad_p[1] - params.rho_w * g[1])));
              a_e[18 + c][18 + dd] += qp.w * (storage_dp + darcy_dp);
            }
          }
        }
        for (int i = 0; i < 22; ++i)
          for (int j = 0; j < 22; ++j)
            if (a_e[i][j] != 0.0)
              buf.a.emplace_back(gdof[i], gdof[j], a_e[i][j]);
      });

  return detail::matrix_from_triplets(dofmap.n_dofs, buffers, false);
}

// ---------------------------------------------------------------------------
// Quadrature-point visiting (post-processing, balance checks)
// ---------------------------------------------------------------------------

struct QpSample {
  Vec2 coord = {0.0, 0.0};
  double weight = 0.0;  // quadrature weight * |J|
  double div_u = 0.0;
  double p = 0.0;
  Vec2 grad_p = {0.0, 0.0};
  double div_u_prev = 0.0;
  double p_prev = 0.0;
};

/// Visit every quadrature point of a Taylor-Hood state with interpolated
/// kinematics; x_prev may be null when no history is needed.
template <class Fn>
void visit_quadrature_points(const Mesh& mesh, const DofMap& dofmap,
                             const Eigen::VectorXd& x,
                             const Eigen::VectorXd* x_prev, Fn&& fn) {
  const ElementBasis q9(ElementKind::quad9), q1(ElementKind::quad4);
  const QuadratureRule rule = gauss_rule(2, 3);
  std::array<detail::ThQuadPoint, 9> qps;
  std::array<double, 18> ue{}, ue_prev{};
  std::array<double, 4> pe{}, pe_prev{};
  for (int e = 0; e < mesh.n_elements(); ++e) {
    detail::th_element_frames(mesh, e, rule, q9, q1, qps);
    detail::mp3_gather(mesh, dofmap, e, x, ue, pe);
    if (x_prev) detail::mp3_gather(mesh, dofmap, e, *x_prev, ue_prev, pe_prev);
    for (const auto& qp : qps) {
      QpSample s;
      s.coord = qp.x;
      s.weight = qp.w;
      for (int i = 0; i < 9; ++i)
        s.div_u += qp.g9[i][0] * ue[2 * i] + qp.g9[i][1] * ue[2 * i + 1];
      for (int c = 0; c < 4; ++c) {
        s.p += qp.n4[c] * pe[c];
        s.grad_p[0] += qp.g4[c][0] * pe[c];
        s.grad_p[1] += qp.g4[c][1] * pe[c];
      }
      if (x_prev) {
        for (int i = 0; i < 9; ++i)
          s.div_u_prev +=
              qp.g9[i][0] * ue_prev[2 * i] + qp.g9[i][1] * ue_prev[2 * i + 1];
        for (int c = 0; c < 4; ++c) s.p_prev += qp.n4[c] * pe_prev[c];
      }
      fn(s);
    }
  }
}

/// Area-averaged y-component of the Darcy velocity over the "bottom" edges,
/// evaluated at edge quadrature points from the Q1 pressure gradient.
inline double mean_bottom_darcy_vy(const Mesh& mesh, const DofMap& dofmap,
                                   const MaterialParams& params,
                                   const Eigen::VectorXd& x) {
  const ElementBasis q9(ElementKind::quad9), q1(ElementKind::quad4);
  const QuadratureRule edge_rule = gauss_rule(1, 3);
  double integral = 0.0, measure = 0.0;

  std::array<Vec2, 9> coords;
  std::array<double, 4> pe;
  for (const auto& edge : mesh.boundary_edges.at("bottom")) {
    mesh.element_coords(edge.element, coords);
    const std::array<Vec2, 4> corners = {coords[0], coords[1], coords[2],
                                         coords[3]};
    const auto nodes = mesh.element_nodes(edge.element);
    for (int c = 0; c < 4; ++c)
      pe[c] = x[dofmap.dof_pressure_of_node(nodes[c])];
    for (int q = 0; q < edge_rule.size(); ++q) {
      const double s = edge_rule.points[q][0];
      const Vec2 xi = {s, -1.0};  // bottom edge of the reference square
      const auto f1 = jacobian(corners, q1, xi, edge.element);
      std::array<double, 4> n4;
      q1.eval(xi, n4);
      Vec2 grad_p = {0.0, 0.0};
      for (int c = 0; c < 4; ++c) {
        grad_p[0] += f1.grad[c][0] * pe[c];
        grad_p[1] += f1.grad[c][1] * pe[c];
      }
      double p = 0.0;
      for (int c = 0; c < 4; ++c) p += n4[c] * pe[c];
      const double k_r =
          vg_relative_permeability(vg_saturation(p, params), params);
      const Vec2 w = darcy_velocity(grad_p, k_r, params);

      const Vec2 x0 = mesh.node_coords[edge.nodes[0]];
      const Vec2 x1 = mesh.node_coords[edge.nodes[edge.n_nodes - 1]];
      const Vec2 xm = edge.n_nodes == 3 ? mesh.node_coords[edge.nodes[1]]
                                        : Vec2{0, 0};
      double l[3], d[3];
      detail::edge_quadratic(s, l, d);
      double tx, ty;
      if (edge.n_nodes == 3) {
        tx = d[0] * x0[0] + d[1] * xm[0] + d[2] * x1[0];
        ty = d[0] * x0[1] + d[1] * xm[1] + d[2] * x1[1];
      } else {
        tx = 0.5 * (x1[0] - x0[0]);
        ty = 0.5 * (x1[1] - x0[1]);
      }
      const double ds = std::hypot(tx, ty) * edge_rule.weights[q];
      integral += w[1] * ds;
      measure += ds;
    }
  }
  return integral / measure;
}

}  // namespace porofem
