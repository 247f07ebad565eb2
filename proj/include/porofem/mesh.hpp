#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "porofem/elements.hpp"
#include "porofem/errors.hpp"
#include "porofem/types.hpp"

namespace porofem {

/// One boundary edge of a 2D element: element index, local edge 0..3
/// (bottom,right,top,left) and the edge node ids in edge order
/// (corner, [midside], corner).
struct BoundaryEdge {
  int element = -1;
  int local_edge = -1;
  std::array<int, 3> nodes = {-1, -1, -1};
  int n_nodes = 2;
};

/// Structured mesh: 1D interval of 2-node lines, or a 2D grid of 4- or
/// 9-node quadrilaterals. Node numbering is row-major, x fastest.
struct Mesh {
  int dim = 1;
  ElementKind element_kind = ElementKind::line2;
  std::vector<Vec2> node_coords;
  std::vector<int> connectivity;  // flattened, nodes_per_element() per element
  std::map<std::string, std::vector<int>> boundary_nodes;
  std::map<std::string, std::vector<BoundaryEdge>> boundary_edges;

  // structured-grid metadata
  double length = 0.0;            // 1D
  double width = 0.0, height = 0.0;  // 2D
  int nx = 0, ny = 0;             // elements per direction (1D uses nx)
  int order = 1;                  // geometric order of the quads

  int nodes_per_element() const { return node_count(element_kind); }
  int n_elements() const {
    return static_cast<int>(connectivity.size()) / nodes_per_element();
  }
  int n_nodes() const { return static_cast<int>(node_coords.size()); }

  std::span<const int> element_nodes(int e) const {
    const int npe = nodes_per_element();
    return {connectivity.data() + static_cast<std::size_t>(e) * npe,
            static_cast<std::size_t>(npe)};
  }

  void element_coords(int e, std::span<Vec2> out) const {
    auto nodes = element_nodes(e);
    for (std::size_t i = 0; i < nodes.size(); ++i)
      out[i] = node_coords[nodes[i]];
  }
};

/// Uniform 1D mesh over [0, length]; z measured downward from the drained
/// face, so tag "top" is node 0 at z=0 and "bottom" is the last node.
inline Mesh generate_interval_mesh(double length, int n_elem) {
  if (!(length > 0.0))
    throw InvalidConfigError("generate_interval_mesh: length must be > 0, got " +
                             std::to_string(length));
  if (n_elem < 1)
    throw InvalidConfigError("generate_interval_mesh: n_elem must be >= 1, got " +
                             std::to_string(n_elem));

  Mesh m;
  m.dim = 1;
  m.element_kind = ElementKind::line2;
  m.length = length;
  m.nx = n_elem;
  m.node_coords.reserve(n_elem + 1);
  for (int i = 0; i <= n_elem; ++i)
    m.node_coords.push_back({length * i / n_elem, 0.0});
  m.connectivity.reserve(2 * n_elem);
  for (int e = 0; e < n_elem; ++e) {
    m.connectivity.push_back(e);
    m.connectivity.push_back(e + 1);
  }
  m.boundary_nodes["top"] = {0};
  m.boundary_nodes["bottom"] = {n_elem};
  return m;
}

namespace detail {

inline int checked_division(double total, double step, const char* what) {
  if (!(step > 0.0) || !(total > 0.0))
    throw InvalidConfigError(std::string(what) +
                             ": extents and spacings must be > 0");
  const double ratio = total / step;
  const double rounded = std::round(ratio);
  if (rounded < 1.0 || std::abs(ratio - rounded) > 1e-9)
    throw InvalidConfigError(std::string(what) + ": " + std::to_string(total) +
                             " is not divisible by spacing " +
                             std::to_string(step));
  return static_cast<int>(rounded);
}

}  // namespace detail

/// Structured quad grid over [0,width] x [0,height]. order 1 gives 4-node
/// quads on the vertex lattice; order 2 inserts edge-midpoint and center
/// nodes for 9-node quads. Boundary tags: bottom (y=0), top (y=height),
/// left (x=0), right (x=width).
inline Mesh generate_quad_mesh(double width, double height, double hx,
                               double hy, int order) {
  if (order != 1 && order != 2)
    throw InvalidConfigError("generate_quad_mesh: order must be 1 or 2, got " +
                             std::to_string(order));
  const int nx = detail::checked_division(width, hx, "generate_quad_mesh");
  const int ny = detail::checked_division(height, hy, "generate_quad_mesh");

  Mesh m;
  m.dim = 2;
  m.element_kind = order == 1 ? ElementKind::quad4 : ElementKind::quad9;
  m.width = width;
  m.height = height;
  m.nx = nx;
  m.ny = ny;
  m.order = order;

  const int mx = nx * order;  // lattice intervals per direction
  const int my = ny * order;
  const int ncols = mx + 1;
  const int nrows = my + 1;
  m.node_coords.reserve(static_cast<std::size_t>(ncols) * nrows);
  for (int j = 0; j < nrows; ++j)
    for (int i = 0; i < ncols; ++i)
      m.node_coords.push_back({width * i / mx, height * j / my});

  auto nid = [ncols](int i, int j) { return j * ncols + i; };

  const int npe = order == 1 ? 4 : 9;
  m.connectivity.reserve(static_cast<std::size_t>(nx) * ny * npe);
  for (int ej = 0; ej < ny; ++ej)
    for (int ei = 0; ei < nx; ++ei) {
      const int i0 = ei * order, j0 = ej * order;
      if (order == 1) {
        m.connectivity.insert(m.connectivity.end(),
                              {nid(i0, j0), nid(i0 + 1, j0), nid(i0 + 1, j0 + 1),
                               nid(i0, j0 + 1)});
      } else {
        m.connectivity.insert(
            m.connectivity.end(),
            {nid(i0, j0), nid(i0 + 2, j0), nid(i0 + 2, j0 + 2), nid(i0, j0 + 2),
             nid(i0 + 1, j0), nid(i0 + 2, j0 + 1), nid(i0 + 1, j0 + 2),
             nid(i0, j0 + 1), nid(i0 + 1, j0 + 1)});
      }
    }

  auto& bottom = m.boundary_nodes["bottom"];
  auto& top = m.boundary_nodes["top"];
  for (int i = 0; i < ncols; ++i) {
    bottom.push_back(nid(i, 0));
    top.push_back(nid(i, my));
  }
  auto& left = m.boundary_nodes["left"];
  auto& right = m.boundary_nodes["right"];
  for (int j = 0; j < nrows; ++j) {
    left.push_back(nid(0, j));
    right.push_back(nid(mx, j));
  }

  auto make_edge = [&](int e, int local, int a, int mid, int b) {
    BoundaryEdge be;
    be.element = e;
    be.local_edge = local;
    if (order == 1) {
      be.nodes = {a, b, -1};
      be.n_nodes = 2;
    } else {
      be.nodes = {a, mid, b};
      be.n_nodes = 3;
    }
    return be;
  };
  for (int ei = 0; ei < nx; ++ei) {
    const int i0 = ei * order;
    m.boundary_edges["bottom"].push_back(make_edge(
        ei, 0, nid(i0, 0), nid(i0 + 1, 0), nid(i0 + order, 0)));
    const int etop = (ny - 1) * nx + ei;
    m.boundary_edges["top"].push_back(make_edge(
        etop, 2, nid(i0, my), nid(i0 + 1, my), nid(i0 + order, my)));
  }
  for (int ej = 0; ej < ny; ++ej) {
    const int j0 = ej * order;
    m.boundary_edges["left"].push_back(make_edge(
        ej * nx, 3, nid(0, j0), nid(0, j0 + 1), nid(0, j0 + order)));
    m.boundary_edges["right"].push_back(make_edge(
        ej * nx + nx - 1, 1, nid(mx, j0), nid(mx, j0 + 1), nid(mx, j0 + order)));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Degree-of-freedom maps
// ---------------------------------------------------------------------------

enum class Field { disp_x = 0, disp_y = 1, pressure = 2 };

inline const char* to_string(Field f) {
  switch (f) {
    case Field::disp_x: return "ux";
    case Field::disp_y: return "uy";
    case Field::pressure: return "p";
  }
  return "?";
}

/// Map from (field, node) to global equation index. Single-field layout has
/// pressure on every mesh node; the Taylor-Hood layout carries both
/// displacement components on all Q2 nodes plus pressure on the Q1 vertex
/// subset, ordered all-ux, then all-uy, then p.
struct DofMap {
  bool has_displacement = false;
  int n_disp_nodes = 0;   // Q2 node count when has_displacement
  int n_pressure_nodes = 0;
  int n_dofs = 0;
  std::vector<int> pressure_index;   // mesh node -> pressure number or -1
  std::vector<int> pressure_node;    // pressure number -> mesh node

  int dof_disp(int node, int comp) const {
    return comp * n_disp_nodes + node;
  }
  int dof_pressure_of_node(int node) const {
    const int pi = pressure_index[node];
    if (pi < 0)
      throw InternalError("node " + std::to_string(node) +
                          " carries no pressure dof");
    return dof_pressure(pi);
  }
  int dof_pressure(int pnum) const {
    return (has_displacement ? 2 * n_disp_nodes : 0) + pnum;
  }
  int dof(Field f, int node) const {
    if (f == Field::pressure) return dof_pressure_of_node(node);
    if (!has_displacement)
      throw InternalError("single-field dof map has no displacement");
    return dof_disp(node, static_cast<int>(f));
  }

  /// Inverse of dof(): global index -> (field, mesh node).
  std::pair<Field, int> field_of(int dof) const {
    if (has_displacement) {
      if (dof < n_disp_nodes) return {Field::disp_x, dof};
      if (dof < 2 * n_disp_nodes) return {Field::disp_y, dof - n_disp_nodes};
      return {Field::pressure, pressure_node[dof - 2 * n_disp_nodes]};
    }
    return {Field::pressure, pressure_node[dof]};
  }
};

/// Single-field pressure layout on every mesh node (the 1D problem).
inline DofMap build_pressure_dofmap(const Mesh& mesh) {
  DofMap d;
  d.has_displacement = false;
  d.n_pressure_nodes = mesh.n_nodes();
  d.n_dofs = mesh.n_nodes();
  d.pressure_index.resize(mesh.n_nodes());
  d.pressure_node.resize(mesh.n_nodes());
  for (int i = 0; i < mesh.n_nodes(); ++i) {
    d.pressure_index[i] = i;
    d.pressure_node[i] = i;
  }
  return d;
}

/// Q2 displacement / Q1 pressure layout on a 9-node quad mesh.
inline DofMap build_taylor_hood_dofmap(const Mesh& mesh) {
  if (mesh.element_kind != ElementKind::quad9)
    throw InvalidConfigError(
        "build_taylor_hood_dofmap: mesh must consist of 9-node quads");

  DofMap d;
  d.has_displacement = true;
  d.n_disp_nodes = mesh.n_nodes();
  d.pressure_index.assign(mesh.n_nodes(), -1);

  // vertex lattice points (even i, even j) in row-major order
  const int ncols = 2 * mesh.nx + 1;
  const int nrows = 2 * mesh.ny + 1;
  for (int j = 0; j < nrows; j += 2)
    for (int i = 0; i < ncols; i += 2) {
      const int node = j * ncols + i;
      d.pressure_index[node] = static_cast<int>(d.pressure_node.size());
      d.pressure_node.push_back(node);
    }
  d.n_pressure_nodes = static_cast<int>(d.pressure_node.size());
  d.n_dofs = 2 * d.n_disp_nodes + d.n_pressure_nodes;
  return d;
}

}  // namespace porofem
