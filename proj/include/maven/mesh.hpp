#pragma once

#include "maven/common.hpp"

#include <algorithm>
#include <array>
#include <cstddef>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace maven {

enum class CellType { Tet, Hex };

// Vertex roles: Normal vertices are prediction targets, Scripted vertices
// follow an externally prescribed motion path, Obstacle vertices never move.
enum class NodeType : int { Normal = 0, Scripted = 1, Obstacle = 2 };

inline int vertices_per_cell(CellType t) { return t == CellType::Tet ? 4 : 8; }
inline int facets_per_cell(CellType t) { return t == CellType::Tet ? 4 : 6; }
inline int vertices_per_facet(CellType t) { return t == CellType::Tet ? 3 : 4; }

/// Volumetric mesh: vertices at reference time, cells of a single arity,
/// and per-vertex role/body tags. Hex cells use the conventional ordering
/// (bottom face 0-1-2-3, top face 4-5-6-7).
struct Mesh {
  CellType cell_type = CellType::Tet;
  std::vector<Vec3> vertices;
  std::vector<std::vector<int>> cells;
  std::vector<NodeType> node_type;
  std::vector<int> body_id;

  int num_vertices() const { return static_cast<int>(vertices.size()); }
  int num_cells() const { return static_cast<int>(cells.size()); }
};

/// Local faces of the reference tet (0,1,2,3), oriented outward for a
/// positively oriented tet. Extraction re-orients geometrically, so the
/// listed winding is only a starting point.
inline const std::array<std::array<int, 3>, 4>& tet_local_faces() {
  static const std::array<std::array<int, 3>, 4> faces = {{
      {{1, 2, 3}},
      {{0, 3, 2}},
      {{0, 1, 3}},
      {{0, 2, 1}},
  }};
  return faces;
}

/// Local faces of the conventional hex: bottom, top, then the four sides
/// walking around the bottom ring.
inline const std::array<std::array<int, 4>, 6>& hex_local_faces() {
  static const std::array<std::array<int, 4>, 6> faces = {{
      {{0, 3, 2, 1}},
      {{4, 5, 6, 7}},
      {{0, 1, 5, 4}},
      {{1, 2, 6, 5}},
      {{2, 3, 7, 6}},
      {{3, 0, 4, 7}},
  }};
  return faces;
}

/// Local edges of a cell (used by the vertex-graph ablation fallback).
inline std::vector<std::array<int, 2>> cell_local_edges(CellType t) {
  if (t == CellType::Tet) {
    return {{{0, 1}}, {{0, 2}}, {{0, 3}}, {{1, 2}}, {{1, 3}}, {{2, 3}}};
  }
  return {{{0, 1}}, {{1, 2}}, {{2, 3}}, {{3, 0}}, {{4, 5}}, {{5, 6}},
          {{6, 7}}, {{7, 4}}, {{0, 4}}, {{1, 5}}, {{2, 6}}, {{3, 7}}};
}

/// Deduplicated facets plus the cell-facet incidence graph. Facet vertex
/// cycles are stored oriented outward with respect to the lowest-indexed
/// incident cell and rotated to start at their smallest global vertex id.
struct FacetSet {
  std::vector<std::vector<int>> facets;
  std::vector<std::vector<int>> facet_to_cells;  // 1 or 2 incident cells
  std::vector<std::vector<int>> cell_to_facets;  // 4 (tet) or 6 (hex) per cell
  std::vector<std::uint8_t> boundary_mask;       // exactly one incident cell

  int num_facets() const { return static_cast<int>(facets.size()); }
  int num_incidences() const {
    std::size_t n = 0;
    for (const auto& f : facet_to_cells) n += f.size();
    return static_cast<int>(n);
  }
};

struct ValidationReport {
  std::vector<std::string> issues;
  bool ok() const { return issues.empty(); }
};

/// Checks the Mesh invariants. Never throws; returns one entry per violation.
inline ValidationReport validate_mesh(const Mesh& mesh) {
  ValidationReport report;
  const int nv = mesh.num_vertices();
  const int arity = vertices_per_cell(mesh.cell_type);

  if (static_cast<int>(mesh.node_type.size()) != nv)
    report.issues.push_back("node_type length " + std::to_string(mesh.node_type.size()) +
                            " does not match vertex count " + std::to_string(nv));
  if (static_cast<int>(mesh.body_id.size()) != nv)
    report.issues.push_back("body_id length " + std::to_string(mesh.body_id.size()) +
                            " does not match vertex count " + std::to_string(nv));
  for (int v = 0; v < nv; ++v) {
    if (!mesh.vertices[v].allFinite()) {
      report.issues.push_back("vertex " + std::to_string(v) + " has a non-finite position");
    }
  }
  for (int c = 0; c < mesh.num_cells(); ++c) {
    const auto& cell = mesh.cells[c];
    if (static_cast<int>(cell.size()) != arity) {
      report.issues.push_back("cell " + std::to_string(c) + " arity mismatch: has " +
                              std::to_string(cell.size()) + " vertices, cell_type wants " +
                              std::to_string(arity));
      continue;
    }
    bool in_range = true;
    for (int v : cell) {
      if (v < 0 || v >= nv) {
        report.issues.push_back("cell " + std::to_string(c) + " vertex index " +
                                std::to_string(v) + " out of range [0," + std::to_string(nv) +
                                ")");
        in_range = false;
      }
    }
    if (!in_range || cell.empty() || mesh.body_id.empty()) continue;
    const int body = mesh.body_id[cell[0]];
    for (int v : cell) {
      if (v >= 0 && v < static_cast<int>(mesh.body_id.size()) && mesh.body_id[v] != body) {
        report.issues.push_back("cell " + std::to_string(c) +
                                " spans multiple body_ids (" + std::to_string(body) + " and " +
                                std::to_string(mesh.body_id[v]) + ")");
        break;
      }
    }
  }
  return report;
}

namespace detail {

// Rotate a cycle so it starts at its smallest entry, preserving direction.
inline std::vector<int> rotate_cycle_to_min(std::vector<int> cycle) {
  auto it = std::min_element(cycle.begin(), cycle.end());
  std::rotate(cycle.begin(), it, cycle.end());
  return cycle;
}

inline Vec3 polygon_normal_estimate(const std::vector<int>& cycle,
                                    const std::vector<Vec3>& positions) {
  Vec3 centroid = Vec3::Zero();
  for (int v : cycle) centroid += positions[v];
  centroid /= static_cast<double>(cycle.size());
  Vec3 n = Vec3::Zero();
  for (std::size_t i = 0; i < cycle.size(); ++i) {
    const Vec3 a = positions[cycle[i]] - centroid;
    const Vec3 b = positions[cycle[(i + 1) % cycle.size()]] - centroid;
    n += a.cross(b);
  }
  return n;
}

}  // namespace detail

/// Extracts the deduplicated facet set and the cell-facet incidence graph.
/// Interior faces (shared by two cells) appear once; each facet cycle is
/// oriented outward with respect to its lowest-indexed incident cell.
/// Throws TopologyError on arity mismatches or faces shared by >2 cells.
inline FacetSet extract_facets(const Mesh& mesh) {
  const int arity = vertices_per_cell(mesh.cell_type);
  const int nfaces = facets_per_cell(mesh.cell_type);
  const int nv = mesh.num_vertices();

  FacetSet out;
  out.cell_to_facets.assign(mesh.num_cells(), {});

  // Facet key = sorted global vertex ids, an orientation-free identity.
  std::map<std::vector<int>, int> key_to_facet;

  for (int c = 0; c < mesh.num_cells(); ++c) {
    const auto& cell = mesh.cells[c];
    if (static_cast<int>(cell.size()) != arity)
      throw TopologyError("extract_facets: cell " + std::to_string(c) + " has " +
                          std::to_string(cell.size()) + " vertices, expected " +
                          std::to_string(arity));
    for (int v : cell) {
      if (v < 0 || v >= nv)
        throw TopologyError("extract_facets: cell " + std::to_string(c) +
                            " references vertex " + std::to_string(v) + " out of range");
    }

    for (int lf = 0; lf < nfaces; ++lf) {
      std::vector<int> cycle;
      if (mesh.cell_type == CellType::Tet) {
        for (int k : tet_local_faces()[lf]) cycle.push_back(cell[k]);
      } else {
        for (int k : hex_local_faces()[lf]) cycle.push_back(cell[k]);
      }

      std::vector<int> key = cycle;
      std::sort(key.begin(), key.end());

      auto it = key_to_facet.find(key);
      if (it == key_to_facet.end()) {
        // First sighting: orient outward relative to this cell and store.
        Vec3 cell_centroid = Vec3::Zero();
        for (int v : cell) cell_centroid += mesh.vertices[v];
        cell_centroid /= static_cast<double>(arity);
        Vec3 face_centroid = Vec3::Zero();
        for (int v : cycle) face_centroid += mesh.vertices[v];
        face_centroid /= static_cast<double>(cycle.size());

        Vec3 n = detail::polygon_normal_estimate(cycle, mesh.vertices);
        if (n.dot(face_centroid - cell_centroid) < 0.0) {
          std::reverse(cycle.begin(), cycle.end());
        }
        cycle = detail::rotate_cycle_to_min(std::move(cycle));

        const int fid = out.num_facets();
        out.facets.push_back(cycle);
        out.facet_to_cells.push_back({c});
        key_to_facet.emplace(std::move(key), fid);
        out.cell_to_facets[c].push_back(fid);
      } else {
        const int fid = it->second;
        if (out.facet_to_cells[fid].size() >= 2)
          throw TopologyError("extract_facets: face shared by more than two cells (cell " +
                              std::to_string(c) + ")");
        out.facet_to_cells[fid].push_back(c);
        out.cell_to_facets[c].push_back(fid);
      }
    }
  }

  out.boundary_mask.resize(out.num_facets());
  for (int f = 0; f < out.num_facets(); ++f) {
    out.boundary_mask[f] = out.facet_to_cells[f].size() == 1 ? 1 : 0;
  }
  return out;
}

/// Deterministic within-element vertex ordering: slots sorted by distance to
/// the element centroid, ties broken by ascending global vertex id. Returns
/// the permutation of local slots; applying it to an already-canonical
/// element yields the identity.
inline std::vector<int> canonical_order(const std::vector<int>& vertex_ids,
                                        const std::vector<Vec3>& element_positions) {
  const std::size_t n = vertex_ids.size();
  Vec3 centroid = Vec3::Zero();
  for (const Vec3& p : element_positions) centroid += p;
  centroid /= static_cast<double>(n);

  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = (element_positions[i] - centroid).norm();

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (dist[a] != dist[b]) return dist[a] < dist[b];
    return vertex_ids[a] < vertex_ids[b];
  });
  return order;
}

}  // namespace maven
