#pragma once

#include "maven/mesh.hpp"
#include "maven/model.hpp"
#include "maven/oracle.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <random>
#include <set>
#include <vector>

namespace maven::testing {

inline Mesh unit_tet_mesh() {
  Mesh m;
  m.cell_type = CellType::Tet;
  m.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)};
  m.cells = {{0, 1, 2, 3}};
  m.node_type.assign(4, NodeType::Normal);
  m.body_id.assign(4, 0);
  return m;
}

/// Two tets sharing the face {1,2,3}.
inline Mesh two_tet_mesh() {
  Mesh m;
  m.cell_type = CellType::Tet;
  m.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1), Vec3(1, 1, 1)};
  m.cells = {{0, 1, 2, 3}, {4, 1, 2, 3}};
  m.node_type.assign(5, NodeType::Normal);
  m.body_id.assign(5, 0);
  return m;
}

inline Mesh unit_hex_mesh() {
  Mesh m;
  m.cell_type = CellType::Hex;
  m.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(1, 1, 0), Vec3(0, 1, 0),
                Vec3(0, 0, 1), Vec3(1, 0, 1), Vec3(1, 1, 1), Vec3(0, 1, 1)};
  m.cells = {{0, 1, 2, 3, 4, 5, 6, 7}};
  m.node_type.assign(8, NodeType::Normal);
  m.body_id.assign(8, 0);
  return m;
}

/// Axis-aligned block of nx x ny x nz unit hexes.
inline Mesh hex_block_mesh(int nx, int ny, int nz) {
  Mesh m;
  m.cell_type = CellType::Hex;
  auto vid = [&](int i, int j, int k) { return (i * (ny + 1) + j) * (nz + 1) + k; };
  for (int i = 0; i <= nx; ++i)
    for (int j = 0; j <= ny; ++j)
      for (int k = 0; k <= nz; ++k) m.vertices.push_back(Vec3(i, j, k));
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j)
      for (int k = 0; k < nz; ++k)
        m.cells.push_back({vid(i, j, k), vid(i + 1, j, k), vid(i + 1, j + 1, k), vid(i, j + 1, k),
                           vid(i, j, k + 1), vid(i + 1, j, k + 1), vid(i + 1, j + 1, k + 1),
                           vid(i, j + 1, k + 1)});
  m.node_type.assign(m.vertices.size(), NodeType::Normal);
  m.body_id.assign(m.vertices.size(), 0);
  return m;
}

/// Two single-hex bodies facing each other across a small vertical gap; the
/// upper one is smaller and scripted, which yields exactly one geometric
/// contact pair at radius 0.12.
inline Mesh two_hex_contact_mesh() {
  Mesh m = unit_hex_mesh();
  const double lo = 0.3, hi = 0.7;  // small footprint
  const double z0 = 1.1, z1 = 1.5;
  m.vertices.insert(m.vertices.end(),
                    {Vec3(lo, lo, z0), Vec3(hi, lo, z0), Vec3(hi, hi, z0), Vec3(lo, hi, z0),
                     Vec3(lo, lo, z1), Vec3(hi, lo, z1), Vec3(hi, hi, z1), Vec3(lo, hi, z1)});
  m.cells.push_back({8, 9, 10, 11, 12, 13, 14, 15});
  for (int i = 0; i < 8; ++i) {
    m.node_type.push_back(NodeType::Scripted);
    m.body_id.push_back(1);
  }
  return m;
}

/// Deterministic jitter applied to every vertex; breaks the distance ties of
/// lattice meshes so canonical orderings are unique.
inline void jitter(Mesh& m, double amplitude, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-amplitude, amplitude);
  for (Vec3& v : m.vertices) v += Vec3(d(rng), d(rng), d(rng));
}

/// All vertex-order permutations of the reference hex that describe the same
/// combinatorial cube (automorphisms of the cube edge graph, 48 of them).
inline const std::vector<std::array<int, 8>>& hex_storage_permutations() {
  static const std::vector<std::array<int, 8>> perms = [] {
    const auto local = cell_local_edges(CellType::Hex);
    std::set<std::pair<int, int>> ref_edges;
    for (const auto& e : local) ref_edges.insert({std::min(e[0], e[1]), std::max(e[0], e[1])});

    std::vector<std::array<int, 8>> out;
    std::array<int, 8> p;
    std::iota(p.begin(), p.end(), 0);
    do {
      bool ok = true;
      for (const auto& e : ref_edges) {
        const int a = p[e.first], b = p[e.second];
        if (!ref_edges.count({std::min(a, b), std::max(a, b)})) {
          ok = false;
          break;
        }
      }
      if (ok) out.push_back(p);
    } while (std::next_permutation(p.begin(), p.end()));
    return out;
  }();
  return perms;
}

/// Random normalizers with non-trivial statistics, for tests that need no
/// fitted dataset.
inline FeatureNormalizers synthetic_normalizers(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  auto fill = [&](int dim) {
    Normalizer n(dim);
    Mat rows(16, dim);
    for (int i = 0; i < rows.size(); ++i) rows.data()[i] = d(rng);
    n.accumulate(rows);
    return n;
  };
  FeatureNormalizers norms;
  norms.vertex_in = fill(model::vertex_feature_dim(cfg));
  norms.cell_in = fill(4);
  norms.facet_in = fill(4);
  norms.output = fill(model::output_dim(cfg));
  return norms;
}

/// Random but valid step input over a mesh: positions near the reference
/// state, small velocities, random quantities, scripted rows targeting a
/// small offset.
inline StepInput random_step_input(const Mesh& mesh, int num_q, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 0.01);
  const int nv = mesh.num_vertices();
  StepInput in;
  in.x_cur.resize(nv, 3);
  for (int v = 0; v < nv; ++v) in.x_cur.row(v) = mesh.vertices[v].transpose();
  in.x_prev = in.x_cur;
  for (int v = 0; v < nv; ++v)
    for (int c = 0; c < 3; ++c) in.x_prev(v, c) -= d(rng);
  in.q_cur.resize(nv, num_q);
  for (int v = 0; v < nv; ++v)
    for (int c = 0; c < num_q; ++c) in.q_cur(v, c) = d(rng);
  in.script_target = in.x_cur;
  for (int v = 0; v < nv; ++v) {
    if (mesh.node_type[v] == NodeType::Scripted) {
      for (int c = 0; c < 3; ++c) in.script_target(v, c) += d(rng);
    }
  }
  return in;
}

}  // namespace maven::testing
