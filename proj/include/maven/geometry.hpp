#pragma once

#include "maven/common.hpp"
#include "maven/mesh.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

namespace maven {

/// Per-cell geometric descriptors at one frame. local_vectors follow the
/// input vertex order.
struct CellGeometry {
  double volume = 0.0;
  double surface_area = 0.0;
  Vec3 centroid = Vec3::Zero();
  std::vector<Vec3> local_vectors;
};

/// Per-facet geometric descriptors. The normal follows the right-hand rule
/// of the input cycle, so cycles stored by extract_facets yield outward
/// normals of the lowest-indexed incident cell.
struct FacetGeometry {
  double area = 0.0;
  double perimeter = 0.0;
  Vec3 centroid = Vec3::Zero();
  Vec3 normal = Vec3::Zero();
  std::vector<Vec3> local_vectors;
};

namespace detail {

// Order-insensitive sum: the result depends only on the value multiset, so
// the same facet reached through different cells yields bit-identical areas.
inline double sorted_sum(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

inline Vec3 sorted_mean(const std::vector<Vec3>& pts) {
  Vec3 m;
  for (int k = 0; k < 3; ++k) {
    std::vector<double> coord(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) coord[i] = pts[i][k];
    m[k] = sorted_sum(std::move(coord)) / static_cast<double>(pts.size());
  }
  return m;
}

// Triangle area anchored at the lexicographically smallest point, making the
// value a pure function of the point multiset.
inline double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  std::array<const Vec3*, 3> p = {&a, &b, &c};
  std::sort(p.begin(), p.end(), [](const Vec3* x, const Vec3* y) {
    return std::lexicographical_compare(x->data(), x->data() + 3, y->data(), y->data() + 3);
  });
  return 0.5 * ((*p[1] - *p[0]).cross(*p[2] - *p[0])).norm();
}

// Centroid-fan triangle areas of a polygon cycle (3 or 4 vertices).
inline std::vector<double> fan_areas(const std::vector<Vec3>& cycle, const Vec3& centroid) {
  std::vector<double> areas(cycle.size());
  for (std::size_t i = 0; i < cycle.size(); ++i) {
    areas[i] = triangle_area(centroid, cycle[i], cycle[(i + 1) % cycle.size()]);
  }
  return areas;
}

inline double polygon_area(const std::vector<Vec3>& cycle) {
  if (cycle.size() == 3) {
    return triangle_area(cycle[0], cycle[1], cycle[2]);
  }
  return sorted_sum(fan_areas(cycle, sorted_mean(cycle)));
}

inline Vec3 polygon_normal_estimate_points(const std::vector<Vec3>& cycle) {
  Vec3 centroid = Vec3::Zero();
  for (const Vec3& p : cycle) centroid += p;
  centroid /= static_cast<double>(cycle.size());
  Vec3 n = Vec3::Zero();
  for (std::size_t i = 0; i < cycle.size(); ++i) {
    n += (cycle[i] - centroid).cross(cycle[(i + 1) % cycle.size()] - centroid);
  }
  return n;
}

inline void check_finite(const std::vector<Vec3>& pts, const char* where) {
  for (const Vec3& p : pts) {
    if (!p.allFinite()) throw NumericError(std::string(where) + ": non-finite position");
  }
}

inline double bbox_diagonal(const std::vector<Vec3>& pts) {
  Vec3 lo = pts.front(), hi = pts.front();
  for (const Vec3& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  return (hi - lo).norm();
}

}  // namespace detail

/// Centroid-relative position vectors d_v = x_v - mean(x), in input order.
inline std::vector<Vec3> local_vectors(const std::vector<Vec3>& positions) {
  Vec3 centroid = Vec3::Zero();
  for (const Vec3& p : positions) centroid += p;
  centroid /= static_cast<double>(positions.size());
  std::vector<Vec3> d(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) d[i] = positions[i] - centroid;
  return d;
}

/// Area, perimeter, centroid, unit normal, and local vectors of a 3- or
/// 4-vertex facet cycle. Quad area and normal use the centroid fan, which is
/// symmetric under cyclic shifts and consistent with the hex volume integral.
inline FacetGeometry compute_facet_geometry(const std::vector<Vec3>& cycle) {
  if (cycle.size() != 3 && cycle.size() != 4)
    throw ShapeError("compute_facet_geometry: facet must have 3 or 4 vertices");
  detail::check_finite(cycle, "compute_facet_geometry");

  FacetGeometry g;
  g.centroid = detail::sorted_mean(cycle);
  g.area = detail::polygon_area(cycle);

  for (std::size_t i = 0; i < cycle.size(); ++i) {
    g.perimeter += (cycle[(i + 1) % cycle.size()] - cycle[i]).norm();
  }

  Vec3 area_vec = Vec3::Zero();
  for (std::size_t i = 0; i < cycle.size(); ++i) {
    const Vec3 a = cycle[i] - g.centroid;
    const Vec3 b = cycle[(i + 1) % cycle.size()] - g.centroid;
    area_vec += 0.5 * a.cross(b);
  }
  const double diag = detail::bbox_diagonal(cycle);
  if (g.area <= 1e-14 * diag * diag || area_vec.norm() == 0.0)
    throw NumericError("compute_facet_geometry: degenerate (zero-area) facet");
  g.normal = area_vec.normalized();
  g.local_vectors = local_vectors(cycle);
  return g;
}

/// Volume, surface area, centroid, and local vectors of a tet or hex cell.
/// Tet volume is |det|/6; hex volume integrates x.n over centroid-fanned
/// faces, which stays consistent for mildly non-planar quads.
inline CellGeometry compute_cell_geometry(const std::vector<Vec3>& positions, CellType type) {
  const int arity = vertices_per_cell(type);
  if (static_cast<int>(positions.size()) != arity)
    throw ShapeError("compute_cell_geometry: expected " + std::to_string(arity) +
                     " vertices, got " + std::to_string(positions.size()));
  detail::check_finite(positions, "compute_cell_geometry");

  CellGeometry g;
  for (const Vec3& p : positions) g.centroid += p;
  g.centroid /= static_cast<double>(arity);
  g.local_vectors = local_vectors(positions);

  std::vector<double> face_areas;
  if (type == CellType::Tet) {
    g.volume = std::abs((positions[1] - positions[0])
                            .cross(positions[2] - positions[0])
                            .dot(positions[3] - positions[0])) /
               6.0;
    for (const auto& lf : tet_local_faces()) {
      face_areas.push_back(
          detail::triangle_area(positions[lf[0]], positions[lf[1]], positions[lf[2]]));
    }
  } else {
    double vol6 = 0.0;  // 6 * signed volume, via div(x) = 3 over fan triangles
    for (const auto& lf : hex_local_faces()) {
      std::vector<Vec3> cycle = {positions[lf[0]], positions[lf[1]], positions[lf[2]],
                                 positions[lf[3]]};
      Vec3 face_centroid = detail::sorted_mean(cycle);
      if (detail::polygon_normal_estimate_points(cycle).dot(face_centroid - g.centroid) < 0.0) {
        std::reverse(cycle.begin(), cycle.end());
      }
      for (int i = 0; i < 4; ++i) {
        vol6 += cycle[i].dot(cycle[(i + 1) % 4].cross(face_centroid));
      }
      face_areas.push_back(detail::polygon_area(cycle));
    }
    g.volume = std::abs(vol6) / 6.0;
  }
  g.surface_area = detail::sorted_sum(std::move(face_areas));

  const double diag = detail::bbox_diagonal(positions);
  if (g.volume <= 1e-14 * diag * diag * diag)
    throw NumericError("compute_cell_geometry: degenerate cell (volume below tolerance)");
  return g;
}

}  // namespace maven
