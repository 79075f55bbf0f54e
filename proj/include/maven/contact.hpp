#pragma once

#include "maven/common.hpp"
#include "maven/geometry.hpp"
#include "maven/mesh.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

namespace maven {

struct Aabb {
  Vec3 min = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 max = Vec3::Constant(-std::numeric_limits<double>::infinity());

  void expand(const Vec3& p) {
    min = min.cwiseMin(p);
    max = max.cwiseMax(p);
  }
  void expand(const Aabb& other) {
    min = min.cwiseMin(other.min);
    max = max.cwiseMax(other.max);
  }
  Aabb inflated(double r) const {
    Aabb b;
    b.min = min - Vec3::Constant(r);
    b.max = max + Vec3::Constant(r);
    return b;
  }
  bool intersects(const Aabb& other) const {
    return (min.array() <= other.max.array()).all() && (max.array() >= other.min.array()).all();
  }
  bool contains(const Aabb& other) const {
    return (min.array() <= other.min.array()).all() && (max.array() >= other.max.array()).all();
  }
  Vec3 center() const { return 0.5 * (min + max); }
};

/// Binary bounding-volume tree over a fixed set of boxes. Leaves hold one
/// item each; interior nodes split their items at the median along the
/// longest axis of the child centroids. Immutable after construction.
class Bvh {
 public:
  struct Node {
    Aabb box;
    int left = -1;
    int right = -1;
    int item = -1;  // >= 0 on leaves
    bool is_leaf() const { return item >= 0; }
  };

  explicit Bvh(const std::vector<Aabb>& boxes) {
    if (boxes.empty()) throw DataError("Bvh: cannot build over an empty box set");
    boxes_ = boxes;
    std::vector<int> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    nodes_.reserve(2 * boxes.size());
    root_ = build(order, 0, static_cast<int>(order.size()));
  }

  int root() const { return root_; }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// Collects all item ids whose box intersects the query box.
  void query(const Aabb& box, std::vector<int>& hits) const {
    std::vector<int> stack = {root_};
    while (!stack.empty()) {
      const Node& node = nodes_[stack.back()];
      stack.pop_back();
      if (!node.box.intersects(box)) continue;
      if (node.is_leaf()) {
        hits.push_back(node.item);
      } else {
        stack.push_back(node.left);
        stack.push_back(node.right);
      }
    }
  }

 private:
  int build(std::vector<int>& order, int lo, int hi) {
    Node node;
    for (int i = lo; i < hi; ++i) node.box.expand(boxes_[order[i]]);
    if (hi - lo == 1) {
      node.item = order[lo];
      nodes_.push_back(node);
      return static_cast<int>(nodes_.size()) - 1;
    }

    Aabb centroid_bounds;
    for (int i = lo; i < hi; ++i) centroid_bounds.expand(boxes_[order[i]].center());
    int axis = 0;
    (centroid_bounds.max - centroid_bounds.min).maxCoeff(&axis);

    const int mid = lo + (hi - lo) / 2;
    std::nth_element(order.begin() + lo, order.begin() + mid, order.begin() + hi,
                     [&](int a, int b) {
                       const double ca = boxes_[a].center()[axis];
                       const double cb = boxes_[b].center()[axis];
                       if (ca != cb) return ca < cb;
                       return a < b;
                     });
    node.left = build(order, lo, mid);
    node.right = build(order, mid, hi);
    nodes_.push_back(node);
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Aabb> boxes_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

inline Bvh build_bvh(const std::vector<Aabb>& boxes) { return Bvh(boxes); }

/// Directed facet-facet proximity edge. Each geometric pair within the
/// collision radius yields two entries, one per direction.
struct ContactPair {
  int sender = -1;
  int receiver = -1;
  double distance = 0.0;
};

namespace detail {

// Proximity samples of a facet: its vertices plus the centroid.
inline std::vector<Vec3> facet_samples(const std::vector<int>& cycle,
                                       const std::vector<Vec3>& positions) {
  std::vector<Vec3> s;
  s.reserve(cycle.size() + 1);
  Vec3 centroid = Vec3::Zero();
  for (int v : cycle) {
    s.push_back(positions[v]);
    centroid += positions[v];
  }
  s.push_back(centroid / static_cast<double>(cycle.size()));
  return s;
}

inline Aabb facet_box(const std::vector<int>& cycle, const std::vector<Vec3>& positions) {
  Aabb box;
  for (int v : cycle) box.expand(positions[v]);
  return box;
}

inline double point_set_distance(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  double best = std::numeric_limits<double>::infinity();
  for (const Vec3& p : a)
    for (const Vec3& q : b) best = std::min(best, (p - q).norm());
  return best;
}

inline bool share_vertex(const std::vector<int>& a, const std::vector<int>& b) {
  for (int v : a)
    for (int w : b)
      if (v == w) return true;
  return false;
}

}  // namespace detail

/// Minimum pairwise distance between the {vertices + centroid} sample sets of
/// two facets; the proximity measure used for contact detection.
inline double facet_proximity(const std::vector<int>& cycle_a, const std::vector<int>& cycle_b,
                              const std::vector<Vec3>& positions) {
  return detail::point_set_distance(detail::facet_samples(cycle_a, positions),
                                    detail::facet_samples(cycle_b, positions));
}

/// All cross-set facet pairs whose proximity measure is <= r, as directed
/// entries in both directions, sorted by (sender, receiver). A BVH over the
/// second set prunes candidates; results equal the brute-force scan exactly.
/// Pairs sharing a vertex are never reported.
inline std::vector<ContactPair> detect_face_pairs(const std::vector<std::vector<int>>& facets,
                                                  const std::vector<Vec3>& positions,
                                                  const std::vector<int>& ids_a,
                                                  const std::vector<int>& ids_b, double radius) {
  if (radius <= 0.0) throw DataError("detect_face_pairs: radius must be positive");
  std::vector<ContactPair> out;
  if (ids_a.empty() || ids_b.empty()) return out;

  std::vector<Aabb> boxes_b(ids_b.size());
  for (std::size_t i = 0; i < ids_b.size(); ++i)
    boxes_b[i] = detail::facet_box(facets[ids_b[i]], positions);
  Bvh tree(boxes_b);

  std::vector<int> hits;
  for (int fa : ids_a) {
    const Aabb query = detail::facet_box(facets[fa], positions).inflated(radius);
    hits.clear();
    tree.query(query, hits);
    const auto samples_a = detail::facet_samples(facets[fa], positions);
    for (int bi : hits) {
      const int fb = ids_b[bi];
      if (fb == fa || detail::share_vertex(facets[fa], facets[fb])) continue;
      const double d =
          detail::point_set_distance(samples_a, detail::facet_samples(facets[fb], positions));
      if (d <= radius) {
        out.push_back({fa, fb, d});
        out.push_back({fb, fa, d});
      }
    }
  }

  std::sort(out.begin(), out.end(), [](const ContactPair& x, const ContactPair& y) {
    if (x.sender != y.sender) return x.sender < y.sender;
    return x.receiver < y.receiver;
  });
  out.erase(std::unique(out.begin(), out.end(),
                        [](const ContactPair& x, const ContactPair& y) {
                          return x.sender == y.sender && x.receiver == y.receiver;
                        }),
            out.end());
  return out;
}

/// Translation-equivariant raw features of a directed facet pair: centroid
/// offset, per-vertex spanning vectors of both facets in canonical order,
/// then both unit normals. Spanning vectors are anchored at each facet's own
/// centroid; prose_anchor switches to the opposite facet's centroid.
inline VecX face_edge_features(int sender, int receiver,
                               const std::vector<std::vector<int>>& facets,
                               const std::vector<Vec3>& positions, bool prose_anchor = false) {
  const auto& cs = facets[sender];
  const auto& cr = facets[receiver];

  std::vector<Vec3> ps(cs.size()), pr(cr.size());
  for (std::size_t i = 0; i < cs.size(); ++i) ps[i] = positions[cs[i]];
  for (std::size_t i = 0; i < cr.size(); ++i) pr[i] = positions[cr[i]];

  const FacetGeometry gs = compute_facet_geometry(ps);
  const FacetGeometry gr = compute_facet_geometry(pr);
  const auto order_s = canonical_order(cs, ps);
  const auto order_r = canonical_order(cr, pr);

  const Vec3 anchor_s = prose_anchor ? gr.centroid : gs.centroid;
  const Vec3 anchor_r = prose_anchor ? gs.centroid : gr.centroid;

  VecX f(3 * (1 + cs.size() + cr.size() + 2));
  int k = 0;
  f.segment<3>(k) = gr.centroid - gs.centroid;
  k += 3;
  for (int slot : order_s) {
    f.segment<3>(k) = ps[slot] - anchor_s;
    k += 3;
  }
  for (int slot : order_r) {
    f.segment<3>(k) = pr[slot] - anchor_r;
    k += 3;
  }
  f.segment<3>(k) = gs.normal;
  k += 3;
  f.segment<3>(k) = gr.normal;
  return f;
}

}  // namespace maven
