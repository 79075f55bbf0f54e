#include <catch_amalgamated.hpp>

#include "maven/mesh.hpp"
#include "helpers.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <set>

using namespace maven;
using maven::testing::hex_block_mesh;
using maven::testing::two_tet_mesh;
using maven::testing::unit_hex_mesh;
using maven::testing::unit_tet_mesh;

namespace {

// Independent facet enumeration: count distinct sorted vertex keys and their
// incidence multiplicity directly from the cell list.
std::map<std::vector<int>, int> brute_force_face_counts(const Mesh& mesh) {
  std::map<std::vector<int>, int> counts;
  for (const auto& cell : mesh.cells) {
    if (mesh.cell_type == CellType::Tet) {
      for (const auto& lf : tet_local_faces()) {
        std::vector<int> key = {cell[lf[0]], cell[lf[1]], cell[lf[2]]};
        std::sort(key.begin(), key.end());
        ++counts[key];
      }
    } else {
      for (const auto& lf : hex_local_faces()) {
        std::vector<int> key = {cell[lf[0]], cell[lf[1]], cell[lf[2]], cell[lf[3]]};
        std::sort(key.begin(), key.end());
        ++counts[key];
      }
    }
  }
  return counts;
}

std::set<std::vector<int>> facet_key_set(const FacetSet& facets) {
  std::set<std::vector<int>> keys;
  for (const auto& cycle : facets.facets) {
    std::vector<int> key = cycle;
    std::sort(key.begin(), key.end());
    keys.insert(key);
  }
  return keys;
}

}  // namespace

TEST_CASE("single unit tet extracts 4 boundary facets", "[mesh]") {
  const FacetSet facets = extract_facets(unit_tet_mesh());
  REQUIRE(facets.num_facets() == 4);
  REQUIRE(facets.num_incidences() == 4);
  for (int f = 0; f < 4; ++f) {
    CHECK(facets.boundary_mask[f] == 1);
    CHECK(facets.facet_to_cells[f].size() == 1);
  }
  REQUIRE(facets.cell_to_facets[0].size() == 4);
}

TEST_CASE("two glued tets: 7 facets, one interior, 8 incidences", "[mesh]") {
  const Mesh mesh = two_tet_mesh();
  const FacetSet facets = extract_facets(mesh);

  // Derive the expectation independently by merging sorted face keys.
  const auto counts = brute_force_face_counts(mesh);
  REQUIRE(counts.size() == 7);
  int shared = 0;
  for (const auto& [key, n] : counts) shared += n == 2 ? 1 : 0;
  REQUIRE(shared == 1);

  REQUIRE(facets.num_facets() == 7);
  REQUIRE(facets.num_incidences() == 8);
  int interior = 0;
  for (int f = 0; f < facets.num_facets(); ++f) {
    if (!facets.boundary_mask[f]) {
      ++interior;
      CHECK(facets.facet_to_cells[f].size() == 2);
    }
  }
  CHECK(interior == 1);
}

TEST_CASE("single unit hex extracts 6 boundary quads", "[mesh]") {
  const FacetSet facets = extract_facets(unit_hex_mesh());
  REQUIRE(facets.num_facets() == 6);
  for (int f = 0; f < 6; ++f) {
    CHECK(facets.facets[f].size() == 4);
    CHECK(facets.boundary_mask[f] == 1);
  }
}

TEST_CASE("incidence count is 4|C| for tets and 6|C| for hexes", "[mesh]") {
  CHECK(extract_facets(two_tet_mesh()).num_incidences() == 2 * 4);
  const Mesh block = hex_block_mesh(3, 2, 2);
  const FacetSet facets = extract_facets(block);
  CHECK(facets.num_incidences() == 6 * block.num_cells());
  for (const auto& cf : facets.cell_to_facets) CHECK(cf.size() == 6);
  // Conservation: incidences counted from both sides agree.
  std::size_t from_facets = 0;
  for (const auto& fc : facets.facet_to_cells) from_facets += fc.size();
  CHECK(static_cast<int>(from_facets) == facets.num_incidences());
}

TEST_CASE("hex block boundary facet count matches the closed-form oracle", "[mesh]") {
  for (const auto [nx, ny, nz] : {std::array<int, 3>{1, 1, 1}, {2, 3, 4}, {4, 1, 2}}) {
    const FacetSet facets = extract_facets(hex_block_mesh(nx, ny, nz));
    int boundary = 0;
    for (auto b : facets.boundary_mask) boundary += b;
    CHECK(boundary == 2 * (nx * ny + ny * nz + nx * nz));
  }
}

TEST_CASE("facet deduplication is independent of cell ordering", "[mesh]") {
  Mesh mesh = hex_block_mesh(2, 2, 2);
  const auto keys_before = facet_key_set(extract_facets(mesh));
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(mesh.cells.begin(), mesh.cells.end(), rng);
    CHECK(facet_key_set(extract_facets(mesh)) == keys_before);
  }
}

TEST_CASE("non-manifold face is rejected", "[mesh]") {
  Mesh mesh = two_tet_mesh();
  mesh.vertices.push_back(Vec3(0.5, 0.5, -1.0));
  mesh.cells.push_back({5, 1, 2, 3});  // third cell on the shared face
  mesh.node_type.push_back(NodeType::Normal);
  mesh.body_id.push_back(0);
  CHECK_THROWS_AS(extract_facets(mesh), TopologyError);
}

TEST_CASE("arity mismatch is rejected", "[mesh]") {
  Mesh mesh = unit_tet_mesh();
  mesh.cells[0].push_back(0);
  CHECK_THROWS_AS(extract_facets(mesh), TopologyError);
}

TEST_CASE("canonical order of a scalene triangle follows centroid distances", "[mesh]") {
  // Centroid (2, 1, 0)/... for vertices below; distances computed by hand:
  //   p0=(0,0,0), p1=(4,0,0), p2=(0,3,0); centroid=(4/3, 1, 0)
  //   d0 = sqrt(16/9 + 1) ~ 1.667, d1 = sqrt(64/9+1) ~ 2.848, d2 = sqrt(16/9+4) ~ 2.404
  const std::vector<int> ids = {10, 11, 12};
  const std::vector<Vec3> pos = {Vec3(0, 0, 0), Vec3(4, 0, 0), Vec3(0, 3, 0)};
  const auto order = canonical_order(ids, pos);
  REQUIRE(order == std::vector<int>{0, 2, 1});
}

TEST_CASE("canonical order ties break by ascending global id", "[mesh]") {
  const std::vector<int> ids = {42, 7, 19};
  const std::vector<Vec3> pos = {Vec3(1, 0, 0), Vec3(-0.5, std::sqrt(3) / 2, 0),
                                 Vec3(-0.5, -std::sqrt(3) / 2, 0)};
  const auto order = canonical_order(ids, pos);
  // Equilateral: all distances tie, so slots sort by global id 7 < 19 < 42.
  REQUIRE(order == std::vector<int>{1, 2, 0});
}

TEST_CASE("canonical order is invariant under storage permutation", "[mesh]") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> ids = {5, 9, 2, 14};
    std::vector<Vec3> pos(4);
    for (auto& p : pos) p = Vec3(d(rng), d(rng), d(rng));

    const auto order = canonical_order(ids, pos);
    std::vector<int> canonical_ids(4);
    for (int i = 0; i < 4; ++i) canonical_ids[i] = ids[order[i]];

    std::vector<int> perm = {0, 1, 2, 3};
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> ids2(4);
    std::vector<Vec3> pos2(4);
    for (int i = 0; i < 4; ++i) {
      ids2[i] = ids[perm[i]];
      pos2[i] = pos[perm[i]];
    }
    const auto order2 = canonical_order(ids2, pos2);
    std::vector<int> canonical_ids2(4);
    for (int i = 0; i < 4; ++i) canonical_ids2[i] = ids2[order2[i]];

    REQUIRE(canonical_ids2 == canonical_ids);
  }
}

TEST_CASE("applying the canonical order twice is idempotent", "[mesh]") {
  const std::vector<int> ids = {10, 11, 12, 13};
  const std::vector<Vec3> pos = {Vec3(0, 0, 0), Vec3(2, 0, 0), Vec3(0, 1.5, 0), Vec3(0, 0, 0.5)};
  const auto order = canonical_order(ids, pos);
  std::vector<int> ids2(4);
  std::vector<Vec3> pos2(4);
  for (int i = 0; i < 4; ++i) {
    ids2[i] = ids[order[i]];
    pos2[i] = pos[order[i]];
  }
  const auto order2 = canonical_order(ids2, pos2);
  REQUIRE(order2 == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("validate_mesh accepts a unit tet", "[mesh]") {
  CHECK(validate_mesh(unit_tet_mesh()).ok());
}

TEST_CASE("validate_mesh flags out-of-range indices", "[mesh]") {
  Mesh mesh = unit_tet_mesh();
  mesh.cells[0][3] = 4;  // == |V|
  const auto report = validate_mesh(mesh);
  REQUIRE_FALSE(report.ok());
  bool found = false;
  for (const auto& issue : report.issues) found |= issue.find("out of range") != std::string::npos;
  CHECK(found);
}

TEST_CASE("validate_mesh flags arity mismatches", "[mesh]") {
  Mesh mesh = unit_tet_mesh();
  mesh.cell_type = CellType::Hex;  // tet cells declared as hex
  const auto report = validate_mesh(mesh);
  REQUIRE_FALSE(report.ok());
  bool found = false;
  for (const auto& issue : report.issues) found |= issue.find("arity") != std::string::npos;
  CHECK(found);
}

TEST_CASE("validate_mesh flags cross-body cells and non-finite vertices", "[mesh]") {
  Mesh mesh = unit_tet_mesh();
  mesh.body_id[2] = 1;
  auto report = validate_mesh(mesh);
  REQUIRE_FALSE(report.ok());

  Mesh mesh2 = unit_tet_mesh();
  mesh2.vertices[1][0] = std::numeric_limits<double>::quiet_NaN();
  report = validate_mesh(mesh2);
  REQUIRE_FALSE(report.ok());
}

TEST_CASE("facet cycles are oriented outward from the lowest incident cell", "[mesh]") {
  const Mesh mesh = unit_hex_mesh();
  const FacetSet facets = extract_facets(mesh);
  const Vec3 center(0.5, 0.5, 0.5);
  for (const auto& cycle : facets.facets) {
    Vec3 centroid = Vec3::Zero();
    for (int v : cycle) centroid += mesh.vertices[v];
    centroid /= 4.0;
    Vec3 n = Vec3::Zero();
    for (std::size_t i = 0; i < cycle.size(); ++i) {
      n += (mesh.vertices[cycle[i]] - centroid)
               .cross(mesh.vertices[cycle[(i + 1) % cycle.size()]] - centroid);
    }
    CHECK(n.dot(centroid - center) > 0.0);
  }
}
