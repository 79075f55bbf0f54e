#pragma once

#include "maven/autodiff.hpp"
#include "maven/common.hpp"
#include "maven/contact.hpp"
#include "maven/geometry.hpp"
#include "maven/mesh.hpp"
#include "maven/nn.hpp"
#include "maven/normalizer.hpp"

#include <json.hpp>

#include <array>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace maven {

/// Ablation switches mirroring the three reduced model variants:
///   A: geo_agg_learned=false    -> uniform aggregation coefficients
///   B: geo_feats_on=false       -> zeroed element geometry inputs
///   C: explicit_elements=false  -> vertex-only message passing fallback
struct AblationFlags {
  bool geo_agg_learned = true;
  bool geo_feats_on = true;
  bool explicit_elements = true;
};

struct ModelConfig {
  CellType cell_type = CellType::Hex;
  int latent_dim = 48;
  int num_layers = 6;
  std::vector<int> mlp_hidden = {48, 48};
  int num_quantities = 1;
  double contact_radius = 0.3;
  bool self_contact = false;
  bool contact_prose_anchor = false;
  AblationFlags ablation;

  /// Small configuration sized for CPU-only runs.
  static ModelConfig desk(CellType type, int quantities) {
    ModelConfig c;
    c.cell_type = type;
    c.num_quantities = quantities;
    return c;
  }
  /// Full-scale presets; both appear in the upstream experiment logs, so
  /// neither is treated as canonical.
  static ModelConfig full_scale_128(CellType type, int quantities) {
    ModelConfig c;
    c.cell_type = type;
    c.num_quantities = quantities;
    c.latent_dim = 128;
    c.num_layers = 15;
    c.mlp_hidden = {128, 128};
    return c;
  }
  static ModelConfig full_scale_96(CellType type, int quantities) {
    ModelConfig c;
    c.cell_type = type;
    c.num_quantities = quantities;
    c.latent_dim = 96;
    c.num_layers = 15;
    c.mlp_hidden = {96, 96};
    return c;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["cell_type"] = cell_type == CellType::Tet ? "tet" : "hex";
    j["latent_dim"] = latent_dim;
    j["num_layers"] = num_layers;
    j["mlp_hidden"] = mlp_hidden;
    j["num_quantities"] = num_quantities;
    j["contact_radius"] = contact_radius;
    j["self_contact"] = self_contact;
    j["contact_prose_anchor"] = contact_prose_anchor;
    j["geo_agg"] = ablation.geo_agg_learned ? "learned" : "uniform";
    j["geo_feats"] = ablation.geo_feats_on ? "on" : "zero";
    j["explicit_elements"] = ablation.explicit_elements;
    return j;
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    const std::string ct = j.at("cell_type").get<std::string>();
    if (ct != "tet" && ct != "hex") throw DataError("ModelConfig: cell_type must be tet or hex");
    c.cell_type = ct == "tet" ? CellType::Tet : CellType::Hex;
    c.latent_dim = j.at("latent_dim").get<int>();
    c.num_layers = j.at("num_layers").get<int>();
    c.mlp_hidden = j.at("mlp_hidden").get<std::vector<int>>();
    c.num_quantities = j.at("num_quantities").get<int>();
    c.contact_radius = j.at("contact_radius").get<double>();
    c.self_contact = j.value("self_contact", false);
    c.contact_prose_anchor = j.value("contact_prose_anchor", false);
    c.ablation.geo_agg_learned = j.value("geo_agg", "learned") == "learned";
    c.ablation.geo_feats_on = j.value("geo_feats", "on") == "on";
    c.ablation.explicit_elements = j.value("explicit_elements", true);
    if (c.latent_dim <= 0 || c.num_layers < 1)
      throw DataError("ModelConfig: latent_dim must be > 0 and num_layers >= 1");
    return c;
  }
};

/// Inputs of one prediction step. On the first frame of a trajectory set
/// x_prev = x_cur (the zero-velocity convention).
struct StepInput {
  Mat x_prev;          // V x 3
  Mat x_cur;           // V x 3
  Mat q_cur;           // V x Q
  Mat script_target;   // V x 3; row v is the prescribed x^{t+1} where scripted
};

struct FeatureNormalizers {
  Normalizer vertex_in;
  Normalizer cell_in;
  Normalizer facet_in;
  Normalizer output;

  nlohmann::json to_json() const {
    return {{"vertex_in", vertex_in.to_json()},
            {"cell_in", cell_in.to_json()},
            {"facet_in", facet_in.to_json()},
            {"output", output.to_json()}};
  }
  static FeatureNormalizers from_json(const nlohmann::json& j) {
    FeatureNormalizers n;
    n.vertex_in = Normalizer::from_json(j.at("vertex_in"));
    n.cell_in = Normalizer::from_json(j.at("cell_in"));
    n.facet_in = Normalizer::from_json(j.at("facet_in"));
    n.output = Normalizer::from_json(j.at("output"));
    return n;
  }
};

namespace model {

inline int vertex_feature_dim(const ModelConfig& cfg) {
  int d = 3 + 3 + cfg.num_quantities;  // node-type one-hot, velocity, quantities
  if (!cfg.ablation.explicit_elements) d += 4 + 4 + 4;  // avg cell/facet geo + script
  return d;
}

inline int contact_feature_dim(const ModelConfig& cfg) {
  const int m = vertices_per_facet(cfg.cell_type);
  return 3 * (1 + 2 * m + 2);
}

inline int output_dim(const ModelConfig& cfg) { return 3 + cfg.num_quantities; }

/// MLP shapes of every named operator in the network.
inline std::map<std::string, nn::MlpSpec> mlp_catalog(const ModelConfig& cfg) {
  const int lat = cfg.latent_dim;
  const int k = vertices_per_cell(cfg.cell_type);
  const int m = vertices_per_facet(cfg.cell_type);
  const auto& hid = cfg.mlp_hidden;

  std::map<std::string, nn::MlpSpec> cat;
  cat["dec/main"] = {lat, hid, output_dim(cfg), false};
  if (cfg.ablation.explicit_elements) {
    cat["enc/vertex"] = {vertex_feature_dim(cfg), hid, lat, true};
    cat["enc/cell"] = {4, hid, lat, true};
    cat["enc/facet"] = {4, hid, lat, true};
    cat["enc/script_facet"] = {4 * m, hid, lat, true};
    cat["enc/contact_edge"] = {contact_feature_dim(cfg), hid, lat, true};
    // Scorers emit raw softmax logits; a trailing layer_norm would collapse
    // the width-1 incidence score to a constant, so none of them carry one.
    cat["coeff/cell_scorer"] = {3 * k, hid, k, false};
    cat["coeff/facet_scorer"] = {3 * m, hid, m, false};
    cat["coeff/incidence_scorer"] = {7, hid, 1, false};
    cat["proc/contact_fuse"] = {2 * lat, hid, lat, true};
    for (int l = 0; l < cfg.num_layers; ++l) {
      const std::string p = "proc/l" + std::to_string(l);
      cat[p + "/v2c"] = {2 * lat, hid, lat, true};
      cat[p + "/v2f"] = {2 * lat, hid, lat, true};
      cat[p + "/to_f"] = {4 * lat, hid, lat, true};
      cat[p + "/to_c"] = {2 * lat, hid, lat, true};
      cat[p + "/to_v"] = {2 * lat, hid, lat, true};
      cat[p + "/ffn"] = {lat, {2 * lat}, lat, false};
    }
  } else {
    cat["mc/enc/vertex"] = {vertex_feature_dim(cfg), hid, lat, true};
    cat["mc/enc/edge"] = {8, hid, lat, true};
    for (int l = 0; l < cfg.num_layers; ++l) {
      const std::string p = "mc/l" + std::to_string(l);
      cat[p + "/edge"] = {3 * lat, hid, lat, true};
      cat[p + "/node"] = {2 * lat, hid, lat, true};
    }
  }
  return cat;
}

inline void register_model_params(nn::ParamStore& store, const ModelConfig& cfg,
                                  std::uint64_t seed) {
  for (const auto& [name, spec] : mlp_catalog(cfg)) nn::register_mlp(store, name, spec, seed);
}

// ---------------------------------------------------------------------------
// Per-step derived quantities
// ---------------------------------------------------------------------------

struct StepGeometry {
  std::vector<Vec3> positions;  // current frame
  std::vector<CellGeometry> cells_cur, cells_ref;
  std::vector<FacetGeometry> facets_cur, facets_ref;
  std::vector<std::vector<int>> cell_orders;   // canonical slot permutations
  std::vector<std::vector<int>> facet_orders;  // at current positions
};

inline std::vector<Vec3> to_points(const Mat& x) {
  std::vector<Vec3> p(x.rows());
  for (int i = 0; i < x.rows(); ++i) p[i] = x.row(i).transpose();
  return p;
}

inline StepGeometry compute_step_geometry(const Mesh& mesh, const FacetSet& facets,
                                          const Mat& x_cur) {
  StepGeometry g;
  g.positions = to_points(x_cur);

  auto element_positions = [](const std::vector<int>& ids, const std::vector<Vec3>& pos) {
    std::vector<Vec3> p(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) p[i] = pos[ids[i]];
    return p;
  };

  g.cells_cur.reserve(mesh.num_cells());
  g.cells_ref.reserve(mesh.num_cells());
  g.cell_orders.reserve(mesh.num_cells());
  for (const auto& cell : mesh.cells) {
    const auto cur = element_positions(cell, g.positions);
    g.cells_cur.push_back(compute_cell_geometry(cur, mesh.cell_type));
    g.cells_ref.push_back(
        compute_cell_geometry(element_positions(cell, mesh.vertices), mesh.cell_type));
    g.cell_orders.push_back(canonical_order(cell, cur));
  }
  g.facets_cur.reserve(facets.num_facets());
  g.facets_ref.reserve(facets.num_facets());
  g.facet_orders.reserve(facets.num_facets());
  for (const auto& cycle : facets.facets) {
    const auto cur = element_positions(cycle, g.positions);
    g.facets_cur.push_back(compute_facet_geometry(cur));
    g.facets_ref.push_back(compute_facet_geometry(element_positions(cycle, mesh.vertices)));
    g.facet_orders.push_back(canonical_order(cycle, cur));
  }
  return g;
}

/// Raw (unstandardized) per-vertex inputs: node-type one-hot, velocity,
/// physical quantities. The vertex-graph fallback additionally appends the
/// incident-element geometry averages and the scripted-motion feature.
inline Mat vertex_input_features(const Mesh& mesh, const FacetSet& facets, const StepGeometry& geo,
                                 const StepInput& in, const ModelConfig& cfg) {
  const int nv = mesh.num_vertices();
  Mat f = Mat::Zero(nv, vertex_feature_dim(cfg));
  for (int v = 0; v < nv; ++v) {
    f(v, static_cast<int>(mesh.node_type[v])) = 1.0;
    f.block(v, 3, 1, 3) = in.x_cur.row(v) - in.x_prev.row(v);
    if (cfg.num_quantities > 0) f.block(v, 6, 1, cfg.num_quantities) = in.q_cur.row(v);
  }
  if (!cfg.ablation.explicit_elements) {
    const int base = 6 + cfg.num_quantities;
    std::vector<int> cell_deg(nv, 0), facet_deg(nv, 0);
    for (int c = 0; c < mesh.num_cells(); ++c) {
      Eigen::RowVector4d quad(geo.cells_cur[c].volume, geo.cells_cur[c].surface_area,
                              geo.cells_ref[c].volume, geo.cells_ref[c].surface_area);
      for (int v : mesh.cells[c]) {
        f.block(v, base, 1, 4) += quad;
        ++cell_deg[v];
      }
    }
    for (int fi = 0; fi < facets.num_facets(); ++fi) {
      Eigen::RowVector4d quad(geo.facets_cur[fi].area, geo.facets_cur[fi].perimeter,
                              geo.facets_ref[fi].area, geo.facets_ref[fi].perimeter);
      for (int v : facets.facets[fi]) {
        f.block(v, base + 4, 1, 4) += quad;
        ++facet_deg[v];
      }
    }
    for (int v = 0; v < nv; ++v) {
      if (cell_deg[v] > 0) f.block(v, base, 1, 4) /= static_cast<double>(cell_deg[v]);
      if (facet_deg[v] > 0) f.block(v, base + 4, 1, 4) /= static_cast<double>(facet_deg[v]);
      if (mesh.node_type[v] == NodeType::Scripted) {
        f(v, base + 8) = 1.0;
        f.block(v, base + 9, 1, 3) = in.script_target.row(v) - in.x_cur.row(v);
      }
    }
    if (!cfg.ablation.geo_feats_on) f.middleCols(base, 8).setZero();
  }
  return f;
}

/// Scripted-motion vertex feature: [1, x_script - x_cur] where scripted,
/// the zero 4-vector otherwise.
inline Mat script_vertex_features(const Mesh& mesh, const StepInput& in) {
  Mat f = Mat::Zero(mesh.num_vertices(), 4);
  for (int v = 0; v < mesh.num_vertices(); ++v) {
    if (mesh.node_type[v] == NodeType::Scripted) {
      f(v, 0) = 1.0;
      f.block(v, 1, 1, 3) = in.script_target.row(v) - in.x_cur.row(v);
    }
  }
  return f;
}

inline Mat cell_feature_matrix(const StepGeometry& geo) {
  Mat f(static_cast<int>(geo.cells_cur.size()), 4);
  for (std::size_t c = 0; c < geo.cells_cur.size(); ++c) {
    f.row(static_cast<int>(c)) << geo.cells_cur[c].volume, geo.cells_cur[c].surface_area,
        geo.cells_ref[c].volume, geo.cells_ref[c].surface_area;
  }
  return f;
}

inline Mat facet_feature_matrix(const StepGeometry& geo) {
  Mat f(static_cast<int>(geo.facets_cur.size()), 4);
  for (std::size_t i = 0; i < geo.facets_cur.size(); ++i) {
    f.row(static_cast<int>(i)) << geo.facets_cur[i].area, geo.facets_cur[i].perimeter,
        geo.facets_ref[i].area, geo.facets_ref[i].perimeter;
  }
  return f;
}

// ---------------------------------------------------------------------------
// Contact edges
// ---------------------------------------------------------------------------

struct ContactEdges {
  std::vector<ContactPair> pairs;  // directed, sorted by (sender, receiver)
  Mat features;                    // pairs x contact_feature_dim, raw
  std::vector<int> receiver;       // receiving facet per pair
};

inline int facet_body(const FacetSet& facets, const Mesh& mesh, int fid) {
  return mesh.body_id[facets.facets[fid][0]];
}

/// Boundary-facet contact pairs across distinct bodies (plus same-body pairs
/// when self_contact is set), with the raw directed-edge features attached.
inline ContactEdges build_contact_edges(const Mesh& mesh, const FacetSet& facets,
                                        const StepGeometry& geo, const ModelConfig& cfg) {
  std::map<int, std::vector<int>> body_facets;
  for (int f = 0; f < facets.num_facets(); ++f) {
    if (facets.boundary_mask[f]) body_facets[facet_body(facets, mesh, f)].push_back(f);
  }

  ContactEdges out;
  std::vector<int> bodies;
  for (const auto& [b, ids] : body_facets) bodies.push_back(b);
  for (std::size_t i = 0; i < bodies.size(); ++i) {
    for (std::size_t j = i + 1; j < bodies.size(); ++j) {
      auto pairs = detect_face_pairs(facets.facets, geo.positions, body_facets[bodies[i]],
                                     body_facets[bodies[j]], cfg.contact_radius);
      out.pairs.insert(out.pairs.end(), pairs.begin(), pairs.end());
    }
    if (cfg.self_contact) {
      auto pairs = detect_face_pairs(facets.facets, geo.positions, body_facets[bodies[i]],
                                     body_facets[bodies[i]], cfg.contact_radius);
      out.pairs.insert(out.pairs.end(), pairs.begin(), pairs.end());
    }
  }
  std::sort(out.pairs.begin(), out.pairs.end(), [](const ContactPair& a, const ContactPair& b) {
    if (a.sender != b.sender) return a.sender < b.sender;
    return a.receiver < b.receiver;
  });

  out.features.resize(static_cast<int>(out.pairs.size()), contact_feature_dim(cfg));
  out.receiver.resize(out.pairs.size());
  for (std::size_t e = 0; e < out.pairs.size(); ++e) {
    out.features.row(static_cast<int>(e)) =
        face_edge_features(out.pairs[e].sender, out.pairs[e].receiver, facets.facets,
                           geo.positions, cfg.contact_prose_anchor)
            .transpose();
    out.receiver[e] = out.pairs[e].receiver;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation coefficients
// ---------------------------------------------------------------------------

/// Convex aggregation weights shared by every processor layer. Slot weights
/// normalize over an element's vertices; incidence weights share one raw
/// score per (cell, facet) pair and normalize per consuming side; vertex-side
/// disaggregation weights renormalize the raw cell-slot scores over each
/// vertex's incident cells.
struct AggCoeffs {
  ad::Value cell_slot;   // C x K, rows sum to 1
  ad::Value facet_slot;  // F x M, rows sum to 1
  ad::Value pair_fc;     // P x 1, sums to 1 per facet
  ad::Value pair_cf;     // P x 1, sums to 1 per cell
  ad::Value vert_cell;   // Pv x 1, sums to 1 per vertex

  std::vector<int> pair_facet, pair_cell;    // incidence pair -> facet / cell
  std::vector<int> vpair_vertex, vpair_cell; // vertex-cell pair -> vertex / cell
  std::vector<int> vpair_flat_score;         // index into flattened cell scores

  std::vector<std::vector<int>> cell_slot_vertex;   // [K][C] canonical slot -> vertex
  std::vector<std::vector<int>> facet_slot_vertex;  // [M][F]
};

inline AggCoeffs compute_agg_coeffs(ad::Tape& tape, const nn::BoundParams& params,
                                    const std::map<std::string, nn::MlpSpec>& cat,
                                    const ModelConfig& cfg, const Mesh& mesh,
                                    const FacetSet& facets, const StepGeometry& geo) {
  const int k = vertices_per_cell(cfg.cell_type);
  const int m = vertices_per_facet(cfg.cell_type);
  const int nc = mesh.num_cells();
  const int nf = facets.num_facets();
  const int nv = mesh.num_vertices();

  AggCoeffs out;

  // Canonical slot -> global vertex id tables.
  out.cell_slot_vertex.assign(k, std::vector<int>(nc));
  for (int c = 0; c < nc; ++c)
    for (int s = 0; s < k; ++s) out.cell_slot_vertex[s][c] = mesh.cells[c][geo.cell_orders[c][s]];
  out.facet_slot_vertex.assign(m, std::vector<int>(nf));
  for (int f = 0; f < nf; ++f)
    for (int s = 0; s < m; ++s)
      out.facet_slot_vertex[s][f] = facets.facets[f][geo.facet_orders[f][s]];

  // Incidence pair list, facet-major and deterministic.
  for (int f = 0; f < nf; ++f) {
    for (int c : facets.facet_to_cells[f]) {
      out.pair_facet.push_back(f);
      out.pair_cell.push_back(c);
    }
  }
  const int np = static_cast<int>(out.pair_facet.size());

  // Vertex-major (vertex, cell, slot) incidence with raw-score indices.
  {
    std::vector<std::vector<std::array<int, 2>>> per_vertex(nv);
    for (int c = 0; c < nc; ++c)
      for (int s = 0; s < k; ++s)
        per_vertex[out.cell_slot_vertex[s][c]].push_back({c, c * k + s});
    for (int v = 0; v < nv; ++v) {
      for (const auto& [c, flat] : per_vertex[v]) {
        out.vpair_vertex.push_back(v);
        out.vpair_cell.push_back(c);
        out.vpair_flat_score.push_back(flat);
      }
    }
  }

  if (!cfg.ablation.geo_agg_learned) {
    // Uniform weights (degree averaging).
    out.cell_slot = tape.constant(Mat::Constant(nc, k, 1.0 / k));
    out.facet_slot = tape.constant(Mat::Constant(nf, m, 1.0 / m));
    Mat fc(np, 1), cf(np, 1);
    for (int p = 0; p < np; ++p) {
      fc(p, 0) = 1.0 / static_cast<double>(facets.facet_to_cells[out.pair_facet[p]].size());
      cf(p, 0) = 1.0 / static_cast<double>(facets.cell_to_facets[out.pair_cell[p]].size());
    }
    out.pair_fc = tape.constant(std::move(fc));
    out.pair_cf = tape.constant(std::move(cf));
    std::vector<int> deg(nv, 0);
    for (int v : out.vpair_vertex) ++deg[v];
    Mat vc(static_cast<int>(out.vpair_vertex.size()), 1);
    for (std::size_t i = 0; i < out.vpair_vertex.size(); ++i)
      vc(static_cast<int>(i), 0) = 1.0 / static_cast<double>(deg[out.vpair_vertex[i]]);
    out.vert_cell = tape.constant(std::move(vc));
    return out;
  }

  // Element-local coordinate inputs: concat of centroid-relative vertex
  // vectors in canonical order.
  Mat cell_in(nc, 3 * k);
  for (int c = 0; c < nc; ++c)
    for (int s = 0; s < k; ++s)
      cell_in.block(c, 3 * s, 1, 3) =
          geo.cells_cur[c].local_vectors[geo.cell_orders[c][s]].transpose();
  Mat facet_in(nf, 3 * m);
  for (int f = 0; f < nf; ++f)
    for (int s = 0; s < m; ++s)
      facet_in.block(f, 3 * s, 1, 3) =
          geo.facets_cur[f].local_vectors[geo.facet_orders[f][s]].transpose();

  ad::Value cell_scores = nn::mlp_apply(tape, params, "coeff/cell_scorer",
                                        cat.at("coeff/cell_scorer"), tape.constant(cell_in));
  ad::Value facet_scores = nn::mlp_apply(tape, params, "coeff/facet_scorer",
                                         cat.at("coeff/facet_scorer"), tape.constant(facet_in));
  out.cell_slot = tape.softmax_rows(cell_scores);
  out.facet_slot = tape.softmax_rows(facet_scores);

  // Incidence pair scores from the relative cell-facet placement.
  Mat pair_in(np, 7);
  for (int p = 0; p < np; ++p) {
    const int f = out.pair_facet[p];
    const int c = out.pair_cell[p];
    pair_in.block(p, 0, 1, 3) =
        (geo.facets_cur[f].centroid - geo.cells_cur[c].centroid).transpose();
    pair_in.block(p, 3, 1, 3) = geo.facets_cur[f].normal.transpose();
    pair_in(p, 6) = geo.facets_cur[f].area / geo.cells_cur[c].surface_area;
  }
  ad::Value pair_scores =
      nn::mlp_apply(tape, params, "coeff/incidence_scorer", cat.at("coeff/incidence_scorer"),
                    tape.constant(pair_in));
  out.pair_fc = tape.segment_softmax(pair_scores, out.pair_facet, nf);
  out.pair_cf = tape.segment_softmax(pair_scores, out.pair_cell, nc);

  // Disaggregation weights: raw cell-slot scores regrouped per vertex.
  ad::Value flat_scores = tape.flatten(cell_scores);
  ad::Value vert_scores = tape.gather_rows(flat_scores, out.vpair_flat_score);
  out.vert_cell = tape.segment_softmax(vert_scores, out.vpair_vertex, nv);
  return out;
}

/// Sum over canonical slots of coeff[:, s] * h[slot_vertex[s]]; the weighted
/// aggregation of vertex latents into elements.
inline ad::Value weighted_slot_sum(ad::Tape& tape, ad::Value h_vertices,
                                   const std::vector<std::vector<int>>& slot_vertex,
                                   ad::Value coeff) {
  ad::Value acc;
  for (std::size_t s = 0; s < slot_vertex.size(); ++s) {
    ad::Value term = tape.scale_rows(tape.gather_rows(h_vertices, slot_vertex[s]),
                                     tape.slice_cols(coeff, static_cast<int>(s), 1));
    acc = s == 0 ? term : tape.add(acc, term);
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct ForwardTrace {
  Mat h_v0, h_vL;
  Mat h_c_enc, h_f_enc;
  struct CoeffGroup {
    std::string name;
    VecX values;
    std::vector<int> segment;
    int num_segments = 0;
  };
  std::vector<CoeffGroup> coeff_groups;
  int num_contact_edges = 0;
};

struct ForwardResult {
  ad::Value delta_std_value;  // live tape value, V x (3+Q), standardized
  Mat delta_std;              // copy of the above
  Mat x_next;                 // V x 3, overrides applied
  Mat q_next;                 // V x Q
};

namespace detail {

inline void trace_matrix_group(ForwardTrace* trace, const std::string& name, const Mat& coeff) {
  if (!trace) return;
  ForwardTrace::CoeffGroup g;
  g.name = name;
  g.values = Eigen::Map<const VecX>(coeff.data(), coeff.size());
  g.segment.resize(coeff.size());
  for (int r = 0; r < coeff.rows(); ++r)
    for (int c = 0; c < coeff.cols(); ++c) g.segment[r * coeff.cols() + c] = r;
  g.num_segments = static_cast<int>(coeff.rows());
  trace->coeff_groups.push_back(std::move(g));
}

inline void trace_column_group(ForwardTrace* trace, const std::string& name, const Mat& col,
                               const std::vector<int>& segment, int num_segments) {
  if (!trace) return;
  ForwardTrace::CoeffGroup g;
  g.name = name;
  g.values = col.col(0);
  g.segment = segment;
  g.num_segments = num_segments;
  trace->coeff_groups.push_back(std::move(g));
}

/// Undirected vertex adjacency from cell edges, as directed entries sorted
/// by (src, dst).
inline std::vector<std::array<int, 2>> mesh_edges(const Mesh& mesh) {
  std::set<std::array<int, 2>> undirected;
  const auto local = cell_local_edges(mesh.cell_type);
  for (const auto& cell : mesh.cells) {
    for (const auto& e : local) {
      int a = cell[e[0]], b = cell[e[1]];
      if (a > b) std::swap(a, b);
      undirected.insert({a, b});
    }
  }
  std::vector<std::array<int, 2>> directed;
  directed.reserve(2 * undirected.size());
  for (const auto& e : undirected) {
    directed.push_back({e[0], e[1]});
    directed.push_back({e[1], e[0]});
  }
  std::sort(directed.begin(), directed.end());
  return directed;
}

inline ForwardResult decode_and_update(ad::Tape& tape, const nn::BoundParams& params,
                                       const std::map<std::string, nn::MlpSpec>& cat,
                                       const ModelConfig& cfg, const Mesh& mesh,
                                       const StepInput& in, const FeatureNormalizers& norms,
                                       ad::Value h_vertices) {
  ForwardResult out;
  out.delta_std_value = nn::mlp_apply(tape, params, "dec/main", cat.at("dec/main"), h_vertices);
  out.delta_std = out.delta_std_value.val();

  const Mat delta = norms.output.destandardize(out.delta_std);
  out.x_next = in.x_cur + delta.leftCols(3);
  out.q_next = in.q_cur + delta.rightCols(cfg.num_quantities);
  for (int v = 0; v < mesh.num_vertices(); ++v) {
    if (mesh.node_type[v] == NodeType::Scripted) {
      out.x_next.row(v) = in.script_target.row(v);
    } else if (mesh.node_type[v] == NodeType::Obstacle) {
      out.x_next.row(v) = in.x_cur.row(v);
    }
  }
  return out;
}

inline ForwardResult forward_vertex_graph(ad::Tape& tape, const nn::BoundParams& params,
                                          const std::map<std::string, nn::MlpSpec>& cat,
                                          const ModelConfig& cfg, const Mesh& mesh,
                                          const FacetSet& facets, const StepGeometry& geo,
                                          const StepInput& in, const FeatureNormalizers& norms,
                                          ForwardTrace* trace) {
  const Mat vfeat = norms.vertex_in.standardize(vertex_input_features(mesh, facets, geo, in, cfg));
  ad::Value h = nn::mlp_apply(tape, params, "mc/enc/vertex", cat.at("mc/enc/vertex"),
                              tape.constant(vfeat));
  if (trace) trace->h_v0 = h.val();

  const auto edges = mesh_edges(mesh);
  const int ne = static_cast<int>(edges.size());
  Mat efeat(ne, 8);
  std::vector<int> src(ne), dst(ne);
  for (int e = 0; e < ne; ++e) {
    src[e] = edges[e][0];
    dst[e] = edges[e][1];
    const Eigen::RowVector3d d_cur = in.x_cur.row(dst[e]) - in.x_cur.row(src[e]);
    const Eigen::RowVector3d d_ref =
        (mesh.vertices[dst[e]] - mesh.vertices[src[e]]).transpose();
    efeat.block(e, 0, 1, 3) = d_cur;
    efeat(e, 3) = d_cur.norm();
    efeat.block(e, 4, 1, 3) = d_ref;
    efeat(e, 7) = d_ref.norm();
  }
  ad::Value h_edge =
      nn::mlp_apply(tape, params, "mc/enc/edge", cat.at("mc/enc/edge"), tape.constant(efeat));

  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "mc/l" + std::to_string(l);
    ad::Value msg = nn::mlp_apply(
        tape, params, p + "/edge", cat.at(p + "/edge"),
        tape.concat_cols({h_edge, tape.gather_rows(h, src), tape.gather_rows(h, dst)}));
    ad::Value agg = tape.segment_sum(msg, dst, mesh.num_vertices());
    h = tape.add(h, nn::mlp_apply(tape, params, p + "/node", cat.at(p + "/node"),
                                  tape.concat_cols({h, agg})));
  }
  if (trace) trace->h_vL = h.val();
  return decode_and_update(tape, params, cat, cfg, mesh, in, norms, h);
}

}  // namespace detail

/// One full encoder -> L-layer processor -> decoder pass. Pure function of
/// (inputs, parameters); contact edges and aggregation coefficients are
/// computed once per call and shared across layers.
inline ForwardResult forward(ad::Tape& tape, const nn::BoundParams& params,
                             const ModelConfig& cfg, const Mesh& mesh, const FacetSet& facets,
                             const StepInput& in, const FeatureNormalizers& norms,
                             ForwardTrace* trace = nullptr) {
  const auto cat = mlp_catalog(cfg);
  const StepGeometry geo = compute_step_geometry(mesh, facets, in.x_cur);

  if (!cfg.ablation.explicit_elements) {
    return detail::forward_vertex_graph(tape, params, cat, cfg, mesh, facets, geo, in, norms,
                                        trace);
  }

  const int lat = cfg.latent_dim;
  const int nf = facets.num_facets();
  const int m = vertices_per_facet(cfg.cell_type);

  // --- Encoders ---
  const Mat vfeat = norms.vertex_in.standardize(vertex_input_features(mesh, facets, geo, in, cfg));
  ad::Value h_v = nn::mlp_apply(tape, params, "enc/vertex", cat.at("enc/vertex"),
                                tape.constant(vfeat));
  if (trace) trace->h_v0 = h_v.val();

  Mat cell_feat, facet_feat;
  if (cfg.ablation.geo_feats_on) {
    cell_feat = norms.cell_in.standardize(cell_feature_matrix(geo));
    facet_feat = norms.facet_in.standardize(facet_feature_matrix(geo));
  } else {
    cell_feat = Mat::Zero(mesh.num_cells(), 4);
    facet_feat = Mat::Zero(nf, 4);
  }
  ad::Value h_c_enc =
      nn::mlp_apply(tape, params, "enc/cell", cat.at("enc/cell"), tape.constant(cell_feat));
  ad::Value h_f_enc =
      nn::mlp_apply(tape, params, "enc/facet", cat.at("enc/facet"), tape.constant(facet_feat));
  if (trace) {
    trace->h_c_enc = h_c_enc.val();
    trace->h_f_enc = h_f_enc.val();
  }

  // Scripted-motion features, lifted from vertices to facets in canonical
  // slot order.
  const Mat script_v = script_vertex_features(mesh, in);
  Mat script_f_in(nf, 4 * m);
  const AggCoeffs coeffs = compute_agg_coeffs(tape, params, cat, cfg, mesh, facets, geo);
  for (int f = 0; f < nf; ++f)
    for (int s = 0; s < m; ++s)
      script_f_in.block(f, 4 * s, 1, 4) = script_v.row(coeffs.facet_slot_vertex[s][f]);
  ad::Value h_f_script = nn::mlp_apply(tape, params, "enc/script_facet",
                                       cat.at("enc/script_facet"), tape.constant(script_f_in));

  // Contact edges and their latents.
  const ContactEdges contacts = build_contact_edges(mesh, facets, geo, cfg);
  const int ne = static_cast<int>(contacts.pairs.size());
  ad::Value h_edges;
  if (ne > 0) {
    h_edges = nn::mlp_apply(tape, params, "enc/contact_edge", cat.at("enc/contact_edge"),
                            tape.constant(contacts.features));
  }
  if (trace) {
    trace->num_contact_edges = ne;
    detail::trace_matrix_group(trace, "cell_slots", coeffs.cell_slot.val());
    detail::trace_matrix_group(trace, "facet_slots", coeffs.facet_slot.val());
    detail::trace_column_group(trace, "facet_cells", coeffs.pair_fc.val(), coeffs.pair_facet, nf);
    detail::trace_column_group(trace, "cell_facets", coeffs.pair_cf.val(), coeffs.pair_cell,
                               mesh.num_cells());
    detail::trace_column_group(trace, "vertex_cells", coeffs.vert_cell.val(), coeffs.vpair_vertex,
                               mesh.num_vertices());
  }

  // --- Processor ---
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "proc/l" + std::to_string(l);

    // Vertex -> element aggregation.
    ad::Value h_c = nn::mlp_apply(
        tape, params, p + "/v2c", cat.at(p + "/v2c"),
        tape.concat_cols(
            {h_c_enc, weighted_slot_sum(tape, h_v, coeffs.cell_slot_vertex, coeffs.cell_slot)}));
    ad::Value h_f = nn::mlp_apply(
        tape, params, p + "/v2f", cat.at(p + "/v2f"),
        tape.concat_cols({h_f_enc, weighted_slot_sum(tape, h_v, coeffs.facet_slot_vertex,
                                                     coeffs.facet_slot)}));

    // Facet stage: contact aggregation, scripted features, cell context.
    ad::Value contact_sum;
    if (ne > 0) {
      ad::Value fused = nn::mlp_apply(
          tape, params, "proc/contact_fuse", cat.at("proc/contact_fuse"),
          tape.concat_cols({h_edges, tape.gather_rows(h_f, contacts.receiver)}));
      contact_sum = tape.segment_sum(fused, contacts.receiver, nf);
    } else {
      contact_sum = tape.constant(Mat::Zero(nf, lat));
    }
    ad::Value cell_context = tape.segment_sum(
        tape.scale_rows(tape.gather_rows(h_c, coeffs.pair_cell), coeffs.pair_fc),
        coeffs.pair_facet, nf);
    ad::Value h_f_msg =
        nn::mlp_apply(tape, params, p + "/to_f", cat.at(p + "/to_f"),
                      tape.concat_cols({h_f_script, contact_sum, h_f, cell_context}));

    // Cell stage.
    ad::Value facet_context = tape.segment_sum(
        tape.scale_rows(tape.gather_rows(h_f_msg, coeffs.pair_facet), coeffs.pair_cf),
        coeffs.pair_cell, mesh.num_cells());
    ad::Value h_c_msg = nn::mlp_apply(tape, params, p + "/to_c", cat.at(p + "/to_c"),
                                      tape.concat_cols({h_c, facet_context}));

    // Disaggregation and residual vertex update.
    ad::Value vert_context = tape.segment_sum(
        tape.scale_rows(tape.gather_rows(h_c_msg, coeffs.vpair_cell), coeffs.vert_cell),
        coeffs.vpair_vertex, mesh.num_vertices());
    ad::Value update = nn::mlp_apply(tape, params, p + "/to_v", cat.at(p + "/to_v"),
                                     tape.concat_cols({h_v, vert_context}));
    ad::Value pre = tape.add(h_v, update);
    h_v = tape.add(pre, nn::mlp_apply(tape, params, p + "/ffn", cat.at(p + "/ffn"), pre));
  }
  if (trace) trace->h_vL = h_v.val();

  return detail::decode_and_update(tape, params, cat, cfg, mesh, in, norms, h_v);
}

/// Vertices included in the training loss: Normal node type only.
inline std::vector<int> loss_mask(const Mesh& mesh) {
  std::vector<int> ids;
  for (int v = 0; v < mesh.num_vertices(); ++v) {
    if (mesh.node_type[v] == NodeType::Normal) ids.push_back(v);
  }
  return ids;
}

}  // namespace model
}  // namespace maven
