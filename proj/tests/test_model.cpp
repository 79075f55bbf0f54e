#include <catch_amalgamated.hpp>

#include "maven/model.hpp"
#include "maven/training.hpp"
#include "helpers.hpp"

#include <random>

using namespace maven;
using Catch::Matchers::WithinAbs;
using maven::testing::random_step_input;
using maven::testing::synthetic_normalizers;
using maven::testing::two_hex_contact_mesh;

namespace {

ModelConfig tiny_config(CellType type, int q = 1) {
  ModelConfig cfg = ModelConfig::desk(type, q);
  cfg.latent_dim = 8;
  cfg.num_layers = 2;
  cfg.mlp_hidden = {8};
  cfg.contact_radius = 0.2;
  return cfg;
}

struct Scene {
  Mesh mesh;
  FacetSet facets;
  ModelConfig cfg;
  nn::ParamStore store;
  FeatureNormalizers norms;
  StepInput in;
};

Scene contact_scene(std::uint64_t seed, bool jitter_mesh = true) {
  Scene s;
  s.mesh = two_hex_contact_mesh();
  if (jitter_mesh) maven::testing::jitter(s.mesh, 0.03, seed);
  s.facets = extract_facets(s.mesh);
  s.cfg = tiny_config(CellType::Hex);
  model::register_model_params(s.store, s.cfg, seed);
  s.norms = synthetic_normalizers(s.cfg, seed + 1);
  s.in = random_step_input(s.mesh, 1, seed + 2);
  return s;
}

void zero_params_with_prefix(nn::ParamStore& store, const std::string& prefix) {
  for (auto& [name, e] : store.mutable_params()) {
    if (name.rfind(prefix, 0) == 0) e.value.setZero();
  }
}

// Moves every parameter off exact zeros; zero-initialized biases fed by
// zero feature rows would otherwise sit exactly on the ReLU kink, where
// central differences and the subgradient convention disagree.
void jitter_params(nn::ParamStore& store, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-0.05, 0.05);
  for (auto& [name, e] : store.mutable_params()) {
    for (Eigen::Index i = 0; i < e.value.size(); ++i) e.value.data()[i] += d(rng);
  }
}

}  // namespace

TEST_CASE("forward output shapes are V x 3 and V x Q", "[model]") {
  Scene s = contact_scene(51);
  ad::Tape tape;
  auto bound = nn::bind(tape, s.store);
  const auto out = model::forward(tape, bound, s.cfg, s.mesh, s.facets, s.in, s.norms);
  CHECK(out.x_next.rows() == s.mesh.num_vertices());
  CHECK(out.x_next.cols() == 3);
  CHECK(out.q_next.rows() == s.mesh.num_vertices());
  CHECK(out.q_next.cols() == 1);
  CHECK(out.delta_std.cols() == 4);
}

TEST_CASE("identical vertex inputs encode to identical rows", "[model]") {
  Scene s = contact_scene(53, /*jitter_mesh=*/false);
  // Static mesh, zero velocities, equal quantities: all Normal beam vertices
  // share one input row.
  s.in.x_prev = s.in.x_cur;
  s.in.q_cur.setConstant(0.25);
  ad::Tape tape;
  auto bound = nn::bind(tape, s.store);
  model::ForwardTrace trace;
  model::forward(tape, bound, s.cfg, s.mesh, s.facets, s.in, s.norms, &trace);
  for (int v = 1; v < 8; ++v) {
    CHECK((trace.h_v0.row(v) - trace.h_v0.row(0)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("first-frame convention: x_prev = x_cur means zero velocity input", "[model]") {
  const Mesh mesh = two_hex_contact_mesh();
  const FacetSet facets = extract_facets(mesh);
  const ModelConfig cfg = tiny_config(CellType::Hex);
  StepInput in = random_step_input(mesh, 1, 7);
  in.x_prev = in.x_cur;
  const auto geo = model::compute_step_geometry(mesh, facets, in.x_cur);
  const Mat f = model::vertex_input_features(mesh, facets, geo, in, cfg);
  CHECK(f.middleCols(3, 3).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("model B encodes every element as the zero-vector image", "[model]") {
  Scene s = contact_scene(59);
  s.cfg.ablation.geo_feats_on = false;
  ad::Tape tape;
  auto bound = nn::bind(tape, s.store);
  model::ForwardTrace trace;
  model::forward(tape, bound, s.cfg, s.mesh, s.facets, s.in, s.norms, &trace);

  // Reference: the cell/facet encoders applied to a single zero row.
  ad::Tape ref_tape;
  auto ref_bound = nn::bind(ref_tape, s.store);
  const auto cat = model::mlp_catalog(s.cfg);
  const Mat zc = nn::mlp_apply(ref_tape, ref_bound, "enc/cell", cat.at("enc/cell"),
                               ref_tape.constant(Mat::Zero(1, 4)))
                     .val();
  const Mat zf = nn::mlp_apply(ref_tape, ref_bound, "enc/facet", cat.at("enc/facet"),
                               ref_tape.constant(Mat::Zero(1, 4)))
                     .val();
  for (int c = 0; c < trace.h_c_enc.rows(); ++c)
    CHECK((trace.h_c_enc.row(c) - zc.row(0)).cwiseAbs().maxCoeff() == 0.0);
  for (int f = 0; f < trace.h_f_enc.rows(); ++f)
    CHECK((trace.h_f_enc.row(f) - zf.row(0)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("scripted vertex features follow the flag convention", "[model]") {
  Mesh mesh = two_hex_contact_mesh();
  StepInput in = random_step_input(mesh, 1, 61);

  SECTION("no scripted vertices -> all zero") {
    for (auto& t : mesh.node_type) t = NodeType::Normal;
    const Mat f = model::script_vertex_features(mesh, in);
    CHECK(f.cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("zero displacement still sets the flag") {
    in.script_target = in.x_cur;
    const Mat f = model::script_vertex_features(mesh, in);
    for (int v = 0; v < mesh.num_vertices(); ++v) {
      if (mesh.node_type[v] == NodeType::Scripted) {
        CHECK(f(v, 0) == 1.0);
        CHECK(f.block(v, 1, 1, 3).cwiseAbs().maxCoeff() == 0.0);
      } else {
        CHECK(f.row(v).cwiseAbs().maxCoeff() == 0.0);
      }
    }
  }
}

TEST_CASE("model A: uniform coefficients everywhere", "[model]") {
  Mesh mesh = maven::testing::unit_tet_mesh();
  const FacetSet facets = extract_facets(mesh);
  ModelConfig cfg = tiny_config(CellType::Tet);
  cfg.ablation.geo_agg_learned = false;
  nn::ParamStore store;
  model::register_model_params(store, cfg, 3);
  const auto norms = synthetic_normalizers(cfg, 5);
  const StepInput in = random_step_input(mesh, 1, 7);

  ad::Tape tape;
  auto bound = nn::bind(tape, store);
  model::ForwardTrace trace;
  model::forward(tape, bound, cfg, mesh, facets, in, norms, &trace);
  for (const auto& group : trace.coeff_groups) {
    if (group.name == "cell_slots") {
      for (Eigen::Index i = 0; i < group.values.size(); ++i)
        CHECK_THAT(group.values[i], WithinAbs(0.25, 1e-15));
    }
    if (group.name == "facet_slots") {
      for (Eigen::Index i = 0; i < group.values.size(); ++i)
        CHECK_THAT(group.values[i], WithinAbs(1.0 / 3.0, 1e-15));
    }
  }
}

TEST_CASE("coefficient normalization groups sum to one", "[model]") {
  Scene s = contact_scene(67);
  ad::Tape tape;
  auto bound = nn::bind(tape, s.store);
  model::ForwardTrace trace;
  model::forward(tape, bound, s.cfg, s.mesh, s.facets, s.in, s.norms, &trace);
  REQUIRE(trace.coeff_groups.size() == 5);
  for (const auto& group : trace.coeff_groups) {
    VecX sums = VecX::Zero(group.num_segments);
    for (Eigen::Index i = 0; i < group.values.size(); ++i)
      sums[group.segment[i]] += group.values[i];
    for (int g = 0; g < group.num_segments; ++g) {
      INFO(group.name << " segment " << g);
      CHECK_THAT(sums[g], WithinAbs(1.0, 1e-12));
    }
  }
}

TEST_CASE("zero-weight scorers yield uniform coefficients", "[model]") {
  Scene s = contact_scene(71);
  zero_params_with_prefix(s.store, "coeff/");
  ad::Tape tape;
  auto bound = nn::bind(tape, s.store);
  model::ForwardTrace trace;
  model::forward(tape, bound, s.cfg, s.mesh, s.facets, s.in, s.norms, &trace);
  for (const auto& group : trace.coeff_groups) {
    if (group.name == "cell_slots") {
      for (Eigen::Index i = 0; i < group.values.size(); ++i)
        CHECK_THAT(group.values[i], WithinAbs(1.0 / 8.0, 1e-14));
    }
    if (group.name == "facet_slots") {
      for (Eigen::Index i = 0; i < group.values.size(); ++i)
        CHECK_THAT(group.values[i], WithinAbs(0.25, 1e-14));
    }
    if (group.name == "cell_facets") {
      for (Eigen::Index i = 0; i < group.values.size(); ++i)
        CHECK_THAT(group.values[i], WithinAbs(1.0 / 6.0, 1e-14));
    }
  }
}

TEST_CASE("weighted slot sum: uniform weights give the mean", "[model]") {
  std::mt19937_64 rng(73);
  std::normal_distribution<double> d(0.0, 1.0);
  Mat h(6, 4);
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = d(rng);

  ad::Tape tape;
  ad::Value hv = tape.leaf(h);
  const std::vector<std::vector<int>> slots = {{0, 3}, {1, 4}, {2, 5}};
  ad::Value coeff = tape.constant(Mat::Constant(2, 3, 1.0 / 3.0));
  const Mat got = model::weighted_slot_sum(tape, hv, slots, coeff).val();
  const Mat expected0 = (h.row(0) + h.row(1) + h.row(2)) / 3.0;
  const Mat expected1 = (h.row(3) + h.row(4) + h.row(5)) / 3.0;
  CHECK_THAT((got.row(0) - expected0).cwiseAbs().maxCoeff(), WithinAbs(0.0, 1e-14));
  CHECK_THAT((got.row(1) - expected1).cwiseAbs().maxCoeff(), WithinAbs(0.0, 1e-14));
}

TEST_CASE("weighted slot sum: equal latents are reproduced by any convex weights", "[model]") {
  std::mt19937_64 rng(79);
  std::normal_distribution<double> d(0.0, 1.0);
  Eigen::RowVectorXd hbar(4);
  for (int i = 0; i < 4; ++i) hbar[i] = d(rng);
  Mat h(3, 4);
  h << hbar, hbar, hbar;

  Mat raw(1, 3);
  raw << d(rng), d(rng), d(rng);
  ad::Tape tape;
  ad::Value coeff = tape.softmax_rows(tape.leaf(raw));
  const Mat got =
      model::weighted_slot_sum(tape, tape.leaf(h), {{0}, {1}, {2}}, coeff).val();
  CHECK_THAT((got.row(0) - hbar).cwiseAbs().maxCoeff(), WithinAbs(0.0, 1e-14));
}

TEST_CASE("residual guarantee: zero processor weights freeze vertex latents", "[model]") {
  Scene s = contact_scene(83);
  zero_params_with_prefix(s.store, "proc/");
  ad::Tape tape;
  auto bound = nn::bind(tape, s.store);
  model::ForwardTrace trace;
  model::forward(tape, bound, s.cfg, s.mesh, s.facets, s.in, s.norms, &trace);
  REQUIRE(trace.h_v0.rows() == trace.h_vL.rows());
  CHECK(trace.h_v0 == trace.h_vL);  // exact, not approximate
}

TEST_CASE("contact edges appear at the right radius and vanish below it", "[model]") {
  Scene s = contact_scene(89, /*jitter_mesh=*/false);
  // Gap between the bodies is 0.1.
  s.cfg.contact_radius = 0.12;
  {
    ad::Tape tape;
    auto bound = nn::bind(tape, s.store);
    model::ForwardTrace trace;
    model::forward(tape, bound, s.cfg, s.mesh, s.facets, s.in, s.norms, &trace);
    CHECK(trace.num_contact_edges == 2);
  }
  s.cfg.contact_radius = 0.05;
  {
    ad::Tape tape;
    auto bound = nn::bind(tape, s.store);
    model::ForwardTrace trace;
    model::forward(tape, bound, s.cfg, s.mesh, s.facets, s.in, s.norms, &trace);
    CHECK(trace.num_contact_edges == 0);
  }
}

TEST_CASE("zero decoder weights with zero-mean output stats keep positions", "[model]") {
  Scene s = contact_scene(97);
  zero_params_with_prefix(s.store, "dec/");
  // Zero-mean output statistics: destandardized zero deltas vanish.
  Normalizer out(model::output_dim(s.cfg));
  Mat sym(2, model::output_dim(s.cfg));
  sym.row(0).setConstant(1.0);
  sym.row(1).setConstant(-1.0);
  out.accumulate(sym);
  s.norms.output = out;

  ad::Tape tape;
  auto bound = nn::bind(tape, s.store);
  const auto fwd = model::forward(tape, bound, s.cfg, s.mesh, s.facets, s.in, s.norms);
  for (int v = 0; v < s.mesh.num_vertices(); ++v) {
    if (s.mesh.node_type[v] == NodeType::Scripted) {
      CHECK((fwd.x_next.row(v) - s.in.script_target.row(v)).cwiseAbs().maxCoeff() == 0.0);
    } else {
      CHECK((fwd.x_next.row(v) - s.in.x_cur.row(v)).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("scripted overrides win regardless of network output", "[model]") {
  Scene s = contact_scene(101);
  ad::Tape tape;
  auto bound = nn::bind(tape, s.store);
  const auto fwd = model::forward(tape, bound, s.cfg, s.mesh, s.facets, s.in, s.norms);
  for (int v = 0; v < s.mesh.num_vertices(); ++v) {
    if (s.mesh.node_type[v] == NodeType::Scripted) {
      CHECK((fwd.x_next.row(v) - s.in.script_target.row(v)).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("standardize/destandardize round trip is exact to 1e-12", "[model]") {
  std::mt19937_64 rng(103);
  std::normal_distribution<double> d(2.0, 3.0);
  Normalizer n(5);
  Mat rows(40, 5);
  for (Eigen::Index i = 0; i < rows.size(); ++i) rows.data()[i] = d(rng);
  n.accumulate(rows);
  const Mat back = n.destandardize(n.standardize(rows));
  CHECK_THAT((back - rows).cwiseAbs().maxCoeff(), WithinAbs(0.0, 1e-12));
}

TEST_CASE("forward is translation invariant to 1e-9", "[model]") {
  for (bool explicit_elements : {true, false}) {
    Scene s = contact_scene(107);
    s.cfg.ablation.explicit_elements = explicit_elements;
    nn::ParamStore store;
    model::register_model_params(store, s.cfg, 107);
    const auto norms = synthetic_normalizers(s.cfg, 108);
    s.cfg.contact_radius = 0.25;

    ad::Tape tape;
    auto bound = nn::bind(tape, store);
    const auto base = model::forward(tape, bound, s.cfg, s.mesh, s.facets, s.in, norms);

    const Vec3 t(17.25, -42.5, 3.125);
    Mesh shifted_mesh = s.mesh;
    for (auto& v : shifted_mesh.vertices) v += t;
    const FacetSet shifted_facets = extract_facets(shifted_mesh);
    StepInput shifted = s.in;
    shifted.x_prev.rowwise() += t.transpose();
    shifted.x_cur.rowwise() += t.transpose();
    shifted.script_target.rowwise() += t.transpose();

    ad::Tape tape2;
    auto bound2 = nn::bind(tape2, store);
    const auto moved =
        model::forward(tape2, bound2, s.cfg, shifted_mesh, shifted_facets, shifted, norms);

    INFO("explicit_elements=" << explicit_elements);
    CHECK((moved.delta_std - base.delta_std).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("forward is invariant under within-element storage permutation", "[model]") {
  Scene s = contact_scene(109);
  s.cfg.contact_radius = 0.25;

  ad::Tape tape;
  auto bound = nn::bind(tape, s.store);
  const auto base = model::forward(tape, bound, s.cfg, s.mesh, s.facets, s.in, s.norms);

  const auto& perms = maven::testing::hex_storage_permutations();
  REQUIRE(perms.size() == 48);
  std::mt19937_64 rng(111);
  std::uniform_int_distribution<std::size_t> pick(0, perms.size() - 1);
  for (int trial = 0; trial < 5; ++trial) {
    Mesh permuted = s.mesh;
    for (auto& cell : permuted.cells) {
      const auto& p = perms[pick(rng)];
      std::vector<int> reordered(8);
      for (int i = 0; i < 8; ++i) reordered[i] = cell[p[i]];
      cell = reordered;
    }
    const FacetSet permuted_facets = extract_facets(permuted);

    ad::Tape tape2;
    auto bound2 = nn::bind(tape2, s.store);
    const auto got =
        model::forward(tape2, bound2, s.cfg, permuted, permuted_facets, s.in, s.norms);
    CHECK((got.delta_std - base.delta_std).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("tet meshes run end to end, including storage permutations", "[model]") {
  Mesh mesh = maven::testing::two_tet_mesh();
  maven::testing::jitter(mesh, 0.02, 117);
  const FacetSet facets = extract_facets(mesh);
  ModelConfig cfg = tiny_config(CellType::Tet);
  nn::ParamStore store;
  model::register_model_params(store, cfg, 117);
  const auto norms = synthetic_normalizers(cfg, 118);
  const StepInput in = random_step_input(mesh, 1, 119);

  ad::Tape tape;
  auto bound = nn::bind(tape, store);
  const auto base = model::forward(tape, bound, cfg, mesh, facets, in, norms);

  std::mt19937_64 rng(121);
  for (int trial = 0; trial < 5; ++trial) {
    Mesh permuted = mesh;
    for (auto& cell : permuted.cells) std::shuffle(cell.begin(), cell.end(), rng);
    const FacetSet permuted_facets = extract_facets(permuted);
    ad::Tape tape2;
    auto bound2 = nn::bind(tape2, store);
    const auto got = model::forward(tape2, bound2, cfg, permuted, permuted_facets, in, norms);
    CHECK((got.delta_std - base.delta_std).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("end-to-end gradients match finite differences on a tiny scene", "[model]") {
  Scene s = contact_scene(127, /*jitter_mesh=*/false);
  s.cfg.latent_dim = 4;
  s.cfg.mlp_hidden = {6};
  s.cfg.num_layers = 1;
  s.cfg.contact_radius = 0.12;
  nn::ParamStore store;
  model::register_model_params(store, s.cfg, 127);
  jitter_params(store, 1270);
  const auto norms = synthetic_normalizers(s.cfg, 128);

  std::mt19937_64 rng(129);
  std::normal_distribution<double> d(0.0, 1.0);
  Mat target(s.mesh.num_vertices(), model::output_dim(s.cfg));
  for (Eigen::Index i = 0; i < target.size(); ++i) target.data()[i] = d(rng);
  const auto mask = model::loss_mask(s.mesh);

  auto loss_fn = [&]() {
    ad::Tape tape;
    auto bound = nn::bind(tape, store);
    const auto fwd = model::forward(tape, bound, s.cfg, s.mesh, s.facets, s.in, norms);
    return training::compute_loss_value(fwd.delta_std, target, mask);
  };

  ad::Tape tape;
  auto bound = nn::bind(tape, store);
  const auto fwd = model::forward(tape, bound, s.cfg, s.mesh, s.facets, s.in, norms);
  ad::Value loss = training::compute_loss(tape, fwd.delta_std_value, target, mask);
  const auto analytic = nn::param_gradients(tape, loss, bound);

  const auto check = nn::finite_diff_check(store, loss_fn, analytic, 1e-5);
  INFO("worst: " << check.worst_param << "[" << check.worst_index << "]");
  CHECK(check.max_rel_err < 1e-4);
}

TEST_CASE("model C forward: vertex-graph fallback produces valid output", "[model]") {
  Scene s = contact_scene(131);
  s.cfg.ablation.explicit_elements = false;
  nn::ParamStore store;
  model::register_model_params(store, s.cfg, 131);
  const auto norms = synthetic_normalizers(s.cfg, 132);

  ad::Tape tape;
  auto bound = nn::bind(tape, store);
  model::ForwardTrace trace;
  const auto fwd = model::forward(tape, bound, s.cfg, s.mesh, s.facets, s.in, norms, &trace);
  CHECK(fwd.x_next.rows() == s.mesh.num_vertices());
  CHECK(fwd.delta_std.allFinite());
  CHECK(trace.num_contact_edges == 0);  // no facet machinery in the fallback
  // Scripted override still applies.
  for (int v = 0; v < s.mesh.num_vertices(); ++v) {
    if (s.mesh.node_type[v] == NodeType::Scripted)
      CHECK((fwd.x_next.row(v) - s.in.script_target.row(v)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("model config JSON round trip", "[model]") {
  ModelConfig cfg = ModelConfig::full_scale_96(CellType::Tet, 2);
  cfg.ablation.geo_feats_on = false;
  cfg.contact_prose_anchor = true;
  const ModelConfig back = ModelConfig::from_json(cfg.to_json());
  CHECK(back.cell_type == cfg.cell_type);
  CHECK(back.latent_dim == 96);
  CHECK(back.num_layers == 15);
  CHECK(back.mlp_hidden == cfg.mlp_hidden);
  CHECK(back.ablation.geo_feats_on == false);
  CHECK(back.contact_prose_anchor == true);
}
