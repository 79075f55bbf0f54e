#pragma once

#include "maven/dataio.hpp"
#include "maven/model.hpp"
#include "maven/nn.hpp"
#include "maven/oracle.hpp"
#include "maven/simulate.hpp"
#include "maven/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace maven::cli {

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

inline ModelConfig config_from_flags(CellType cell_type, int quantities,
                                     const std::string& preset, int latent, int layers,
                                     double radius, const std::string& ablation,
                                     bool prose_anchor, bool self_contact) {
  ModelConfig cfg;
  if (preset == "desk") {
    cfg = ModelConfig::desk(cell_type, quantities);
  } else if (preset == "full-128") {
    cfg = ModelConfig::full_scale_128(cell_type, quantities);
  } else if (preset == "full-96") {
    cfg = ModelConfig::full_scale_96(cell_type, quantities);
  } else {
    throw UsageError("unknown preset: " + preset);
  }
  if (latent > 0) {
    cfg.latent_dim = latent;
    cfg.mlp_hidden = {latent, latent};
  }
  if (layers > 0) cfg.num_layers = layers;
  if (radius > 0) cfg.contact_radius = radius;
  cfg.contact_prose_anchor = prose_anchor;
  cfg.self_contact = self_contact;

  if (ablation == "none" || ablation.empty()) {
  } else if (ablation == "A") {
    cfg.ablation.geo_agg_learned = false;
  } else if (ablation == "B") {
    cfg.ablation.geo_feats_on = false;
  } else if (ablation == "C") {
    cfg.ablation.explicit_elements = false;
  } else {
    throw UsageError("unknown ablation: " + ablation + " (expected none, A, B, or C)");
  }
  return cfg;
}

struct LoadedCheckpoint {
  nn::ParamStore store;
  ModelConfig config;
  FeatureNormalizers norms;
};

inline LoadedCheckpoint load_model_checkpoint(const std::string& path) {
  nlohmann::json meta;
  LoadedCheckpoint out{nn::load_checkpoint(path, &meta), {}, {}};
  if (!meta.contains("model_config") || !meta.contains("normalizers"))
    throw DataError(path + ": checkpoint lacks model_config/normalizers metadata");
  out.config = ModelConfig::from_json(meta.at("model_config"));
  out.norms = FeatureNormalizers::from_json(meta.at("normalizers"));
  return out;
}

inline void save_model_checkpoint(const std::string& path, const nn::ParamStore& store,
                                  const ModelConfig& cfg, const FeatureNormalizers& norms,
                                  bool opt_state) {
  nlohmann::json meta;
  meta["model_config"] = cfg.to_json();
  meta["normalizers"] = norms.to_json();
  nn::save_checkpoint(path, store, opt_state, meta);
}

inline void write_loss_csv(const std::string& path,
                           const std::vector<training::LossRow>& curve) {
  AtomicFile file(path);
  file.stream() << "step,loss,lr\n";
  file.stream().precision(17);
  for (const auto& row : curve)
    file.stream() << row.step << "," << row.loss << "," << row.lr << "\n";
  file.commit();
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

inline int cmd_gen_data(const oracle::OracleConfig& cfg, const dataio::SplitCounts& counts,
                        std::uint64_t seed, const std::string& out_dir) {
  if (cfg.frames < 50 || cfg.frames > 120)
    throw DataError("gen-data: frames must lie in [50, 120]");
  const auto start = Clock::now();
  const auto manifest = dataio::generate_dataset(cfg, counts, seed, out_dir);
  std::cout << "wrote " << manifest.trajectories.size() << " trajectories to " << out_dir
            << " (manifest.json) in " << seconds_since(start) << " s\n";
  return 0;
}

inline int cmd_inspect_mesh(const std::string& path) {
  const Mesh mesh = dataio::load_mesh(path);
  const auto report = validate_mesh(mesh);
  std::cout << "vertices:        " << mesh.num_vertices() << "\n";
  std::cout << "cells:           " << mesh.num_cells() << " ("
            << (mesh.cell_type == CellType::Tet ? "tet" : "hex") << ")\n";
  if (!report.ok()) {
    std::cout << "mesh is INVALID:\n";
    for (const auto& issue : report.issues) std::cout << "  - " << issue << "\n";
    return 2;
  }
  const FacetSet facets = extract_facets(mesh);
  int boundary = 0;
  for (auto b : facets.boundary_mask) boundary += b;
  std::cout << "facets:          " << facets.num_facets() << "\n";
  std::cout << "boundary facets: " << boundary << "\n";
  std::cout << "incidences:      " << facets.num_incidences() << "\n";
  std::map<int, int> bodies;
  for (int b : mesh.body_id) ++bodies[b];
  std::cout << "bodies:          " << bodies.size() << "\n";
  std::cout << "mesh is valid\n";
  return 0;
}

inline int cmd_contacts(const std::string& mesh_path, const std::string& traj_path, int frame,
                        double radius, const std::string& out_csv) {
  Mesh mesh;
  Mat x;
  if (!traj_path.empty()) {
    const Trajectory traj = dataio::load_trajectory(traj_path);
    if (frame < 0 || frame >= traj.num_frames())
      throw DataError("contacts: frame index out of range");
    mesh = traj.mesh;
    x = traj.frames[frame].x;
  } else {
    mesh = dataio::load_mesh(mesh_path);
    x.resize(mesh.num_vertices(), 3);
    for (int v = 0; v < mesh.num_vertices(); ++v) x.row(v) = mesh.vertices[v].transpose();
  }
  const FacetSet facets = extract_facets(mesh);
  ModelConfig cfg = ModelConfig::desk(mesh.cell_type, 0);
  cfg.contact_radius = radius;
  const auto geo = model::compute_step_geometry(mesh, facets, x);
  const auto edges = model::build_contact_edges(mesh, facets, geo, cfg);

  std::ostream* out = &std::cout;
  std::optional<AtomicFile> file;
  if (!out_csv.empty()) {
    file.emplace(out_csv);
    out = &file->stream();
  }
  out->precision(17);
  (*out) << "f_s,f_r,distance\n";
  for (const auto& p : edges.pairs)
    (*out) << p.sender << "," << p.receiver << "," << p.distance << "\n";
  if (file) file->commit();
  std::cerr << edges.pairs.size() << " directed pairs at radius " << radius << "\n";
  return 0;
}

inline int cmd_train(const std::string& data_path, const std::string& out_ckpt,
                     const std::string& loss_csv, const std::string& preset, int latent,
                     int layers, double radius, const std::string& ablation, bool prose_anchor,
                     bool self_contact, const training::TrainingConfig& tcfg,
                     bool save_opt_state) {
  const Dataset ds = dataio::load_dataset(data_path);
  const auto train_split = ds.split("train");
  if (train_split.empty()) throw DataError("train: dataset has no train split");
  const ModelConfig cfg = config_from_flags(
      train_split.front()->mesh.cell_type, train_split.front()->num_quantities(), preset, latent,
      layers, radius, ablation, prose_anchor, self_contact);

  std::cout << "training on " << train_split.size() << " trajectories, latent "
            << cfg.latent_dim << ", layers " << cfg.num_layers << ", steps " << tcfg.steps
            << ", batch " << tcfg.batch_size << ", noise " << tcfg.noise_std << ", seed "
            << tcfg.seed << "\n";

  const auto start = Clock::now();
  const auto result = training::train(train_split, cfg, tcfg);
  const double elapsed = seconds_since(start);

  if (!result.curve.empty()) {
    double recent = 0.0;
    const std::size_t window = std::min<std::size_t>(50, result.curve.size());
    for (std::size_t i = result.curve.size() - window; i < result.curve.size(); ++i)
      recent += result.curve[i].loss;
    std::cout << "final loss (mean of last " << window << " steps): " << recent / window << "\n";
    std::cout << "wall time " << elapsed << " s, " << elapsed / result.curve.size()
              << " s/step\n";
  }
  if (!loss_csv.empty()) write_loss_csv(loss_csv, result.curve);
  save_model_checkpoint(out_ckpt, result.store, cfg, result.norms, save_opt_state);
  std::cout << "checkpoint written to " << out_ckpt << "\n";
  return 0;
}

inline int cmd_rollout(const std::string& data_path, const std::string& ckpt_path,
                       const std::string& split, int index, int steps,
                       const std::string& out_path) {
  const Dataset ds = dataio::load_dataset(data_path);
  const auto refs = ds.split(split);
  if (index < 0 || index >= static_cast<int>(refs.size()))
    throw DataError("rollout: index out of range for split " + split);
  const Trajectory& truth = *refs[index];
  const auto ckpt = load_model_checkpoint(ckpt_path);
  if (ckpt.config.cell_type != truth.mesh.cell_type)
    throw DataError("rollout: checkpoint cell_type does not match the dataset");

  const FacetSet facets = extract_facets(truth.mesh);
  const int horizon =
      steps > 0 ? std::min(steps, truth.num_frames() - 1) : truth.num_frames() - 1;
  const auto start = Clock::now();
  const Trajectory pred = simulate::rollout(
      truth.mesh, truth.frames[0], truth.scripts, horizon,
      simulate::make_model_stepper(ckpt.store, ckpt.config, ckpt.norms, truth.mesh, facets));
  const double elapsed = seconds_since(start);

  std::vector<double> pos_rmse;
  for (int t = 1; t <= horizon; ++t)
    pos_rmse.push_back(simulate::rmse_frame_positions(pred.frames[t].x, truth.frames[t].x));
  std::cout << "rollout of " << horizon << " steps in " << elapsed << " s ("
            << elapsed / horizon << " s/step)\n";
  std::cout << "position ERROR over rollout: " << simulate::aggregate_error({pos_rmse}) << "\n";
  if (!out_path.empty()) {
    dataio::save_trajectory(out_path, pred);
    std::cout << "predicted trajectory written to " << out_path << "\n";
  }
  return 0;
}

inline int cmd_eval(const std::string& data_path, const std::string& ckpt_path,
                    const std::string& split, const std::string& json_path,
                    const std::string& csv_path, bool with_persistence) {
  const Dataset ds = dataio::load_dataset(data_path);
  const auto refs = ds.split(split);
  if (refs.empty()) throw DataError("eval: dataset has no " + split + " split");
  const auto ckpt = load_model_checkpoint(ckpt_path);

  const auto start = Clock::now();
  std::vector<FacetSet> facet_cache;  // keeps each rollout's topology alive
  facet_cache.reserve(refs.size());
  const auto report = simulate::evaluate_rollouts(refs, [&](const Trajectory& traj) {
    facet_cache.push_back(extract_facets(traj.mesh));
    return simulate::make_model_stepper(ckpt.store, ckpt.config, ckpt.norms, traj.mesh,
                                        facet_cache.back());
  });
  std::cout << "evaluated " << refs.size() << " rollouts in " << seconds_since(start) << " s\n";
  for (std::size_t q = 0; q < report.quantities.size(); ++q) {
    std::cout << report.quantities[q] << ": ERROR(50) = " << report.error(static_cast<int>(q), 50)
              << ", ERROR(full) = " << report.error(static_cast<int>(q), 0) << "\n";
  }
  if (with_persistence) {
    const auto base = simulate::evaluate_rollouts(
        refs, [](const Trajectory&) { return simulate::make_persistence_stepper(); });
    for (std::size_t q = 0; q < base.quantities.size(); ++q) {
      std::cout << "persistence " << base.quantities[q]
                << ": ERROR(50) = " << base.error(static_cast<int>(q), 50)
                << ", ERROR(full) = " << base.error(static_cast<int>(q), 0) << "\n";
    }
  }
  dataio::save_eval_report(json_path, csv_path, report);
  return 0;
}

inline int cmd_gradcheck(const std::string& mesh_path, std::uint64_t seed, double radius,
                         double tolerance) {
  const Mesh mesh = dataio::load_mesh(mesh_path);
  const auto report = validate_mesh(mesh);
  if (!report.ok()) throw DataError("gradcheck: mesh is invalid: " + report.issues.front());
  const FacetSet facets = extract_facets(mesh);

  ModelConfig cfg = ModelConfig::desk(mesh.cell_type, 1);
  cfg.latent_dim = 8;
  cfg.num_layers = 2;
  cfg.mlp_hidden = {8};
  if (radius > 0) cfg.contact_radius = radius;

  nn::ParamStore store;
  model::register_model_params(store, cfg, mix_seed(seed, "params"));
  // Nudge parameters off exact zeros so no ReLU input sits on the kink.
  std::mt19937_64 rng(mix_seed(seed, "jitter"));
  std::uniform_real_distribution<double> jitter(-0.05, 0.05);
  for (auto& [name, e] : store.mutable_params())
    for (Eigen::Index i = 0; i < e.value.size(); ++i) e.value.data()[i] += jitter(rng);

  // Unit normalizers and a random standardized target.
  FeatureNormalizers norms;
  norms.vertex_in = Normalizer(model::vertex_feature_dim(cfg));
  norms.cell_in = Normalizer(4);
  norms.facet_in = Normalizer(4);
  norms.output = Normalizer(model::output_dim(cfg));

  std::mt19937_64 input_rng(mix_seed(seed, "inputs"));
  std::normal_distribution<double> d(0.0, 0.02);
  StepInput in;
  in.x_cur.resize(mesh.num_vertices(), 3);
  for (int v = 0; v < mesh.num_vertices(); ++v) in.x_cur.row(v) = mesh.vertices[v].transpose();
  in.x_prev = in.x_cur;
  for (Eigen::Index i = 0; i < in.x_prev.size(); ++i) in.x_prev.data()[i] -= d(input_rng);
  in.q_cur.resize(mesh.num_vertices(), 1);
  for (int v = 0; v < mesh.num_vertices(); ++v) in.q_cur(v, 0) = d(input_rng);
  in.script_target = in.x_cur;

  Mat target(mesh.num_vertices(), model::output_dim(cfg));
  for (Eigen::Index i = 0; i < target.size(); ++i) target.data()[i] = d(input_rng);
  std::vector<int> mask(mesh.num_vertices());
  std::iota(mask.begin(), mask.end(), 0);  // every vertex participates

  auto loss_fn = [&]() {
    ad::Tape tape;
    auto bound = nn::bind(tape, store);
    const auto fwd = model::forward(tape, bound, cfg, mesh, facets, in, norms);
    return training::compute_loss_value(fwd.delta_std, target, mask);
  };

  {
    ad::Tape probe;
    auto bound = nn::bind(probe, store);
    model::ForwardTrace trace;
    model::forward(probe, bound, cfg, mesh, facets, in, norms, &trace);
    std::cout << "mesh: " << mesh.num_vertices() << " vertices, " << mesh.num_cells()
              << " cells, " << facets.num_facets() << " facets, " << trace.num_contact_edges
              << " contact edges at radius " << cfg.contact_radius << "\n";
  }

  const auto start = Clock::now();
  ad::Tape tape;
  auto bound = nn::bind(tape, store);
  const auto fwd = model::forward(tape, bound, cfg, mesh, facets, in, norms);
  ad::Value loss = training::compute_loss(tape, fwd.delta_std_value, target, mask);
  const auto analytic = nn::param_gradients(tape, loss, bound);
  const auto check = nn::finite_diff_check(store, loss_fn, analytic, 1e-5);

  std::cout << "checked " << store.num_scalars() << " parameters in " << seconds_since(start)
            << " s\n";
  std::cout << "max relative gradient error: " << check.max_rel_err << " (" << check.worst_param
            << "[" << check.worst_index << "])\n";
  if (check.max_rel_err > tolerance) {
    std::cerr << "gradcheck FAILED: " << check.max_rel_err << " > " << tolerance << "\n";
    return 3;
  }
  std::cout << "gradcheck passed (tolerance " << tolerance << ")\n";
  return 0;
}

}  // namespace detail

/// Command-line entry point. Exit codes: 0 success, 1 usage error, 2 data
/// error, 3 numeric error.
inline int run(int argc, char** argv) {
  CLI::App app{"MAVEN: mesh-aware volumetric encoding network for 3D solid deformation"};
  app.require_subcommand(1);

  // --- gen-data ---
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic press-on-beam dataset");
  oracle::OracleConfig ocfg;
  dataio::SplitCounts counts{20, 0, 5};
  std::uint64_t gen_seed = 0;
  std::string gen_out = "data";
  std::vector<int> beam_cells;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--train", counts.train, "number of training trajectories");
  gen->add_option("--valid", counts.valid, "number of validation trajectories");
  gen->add_option("--test", counts.test, "number of test trajectories");
  gen->add_option("--seed", gen_seed, "RNG seed");
  gen->add_option("--frames", ocfg.frames, "output frames per trajectory (50-120)");
  gen->add_option("--beam-cells", beam_cells, "beam cells: nx ny nz")->expected(3);
  gen->add_option("--contact-gap", ocfg.contact_gap, "penalty contact activation gap");
  gen->add_option("--press-amp-min", ocfg.press_amp_min, "minimum press descent");
  gen->add_option("--press-amp-max", ocfg.press_amp_max, "maximum press descent");
  gen->add_option("--damping", ocfg.damping, "viscous damping");

  // --- inspect-mesh ---
  auto* inspect = app.add_subcommand("inspect-mesh", "print mesh statistics and validity");
  std::string inspect_path;
  inspect->add_option("mesh", inspect_path, "mesh JSON file")->required();

  // --- contacts ---
  auto* contacts = app.add_subcommand("contacts", "dump facet contact pairs as CSV");
  std::string c_mesh, c_traj, c_csv;
  int c_frame = 0;
  double c_radius = 0.1;
  contacts->add_option("--mesh", c_mesh, "mesh JSON (reference positions)");
  contacts->add_option("--trajectory", c_traj, "trajectory JSON (per-frame positions)");
  contacts->add_option("--frame", c_frame, "frame index within --trajectory");
  contacts->add_option("--radius", c_radius, "collision radius")->required();
  contacts->add_option("--out", c_csv, "write CSV here instead of stdout");

  // --- train ---
  auto* train = app.add_subcommand("train", "train a model on a dataset");
  std::string t_data, t_out = "checkpoint.mvn", t_loss_csv, t_preset = "desk",
              t_ablation = "none";
  int t_latent = 0, t_layers = 0;
  double t_radius = 0.0;
  bool t_prose = false, t_self = false, t_opt_state = false, t_noise_q = false;
  training::TrainingConfig tcfg;
  train->add_option("--data", t_data, "dataset manifest JSON")->required();
  train->add_option("--out", t_out, "output checkpoint path");
  train->add_option("--loss-csv", t_loss_csv, "write the loss curve CSV here");
  train->add_option("--preset", t_preset, "model preset: desk, full-128, full-96");
  train->add_option("--latent", t_latent, "override latent width");
  train->add_option("--layers", t_layers, "override processor depth");
  train->add_option("--radius", t_radius, "override contact radius");
  train->add_option("--ablation", t_ablation, "ablation variant: none, A, B, C");
  train->add_flag("--prose-anchor", t_prose, "anchor contact spanning vectors at the other face");
  train->add_flag("--self-contact", t_self, "also detect same-body contact pairs");
  train->add_option("--steps", tcfg.steps, "Adam steps");
  train->add_option("--batch", tcfg.batch_size, "batch size");
  train->add_option("--lr-start", tcfg.lr_start, "initial learning rate");
  train->add_option("--lr-end", tcfg.lr_end, "final learning rate");
  train->add_option("--noise", tcfg.noise_std, "training noise std on positions");
  train->add_flag("--noise-quantities", t_noise_q, "also perturb quantity inputs");
  train->add_option("--seed", tcfg.seed, "RNG seed");
  train->add_option("--threads", tcfg.threads, "batch-parallel worker threads");
  train->add_flag("--save-opt-state", t_opt_state, "include Adam moments in the checkpoint");

  // --- rollout ---
  auto* roll = app.add_subcommand("rollout", "autoregressive rollout against a trajectory");
  std::string r_data, r_ckpt, r_split = "test", r_out;
  int r_index = 0, r_steps = 0;
  roll->add_option("--data", r_data, "dataset manifest JSON")->required();
  roll->add_option("--checkpoint", r_ckpt, "model checkpoint")->required();
  roll->add_option("--split", r_split, "dataset split to pick from");
  roll->add_option("--index", r_index, "trajectory index within the split");
  roll->add_option("--steps", r_steps, "limit the rollout horizon");
  roll->add_option("--out", r_out, "write the predicted trajectory JSON here");

  // --- eval ---
  auto* eval = app.add_subcommand("eval", "evaluate rollout RMSE over a split");
  std::string e_data, e_ckpt, e_split = "test", e_json, e_csv;
  bool e_persistence = false;
  eval->add_option("--data", e_data, "dataset manifest JSON")->required();
  eval->add_option("--checkpoint", e_ckpt, "model checkpoint")->required();
  eval->add_option("--split", e_split, "dataset split");
  eval->add_option("--json", e_json, "write the full report JSON here");
  eval->add_option("--csv", e_csv, "write the flat per-frame CSV here");
  eval->add_flag("--persistence", e_persistence, "also report the zero-motion baseline");

  // --- gradcheck ---
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the model gradients");
  std::string g_mesh;
  std::uint64_t g_seed = 0;
  double g_radius = 0.0, g_tol = 1e-4;
  grad->add_option("--mesh", g_mesh, "mesh JSON file")->required();
  grad->add_option("--seed", g_seed, "RNG seed");
  grad->add_option("--radius", g_radius, "contact radius override");
  grad->add_option("--tol", g_tol, "failure tolerance on the max relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      if (beam_cells.size() == 3) {
        ocfg.beam_cells_x = beam_cells[0];
        ocfg.beam_cells_y = beam_cells[1];
        ocfg.beam_cells_z = beam_cells[2];
      }
      return detail::cmd_gen_data(ocfg, counts, gen_seed, gen_out);
    }
    if (inspect->parsed()) return detail::cmd_inspect_mesh(inspect_path);
    if (contacts->parsed()) {
      if (c_mesh.empty() && c_traj.empty())
        throw UsageError("contacts: provide --mesh or --trajectory");
      return detail::cmd_contacts(c_mesh, c_traj, c_frame, c_radius, c_csv);
    }
    if (train->parsed()) {
      tcfg.noise_on_quantities = t_noise_q;
      return detail::cmd_train(t_data, t_out, t_loss_csv, t_preset, t_latent, t_layers, t_radius,
                               t_ablation, t_prose, t_self, tcfg, t_opt_state);
    }
    if (roll->parsed())
      return detail::cmd_rollout(r_data, r_ckpt, r_split, r_index, r_steps, r_out);
    if (eval->parsed())
      return detail::cmd_eval(e_data, e_ckpt, e_split, e_json, e_csv, e_persistence);
    if (grad->parsed()) return detail::cmd_gradcheck(g_mesh, g_seed, g_radius, g_tol);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace maven::cli
