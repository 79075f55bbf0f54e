#pragma once

#include "maven/common.hpp"
#include "maven/contact.hpp"
#include "maven/mesh.hpp"
#include "maven/model.hpp"
#include "maven/simulate.hpp"
#include "maven/trajectory.hpp"

#include <json.hpp>

#include <cmath>
#include <map>
#include <random>
#include <set>
#include <vector>

namespace maven::oracle {

/// Press-on-beam scenario parameters. A clamped hex beam is pressed from
/// above by a scripted rigid block; ground truth comes from an explicit
/// mass-spring integrator with penalty contact, deliberately a different
/// model family than the learned simulator.
struct OracleConfig {
  int beam_cells_x = 8;
  int beam_cells_y = 2;
  int beam_cells_z = 2;
  double cell_size = 0.25;

  double edge_stiffness = 600.0;
  double diagonal_stiffness = 300.0;
  double vertex_mass = 1.0;
  double damping = 4.0;

  double frame_dt = 0.05;
  // Substep size h satisfies h <= stability_margin * 2/omega_max, with
  // omega_max = sqrt(max_row_stiffness / mass) from the Gershgorin-style
  // bound over incident spring plus contact stiffness.
  double stability_margin = 0.05;

  double contact_stiffness = 4000.0;
  double contact_gap = 0.02;

  double press_width_x = 0.4;
  double press_width_y = 0.7;
  double press_height = 0.2;
  double press_clearance = 0.04;
  double press_amp_min = 0.18;
  double press_amp_max = 0.30;
  double press_descend_frac = 0.7;  // fraction of the trajectory spent descending

  int frames = 60;

  nlohmann::json to_json() const {
    return {{"beam_cells", {beam_cells_x, beam_cells_y, beam_cells_z}},
            {"cell_size", cell_size},
            {"edge_stiffness", edge_stiffness},
            {"diagonal_stiffness", diagonal_stiffness},
            {"vertex_mass", vertex_mass},
            {"damping", damping},
            {"frame_dt", frame_dt},
            {"stability_margin", stability_margin},
            {"contact_stiffness", contact_stiffness},
            {"contact_gap", contact_gap},
            {"press_width", {press_width_x, press_width_y, press_height}},
            {"press_clearance", press_clearance},
            {"press_amp", {press_amp_min, press_amp_max}},
            {"press_descend_frac", press_descend_frac},
            {"frames", frames}};
  }
  static OracleConfig from_json(const nlohmann::json& j) {
    OracleConfig c;
    const auto cells = j.at("beam_cells").get<std::vector<int>>();
    c.beam_cells_x = cells.at(0);
    c.beam_cells_y = cells.at(1);
    c.beam_cells_z = cells.at(2);
    c.cell_size = j.at("cell_size").get<double>();
    c.edge_stiffness = j.at("edge_stiffness").get<double>();
    c.diagonal_stiffness = j.at("diagonal_stiffness").get<double>();
    c.vertex_mass = j.at("vertex_mass").get<double>();
    c.damping = j.at("damping").get<double>();
    c.frame_dt = j.at("frame_dt").get<double>();
    c.stability_margin = j.at("stability_margin").get<double>();
    c.contact_stiffness = j.at("contact_stiffness").get<double>();
    c.contact_gap = j.at("contact_gap").get<double>();
    const auto pw = j.at("press_width").get<std::vector<double>>();
    c.press_width_x = pw.at(0);
    c.press_width_y = pw.at(1);
    c.press_height = pw.at(2);
    c.press_clearance = j.at("press_clearance").get<double>();
    const auto amp = j.at("press_amp").get<std::vector<double>>();
    c.press_amp_min = amp.at(0);
    c.press_amp_max = amp.at(1);
    c.press_descend_frac = j.at("press_descend_frac").get<double>();
    c.frames = j.at("frames").get<int>();
    if (c.vertex_mass <= 0.0 || c.edge_stiffness <= 0.0 || c.diagonal_stiffness <= 0.0)
      throw DataError("OracleConfig: stiffness and mass must be positive");
    return c;
  }

  double beam_length() const { return beam_cells_x * cell_size; }
  double beam_width() const { return beam_cells_y * cell_size; }
  double beam_height() const { return beam_cells_z * cell_size; }
};

/// Beam (body 0) plus press block (body 1, scripted) in the reference state.
/// Beam end faces (x = 0 and x = L) are clamped obstacles.
inline Mesh build_press_beam_mesh(const OracleConfig& cfg, double press_center_x) {
  const int nx = cfg.beam_cells_x, ny = cfg.beam_cells_y, nz = cfg.beam_cells_z;
  const double s = cfg.cell_size;

  Mesh mesh;
  mesh.cell_type = CellType::Hex;
  auto vid = [&](int i, int j, int k) { return (i * (ny + 1) + j) * (nz + 1) + k; };
  for (int i = 0; i <= nx; ++i)
    for (int j = 0; j <= ny; ++j)
      for (int k = 0; k <= nz; ++k) {
        mesh.vertices.push_back(Vec3(i * s, j * s, k * s));
        mesh.node_type.push_back(i == 0 || i == nx ? NodeType::Obstacle : NodeType::Normal);
        mesh.body_id.push_back(0);
      }
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j)
      for (int k = 0; k < nz; ++k) {
        mesh.cells.push_back({vid(i, j, k), vid(i + 1, j, k), vid(i + 1, j + 1, k),
                              vid(i, j + 1, k), vid(i, j, k + 1), vid(i + 1, j, k + 1),
                              vid(i + 1, j + 1, k + 1), vid(i, j + 1, k + 1)});
      }

  // Press block above the beam.
  const double cx = press_center_x;
  const double cy = cfg.beam_width() / 2.0;
  const double z0 = cfg.beam_height() + cfg.press_clearance;
  const double hx = cfg.press_width_x / 2.0, hy = cfg.press_width_y / 2.0;
  const int base = mesh.num_vertices();
  const double zs[2] = {z0, z0 + cfg.press_height};
  for (int top = 0; top < 2; ++top) {
    mesh.vertices.push_back(Vec3(cx - hx, cy - hy, zs[top]));
    mesh.vertices.push_back(Vec3(cx + hx, cy - hy, zs[top]));
    mesh.vertices.push_back(Vec3(cx + hx, cy + hy, zs[top]));
    mesh.vertices.push_back(Vec3(cx - hx, cy + hy, zs[top]));
  }
  for (int v = 0; v < 8; ++v) {
    mesh.node_type.push_back(NodeType::Scripted);
    mesh.body_id.push_back(1);
  }
  mesh.cells.push_back({base, base + 1, base + 2, base + 3, base + 4, base + 5, base + 6,
                        base + 7});
  return mesh;
}

/// Explicit mass-spring integrator over the beam lattice (cell edges plus hex
/// face diagonals), velocity-Verlet substeps, viscous damping, and a one-sided
/// penalty pushing beam vertices out of the press footprint.
class MassSpringOracle {
 public:
  MassSpringOracle(Mesh mesh, OracleConfig cfg) : mesh_(std::move(mesh)), cfg_(cfg) {
    build_springs();
    integrate_.resize(mesh_.num_vertices());
    for (int v = 0; v < mesh_.num_vertices(); ++v)
      integrate_[v] = mesh_.node_type[v] == NodeType::Normal ? 1 : 0;

    // Stability heuristic: Gershgorin row bound on stiffness per vertex.
    std::vector<double> row_k(mesh_.num_vertices(), cfg_.contact_stiffness);
    for (const Spring& s : springs_) {
      row_k[s.a] += s.k;
      row_k[s.b] += s.k;
    }
    double max_k = 0.0;
    for (double k : row_k) max_k = std::max(max_k, k);
    const double omega = std::sqrt(max_k / cfg_.vertex_mass);
    const double h_max = cfg_.stability_margin * 2.0 / omega;
    substeps_ = std::max(1, static_cast<int>(std::ceil(cfg_.frame_dt / h_max)));
  }

  const Mesh& mesh() const { return mesh_; }
  int substeps() const { return substeps_; }

  /// Spring + contact + damping force on every vertex.
  Mat forces(const Mat& x, const Mat& v, bool with_contact, bool with_damping) const {
    Mat f = Mat::Zero(x.rows(), 3);
    for (const Spring& s : springs_) {
      const Eigen::RowVector3d d = x.row(s.b) - x.row(s.a);
      const double len = d.norm();
      if (len <= 0.0) continue;
      const Eigen::RowVector3d pull = (s.k * (len - s.rest) / len) * d;
      f.row(s.a) += pull;
      f.row(s.b) -= pull;
    }
    if (with_contact) {
      const Aabb box = press_box(x);
      const double floor_z = box.min.z() - cfg_.contact_gap;
      for (int p = 0; p < x.rows(); ++p) {
        if (!integrate_[p]) continue;
        if (x(p, 0) < box.min.x() || x(p, 0) > box.max.x() || x(p, 1) < box.min.y() ||
            x(p, 1) > box.max.y())
          continue;
        const double overlap = x(p, 2) - floor_z;
        if (overlap > 0.0) f(p, 2) -= cfg_.contact_stiffness * overlap;
      }
    }
    if (with_damping) f -= cfg_.damping * v;
    return f;
  }

  /// One velocity-Verlet substep; only Normal vertices move.
  void substep(Mat& x, Mat& v, double h, bool with_contact, bool with_damping) const {
    const double inv_m = 1.0 / cfg_.vertex_mass;
    Mat a = forces(x, v, with_contact, with_damping) * inv_m;
    for (int p = 0; p < x.rows(); ++p) {
      if (!integrate_[p]) continue;
      v.row(p) += 0.5 * h * a.row(p);
      x.row(p) += h * v.row(p);
    }
    a = forces(x, v, with_contact, with_damping) * inv_m;
    for (int p = 0; p < x.rows(); ++p) {
      if (integrate_[p]) v.row(p) += 0.5 * h * a.row(p);
    }
  }

  double total_energy(const Mat& x, const Mat& v) const {
    double e = 0.0;
    for (const Spring& s : springs_) {
      const double len = (x.row(s.b) - x.row(s.a)).norm();
      e += 0.5 * s.k * (len - s.rest) * (len - s.rest);
    }
    for (int p = 0; p < x.rows(); ++p) {
      if (integrate_[p]) e += 0.5 * cfg_.vertex_mass * v.row(p).squaredNorm();
    }
    return e;
  }

  /// Per-vertex elastic energy, half of each incident spring's energy; the
  /// "stress proxy" quantity the model learns alongside positions.
  Mat vertex_energy(const Mat& x) const {
    Mat q = Mat::Zero(x.rows(), 1);
    for (const Spring& s : springs_) {
      const double len = (x.row(s.b) - x.row(s.a)).norm();
      const double e = 0.5 * s.k * (len - s.rest) * (len - s.rest);
      q(s.a, 0) += 0.5 * e;
      q(s.b, 0) += 0.5 * e;
    }
    return q;
  }

  /// The per-output-frame map used for both dataset generation and rollouts:
  /// reconstructs velocities from the frame difference, holds the press at
  /// its current pose during the substeps, then snaps scripted vertices to
  /// their targets. Depends only on the visible state (x_prev, x_cur,
  /// script_target), so a trajectory generated by iterating this map is
  /// reproduced exactly when the map itself is rolled out.
  std::pair<Mat, Mat> step_frame(const StepInput& in) const {
    Mat x = in.x_cur;
    Mat v = Mat::Zero(x.rows(), 3);
    for (int p = 0; p < x.rows(); ++p) {
      if (integrate_[p]) v.row(p) = (in.x_cur.row(p) - in.x_prev.row(p)) / cfg_.frame_dt;
    }
    const double h = cfg_.frame_dt / static_cast<double>(substeps_);
    for (int s = 0; s < substeps_; ++s) substep(x, v, h, true, true);

    if (!x.allFinite())
      throw NumericError(
          "oracle: unstable integration (non-finite state); reduce frame_dt or "
          "stability_margin for smaller substeps");
    const double limit = 50.0 * (cfg_.beam_length() + cfg_.beam_height());
    if (x.cwiseAbs().maxCoeff() > limit)
      throw NumericError(
          "oracle: energy blow-up detected; reduce frame_dt or stability_margin for smaller "
          "substeps");

    for (int p = 0; p < x.rows(); ++p) {
      if (mesh_.node_type[p] == NodeType::Scripted) x.row(p) = in.script_target.row(p);
    }
    return {x, vertex_energy(x)};
  }

  simulate::Stepper stepper() const {
    return [this](const StepInput& in) { return step_frame(in); };
  }

 private:
  struct Spring {
    int a = 0, b = 0;
    double rest = 0.0, k = 0.0;
  };

  void build_springs() {
    std::set<std::pair<int, int>> seen;
    auto add = [&](int a, int b, double k) {
      if (a > b) std::swap(a, b);
      if (!seen.insert({a, b}).second) return;
      springs_.push_back({a, b, (mesh_.vertices[a] - mesh_.vertices[b]).norm(), k});
    };
    for (const auto& cell : mesh_.cells) {
      for (const auto& e : cell_local_edges(mesh_.cell_type))
        add(cell[e[0]], cell[e[1]], cfg_.edge_stiffness);
      if (mesh_.cell_type == CellType::Hex) {
        for (const auto& face : hex_local_faces()) {
          add(cell[face[0]], cell[face[2]], cfg_.diagonal_stiffness);
          add(cell[face[1]], cell[face[3]], cfg_.diagonal_stiffness);
        }
      }
    }
  }

  Aabb press_box(const Mat& x) const {
    Aabb box;
    for (int p = 0; p < x.rows(); ++p) {
      if (mesh_.node_type[p] == NodeType::Scripted) box.expand(Vec3(x.row(p).transpose()));
    }
    return box;
  }

  Mesh mesh_;
  OracleConfig cfg_;
  std::vector<Spring> springs_;
  std::vector<char> integrate_;
  int substeps_ = 1;
};

/// Smooth 0 -> 1 ramp used for the press descent.
inline double press_ramp(double u) {
  return 0.5 * (1.0 - std::cos(M_PI * std::min(1.0, std::max(0.0, u))));
}

/// One synthetic trajectory with randomized press amplitude and position.
inline Trajectory generate_trajectory(const OracleConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> amp_dist(cfg.press_amp_min, cfg.press_amp_max);
  std::uniform_real_distribution<double> pos_dist(0.3, 0.7);
  const double amplitude = amp_dist(rng);
  const double center_x = pos_dist(rng) * cfg.beam_length();

  const Mesh mesh = build_press_beam_mesh(cfg, center_x);
  MassSpringOracle oracle(mesh, cfg);

  Trajectory traj;
  traj.mesh = mesh;

  // Scripted press path: smooth descent by `amplitude`, then hold.
  const int descend_frames =
      std::max(1, static_cast<int>(cfg.press_descend_frac * (cfg.frames - 1)));
  std::vector<double> dz(cfg.frames);
  for (int t = 0; t < cfg.frames; ++t)
    dz[t] = -amplitude * press_ramp(static_cast<double>(t) / descend_frames);
  for (int v = 0; v < mesh.num_vertices(); ++v) {
    if (mesh.node_type[v] != NodeType::Scripted) continue;
    std::vector<Vec3> path(cfg.frames);
    for (int t = 0; t < cfg.frames; ++t) path[t] = mesh.vertices[v] + Vec3(0, 0, dz[t]);
    traj.scripts.emplace(v, std::move(path));
  }

  Mat x0(mesh.num_vertices(), 3);
  for (int v = 0; v < mesh.num_vertices(); ++v) x0.row(v) = mesh.vertices[v].transpose();
  traj.frames.push_back({x0, oracle.vertex_energy(x0)});

  for (int t = 0; t + 1 < cfg.frames; ++t) {
    StepInput in;
    in.x_cur = traj.frames[t].x;
    in.x_prev = t > 0 ? traj.frames[t - 1].x : traj.frames[t].x;
    in.q_cur = traj.frames[t].q;
    in.script_target = traj.script_targets(t + 1, traj.frames[t].x);
    auto [x, q] = oracle.step_frame(in);
    traj.frames.push_back({std::move(x), std::move(q)});
  }
  return traj;
}

}  // namespace maven::oracle
