#pragma once

#include "maven/common.hpp"
#include "maven/model.hpp"
#include "maven/trajectory.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace maven::simulate {

/// One-step map from the current state to the next: returns (x_next, q_next).
using Stepper = std::function<std::pair<Mat, Mat>(const StepInput&)>;

/// Autoregressive rollout: K applications of the stepper, feeding each
/// prediction back. Scripted vertex positions are forced from the script
/// table at every step; the first step uses the zero-velocity convention.
inline Trajectory rollout(const Mesh& mesh, const Frame& initial,
                          const std::map<int, std::vector<Vec3>>& scripts, int steps,
                          const Stepper& stepper) {
  for (const auto& [v, path] : scripts) {
    if (static_cast<int>(path.size()) < steps + 1)
      throw DataError("rollout: script of vertex " + std::to_string(v) + " covers " +
                      std::to_string(path.size()) + " frames, need " + std::to_string(steps + 1));
  }

  Trajectory out;
  out.mesh = mesh;
  out.scripts = scripts;
  out.frames.push_back(initial);

  Mat x_prev = initial.x;
  Mat x_cur = initial.x;
  Mat q_cur = initial.q;
  for (int t = 0; t < steps; ++t) {
    StepInput in;
    in.x_prev = x_prev;
    in.x_cur = x_cur;
    in.q_cur = q_cur;
    in.script_target = x_cur;
    for (const auto& [v, path] : scripts) in.script_target.row(v) = path[t + 1].transpose();

    auto [x_next, q_next] = stepper(in);
    for (const auto& [v, path] : scripts) x_next.row(v) = path[t + 1].transpose();

    out.frames.push_back({x_next, q_next});
    x_prev = std::move(x_cur);
    x_cur = std::move(x_next);
    q_cur = std::move(q_next);
  }
  return out;
}

/// Stepper backed by the learned model.
inline Stepper make_model_stepper(const nn::ParamStore& store, const ModelConfig& cfg,
                                  const FeatureNormalizers& norms, const Mesh& mesh,
                                  const FacetSet& facets) {
  return [&store, cfg, norms, &mesh, &facets](const StepInput& in) {
    ad::Tape tape;
    const nn::BoundParams bound = nn::bind(tape, store);
    const model::ForwardResult fwd = model::forward(tape, bound, cfg, mesh, facets, in, norms);
    return std::make_pair(fwd.x_next, fwd.q_next);
  };
}

/// Zero-motion persistence baseline.
inline Stepper make_persistence_stepper() {
  return [](const StepInput& in) { return std::make_pair(in.x_cur, in.q_cur); };
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Position RMSE of one frame: root mean squared per-vertex Euclidean
/// distance.
inline double rmse_frame_positions(const Mat& pred, const Mat& truth) {
  if (pred.rows() != truth.rows() || pred.cols() != 3 || truth.cols() != 3)
    throw ShapeError("rmse_frame_positions: frames must be V x 3 and aligned");
  double s = 0.0;
  for (int v = 0; v < pred.rows(); ++v) s += (pred.row(v) - truth.row(v)).squaredNorm();
  return std::sqrt(s / static_cast<double>(pred.rows()));
}

/// Plain RMSE of one scalar quantity over vertices.
inline double rmse_frame_scalar(const VecX& pred, const VecX& truth) {
  if (pred.size() != truth.size()) throw ShapeError("rmse_frame_scalar: size mismatch");
  return std::sqrt((pred - truth).squaredNorm() / static_cast<double>(pred.size()));
}

/// Frame-count-weighted mean of per-frame RMSE values over a trajectory set.
/// horizon > 0 truncates each trajectory to its first min(horizon, T) frames;
/// horizon <= 0 uses the full sequences.
inline double aggregate_error(const std::vector<std::vector<double>>& per_frame_rmse,
                              int horizon = 0) {
  if (per_frame_rmse.empty()) throw DataError("aggregate_error: no trajectories");
  double total = 0.0;
  long frames = 0;
  for (const auto& traj : per_frame_rmse) {
    const int t = horizon > 0 ? std::min<int>(horizon, static_cast<int>(traj.size()))
                              : static_cast<int>(traj.size());
    for (int j = 0; j < t; ++j) total += traj[j];
    frames += t;
  }
  if (frames == 0) throw DataError("aggregate_error: no frames");
  return total / static_cast<double>(frames);
}

/// Per-trajectory, per-frame RMSE for each tracked quantity; positions first,
/// then one entry per physical quantity column.
struct EvalReport {
  std::vector<std::string> quantities;                   // "pos", "q0", ...
  std::vector<std::vector<std::vector<double>>> rmse;    // [traj][quantity][frame]

  std::vector<std::vector<double>> per_frame(int quantity) const {
    std::vector<std::vector<double>> out;
    for (const auto& traj : rmse) out.push_back(traj[quantity]);
    return out;
  }
  double error(int quantity, int horizon = 0) const {
    return aggregate_error(per_frame(quantity), horizon);
  }
};

/// Rolls the stepper out along each ground-truth trajectory (from its first
/// frame, over its full length) and scores frames 1..T-1.
inline EvalReport evaluate_rollouts(const std::vector<const Trajectory*>& truth,
                                    const std::function<Stepper(const Trajectory&)>& make_stepper) {
  if (truth.empty()) throw DataError("evaluate_rollouts: no trajectories");
  EvalReport report;
  const int nq = truth.front()->num_quantities();
  report.quantities.push_back("pos");
  for (int q = 0; q < nq; ++q) report.quantities.push_back("q" + std::to_string(q));

  for (const Trajectory* traj : truth) {
    const int steps = traj->num_frames() - 1;
    const Trajectory pred =
        rollout(traj->mesh, traj->frames[0], traj->scripts, steps, make_stepper(*traj));
    std::vector<std::vector<double>> per_q(1 + nq);
    for (int t = 1; t <= steps; ++t) {
      per_q[0].push_back(rmse_frame_positions(pred.frames[t].x, traj->frames[t].x));
      for (int q = 0; q < nq; ++q) {
        per_q[1 + q].push_back(rmse_frame_scalar(pred.frames[t].q.col(q), traj->frames[t].q.col(q)));
      }
    }
    report.rmse.push_back(std::move(per_q));
  }
  return report;
}

}  // namespace maven::simulate
