#pragma once

#include "maven/autodiff.hpp"
#include "maven/common.hpp"
#include "maven/model.hpp"
#include "maven/nn.hpp"
#include "maven/normalizer.hpp"
#include "maven/trajectory.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>
#include <random>
#include <thread>
#include <vector>

namespace maven::training {

struct TrainingConfig {
  long steps = 5000;
  int batch_size = 2;
  double lr_start = 1e-4;
  double lr_end = 1e-5;
  double noise_std = 0.0;
  bool noise_on_quantities = false;
  std::uint64_t seed = 0;
  int threads = 1;  // batch members evaluated on private tapes, reduced in sample order
  long log_every = 50;
};

/// One-step MSE of standardized deltas over the masked-in rows, Eq.-style:
/// squared position error plus squared quantity error, each divided by the
/// masked vertex count.
inline ad::Value compute_loss(ad::Tape& tape, ad::Value pred_delta_std,
                              const Mat& target_delta_std, const std::vector<int>& mask) {
  if (mask.empty()) throw DataError("compute_loss: empty vertex mask");
  Mat target_masked(static_cast<int>(mask.size()), target_delta_std.cols());
  for (std::size_t i = 0; i < mask.size(); ++i)
    target_masked.row(static_cast<int>(i)) = target_delta_std.row(mask[i]);

  ad::Value diff =
      tape.sub(tape.gather_rows(pred_delta_std, mask), tape.constant(target_masked));
  return tape.scale(tape.sum_all(tape.mul(diff, diff)), 1.0 / static_cast<double>(mask.size()));
}

inline double compute_loss_value(const Mat& pred_delta_std, const Mat& target_delta_std,
                                 const std::vector<int>& mask) {
  if (mask.empty()) throw DataError("compute_loss: empty vertex mask");
  double s = 0.0;
  for (int v : mask) s += (pred_delta_std.row(v) - target_delta_std.row(v)).squaredNorm();
  return s / static_cast<double>(mask.size());
}

/// Inputs of the transition t -> t+1 of a trajectory. The first frame uses
/// the zero-velocity convention (x_prev = x_cur).
inline StepInput make_step_input(const Trajectory& traj, int t) {
  if (t < 0 || t + 1 >= traj.num_frames())
    throw DataError("make_step_input: transition index out of range");
  StepInput in;
  in.x_cur = traj.frames[t].x;
  in.x_prev = t > 0 ? traj.frames[t - 1].x : traj.frames[t].x;
  in.q_cur = traj.frames[t].q;
  in.script_target = traj.script_targets(t + 1, traj.frames[t].x);
  return in;
}

/// Raw (unstandardized) target deltas of the transition; recomputed against
/// the possibly noise-perturbed current state so the target next state stays
/// the clean one.
inline Mat target_delta(const Trajectory& traj, int t, const StepInput& in) {
  Mat d(in.x_cur.rows(), 3 + in.q_cur.cols());
  d.leftCols(3) = traj.frames[t + 1].x - in.x_cur;
  d.rightCols(in.q_cur.cols()) = traj.frames[t + 1].q - in.q_cur;
  return d;
}

/// Adds zero-mean Gaussian noise (std sigma) to the current positions; the
/// velocity input and delta targets pick the perturbation up downstream.
/// sigma = 0 leaves the sample untouched bit-exactly.
inline void inject_noise(StepInput& in, double sigma, std::mt19937_64& rng,
                         bool on_quantities = false) {
  if (sigma <= 0.0) return;
  std::normal_distribution<double> dist(0.0, sigma);
  for (int i = 0; i < in.x_cur.rows(); ++i)
    for (int j = 0; j < 3; ++j) in.x_cur(i, j) += dist(rng);
  if (on_quantities) {
    for (int i = 0; i < in.q_cur.rows(); ++i)
      for (int j = 0; j < in.q_cur.cols(); ++j) in.q_cur(i, j) += dist(rng);
  }
}

/// Accumulates Gaussian statistics over every training transition in one
/// deterministic pre-pass. Output statistics cover masked-in vertices only.
inline FeatureNormalizers fit_normalizers(const std::vector<const Trajectory*>& trajs,
                                          const ModelConfig& cfg) {
  if (trajs.empty()) throw DataError("fit_normalizers: empty dataset");
  FeatureNormalizers n;
  n.vertex_in = Normalizer(model::vertex_feature_dim(cfg));
  n.cell_in = Normalizer(4);
  n.facet_in = Normalizer(4);
  n.output = Normalizer(model::output_dim(cfg));

  bool any = false;
  for (const Trajectory* traj : trajs) {
    if (traj->num_frames() < 2) continue;
    const FacetSet facets = extract_facets(traj->mesh);
    const auto mask = model::loss_mask(traj->mesh);
    for (int t = 0; t + 1 < traj->num_frames(); ++t) {
      const StepInput in = make_step_input(*traj, t);
      const model::StepGeometry geo = model::compute_step_geometry(traj->mesh, facets, in.x_cur);
      n.vertex_in.accumulate(model::vertex_input_features(traj->mesh, facets, geo, in, cfg));
      n.cell_in.accumulate(model::cell_feature_matrix(geo));
      n.facet_in.accumulate(model::facet_feature_matrix(geo));
      const Mat d = target_delta(*traj, t, in);
      Mat d_masked(static_cast<int>(mask.size()), d.cols());
      for (std::size_t i = 0; i < mask.size(); ++i)
        d_masked.row(static_cast<int>(i)) = d.row(mask[i]);
      n.output.accumulate(d_masked);
      any = true;
    }
  }
  if (!any) throw DataError("fit_normalizers: no usable transitions (trajectories too short)");
  return n;
}

struct LossRow {
  long step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  nn::ParamStore store;
  FeatureNormalizers norms;
  std::vector<LossRow> curve;
};

namespace detail {

struct TransitionRef {
  int traj = 0;
  int t = 0;
};

struct SampleGrad {
  nn::GradMap grads;
  double loss = 0.0;
};

inline SampleGrad sample_gradient(const Trajectory& traj, const FacetSet& facets,
                                  const std::vector<int>& mask, int t, const ModelConfig& cfg,
                                  const FeatureNormalizers& norms, const nn::ParamStore& store,
                                  double noise_std, bool noise_q, std::uint64_t noise_seed) {
  StepInput in = make_step_input(traj, t);
  std::mt19937_64 noise_rng(noise_seed);
  inject_noise(in, noise_std, noise_rng, noise_q);
  const Mat target_std = norms.output.standardize(target_delta(traj, t, in));

  ad::Tape tape;
  const nn::BoundParams bound = nn::bind(tape, store);
  const model::ForwardResult fwd =
      model::forward(tape, bound, cfg, traj.mesh, facets, in, norms);
  ad::Value loss = compute_loss(tape, fwd.delta_std_value, target_std, mask);
  SampleGrad out;
  out.loss = loss.val()(0, 0);
  out.grads = nn::param_gradients(tape, loss, bound);
  return out;
}

}  // namespace detail

/// Shuffled one-step training: noise injection, forward, masked MSE,
/// backward, Adam with the exponential lr schedule. Fully reproducible from
/// the seed; batch members may be evaluated concurrently but are always
/// reduced in sample order.
inline TrainResult train(const std::vector<const Trajectory*>& trajs, const ModelConfig& cfg,
                         const TrainingConfig& tcfg) {
  if (tcfg.steps < 0 || tcfg.batch_size < 1)
    throw DataError("train: steps must be >= 0 and batch_size >= 1");

  TrainResult result;
  result.norms = fit_normalizers(trajs, cfg);
  model::register_model_params(result.store, cfg, mix_seed(tcfg.seed, "params"));
  if (tcfg.steps == 0) return result;

  // Per-trajectory topology and masks, computed once.
  std::vector<FacetSet> facet_sets;
  std::vector<std::vector<int>> masks;
  std::vector<detail::TransitionRef> transitions;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    facet_sets.push_back(extract_facets(trajs[i]->mesh));
    masks.push_back(model::loss_mask(trajs[i]->mesh));
    if (masks.back().empty()) throw DataError("train: trajectory has no maskable vertices");
    for (int t = 0; t + 1 < trajs[i]->num_frames(); ++t)
      transitions.push_back({static_cast<int>(i), t});
  }
  if (transitions.empty()) throw DataError("train: no transitions to train on");

  std::mt19937_64 shuffle_rng(mix_seed(tcfg.seed, "shuffle"));
  std::vector<int> order(transitions.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();  // forces a shuffle on first use

  std::uint64_t sample_counter = 0;
  const int nthreads = std::max(1, tcfg.threads);

  for (long step = 0; step < tcfg.steps; ++step) {
    // Draw the batch: uniform over (trajectory, t) pairs without replacement
    // per epoch.
    std::vector<detail::TransitionRef> batch;
    std::vector<std::uint64_t> noise_seeds;
    for (int b = 0; b < tcfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        cursor = 0;
      }
      batch.push_back(transitions[order[cursor++]]);
      noise_seeds.push_back(mix_seed(tcfg.seed, 0xabcdull + sample_counter++));
    }

    std::vector<detail::SampleGrad> sample_grads(batch.size());
    auto run_sample = [&](std::size_t b) {
      const auto& ref = batch[b];
      sample_grads[b] = detail::sample_gradient(
          *trajs[ref.traj], facet_sets[ref.traj], masks[ref.traj], ref.t, cfg, result.norms,
          result.store, tcfg.noise_std, tcfg.noise_on_quantities, noise_seeds[b]);
    };
    if (nthreads > 1 && batch.size() > 1) {
      std::vector<std::thread> pool;
      std::atomic<std::size_t> next{0};
      for (int w = 0; w < std::min<int>(nthreads, static_cast<int>(batch.size())); ++w) {
        pool.emplace_back([&]() {
          for (std::size_t b = next.fetch_add(1); b < batch.size(); b = next.fetch_add(1))
            run_sample(b);
        });
      }
      for (auto& th : pool) th.join();
    } else {
      for (std::size_t b = 0; b < batch.size(); ++b) run_sample(b);
    }

    // Fixed-order reduction keeps results independent of thread count.
    nn::GradMap grads;
    double batch_loss = 0.0;
    const double w = 1.0 / static_cast<double>(batch.size());
    for (const auto& sg : sample_grads) {
      nn::accumulate(grads, sg.grads, w);
      batch_loss += sg.loss * w;
    }

    const double lr = nn::lr_schedule(step, tcfg.steps, tcfg.lr_start, tcfg.lr_end);
    nn::adam_step(result.store, grads, lr);
    result.curve.push_back({step, batch_loss, lr});
  }
  return result;
}

/// Mean clean one-step loss over every transition of the given trajectories.
inline double evaluate_one_step_loss(const std::vector<const Trajectory*>& trajs,
                                     const ModelConfig& cfg, const nn::ParamStore& store,
                                     const FeatureNormalizers& norms) {
  double total = 0.0;
  long count = 0;
  for (const Trajectory* traj : trajs) {
    const FacetSet facets = extract_facets(traj->mesh);
    const auto mask = model::loss_mask(traj->mesh);
    for (int t = 0; t + 1 < traj->num_frames(); ++t) {
      const StepInput in = make_step_input(*traj, t);
      const Mat target_std = norms.output.standardize(target_delta(*traj, t, in));
      ad::Tape tape;
      const nn::BoundParams bound = nn::bind(tape, store);
      const model::ForwardResult fwd = model::forward(tape, bound, cfg, traj->mesh, facets, in, norms);
      total += compute_loss_value(fwd.delta_std, target_std, mask);
      ++count;
    }
  }
  if (count == 0) throw DataError("evaluate_one_step_loss: no transitions");
  return total / static_cast<double>(count);
}

}  // namespace maven::training
