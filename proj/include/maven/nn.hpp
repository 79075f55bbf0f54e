#pragma once

#include "maven/autodiff.hpp"
#include "maven/common.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace maven::nn {

/// Named parameter tensors with Adam first/second moments. Iteration is
/// always in name order, which fixes the flat-view layout, the checkpoint
/// payload order, and the optimizer update order.
class ParamStore {
 public:
  struct Entry {
    Mat value;
    Mat m;  // Adam first moment
    Mat v;  // Adam second moment
  };

  void add(const std::string& name, Mat init) {
    if (params_.count(name)) throw DataError("ParamStore: duplicate parameter " + name);
    Entry e;
    e.m = Mat::Zero(init.rows(), init.cols());
    e.v = e.m;
    e.value = std::move(init);
    params_.emplace(name, std::move(e));
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  Mat& value(const std::string& name) { return entry(name).value; }
  const Mat& value(const std::string& name) const { return entry(name).value; }
  Entry& entry(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw DataError("ParamStore: unknown parameter " + name);
    return it->second;
  }
  const Entry& entry(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw DataError("ParamStore: unknown parameter " + name);
    return it->second;
  }

  const std::map<std::string, Entry>& params() const { return params_; }
  std::map<std::string, Entry>& mutable_params() { return params_; }
  long step() const { return step_; }
  void set_step(long s) { step_ = s; }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& [name, e] : params_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

  /// Concatenation of all tensors (row-major) in name order.
  VecX flat() const {
    VecX out(num_scalars());
    Eigen::Index at = 0;
    for (const auto& [name, e] : params_) {
      out.segment(at, e.value.size()) = Eigen::Map<const VecX>(e.value.data(), e.value.size());
      at += e.value.size();
    }
    return out;
  }

  void load_flat(const VecX& flat) {
    if (flat.size() != static_cast<Eigen::Index>(num_scalars()))
      throw ShapeError("ParamStore: flat view length mismatch");
    Eigen::Index at = 0;
    for (auto& [name, e] : params_) {
      Eigen::Map<VecX>(e.value.data(), e.value.size()) = flat.segment(at, e.value.size());
      at += e.value.size();
    }
  }

 private:
  std::map<std::string, Entry> params_;
  long step_ = 0;
};

/// Parameters placed on a tape for one forward pass.
struct BoundParams {
  std::map<std::string, ad::Value> values;

  ad::Value at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw DataError("BoundParams: unknown parameter " + name);
    return it->second;
  }
};

inline BoundParams bind(ad::Tape& tape, const ParamStore& store) {
  BoundParams bound;
  for (const auto& [name, e] : store.params()) bound.values.emplace(name, tape.leaf(e.value));
  return bound;
}

using GradMap = std::map<std::string, Mat>;

/// Leaf gradients of `loss` with respect to every bound parameter. Consumes
/// the tape.
inline GradMap param_gradients(ad::Tape& tape, ad::Value loss, const BoundParams& bound) {
  std::vector<std::string> names;
  std::vector<ad::Value> leaves;
  for (const auto& [name, v] : bound.values) {
    names.push_back(name);
    leaves.push_back(v);
  }
  std::vector<Mat> grads = tape.backward(loss, leaves);
  GradMap out;
  for (std::size_t i = 0; i < names.size(); ++i) out.emplace(names[i], std::move(grads[i]));
  return out;
}

inline void accumulate(GradMap& into, const GradMap& grads, double weight = 1.0) {
  for (const auto& [name, g] : grads) {
    auto it = into.find(name);
    if (it == into.end()) {
      into.emplace(name, g * weight);
    } else {
      it->second += g * weight;
    }
  }
}

/// Bias-corrected Adam update; lr is supplied per call so the caller owns the
/// schedule. Increments the store's step counter.
inline void adam_step(ParamStore& store, const GradMap& grads, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8) {
  store.set_step(store.step() + 1);
  const double t = static_cast<double>(store.step());
  const double bc1 = 1.0 - std::pow(beta1, t);
  const double bc2 = 1.0 - std::pow(beta2, t);
  for (auto& [name, e] : store.mutable_params()) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    const Mat& g = it->second;
    if (g.rows() != e.value.rows() || g.cols() != e.value.cols())
      throw ShapeError("adam_step: gradient shape mismatch for " + name);
    e.m = beta1 * e.m + (1.0 - beta1) * g;
    e.v = beta2 * e.v + (1.0 - beta2) * g.cwiseProduct(g);
    const Mat mhat = e.m / bc1;
    const Mat vhat = e.v / bc2;
    e.value.array() -= lr * mhat.array() / (vhat.array().sqrt() + eps);
  }
}

/// Exponential interpolation from lr_start to lr_end over total_steps.
inline double lr_schedule(long step, long total_steps, double lr_start, double lr_end) {
  if (total_steps <= 1) return lr_start;
  const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps - 1));
  return lr_start * std::pow(lr_end / lr_start, f);
}

/// Dense -> ReLU stack with a linear head and optional output layer_norm.
struct MlpSpec {
  int in = 0;
  std::vector<int> hidden;
  int out = 0;
  bool final_layer_norm = true;
};

namespace detail {

inline Mat glorot_uniform(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-a, a);
  Mat w(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) w(i, j) = dist(rng);
  return w;
}

}  // namespace detail

/// Registers the parameters of an MLP under `prefix`. Each tensor gets an
/// independent RNG stream derived from (seed, name), so initialization does
/// not depend on registration order.
inline void register_mlp(ParamStore& store, const std::string& prefix, const MlpSpec& spec,
                         std::uint64_t seed) {
  std::vector<int> widths;
  widths.push_back(spec.in);
  for (int h : spec.hidden) widths.push_back(h);
  widths.push_back(spec.out);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::string wname = prefix + "/w" + std::to_string(l);
    store.add(wname, detail::glorot_uniform(widths[l], widths[l + 1], mix_seed(seed, wname)));
    store.add(prefix + "/b" + std::to_string(l), Mat::Zero(1, widths[l + 1]));
  }
  if (spec.final_layer_norm) {
    store.add(prefix + "/ln_g", Mat::Ones(1, spec.out));
    store.add(prefix + "/ln_b", Mat::Zero(1, spec.out));
  }
}

/// Applies the MLP registered under `prefix` to each row of `input`.
inline ad::Value mlp_apply(ad::Tape& tape, const BoundParams& params, const std::string& prefix,
                           const MlpSpec& spec, ad::Value input) {
  if (input.cols() != spec.in)
    throw ShapeError("mlp_apply(" + prefix + "): input width " + std::to_string(input.cols()) +
                     " != spec width " + std::to_string(spec.in));
  const std::size_t num_layers = spec.hidden.size() + 1;
  ad::Value h = input;
  for (std::size_t l = 0; l < num_layers; ++l) {
    h = tape.add_bias(tape.matmul(h, params.at(prefix + "/w" + std::to_string(l))),
                      params.at(prefix + "/b" + std::to_string(l)));
    if (l + 1 < num_layers) h = tape.relu(h);
  }
  if (spec.final_layer_norm) {
    h = tape.layer_norm(h, params.at(prefix + "/ln_g"), params.at(prefix + "/ln_b"));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoint format: one line of JSON (names, shapes, step, opt_state flag,
// plus any caller metadata), then the raw little-endian f64 payload of every
// tensor in header order; with opt_state, the m and v moments follow, again
// in header order.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_mat(std::ostream& out, const Mat& m) {
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
}

inline Mat read_mat(std::istream& in, int rows, int cols) {
  Mat m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (!in) throw DataError("checkpoint: truncated payload");
  return m;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const ParamStore& store,
                            bool with_opt_state = false,
                            const nlohmann::json& metadata = nlohmann::json::object()) {
  nlohmann::json header = metadata;
  header["names"] = nlohmann::json::array();
  header["shapes"] = nlohmann::json::array();
  for (const auto& [name, e] : store.params()) {
    header["names"].push_back(name);
    header["shapes"].push_back({e.value.rows(), e.value.cols()});
  }
  header["step"] = store.step();
  header["opt_state"] = with_opt_state;

  AtomicFile file(path, /*binary=*/true);
  file.stream() << header.dump() << "\n";
  for (const auto& [name, e] : store.params()) detail::write_mat(file.stream(), e.value);
  if (with_opt_state) {
    for (const auto& [name, e] : store.params()) detail::write_mat(file.stream(), e.m);
    for (const auto& [name, e] : store.params()) detail::write_mat(file.stream(), e.v);
  }
  file.commit();
}

inline ParamStore load_checkpoint(const std::filesystem::path& path,
                                  nlohmann::json* metadata_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path.string());
  std::string header_line;
  if (!std::getline(in, header_line)) throw DataError("checkpoint: missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: bad header: " + std::string(e.what()));
  }
  if (metadata_out) *metadata_out = header;

  const auto& names = header.at("names");
  const auto& shapes = header.at("shapes");
  ParamStore store;
  for (std::size_t i = 0; i < names.size(); ++i) {
    store.add(names[i].get<std::string>(),
              detail::read_mat(in, shapes[i][0].get<int>(), shapes[i][1].get<int>()));
  }
  if (header.value("opt_state", false)) {
    for (std::size_t i = 0; i < names.size(); ++i) {
      store.entry(names[i].get<std::string>()).m =
          detail::read_mat(in, shapes[i][0].get<int>(), shapes[i][1].get<int>());
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
      store.entry(names[i].get<std::string>()).v =
          detail::read_mat(in, shapes[i][0].get<int>(), shapes[i][1].get<int>());
    }
  }
  store.set_step(header.value("step", 0L));
  return store;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_index = -1;
  double gradient_scale = 0.0;  // max |analytic gradient| over all parameters
};

/// Central-difference check of `analytic` against a loss evaluated from the
/// store's current values. Perturbs every scalar parameter. The relative
/// error denominator is floored at 1e-3 of the largest gradient magnitude:
/// parameters whose true gradient is structurally zero (e.g. biases that
/// shift softmax logits uniformly) otherwise amplify pure finite-difference
/// rounding noise into spurious "errors".
inline GradCheckResult finite_diff_check(ParamStore& store,
                                         const std::function<double()>& loss_fn,
                                         const GradMap& analytic, double h = 1e-5) {
  GradCheckResult result;
  for (const auto& [name, g] : analytic)
    result.gradient_scale = std::max(result.gradient_scale, g.cwiseAbs().maxCoeff());
  const double floor = std::max(1e-12, 1e-3 * result.gradient_scale);

  for (auto& [name, e] : store.mutable_params()) {
    const auto git = analytic.find(name);
    if (git == analytic.end()) throw DataError("finite_diff_check: no gradient for " + name);
    for (Eigen::Index k = 0; k < e.value.size(); ++k) {
      double& theta = e.value.data()[k];
      const double saved = theta;
      theta = saved + h;
      const double up = loss_fn();
      theta = saved - h;
      const double down = loss_fn();
      theta = saved;
      const double fd = (up - down) / (2.0 * h);
      const double an = git->second.data()[k];
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), floor});
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_param = name;
        result.worst_index = static_cast<int>(k);
      }
    }
  }
  return result;
}

}  // namespace maven::nn
