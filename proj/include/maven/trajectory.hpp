#pragma once

#include "maven/common.hpp"
#include "maven/mesh.hpp"

#include <map>
#include <string>
#include <vector>

namespace maven {

/// One timestep of a trajectory: vertex positions and per-vertex physical
/// quantities (possibly zero columns).
struct Frame {
  Mat x;  // V x 3
  Mat q;  // V x Q
};

/// A simulated sequence over a fixed mesh. Scripted vertices carry their
/// full position table; the timestep is implicit (unit step).
struct Trajectory {
  Mesh mesh;
  std::vector<Frame> frames;
  std::map<int, std::vector<Vec3>> scripts;  // vertex id -> position per frame

  int num_frames() const { return static_cast<int>(frames.size()); }
  int num_quantities() const { return frames.empty() ? 0 : static_cast<int>(frames[0].q.cols()); }

  /// V x 3 matrix of script targets for `frame`; rows of non-scripted
  /// vertices repeat their current position.
  Mat script_targets(int frame, const Mat& fallback) const {
    Mat t = fallback;
    for (const auto& [v, path] : scripts) {
      if (frame < static_cast<int>(path.size())) t.row(v) = path[frame].transpose();
    }
    return t;
  }
};

struct TrajectoryRef {
  std::string path;
  std::string split;  // train | valid | test
};

struct Dataset {
  std::vector<Trajectory> trajectories;
  std::vector<std::string> splits;  // aligned with trajectories

  std::vector<const Trajectory*> split(const std::string& name) const {
    std::vector<const Trajectory*> out;
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
      if (splits[i] == name) out.push_back(&trajectories[i]);
    }
    return out;
  }
};

}  // namespace maven
