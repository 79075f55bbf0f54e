#pragma once

#include "maven/common.hpp"
#include "maven/mesh.hpp"
#include "maven/oracle.hpp"
#include "maven/simulate.hpp"
#include "maven/trajectory.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace maven::dataio {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Mesh JSON:
//   {"cell_type": "tet"|"hex", "vertices": [[f64;3]], "cells": [[int]],
//    "node_type": [int], "body_id": [int]}
// ---------------------------------------------------------------------------

inline json mesh_to_json(const Mesh& mesh) {
  json j;
  j["cell_type"] = mesh.cell_type == CellType::Tet ? "tet" : "hex";
  j["vertices"] = json::array();
  for (const Vec3& v : mesh.vertices) j["vertices"].push_back({v.x(), v.y(), v.z()});
  j["cells"] = mesh.cells;
  j["node_type"] = json::array();
  for (NodeType t : mesh.node_type) j["node_type"].push_back(static_cast<int>(t));
  j["body_id"] = mesh.body_id;
  return j;
}

inline Mesh mesh_from_json(const json& j, const std::string& where) {
  auto need = [&](const char* key) -> const json& {
    if (!j.contains(key))
      throw DataError(where + ": missing \"" + key + "\" key in mesh object");
    return j.at(key);
  };

  Mesh mesh;
  const std::string ct = need("cell_type").get<std::string>();
  if (ct == "tet") {
    mesh.cell_type = CellType::Tet;
  } else if (ct == "hex") {
    mesh.cell_type = CellType::Hex;
  } else {
    throw DataError(where + ": cell_type must be \"tet\" or \"hex\", got \"" + ct + "\"");
  }
  for (const auto& v : need("vertices")) {
    if (!v.is_array() || v.size() != 3)
      throw DataError(where + ": each vertex must be a 3-element array");
    mesh.vertices.push_back(Vec3(v[0].get<double>(), v[1].get<double>(), v[2].get<double>()));
  }
  const int arity = vertices_per_cell(mesh.cell_type);
  for (const auto& c : need("cells")) {
    std::vector<int> cell = c.get<std::vector<int>>();
    if (static_cast<int>(cell.size()) != arity)
      throw DataError(where + ": cell arity mismatch: cell_type \"" + ct + "\" wants " +
                      std::to_string(arity) + " vertices, found " + std::to_string(cell.size()));
    mesh.cells.push_back(std::move(cell));
  }
  for (const auto& t : need("node_type")) {
    const int v = t.get<int>();
    if (v < 0 || v > 2) throw DataError(where + ": node_type entries must be 0, 1, or 2");
    mesh.node_type.push_back(static_cast<NodeType>(v));
  }
  mesh.body_id = need("body_id").get<std::vector<int>>();
  if (mesh.node_type.size() != mesh.vertices.size() || mesh.body_id.size() != mesh.vertices.size())
    throw DataError(where + ": node_type/body_id length must match the vertex count");
  return mesh;
}

inline void save_mesh(const std::filesystem::path& path, const Mesh& mesh) {
  AtomicFile file(path);
  file.stream() << mesh_to_json(mesh).dump(2) << "\n";
  file.commit();
}

inline json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": JSON parse error: " + e.what());
  }
}

inline Mesh load_mesh(const std::filesystem::path& path) {
  return mesh_from_json(load_json_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Trajectory JSON:
//   {"mesh": <Mesh>, "frames": [{"x": [[f64;3];V], "q": [[f64;Q];V]};T],
//    "scripts": {"<vertex_id>": [[f64;3];T]}}
// ---------------------------------------------------------------------------

inline json trajectory_to_json(const Trajectory& traj) {
  json j;
  j["mesh"] = mesh_to_json(traj.mesh);
  j["frames"] = json::array();
  for (const Frame& f : traj.frames) {
    json jf;
    jf["x"] = json::array();
    for (int v = 0; v < f.x.rows(); ++v) jf["x"].push_back({f.x(v, 0), f.x(v, 1), f.x(v, 2)});
    jf["q"] = json::array();
    for (int v = 0; v < f.q.rows(); ++v) {
      json row = json::array();
      for (int c = 0; c < f.q.cols(); ++c) row.push_back(f.q(v, c));
      jf["q"].push_back(row);
    }
    j["frames"].push_back(std::move(jf));
  }
  j["scripts"] = json::object();
  for (const auto& [v, path] : traj.scripts) {
    json jp = json::array();
    for (const Vec3& p : path) jp.push_back({p.x(), p.y(), p.z()});
    j["scripts"][std::to_string(v)] = std::move(jp);
  }
  return j;
}

inline Trajectory trajectory_from_json(const json& j, const std::string& where) {
  if (!j.contains("mesh")) throw DataError(where + ": missing \"mesh\" key");
  if (!j.contains("frames")) throw DataError(where + ": missing \"frames\" key");

  Trajectory traj;
  traj.mesh = mesh_from_json(j.at("mesh"), where);
  const int nv = traj.mesh.num_vertices();
  for (const auto& jf : j.at("frames")) {
    if (!jf.contains("x")) throw DataError(where + ": frame missing \"x\" key");
    const auto& jx = jf.at("x");
    if (static_cast<int>(jx.size()) != nv)
      throw DataError(where + ": frame has " + std::to_string(jx.size()) +
                      " position rows, mesh has " + std::to_string(nv) + " vertices");
    Frame f;
    f.x.resize(nv, 3);
    for (int v = 0; v < nv; ++v)
      f.x.row(v) << jx[v][0].get<double>(), jx[v][1].get<double>(), jx[v][2].get<double>();
    const auto& jq = jf.contains("q") ? jf.at("q") : json::array();
    const int q_cols = jq.empty() ? 0 : static_cast<int>(jq[0].size());
    f.q.resize(nv, q_cols);
    if (!jq.empty() && static_cast<int>(jq.size()) != nv)
      throw DataError(where + ": frame quantity rows do not match the vertex count");
    for (int v = 0; v < static_cast<int>(jq.size()); ++v)
      for (int c = 0; c < q_cols; ++c) f.q(v, c) = jq[v][c].get<double>();
    traj.frames.push_back(std::move(f));
  }
  if (j.contains("scripts")) {
    for (const auto& [key, jp] : j.at("scripts").items()) {
      const int v = std::stoi(key);
      if (v < 0 || v >= nv) throw DataError(where + ": script vertex id out of range: " + key);
      std::vector<Vec3> path;
      for (const auto& p : jp)
        path.push_back(Vec3(p[0].get<double>(), p[1].get<double>(), p[2].get<double>()));
      traj.scripts.emplace(v, std::move(path));
    }
  }
  return traj;
}

inline void save_trajectory(const std::filesystem::path& path, const Trajectory& traj) {
  AtomicFile file(path);
  file.stream() << trajectory_to_json(traj).dump() << "\n";
  file.commit();
}

inline Trajectory load_trajectory(const std::filesystem::path& path) {
  return trajectory_from_json(load_json_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

struct DatasetManifest {
  std::vector<TrajectoryRef> trajectories;
  json generator;
  std::uint64_t seed = 0;
};

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  json j;
  j["seed"] = m.seed;
  j["generator"] = m.generator;
  j["trajectories"] = json::array();
  for (const auto& ref : m.trajectories)
    j["trajectories"].push_back({{"path", ref.path}, {"split", ref.split}});
  AtomicFile file(path);
  file.stream() << j.dump(2) << "\n";
  file.commit();
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  const json j = load_json_file(path);
  DatasetManifest m;
  if (!j.contains("trajectories")) throw DataError(path.string() + ": missing \"trajectories\"");
  m.seed = j.value("seed", 0ull);
  m.generator = j.value("generator", json::object());
  for (const auto& jt : j.at("trajectories"))
    m.trajectories.push_back({jt.at("path").get<std::string>(), jt.at("split").get<std::string>()});
  return m;
}

/// Loads every trajectory referenced by a manifest; relative paths resolve
/// against the manifest's directory.
inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  const DatasetManifest m = load_manifest(manifest_path);
  const std::filesystem::path dir = manifest_path.parent_path();
  Dataset ds;
  for (const auto& ref : m.trajectories) {
    std::filesystem::path p(ref.path);
    if (p.is_relative()) p = dir / p;
    if (!std::filesystem::exists(p))
      throw DataError("manifest references missing file " + p.string());
    ds.trajectories.push_back(load_trajectory(p));
    ds.splits.push_back(ref.split);
  }
  return ds;
}

struct SplitCounts {
  int train = 0;
  int valid = 0;
  int test = 0;
};

/// Generates `counts` press-on-beam trajectories with per-trajectory RNG
/// streams derived from the seed, writes them plus a manifest under
/// `out_dir`, and returns the manifest. Byte-identical for identical
/// (config, counts, seed).
inline DatasetManifest generate_dataset(const oracle::OracleConfig& cfg, SplitCounts counts,
                                        std::uint64_t seed,
                                        const std::filesystem::path& out_dir) {
  if (counts.train < 0 || counts.valid < 0 || counts.test < 0 ||
      counts.train + counts.valid + counts.test == 0)
    throw DataError("generate_dataset: need a positive number of trajectories");
  std::filesystem::create_directories(out_dir);

  DatasetManifest manifest;
  manifest.seed = seed;
  manifest.generator = cfg.to_json();

  int index = 0;
  auto emit = [&](int n, const std::string& split) {
    for (int i = 0; i < n; ++i, ++index) {
      const Trajectory traj = oracle::generate_trajectory(cfg, mix_seed(seed, index));
      char name[32];
      std::snprintf(name, sizeof(name), "traj_%04d.json", index);
      save_trajectory(out_dir / name, traj);
      manifest.trajectories.push_back({name, split});
    }
  };
  emit(counts.train, "train");
  emit(counts.valid, "valid");
  emit(counts.test, "test");
  save_manifest(out_dir / "manifest.json", manifest);
  return manifest;
}

// ---------------------------------------------------------------------------
// Evaluation report output
// ---------------------------------------------------------------------------

inline json eval_report_to_json(const simulate::EvalReport& report) {
  json j;
  j["quantities"] = report.quantities;
  j["rmse"] = report.rmse;
  json agg = json::object();
  for (std::size_t q = 0; q < report.quantities.size(); ++q) {
    agg[report.quantities[q]] = {{"error_50", report.error(static_cast<int>(q), 50)},
                                 {"error_full", report.error(static_cast<int>(q), 0)}};
  }
  j["aggregate"] = agg;
  return j;
}

inline void save_eval_report(const std::filesystem::path& json_path,
                             const std::filesystem::path& csv_path,
                             const simulate::EvalReport& report) {
  if (!json_path.empty()) {
    AtomicFile file(json_path);
    file.stream() << eval_report_to_json(report).dump(2) << "\n";
    file.commit();
  }
  if (!csv_path.empty()) {
    AtomicFile file(csv_path);
    file.stream() << "trajectory,frame,quantity,rmse\n";
    for (std::size_t tr = 0; tr < report.rmse.size(); ++tr) {
      for (std::size_t q = 0; q < report.quantities.size(); ++q) {
        const auto& series = report.rmse[tr][q];
        for (std::size_t fr = 0; fr < series.size(); ++fr) {
          file.stream() << tr << "," << fr + 1 << "," << report.quantities[q] << ","
                        << series[fr] << "\n";
        }
      }
    }
    file.commit();
  }
}

}  // namespace maven::dataio
