#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

namespace maven {

using Vec3 = Eigen::Vector3d;
// Dense matrices are row-major throughout: checkpoint payloads and feature
// tables are defined over row-major f64 layout.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecX = Eigen::VectorXd;

// Error taxonomy. CLI maps UsageError -> 1, DataError -> 2, NumericError -> 3.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TopologyError : DataError {
  using DataError::DataError;
};
struct ShapeError : NumericError {
  using NumericError::NumericError;
};

// SplitMix64 step; used to derive independent RNG streams from one seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, const std::string& salt) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : salt) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return mix_seed(seed, h);
}

/// Write-temp-then-rename file writer; an interrupted run never leaves a
/// truncated file at the final path.
class AtomicFile {
 public:
  explicit AtomicFile(const std::filesystem::path& path, bool binary = false)
      : final_(path), tmp_(path.string() + ".tmp") {
    out_.open(tmp_, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!out_) throw DataError("cannot open " + tmp_.string() + " for writing");
  }
  AtomicFile(const AtomicFile&) = delete;
  AtomicFile& operator=(const AtomicFile&) = delete;
  ~AtomicFile() {
    if (!committed_) {
      out_.close();
      std::error_code ec;
      std::filesystem::remove(tmp_, ec);
    }
  }

  std::ostream& stream() { return out_; }

  void commit() {
    out_.flush();
    if (!out_) throw DataError("write to " + tmp_.string() + " failed");
    out_.close();
    std::filesystem::rename(tmp_, final_);
    committed_ = true;
  }

 private:
  std::filesystem::path final_, tmp_;
  std::ofstream out_;
  bool committed_ = false;
};

}  // namespace maven
