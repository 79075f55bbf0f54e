#pragma once

#include "maven/common.hpp"

#include <json.hpp>

#include <cmath>

namespace maven {

/// Streaming per-feature Gaussian standardization. Statistics use the
/// population convention; the standard deviation is floored at 1e-8 so
/// constant features standardize to zero instead of blowing up.
class Normalizer {
 public:
  static constexpr double kStdFloor = 1e-8;

  Normalizer() = default;
  explicit Normalizer(int dim)
      : sum_(VecX::Zero(dim)), sumsq_(VecX::Zero(dim)), count_(0.0) {}

  int dim() const { return static_cast<int>(sum_.size()); }
  double count() const { return count_; }

  /// Each row of `rows` is one observation.
  void accumulate(const Mat& rows) {
    if (rows.cols() != sum_.size()) throw ShapeError("Normalizer: feature width mismatch");
    sum_ += rows.colwise().sum().transpose();
    sumsq_ += rows.array().square().matrix().colwise().sum().transpose();
    count_ += static_cast<double>(rows.rows());
  }

  VecX mean() const {
    if (count_ <= 0.0) return VecX::Zero(sum_.size());
    return sum_ / count_;
  }

  VecX std() const {
    VecX s(sum_.size());
    if (count_ <= 0.0) {
      s.setOnes();
      return s;
    }
    const VecX m = mean();
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      const double var = std::max(0.0, sumsq_[i] / count_ - m[i] * m[i]);
      s[i] = std::max(kStdFloor, std::sqrt(var));
    }
    return s;
  }

  Mat standardize(const Mat& rows) const {
    if (rows.cols() != sum_.size()) throw ShapeError("Normalizer: feature width mismatch");
    Mat out = rows;
    const VecX m = mean(), s = std();
    out.rowwise() -= m.transpose();
    out.array().rowwise() /= s.transpose().array();
    return out;
  }

  Mat destandardize(const Mat& rows) const {
    if (rows.cols() != sum_.size()) throw ShapeError("Normalizer: feature width mismatch");
    Mat out = rows;
    const VecX m = mean(), s = std();
    out.array().rowwise() *= s.transpose().array();
    out.rowwise() += m.transpose();
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["sum"] = std::vector<double>(sum_.data(), sum_.data() + sum_.size());
    j["sumsq"] = std::vector<double>(sumsq_.data(), sumsq_.data() + sumsq_.size());
    j["count"] = count_;
    return j;
  }

  static Normalizer from_json(const nlohmann::json& j) {
    const auto sum = j.at("sum").get<std::vector<double>>();
    const auto sumsq = j.at("sumsq").get<std::vector<double>>();
    Normalizer n(static_cast<int>(sum.size()));
    n.sum_ = Eigen::Map<const VecX>(sum.data(), sum.size());
    n.sumsq_ = Eigen::Map<const VecX>(sumsq.data(), sumsq.size());
    n.count_ = j.at("count").get<double>();
    return n;
  }

 private:
  VecX sum_ = VecX::Zero(0);
  VecX sumsq_ = VecX::Zero(0);
  double count_ = 0.0;
};

}  // namespace maven
