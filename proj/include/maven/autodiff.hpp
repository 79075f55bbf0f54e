#pragma once

#include "maven/common.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace maven::ad {

class Tape;

/// Handle to a node in a Tape's computation record.
struct Value {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  inline int rows() const;
  inline int cols() const;
  inline const Mat& val() const;
};

/// Reverse-mode computation record over dense row-major f64 matrices.
/// The tape is rebuilt every forward pass; backward() consumes it.
/// In checked mode every op verifies its result is finite.
class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;  // empty until touched during backward
    std::function<void(Tape&)> backward;
  };

  const Mat& value(int id) const { return nodes_[id].value; }
  int size() const { return static_cast<int>(nodes_.size()); }
  void set_checked(bool on) { checked_ = on; }
  bool checked() const { return checked_; }

  void reset() { nodes_.clear(); }

  Value leaf(Mat m) {
    check_finite(m, "leaf");
    nodes_.push_back(Node{std::move(m), Mat(), nullptr});
    return Value{this, size() - 1};
  }
  /// Alias for leaf; used for inputs whose gradient is never read.
  Value constant(Mat m) { return leaf(std::move(m)); }

  Value add(Value a, Value b) {
    require_same_shape(a, b, "add");
    return push(value(a.id) + value(b.id), [ia = a.id, ib = b.id](Tape& t) {
      const Mat& g = t.nodes_[t.cursor_].grad;
      t.ensure_grad(ia) += g;
      t.ensure_grad(ib) += g;
    });
  }

  Value sub(Value a, Value b) {
    require_same_shape(a, b, "sub");
    return push(value(a.id) - value(b.id), [ia = a.id, ib = b.id](Tape& t) {
      const Mat& g = t.nodes_[t.cursor_].grad;
      t.ensure_grad(ia) += g;
      t.ensure_grad(ib) -= g;
    });
  }

  Value mul(Value a, Value b) {
    require_same_shape(a, b, "mul");
    return push(value(a.id).cwiseProduct(value(b.id)), [ia = a.id, ib = b.id](Tape& t) {
      const Mat& g = t.nodes_[t.cursor_].grad;
      t.ensure_grad(ia) += g.cwiseProduct(t.value(ib));
      t.ensure_grad(ib) += g.cwiseProduct(t.value(ia));
    });
  }

  Value scale(Value a, double s) {
    return push(value(a.id) * s, [ia = a.id, s](Tape& t) {
      t.ensure_grad(ia) += t.nodes_[t.cursor_].grad * s;
    });
  }

  Value matmul(Value a, Value b) {
    if (value(a.id).cols() != value(b.id).rows())
      throw ShapeError("matmul: inner dimensions disagree (" + shape_str(a) + " vs " +
                       shape_str(b) + ")");
    return push(value(a.id) * value(b.id), [ia = a.id, ib = b.id](Tape& t) {
      const Mat& g = t.nodes_[t.cursor_].grad;
      t.ensure_grad(ia) += g * t.value(ib).transpose();
      t.ensure_grad(ib) += t.value(ia).transpose() * g;
    });
  }

  /// m (n x d) + bias (1 x d), broadcast over rows.
  Value add_bias(Value m, Value bias) {
    if (value(bias.id).rows() != 1 || value(bias.id).cols() != value(m.id).cols())
      throw ShapeError("add_bias: bias must be 1 x cols(m)");
    Mat out = value(m.id);
    out.rowwise() += value(bias.id).row(0);
    return push(std::move(out), [im = m.id, ib = bias.id](Tape& t) {
      const Mat& g = t.nodes_[t.cursor_].grad;
      t.ensure_grad(im) += g;
      t.ensure_grad(ib) += g.colwise().sum();
    });
  }

  Value relu(Value a) {
    return push(value(a.id).cwiseMax(0.0), [ia = a.id](Tape& t) {
      const Mat& g = t.nodes_[t.cursor_].grad;
      t.ensure_grad(ia) += (t.value(ia).array() > 0.0).cast<double>().matrix().cwiseProduct(g);
    });
  }

  /// Row-wise normalization to zero mean / unit variance (epsilon 1e-6),
  /// followed by the learned affine gamma, beta (each 1 x d).
  Value layer_norm(Value x, Value gamma, Value beta) {
    static constexpr double kEps = 1e-6;
    const Mat& xv = value(x.id);
    const int d = static_cast<int>(xv.cols());
    if (value(gamma.id).rows() != 1 || value(gamma.id).cols() != d || value(beta.id).rows() != 1 ||
        value(beta.id).cols() != d)
      throw ShapeError("layer_norm: gamma/beta must be 1 x cols(x)");

    Mat xhat(xv.rows(), d);
    VecX inv_std(xv.rows());
    for (int i = 0; i < xv.rows(); ++i) {
      const double mean = xv.row(i).mean();
      const double var = (xv.row(i).array() - mean).square().mean();
      inv_std[i] = 1.0 / std::sqrt(var + kEps);
      xhat.row(i) = (xv.row(i).array() - mean) * inv_std[i];
    }
    Mat out = xhat;
    out.array().rowwise() *= value(gamma.id).row(0).array();
    out.rowwise() += value(beta.id).row(0);
    return push(std::move(out),
                [ix = x.id, ig = gamma.id, ib = beta.id, xhat, inv_std](Tape& t) {
                  const Mat& g = t.nodes_[t.cursor_].grad;
                  t.ensure_grad(ib) += g.colwise().sum();
                  t.ensure_grad(ig) += g.cwiseProduct(xhat).colwise().sum();
                  Mat gx(g.rows(), g.cols());
                  const Eigen::RowVectorXd gamma_row = t.value(ig).row(0);
                  for (int i = 0; i < g.rows(); ++i) {
                    const Eigen::RowVectorXd dxhat = g.row(i).cwiseProduct(gamma_row);
                    const double m1 = dxhat.mean();
                    const double m2 = dxhat.cwiseProduct(xhat.row(i)).mean();
                    gx.row(i) =
                        (((dxhat.array() - m1) - xhat.row(i).array() * m2) * inv_std[i]).matrix();
                  }
                  t.ensure_grad(ix) += gx;
                });
  }

  Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no operands");
    const int rows = value(parts[0].id).rows();
    int cols = 0;
    for (const Value& p : parts) {
      if (value(p.id).rows() != rows) throw ShapeError("concat_cols: row counts disagree");
      cols += static_cast<int>(value(p.id).cols());
    }
    Mat out(rows, cols);
    std::vector<int> ids, offsets;
    int at = 0;
    for (const Value& p : parts) {
      const int w = static_cast<int>(value(p.id).cols());
      out.middleCols(at, w) = value(p.id);
      ids.push_back(p.id);
      offsets.push_back(at);
      at += w;
    }
    return push(std::move(out), [ids, offsets](Tape& t) {
      const Mat& g = t.nodes_[t.cursor_].grad;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        const int w = static_cast<int>(t.value(ids[k]).cols());
        t.ensure_grad(ids[k]) += g.middleCols(offsets[k], w);
      }
    });
  }

  Value slice_cols(Value a, int first, int count) {
    if (first < 0 || count <= 0 || first + count > value(a.id).cols())
      throw ShapeError("slice_cols: range out of bounds");
    return push(Mat(value(a.id).middleCols(first, count)), [ia = a.id, first, count](Tape& t) {
      t.ensure_grad(ia).middleCols(first, count) += t.nodes_[t.cursor_].grad;
    });
  }

  /// Per-row sum: (n x d) -> (n x 1).
  Value row_sum(Value a) {
    return push(Mat(value(a.id).rowwise().sum()), [ia = a.id](Tape& t) {
      const Mat& g = t.nodes_[t.cursor_].grad;
      t.ensure_grad(ia).array().colwise() += g.col(0).array();
    });
  }

  Value sum_all(Value a) {
    Mat out(1, 1);
    out(0, 0) = value(a.id).sum();
    return push(std::move(out), [ia = a.id](Tape& t) {
      t.ensure_grad(ia).array() += t.nodes_[t.cursor_].grad(0, 0);
    });
  }

  /// Mean squared error over all entries: (1/N) sum (a-b)^2.
  Value mse(Value a, Value b) {
    require_same_shape(a, b, "mse");
    const double n = static_cast<double>(value(a.id).size());
    Mat out(1, 1);
    out(0, 0) = (value(a.id) - value(b.id)).squaredNorm() / n;
    return push(std::move(out), [ia = a.id, ib = b.id, n](Tape& t) {
      const double g = t.nodes_[t.cursor_].grad(0, 0);
      const Mat d = (t.value(ia) - t.value(ib)) * (2.0 * g / n);
      t.ensure_grad(ia) += d;
      t.ensure_grad(ib) -= d;
    });
  }

  Value gather_rows(Value a, std::vector<int> idx) {
    const Mat& av = value(a.id);
    Mat out(static_cast<int>(idx.size()), av.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= av.rows()) throw ShapeError("gather_rows: index out of range");
      out.row(static_cast<int>(i)) = av.row(idx[i]);
    }
    return push(std::move(out), [ia = a.id, idx = std::move(idx)](Tape& t) {
      const Mat& g = t.nodes_[t.cursor_].grad;
      Mat& ga = t.ensure_grad(ia);
      for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<int>(i));
    });
  }

  /// Scatter-add of rows into segments: out[seg[i]] += a[i].
  Value segment_sum(Value a, std::vector<int> seg, int num_segments) {
    const Mat& av = value(a.id);
    if (static_cast<int>(seg.size()) != av.rows())
      throw ShapeError("segment_sum: one segment id per row required");
    Mat out = Mat::Zero(num_segments, av.cols());
    for (int i = 0; i < av.rows(); ++i) {
      if (seg[i] < 0 || seg[i] >= num_segments)
        throw ShapeError("segment_sum: segment id out of range");
      out.row(seg[i]) += av.row(i);
    }
    return push(std::move(out), [ia = a.id, seg = std::move(seg)](Tape& t) {
      const Mat& g = t.nodes_[t.cursor_].grad;
      Mat& ga = t.ensure_grad(ia);
      for (int i = 0; i < ga.rows(); ++i) ga.row(i) += g.row(seg[i]);
    });
  }

  /// Scales row i of a (n x d) by s[i] (n x 1).
  Value scale_rows(Value a, Value s) {
    if (value(s.id).cols() != 1 || value(s.id).rows() != value(a.id).rows())
      throw ShapeError("scale_rows: scale must be rows(a) x 1");
    Mat out = value(a.id);
    out.array().colwise() *= value(s.id).col(0).array();
    return push(std::move(out), [ia = a.id, is = s.id](Tape& t) {
      const Mat& g = t.nodes_[t.cursor_].grad;
      Mat ga = g;
      ga.array().colwise() *= t.value(is).col(0).array();
      t.ensure_grad(ia) += ga;
      t.ensure_grad(is).col(0) += g.cwiseProduct(t.value(ia)).rowwise().sum();
    });
  }

  /// Softmax over each row.
  Value softmax_rows(Value a) {
    const Mat& av = value(a.id);
    Mat out(av.rows(), av.cols());
    for (int i = 0; i < av.rows(); ++i) {
      const double m = av.row(i).maxCoeff();
      Eigen::RowVectorXd e = (av.row(i).array() - m).exp();
      out.row(i) = e / e.sum();
    }
    return push(std::move(out), [ia = a.id](Tape& t) {
      const Mat& g = t.nodes_[t.cursor_].grad;
      const Mat& y = t.nodes_[t.cursor_].value;
      Mat gx(g.rows(), g.cols());
      for (int i = 0; i < g.rows(); ++i) {
        const double dot = g.row(i).dot(y.row(i));
        gx.row(i) = (y.row(i).array() * (g.row(i).array() - dot)).matrix();
      }
      t.ensure_grad(ia) += gx;
    });
  }

  /// Softmax of a column vector within each segment; segments may be
  /// non-contiguous and of any size >= 1.
  Value segment_softmax(Value a, std::vector<int> seg, int num_segments) {
    const Mat& av = value(a.id);
    if (av.cols() != 1) throw ShapeError("segment_softmax: input must be a column");
    if (static_cast<int>(seg.size()) != av.rows())
      throw ShapeError("segment_softmax: one segment id per row required");

    VecX seg_max = VecX::Constant(num_segments, -std::numeric_limits<double>::infinity());
    for (int i = 0; i < av.rows(); ++i) {
      if (seg[i] < 0 || seg[i] >= num_segments)
        throw ShapeError("segment_softmax: segment id out of range");
      seg_max[seg[i]] = std::max(seg_max[seg[i]], av(i, 0));
    }
    VecX denom = VecX::Zero(num_segments);
    Mat out(av.rows(), 1);
    for (int i = 0; i < av.rows(); ++i) {
      out(i, 0) = std::exp(av(i, 0) - seg_max[seg[i]]);
      denom[seg[i]] += out(i, 0);
    }
    for (int i = 0; i < av.rows(); ++i) out(i, 0) /= denom[seg[i]];

    return push(std::move(out), [ia = a.id, seg = std::move(seg), num_segments](Tape& t) {
      const Mat& g = t.nodes_[t.cursor_].grad;
      const Mat& y = t.nodes_[t.cursor_].value;
      VecX seg_dot = VecX::Zero(num_segments);
      for (int i = 0; i < y.rows(); ++i) seg_dot[seg[i]] += g(i, 0) * y(i, 0);
      Mat gx(y.rows(), 1);
      for (int i = 0; i < y.rows(); ++i) gx(i, 0) = y(i, 0) * (g(i, 0) - seg_dot[seg[i]]);
      t.ensure_grad(ia) += gx;
    });
  }

  /// Row-major flatten: (n x d) -> (n*d x 1).
  Value flatten(Value a) {
    const Mat& av = value(a.id);
    Mat out = Eigen::Map<const Mat>(av.data(), av.size(), 1);
    return push(std::move(out), [ia = a.id](Tape& t) {
      const Mat& g = t.nodes_[t.cursor_].grad;
      Mat& ga = t.ensure_grad(ia);
      ga += Eigen::Map<const Mat>(g.data(), ga.rows(), ga.cols());
    });
  }

  /// Reverse sweep from a scalar loss. Returns the gradients of the requested
  /// values (zeros where the loss does not depend on them) and clears the
  /// tape; handles into this tape are invalid afterwards.
  std::vector<Mat> backward(Value loss, const std::vector<Value>& wanted) {
    if (loss.tape != this || !loss.valid()) throw ShapeError("backward: loss not on this tape");
    if (value(loss.id).rows() != 1 || value(loss.id).cols() != 1)
      throw ShapeError("backward: loss must be a 1x1 scalar");

    std::vector<int> wanted_ids;
    wanted_ids.reserve(wanted.size());
    for (const Value& w : wanted) {
      if (w.tape != this || !w.valid()) throw ShapeError("backward: wanted value not on tape");
      wanted_ids.push_back(w.id);
    }

    ensure_grad(loss.id)(0, 0) = 1.0;
    for (cursor_ = loss.id; cursor_ >= 0; --cursor_) {
      Node& node = nodes_[cursor_];
      if (node.grad.size() == 0 || !node.backward) continue;
      node.backward(*this);
    }

    std::vector<Mat> grads;
    grads.reserve(wanted.size());
    for (int id : wanted_ids) {
      if (nodes_[id].grad.size() == 0) {
        grads.push_back(Mat::Zero(nodes_[id].value.rows(), nodes_[id].value.cols()));
      } else {
        grads.push_back(std::move(nodes_[id].grad));
      }
    }
    reset();
    return grads;
  }

 private:
  friend struct Value;

  Mat& ensure_grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Value push(Mat out, std::function<void(Tape&)> back) {
    check_finite(out, "op result");
    nodes_.push_back(Node{std::move(out), Mat(), std::move(back)});
    return Value{this, size() - 1};
  }

  void check_finite(const Mat& m, const char* where) const {
    if (checked_ && !m.allFinite())
      throw NumericError(std::string("tape: non-finite value in ") + where);
  }

  void require_same_shape(Value a, Value b, const char* op) const {
    if (value(a.id).rows() != value(b.id).rows() || value(a.id).cols() != value(b.id).cols())
      throw ShapeError(std::string(op) + ": shapes disagree (" + shape_str(a) + " vs " +
                       shape_str(b) + ")");
  }

  std::string shape_str(Value v) const {
    return std::to_string(value(v.id).rows()) + "x" + std::to_string(value(v.id).cols());
  }

  std::vector<Node> nodes_;
  int cursor_ = -1;
  bool checked_ = true;
};

inline int Value::rows() const { return static_cast<int>(tape->value(id).rows()); }
inline int Value::cols() const { return static_cast<int>(tape->value(id).cols()); }
inline const Mat& Value::val() const { return tape->value(id); }

}  // namespace maven::ad
