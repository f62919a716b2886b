#pragma once

// Label assignment, box regression targets and the classification/regression
// losses of the refinement stage.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lidar_rcnn/geometry.hpp"

namespace lidar_rcnn {

inline constexpr int kRegressionDims = 7;
using RegressionVector = std::array<double, kRegressionDims>;

struct RefinementTarget {
  int class_label = 0;  // 0 = background, 1..C = foreground classes
  RegressionVector regression{};  // center (3), log size (3), heading (1)
  bool valid_regression = false;
};

struct LossConfig {
  double lambda = 20.0;
  double smooth_l1_beta = 1.0;
  std::map<std::string, double> iou_pos_threshold{{"vehicle", 0.7},
                                                  {"pedestrian", 0.5},
                                                  {"cyclist", 0.5}};

  double threshold_for(const std::string& cls) const {
    auto it = iou_pos_threshold.find(cls);
    if (it == iou_pos_threshold.end()) {
      throw std::out_of_range("no IoU threshold for class '" + cls + "'");
    }
    return it->second;
  }
};

struct LabelledBox {
  Box7 box;
  std::string cls;
};

struct Assignment {
  int class_label = 0;
  std::optional<std::size_t> matched;  // index into the ground-truth list
  double iou = 0.0;
};

/// Matches the proposal to the ground truth of highest 3D IoU; the proposal is
/// foreground only if that IoU reaches the matched class's threshold.
/// `classes` maps class names to labels 1..C.
inline Assignment assign_label(const Box7& proposal,
                               std::span<const LabelledBox> gts,
                               const std::vector<std::string>& classes,
                               const LossConfig& cfg) {
  Assignment out;
  std::optional<std::size_t> best;
  double best_iou = -1.0;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    const double iou = iou_3d(proposal, gts[i].box);
    if (iou > best_iou) {
      best_iou = iou;
      best = i;
    }
  }
  if (!best) return out;
  out.iou = best_iou;
  const LabelledBox& gt = gts[*best];
  if (best_iou >= cfg.threshold_for(gt.cls)) {
    auto it = std::find(classes.begin(), classes.end(), gt.cls);
    if (it == classes.end()) {
      throw std::out_of_range("ground-truth class '" + gt.cls + "' not in class list");
    }
    out.class_label = static_cast<int>(it - classes.begin()) + 1;
    out.matched = best;
  }
  return out;
}

/// Heading residual folded modulo pi into (-pi/2, pi/2].
inline double heading_target(double theta_gt, double theta) {
  double d = std::fmod(theta_gt - theta, kPi);
  if (d < 0.0) d += kPi;  // [0, pi)
  if (d >= kPi) d -= kPi;
  return d <= 0.5 * kPi ? d : d - kPi;
}

/// Dimensions used in the size-target denominators: the proposal's own, or a
/// class anchor when the anchor encoding is active.
struct SizeReference {
  double w = 0.0;
  double l = 0.0;
  double h = 0.0;

  static SizeReference of(const Box7& b) { return {b.w, b.l, b.h}; }
};

/// Center offsets are measured in the proposal's canonical frame, so the
/// targets are unchanged by a joint rigid motion of proposal and ground truth.
inline RegressionVector encode_targets(const Box7& proposal, const Box7& gt,
                                       std::optional<SizeReference> size_ref = {}) {
  const SizeReference ref = size_ref.value_or(SizeReference::of(proposal));
  const Point3 d = to_canonical(gt.center(), proposal);
  return {d.x / proposal.w,
          d.y / proposal.l,
          d.z / proposal.h,
          std::log(gt.w / ref.w),
          std::log(gt.l / ref.l),
          std::log(gt.h / ref.h),
          heading_target(gt.theta, proposal.theta)};
}

inline Box7 decode_box(const Box7& proposal, std::span<const double, kRegressionDims> reg,
                       std::optional<SizeReference> size_ref = {}) {
  const SizeReference ref = size_ref.value_or(SizeReference::of(proposal));
  const Point3 c = from_canonical(
      Point3{reg[0] * proposal.w, reg[1] * proposal.l, reg[2] * proposal.h}, proposal);
  Box7 out{c.x,
           c.y,
           c.z,
           ref.w * std::exp(reg[3]),
           ref.l * std::exp(reg[4]),
           ref.h * std::exp(reg[5]),
           0.0};
  if (!std::isfinite(reg[6]) || !out.valid()) {
    throw std::domain_error("decode_box: regression produced a non-finite box");
  }
  out.theta = wrap_heading(proposal.theta + reg[6]);
  return out;
}

inline Box7 decode_box(const Box7& proposal, const RegressionVector& reg,
                       std::optional<SizeReference> size_ref = {}) {
  return decode_box(proposal, std::span<const double, kRegressionDims>(reg), size_ref);
}

// ---------------------------------------------------------------------------
// Losses. Each returns the batch loss and writes d(loss)/d(input) when a
// gradient buffer is supplied.

/// Mean softmax cross entropy. `logits` is (batch x classes).
inline double classification_loss(const Eigen::MatrixXd& logits,
                                  std::span<const int> labels,
                                  Eigen::MatrixXd* grad = nullptr) {
  const Eigen::Index batch = logits.rows();
  if (static_cast<std::size_t>(batch) != labels.size()) {
    throw std::invalid_argument("classification_loss: label count mismatch");
  }
  if (grad) grad->setZero(logits.rows(), logits.cols());
  if (batch == 0) return 0.0;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < batch; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols()) {
      throw std::out_of_range("classification_loss: label out of range");
    }
    const double m = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - m).exp().matrix();
    const double z = e.sum();
    loss += -(logits(i, y) - m - std::log(z));
    if (grad) {
      grad->row(i) = e / z;
      (*grad)(i, y) -= 1.0;
    }
  }
  if (grad) *grad /= static_cast<double>(batch);
  return loss / static_cast<double>(batch);
}

inline double smooth_l1(double d, double beta) {
  const double a = std::abs(d);
  return a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
}

inline double smooth_l1_grad(double d, double beta) {
  const double a = std::abs(d);
  if (a < beta) return d / beta;
  return d > 0.0 ? 1.0 : -1.0;
}

/// Smooth-L1 summed over the seven components and averaged over positives.
/// Rows with `positive[i] == false` contribute neither loss nor gradient.
inline double regression_loss(const Eigen::MatrixXd& predictions,
                              const Eigen::MatrixXd& targets,
                              std::span<const bool> positive, double beta = 1.0,
                              Eigen::MatrixXd* grad = nullptr) {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols() ||
      static_cast<std::size_t>(predictions.rows()) != positive.size()) {
    throw std::invalid_argument("regression_loss: shape mismatch");
  }
  if (grad) grad->setZero(predictions.rows(), predictions.cols());
  const auto n_pos = std::count(positive.begin(), positive.end(), true);
  if (n_pos == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(n_pos);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < predictions.rows(); ++i) {
    if (!positive[static_cast<std::size_t>(i)]) continue;
    for (Eigen::Index k = 0; k < predictions.cols(); ++k) {
      const double d = predictions(i, k) - targets(i, k);
      loss += smooth_l1(d, beta);
      if (grad) (*grad)(i, k) = smooth_l1_grad(d, beta) * inv;
    }
  }
  return loss * inv;
}

inline double total_loss(double cls, double reg, const LossConfig& cfg) {
  return cls + cfg.lambda * reg;
}

}  // namespace lidar_rcnn
