#pragma once

// Detection evaluation: greedy one-to-one matching, all-point AP, heading
// weighted APH, and the class x difficulty x range report grid.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lidar_rcnn/geometry.hpp"

namespace lidar_rcnn {

struct Detection {
  Box7 box;
  double score = 0.0;
  std::string cls;
};

enum class MatchIou { k3d, kBev };

inline double match_iou(const Box7& a, const Box7& b, MatchIou kind) {
  return kind == MatchIou::k3d ? iou_3d(a, b) : bev_iou(a, b);
}

struct MatchResult {
  std::vector<std::size_t> order;          // detection indices by descending score
  std::vector<bool> tp;                    // per detection, in input order
  std::vector<std::optional<std::size_t>> matched_gt;  // per detection
  std::vector<bool> gt_matched;            // per gt
};

/// Ranks by descending score; ties keep input order.
inline std::vector<std::size_t> score_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

/// Each detection, best score first, claims the still-unmatched ground truth
/// of highest IoU provided it reaches the threshold.
inline MatchResult match(std::span<const Box7> dets, std::span<const double> scores,
                         std::span<const Box7> gts, double iou_threshold,
                         MatchIou kind = MatchIou::k3d) {
  MatchResult r;
  r.order = score_order(scores);
  r.tp.assign(dets.size(), false);
  r.matched_gt.assign(dets.size(), std::nullopt);
  r.gt_matched.assign(gts.size(), false);
  for (std::size_t d : r.order) {
    double best = -1.0;
    std::optional<std::size_t> at;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (r.gt_matched[g]) continue;
      const double iou = match_iou(dets[d], gts[g], kind);
      if (iou > best) {
        best = iou;
        at = g;
      }
    }
    if (at && best >= iou_threshold) {
      r.tp[d] = true;
      r.matched_gt[d] = at;
      r.gt_matched[*at] = true;
    }
  }
  return r;
}

/// One ranked detection as seen by the PR accumulation.
struct RankedFlag {
  bool tp = false;
  double weight = 1.0;  // heading weight for APH, 1 for AP
};

enum class Interpolation { kAllPoints, k11Point, k40Point };

/// Area under the monotonized PR curve; flags must already be ranked.
/// Recall counts true positives; precision uses the (possibly heading
/// weighted) true-positive mass.
inline double weighted_ap(std::span<const RankedFlag> ranked, std::size_t num_gt,
                          Interpolation interp = Interpolation::kAllPoints) {
  if (num_gt == 0) return ranked.empty() ? 1.0 : 0.0;
  const std::size_t n = ranked.size();
  std::vector<double> recall(n), precision(n);
  double tp_count = 0.0;
  double tp_mass = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (ranked[i].tp) {
      tp_count += 1.0;
      tp_mass += ranked[i].weight;
    }
    recall[i] = tp_count / static_cast<double>(num_gt);
    precision[i] = tp_mass / static_cast<double>(i + 1);
  }
  for (std::size_t i = n; i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  if (interp == Interpolation::kAllPoints) {
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (recall[i] > prev_recall) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
      }
    }
    return ap;
  }
  const int samples = interp == Interpolation::k11Point ? 11 : 40;
  double ap = 0.0;
  for (int s = 0; s < samples; ++s) {
    const double r = interp == Interpolation::k11Point
                         ? static_cast<double>(s) / 10.0
                         : static_cast<double>(s + 1) / 40.0;
    double p = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (recall[i] >= r) {
        p = precision[i];
        break;
      }
    }
    ap += p;
  }
  return ap / samples;
}

/// Ranked TP/FP flags to AP.
inline double average_precision(const std::vector<bool>& ranked_tp, std::size_t num_gt,
                                Interpolation interp = Interpolation::kAllPoints) {
  std::vector<RankedFlag> flags;
  flags.reserve(ranked_tp.size());
  for (bool tp : ranked_tp) flags.push_back({tp, 1.0});
  return weighted_ap(flags, num_gt, interp);
}

/// Heading error in [0, pi] using the full 2*pi residual.
inline double heading_error(double a, double b) {
  const double d = std::abs(wrap_heading(a - b));
  return std::min(d, kTwoPi - d);
}

/// APH: each true positive weighs (1 - heading_error / pi).
inline double aph(const std::vector<bool>& ranked_tp, std::span<const double> heading_errors,
                  std::size_t num_gt, Interpolation interp = Interpolation::kAllPoints) {
  std::vector<RankedFlag> flags;
  flags.reserve(ranked_tp.size());
  for (std::size_t i = 0; i < ranked_tp.size(); ++i) {
    const double w = ranked_tp[i] ? std::clamp(1.0 - heading_errors[i] / kPi, 0.0, 1.0) : 0.0;
    flags.push_back({ranked_tp[i], w});
  }
  return weighted_ap(flags, num_gt, interp);
}

// ---------------------------------------------------------------------------
// Evaluation grid

struct EvalSpec {
  std::map<std::string, double> iou_threshold{{"vehicle", 0.7},
                                              {"pedestrian", 0.5},
                                              {"cyclist", 0.5}};
  std::size_t level1_min_points = 5;
  std::size_t level2_min_points = 1;
  std::vector<double> range_edges{30.0, 50.0};  // bins [0,30) [30,50) [50,inf)
  MatchIou matching = MatchIou::k3d;
  Interpolation interpolation = Interpolation::kAllPoints;

  double threshold_for(const std::string& cls) const {
    auto it = iou_threshold.find(cls);
    if (it == iou_threshold.end()) {
      throw std::out_of_range("no IoU threshold for class '" + cls + "'");
    }
    return it->second;
  }

  std::vector<std::string> range_labels() const {
    std::vector<std::string> out{"Overall"};
    double lo = 0.0;
    auto fmt = [](double v) {
      const auto r = std::llround(v);
      return std::abs(v - static_cast<double>(r)) < 1e-9 ? std::to_string(r)
                                                         : std::to_string(v);
    };
    for (double e : range_edges) {
      out.push_back(fmt(lo) + "-" + fmt(e) + "m");
      lo = e;
    }
    out.push_back(fmt(lo) + "m-Inf");
    return out;
  }

  /// 1-based bin index (0 is Overall).
  std::size_t range_bin(double r) const {
    std::size_t b = 1;
    for (double e : range_edges) {
      if (r < e) return b;
      ++b;
    }
    return b;
  }
};

struct EvalFrame {
  std::string frame;
  std::vector<Detection> detections;
  std::vector<Detection> gts;  // score unused
  // points inside each gt; empty when the frame's cloud is unavailable
  std::optional<std::vector<std::size_t>> gt_points;
};

struct MetricCell {
  double ap = 0.0;
  double aph = 0.0;
  std::size_t num_gt = 0;
  std::size_t num_det = 0;
};

enum class Difficulty { kLevel1, kLevel2 };

inline const char* difficulty_name(Difficulty d) {
  return d == Difficulty::kLevel1 ? "LEVEL_1" : "LEVEL_2";
}

struct EvalReport {
  std::vector<std::string> classes;
  std::vector<std::string> ranges;
  // cells[class][difficulty][range]
  std::map<std::string, std::map<Difficulty, std::vector<MetricCell>>> cells;
  std::vector<std::string> warnings;

  const MetricCell& at(const std::string& cls, Difficulty d, std::size_t range = 0) const {
    return cells.at(cls).at(d).at(range);
  }
};

inline EvalReport evaluate(std::span<const EvalFrame> frames,
                           const std::vector<std::string>& classes, const EvalSpec& spec) {
  EvalReport report;
  report.classes = classes;
  report.ranges = spec.range_labels();
  const std::size_t n_ranges = report.ranges.size();

  struct Entry {
    double score;
    bool tp;
    double heading_err;
    std::size_t frame_order;
  };

  for (const auto& cls : classes) {
    const double thr = spec.threshold_for(cls);
    // per difficulty, per range: ranked entries and gt counts
    std::map<Difficulty, std::vector<std::vector<Entry>>> entries;
    std::map<Difficulty, std::vector<std::size_t>> gt_count;
    for (Difficulty d : {Difficulty::kLevel1, Difficulty::kLevel2}) {
      entries[d].resize(n_ranges);
      gt_count[d].assign(n_ranges, 0);
    }
    std::size_t seq = 0;
    for (const auto& f : frames) {
      std::vector<Box7> det_boxes, gt_boxes;
      std::vector<double> scores;
      std::vector<std::size_t> gt_src;
      for (const auto& d : f.detections) {
        if (d.cls != cls) continue;
        det_boxes.push_back(d.box);
        scores.push_back(d.score);
      }
      for (std::size_t g = 0; g < f.gts.size(); ++g) {
        if (f.gts[g].cls != cls) continue;
        gt_boxes.push_back(f.gts[g].box);
        gt_src.push_back(g);
      }
      if (!f.gt_points) {
        report.warnings.push_back("frame " + f.frame +
                                  ": no point cloud, ground truth counted as LEVEL_2 only");
      }
      // gt membership per difficulty
      auto in_level = [&](std::size_t local, Difficulty d) {
        if (!f.gt_points) return d == Difficulty::kLevel2;
        const std::size_t pts = (*f.gt_points)[gt_src[local]];
        return pts >= (d == Difficulty::kLevel1 ? spec.level1_min_points
                                                : spec.level2_min_points);
      };
      const MatchResult m = match(det_boxes, scores, gt_boxes, thr, spec.matching);
      for (Difficulty d : {Difficulty::kLevel1, Difficulty::kLevel2}) {
        for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
          if (!in_level(g, d)) continue;
          gt_count[d][0] += 1;
          gt_count[d][spec.range_bin(bev_range(gt_boxes[g]))] += 1;
        }
        for (std::size_t i = 0; i < det_boxes.size(); ++i) {
          const std::size_t det_bin = spec.range_bin(bev_range(det_boxes[i]));
          if (m.matched_gt[i]) {
            const std::size_t g = *m.matched_gt[i];
            // detections matched to ground truth outside this stratum are ignored
            if (!in_level(g, d)) continue;
            const double err = heading_error(det_boxes[i].theta, gt_boxes[g].theta);
            const std::size_t gt_bin = spec.range_bin(bev_range(gt_boxes[g]));
            entries[d][0].push_back({scores[i], true, err, seq + i});
            entries[d][gt_bin].push_back({scores[i], true, err, seq + i});
          } else {
            entries[d][0].push_back({scores[i], false, 0.0, seq + i});
            entries[d][det_bin].push_back({scores[i], false, 0.0, seq + i});
          }
        }
      }
      seq += det_boxes.size();
    }
    for (Difficulty d : {Difficulty::kLevel1, Difficulty::kLevel2}) {
      auto& row = report.cells[cls][d];
      row.resize(n_ranges);
      for (std::size_t r = 0; r < n_ranges; ++r) {
        auto& list = entries[d][r];
        std::stable_sort(list.begin(), list.end(), [](const Entry& a, const Entry& b) {
          if (a.score != b.score) return a.score > b.score;
          return a.frame_order < b.frame_order;
        });
        std::vector<bool> tp;
        std::vector<double> errs;
        for (const auto& e : list) {
          tp.push_back(e.tp);
          errs.push_back(e.heading_err);
        }
        MetricCell cell;
        cell.num_gt = gt_count[d][r];
        cell.num_det = list.size();
        cell.ap = average_precision(tp, cell.num_gt, spec.interpolation);
        cell.aph = aph(tp, errs, cell.num_gt, spec.interpolation);
        row[r] = cell;
      }
    }
  }
  return report;
}

}  // namespace lidar_rcnn
