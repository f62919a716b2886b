#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include "lidar_rcnn/metrics.hpp"

using namespace lidar_rcnn;

namespace {

// Integrates the monotonized PR step function piece by piece over recall.
double brute_force_ap(const std::vector<bool>& ranked, std::size_t num_gt) {
  if (num_gt == 0) return ranked.empty() ? 1.0 : 0.0;
  std::vector<double> prec, rec;
  double tp = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    tp += ranked[k] ? 1 : 0;
    prec.push_back(tp / static_cast<double>(k + 1));
    rec.push_back(tp / static_cast<double>(num_gt));
  }
  std::set<double> levels(rec.begin(), rec.end());
  double ap = 0.0, lo = 0.0;
  for (double r : levels) {
    if (r <= 0.0) continue;
    double best = 0.0;
    for (std::size_t k = 0; k < rec.size(); ++k) {
      if (rec[k] >= r) best = std::max(best, prec[k]);
    }
    ap += (r - lo) * best;
    lo = r;
  }
  return ap;
}

Box7 car(double x, double y, double theta = 0.0) { return make_box(x, y, 0.75, 2, 4, 1.5, theta); }

EvalFrame frame(std::string id, std::vector<Detection> dets, std::vector<Detection> gts,
                std::vector<std::size_t> points) {
  EvalFrame f;
  f.frame = std::move(id);
  f.detections = std::move(dets);
  f.gts = std::move(gts);
  f.gt_points = std::move(points);
  return f;
}

}  // namespace

TEST(Match, Examples) {
  const std::vector<Box7> gts{car(0, 0), car(0, 10)};
  std::vector<Box7> dets = gts;
  std::vector<double> scores{0.9, 0.8};
  auto m = match(dets, scores, gts, 0.7);
  EXPECT_EQ(m.tp, (std::vector<bool>{true, true}));

  dets = {car(0, 0), car(0.1, 0)};
  m = match(dets, std::vector<double>{0.5, 0.9}, std::span(gts).first(1), 0.7);
  EXPECT_EQ(m.tp, (std::vector<bool>{false, true}));
  EXPECT_EQ(m.order, (std::vector<std::size_t>{1, 0}));
}

TEST(Match, HandCaseThreeDetectionsTwoGts) {
  const std::vector<Box7> gts{car(0, 0), car(0, 10)};
  // IoU 0.86 with gt 0, IoU 1 with gt 0, IoU 0.78 with gt 1
  const std::vector<Box7> dets{car(0.3, 0), car(0, 0), car(0.5, 10)};
  const std::vector<double> scores{0.9, 0.8, 0.7};
  const auto m = match(dets, scores, gts, 0.7);
  EXPECT_EQ(m.tp, (std::vector<bool>{true, false, true}));
  EXPECT_EQ(m.matched_gt[0], 0u);
  EXPECT_EQ(m.matched_gt[2], 1u);
  EXPECT_NEAR(average_precision({true, false, true}, 2), 5.0 / 6.0, 1e-15);
  EXPECT_NEAR(brute_force_ap({true, false, true}, 2), 5.0 / 6.0, 1e-15);
}

// Checks the greedy rule directly against every detection's alternatives.
TEST(Match, RandomCasesObeyGreedyRule) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> pos(-3, 3), s(0, 1), t(-0.3, 0.3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<Box7> gts, dets;
    std::vector<double> scores;
    for (int g = 0; g < 3; ++g) gts.push_back(car(pos(rng), pos(rng), t(rng)));
    for (int d = 0; d < 4; ++d) {
      const Box7& near = gts[static_cast<std::size_t>(d % 3)];
      dets.push_back(car(near.x + 0.3 * pos(rng), near.y + 0.3 * pos(rng), t(rng)));
      scores.push_back(s(rng));
    }
    const auto m = match(dets, scores, gts, 0.5);
    std::vector<bool> claimed(gts.size(), false);
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    for (std::size_t d : order) {
      double best = -1;
      std::size_t at = 0;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        const double iou = iou_3d(dets[d], gts[g]);
        if (!claimed[g] && iou > best) {
          best = iou;
          at = g;
        }
      }
      const bool expect_tp = best >= 0.5;
      ASSERT_EQ(m.tp[d], expect_tp);
      if (expect_tp) {
        ASSERT_EQ(m.matched_gt[d], at);
        claimed[at] = true;
      }
    }
    ASSERT_EQ(m.gt_matched, claimed);
  }
}

TEST(AveragePrecision, Examples) {
  EXPECT_EQ(average_precision({true, true, true}, 3), 1.0);
  EXPECT_EQ(average_precision({false}, 1), 0.0);
  EXPECT_NEAR(average_precision({true, false, true}, 2), 5.0 / 6.0, 1e-15);
  EXPECT_EQ(average_precision({}, 0), 1.0);
  EXPECT_EQ(average_precision({false}, 0), 0.0);
  EXPECT_EQ(average_precision({}, 3), 0.0);
  EXPECT_NEAR(average_precision({true}, 2), 0.5, 1e-15);
}

TEST(AveragePrecision, MatchesBruteForceForSmallLists) {
  // every flag pattern of up to 10 detections, with a range of gt counts
  for (int n = 0; n <= 10; ++n) {
    for (int mask = 0; mask < (1 << n); ++mask) {
      std::vector<bool> flags;
      std::size_t tps = 0;
      for (int i = 0; i < n; ++i) {
        flags.push_back((mask >> i) & 1);
        tps += flags.back() ? 1 : 0;
      }
      for (std::size_t extra : {0u, 2u}) {
        const std::size_t num_gt = tps + extra;
        ASSERT_NEAR(average_precision(flags, num_gt), brute_force_ap(flags, num_gt), 1e-12)
            << "n=" << n << " mask=" << mask;
      }
    }
  }
}

TEST(AveragePrecision, InterpolationModes) {
  EXPECT_NEAR(average_precision({true}, 1, Interpolation::k11Point), 1.0, 1e-15);
  EXPECT_NEAR(average_precision({true}, 1, Interpolation::k40Point), 1.0, 1e-15);
  // recall 0.5 at precision 1: 11-point samples 0, 0.1, ..., 0.5 -> 6 / 11
  EXPECT_NEAR(average_precision({true}, 2, Interpolation::k11Point), 6.0 / 11.0, 1e-12);
  // the 40-point variant skips recall 0: samples 1/40 ... 20/40 -> 20 / 40
  EXPECT_NEAR(average_precision({true}, 2, Interpolation::k40Point), 0.5, 1e-12);
}

TEST(Aph, Examples) {
  const std::vector<bool> flags{true, false, true};
  const std::vector<double> exact{0.0, 0.0, 0.0};
  EXPECT_EQ(aph(flags, exact, 2), average_precision(flags, 2));
  const std::vector<double> flipped{std::numbers::pi};
  EXPECT_EQ(aph({true}, flipped, 1), 0.0);
  const std::vector<double> half{std::numbers::pi / 2};
  EXPECT_NEAR(aph({true}, half, 1), 0.5, 1e-15);
}

TEST(Aph, NeverExceedsAp) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> err(0, std::numbers::pi);
  std::bernoulli_distribution coin(0.6);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<bool> flags;
    std::vector<double> errs;
    bool any_error = false;
    std::size_t tps = 0;
    for (int i = 0; i < 8; ++i) {
      flags.push_back(coin(rng));
      const double e = trial % 3 == 0 ? 0.0 : err(rng);
      errs.push_back(e);
      tps += flags.back();
      any_error = any_error || (flags.back() && e > 0.0);
    }
    const double ap = average_precision(flags, tps + 1), h = aph(flags, errs, tps + 1);
    ASSERT_LE(h, ap + 1e-15);
    if (any_error) {
      ASSERT_LT(h, ap);
    } else {
      ASSERT_EQ(h, ap);
    }
  }
}

TEST(HeadingError, UsesFullCircle) {
  EXPECT_NEAR(heading_error(0.0, std::numbers::pi), std::numbers::pi, 1e-15);
  EXPECT_NEAR(heading_error(3.0, -3.0), 2 * std::numbers::pi - 6.0, 1e-12);
  EXPECT_NEAR(heading_error(0.2, 0.1), 0.1, 1e-15);
}

TEST(EvalSpec, RangeBins) {
  EvalSpec spec;
  EXPECT_EQ(spec.range_labels(), (std::vector<std::string>{"Overall", "0-30m", "30-50m", "50m-Inf"}));
  EXPECT_EQ(spec.range_bin(0.0), 1u);
  EXPECT_EQ(spec.range_bin(29.999), 1u);
  EXPECT_EQ(spec.range_bin(30.0), 2u);
  EXPECT_EQ(spec.range_bin(50.0), 3u);
  EXPECT_EQ(spec.threshold_for("vehicle"), 0.7);
  EXPECT_EQ(spec.threshold_for("pedestrian"), 0.5);
}

TEST(Evaluate, IdenticalDetectionsScorePerfectly) {
  std::vector<Detection> gts{{car(10, 0), 0, "vehicle"}, {car(35, 0), 0, "vehicle"},
                             {car(60, 0), 0, "vehicle"},
                             {make_box(5, 5, 0.85, 0.8, 0.9, 1.7, 0), 0, "pedestrian"}};
  auto dets = gts;
  for (std::size_t i = 0; i < dets.size(); ++i) dets[i].score = 0.5 + 0.1 * i;
  const std::vector<EvalFrame> frames{frame("a", dets, gts, {10, 10, 10, 10})};
  const auto r = evaluate(frames, {"vehicle", "pedestrian"}, EvalSpec{});
  for (const auto& cls : r.classes) {
    for (Difficulty d : {Difficulty::kLevel1, Difficulty::kLevel2}) {
      for (std::size_t b = 0; b < r.ranges.size(); ++b) {
        EXPECT_EQ(r.at(cls, d, b).ap, 1.0) << cls << " " << b;
        EXPECT_EQ(r.at(cls, d, b).aph, 1.0) << cls << " " << b;
      }
    }
  }
  EXPECT_EQ(r.at("vehicle", Difficulty::kLevel2, 0).num_gt, 3u);
  EXPECT_EQ(r.at("vehicle", Difficulty::kLevel2, 2).num_gt, 1u);
}

TEST(Evaluate, DifficultyLevels) {
  std::vector<Detection> gts{{car(10, 0), 0, "vehicle"}, {car(10, 10), 0, "vehicle"},
                             {car(10, 20), 0, "vehicle"}};
  std::vector<Detection> dets{{car(10, 0), 0.9, "vehicle"}, {car(10, 10), 0.8, "vehicle"}};
  const std::vector<EvalFrame> frames{frame("a", dets, gts, {4, 5, 0})};
  const auto r = evaluate(frames, {"vehicle"}, EvalSpec{});
  // 4 points: LEVEL_2 only; 0 points: neither
  EXPECT_EQ(r.at("vehicle", Difficulty::kLevel1).num_gt, 1u);
  EXPECT_EQ(r.at("vehicle", Difficulty::kLevel2).num_gt, 2u);
  EXPECT_EQ(r.at("vehicle", Difficulty::kLevel1).ap, 1.0);
  EXPECT_EQ(r.at("vehicle", Difficulty::kLevel2).ap, 1.0);
  EXPECT_EQ(r.at("vehicle", Difficulty::kLevel1).num_det, 1u);
}

TEST(Evaluate, RangeBinOfGtAtThirtyMeters) {
  std::vector<Detection> gts{{car(30, 0), 0, "vehicle"}};
  const std::vector<EvalFrame> frames{frame("a", {{car(30, 0), 0.9, "vehicle"}}, gts, {50})};
  const auto r = evaluate(frames, {"vehicle"}, EvalSpec{});
  EXPECT_EQ(r.at("vehicle", Difficulty::kLevel2, 1).num_gt, 0u);
  EXPECT_EQ(r.at("vehicle", Difficulty::kLevel2, 2).num_gt, 1u);
}

TEST(Evaluate, MissingCloudFallsBackToLevel2) {
  EvalFrame f;
  f.frame = "nocloud";
  f.gts = {{car(10, 0), 0, "vehicle"}};
  f.detections = {{car(10, 0), 0.9, "vehicle"}};
  const std::vector<EvalFrame> frames{f};
  const auto r = evaluate(frames, {"vehicle"}, EvalSpec{});
  EXPECT_EQ(r.warnings.size(), 1u);
  EXPECT_EQ(r.at("vehicle", Difficulty::kLevel1).num_gt, 0u);
  EXPECT_EQ(r.at("vehicle", Difficulty::kLevel2).num_gt, 1u);
}

TEST(Evaluate, ScoreTransformsAndDuplicates) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1), p(-0.6, 0.6);
  std::vector<EvalFrame> frames;
  for (int k = 0; k < 10; ++k) {
    std::vector<Detection> gts, dets;
    for (int g = 0; g < 4; ++g) {
      const Box7 b = car(15.0 * g + 5, 3.0 * k);
      gts.push_back({b, 0, "vehicle"});
      dets.push_back({car(b.x + p(rng), b.y + 0.3 * p(rng), 0.2 * p(rng)), u(rng), "vehicle"});
    }
    frames.push_back(frame(std::to_string(k), dets, gts, {20, 20, 20, 20}));
  }
  const auto base = evaluate(frames, {"vehicle"}, EvalSpec{});
  const double ap0 = base.at("vehicle", Difficulty::kLevel2).ap;
  ASSERT_GT(ap0, 0.0);
  ASSERT_LT(ap0, 1.0);

  auto cubed = frames;
  for (auto& f : cubed)
    for (auto& d : f.detections) d.score = std::pow(d.score, 3.0);
  EXPECT_EQ(evaluate(cubed, {"vehicle"}, EvalSpec{}).at("vehicle", Difficulty::kLevel2).ap, ap0);

  // duplicate every detection at a lower score
  auto dup = frames;
  for (auto& f : dup) {
    const auto orig = f.detections;
    for (auto d : orig) {
      d.score *= 0.5;
      f.detections.push_back(d);
    }
  }
  EXPECT_LE(evaluate(dup, {"vehicle"}, EvalSpec{}).at("vehicle", Difficulty::kLevel2).ap, ap0);
}

TEST(Evaluate, BevMatchingIgnoresHeight) {
  std::vector<Detection> gts{{car(10, 0), 0, "vehicle"}};
  Box7 lifted = car(10, 0);
  lifted.z += 1.0;
  const std::vector<EvalFrame> frames{frame("a", {{lifted, 0.9, "vehicle"}}, gts, {50})};
  EvalSpec spec;
  EXPECT_EQ(evaluate(frames, {"vehicle"}, spec).at("vehicle", Difficulty::kLevel2).ap, 0.0);
  spec.matching = MatchIou::kBev;
  EXPECT_EQ(evaluate(frames, {"vehicle"}, spec).at("vehicle", Difficulty::kLevel2).ap, 1.0);
}
