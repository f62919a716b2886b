#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "lidar_rcnn/network.hpp"
#include "lidar_rcnn/targets.hpp"

using namespace lidar_rcnn;

namespace {

Eigen::MatrixXd random_points(Eigen::Index n, int channels, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.5);
  Eigen::MatrixXd x(n, channels);
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = g(rng);
  return x;
}

struct Batch {
  std::vector<Eigen::MatrixXd> points;
  std::vector<int> labels;
  Eigen::MatrixXd targets;
  std::vector<char> positive;
};

// Loss of a whole batch, optionally accumulating parameter gradients.
double batch_loss(const PointNetModel<double>& model, const Batch& b, double scale = 1.0,
                  GradientSet<double>* grads = nullptr) {
  const auto n = static_cast<Eigen::Index>(b.points.size());
  Eigen::MatrixXd logits(n, model.shape.num_classes + 1), reg(n, kRegressionDims);
  std::vector<ForwardCache<double>> caches(b.points.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto p = forward(model, b.points[static_cast<std::size_t>(i)],
                           &caches[static_cast<std::size_t>(i)]);
    logits.row(i) = p.logits;
    reg.row(i) = p.regression;
  }
  std::unique_ptr<bool[]> pos(new bool[b.positive.size()]);
  for (std::size_t i = 0; i < b.positive.size(); ++i) pos[i] = b.positive[i] != 0;
  Eigen::MatrixXd dl, dr;
  const double cls = classification_loss(logits, b.labels, &dl);
  const double rl =
      regression_loss(reg, b.targets, std::span<const bool>(pos.get(), b.positive.size()), 1.0, &dr);
  if (grads) {
    for (Eigen::Index i = 0; i < n; ++i) {
      backward(model, caches[static_cast<std::size_t>(i)], Eigen::RowVectorXd(scale * dl.row(i)),
               Eigen::RowVectorXd(scale * 20.0 * dr.row(i)), *grads);
    }
  }
  return scale * total_loss(cls, rl, LossConfig{});
}

Batch random_batch(std::size_t n, Eigen::Index pts, int channels, int classes, std::mt19937_64& rng) {
  Batch b;
  std::uniform_int_distribution<int> lab(0, classes);
  std::normal_distribution<double> t(0.0, 0.4);
  b.targets.resize(static_cast<Eigen::Index>(n), kRegressionDims);
  for (std::size_t i = 0; i < n; ++i) {
    b.points.push_back(random_points(pts, channels, rng));
    b.labels.push_back(lab(rng));
    b.positive.push_back(b.labels.back() != 0);
    for (int k = 0; k < kRegressionDims; ++k) b.targets(static_cast<Eigen::Index>(i), k) = t(rng);
  }
  return b;
}

std::vector<double*> parameter_slots(PointNetModel<double>& m) {
  std::vector<double*> out;
  m.for_each_tensor([&out](auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) out.push_back(t.data() + i);
  });
  return out;
}

std::vector<double> flatten(const GradientSet<double>& g) {
  std::vector<double> out;
  g.for_each_tensor([&out](const auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) out.push_back(t.data()[i]);
  });
  return out;
}

}  // namespace

TEST(InitModel, DeterministicPerSeed) {
  Rng a(7), b(7), c(8);
  const auto m1 = init_model<double>(a, {});
  const auto m2 = init_model<double>(b, {});
  const auto m3 = init_model<double>(c, {});
  std::vector<Eigen::MatrixXd> t1, t2, t3;
  m1.for_each_tensor([&](const auto& t) { t1.emplace_back(t); });
  m2.for_each_tensor([&](const auto& t) { t2.emplace_back(t); });
  m3.for_each_tensor([&](const auto& t) { t3.emplace_back(t); });
  EXPECT_EQ(t1, t2);
  EXPECT_NE(t1, t3);
}

TEST(InitModel, Shapes) {
  Rng rng(1);
  const auto m = init_model<double>(rng, {9, {64, 64, 512}, 3});
  EXPECT_EQ(m.embed[0].weight.rows(), 9);
  EXPECT_EQ(m.embed[0].weight.cols(), 64);
  EXPECT_EQ(m.cls_head.out(), 4);
  EXPECT_EQ(m.reg_head.out(), 7);
  for (const auto& layer : m.embed) EXPECT_EQ(layer.bias.cwiseAbs().sum(), 0.0);
  EXPECT_THROW(init_model<double>(rng, {3, {64, 0}, 3}), std::invalid_argument);
  EXPECT_THROW(init_model<double>(rng, {0, {64}, 3}), std::invalid_argument);
}

TEST(InitModel, ParameterCount) {
  Rng rng(1);
  // embed 3->64->64->512, heads 512->4 and 512->7
  constexpr std::size_t expected = 3 * 64 + 64 + 64 * 64 + 64 + 64 * 512 + 512 + 512 * 4 + 4 + 512 * 7 + 7;
  EXPECT_EQ(expected, 43339u);
  EXPECT_EQ(init_model<double>(rng, {3, {64, 64, 512}, 3}).parameter_count(), expected);
  // layer-by-layer sum for the doubled widths
  auto count = [](int in, std::vector<int> widths, int c) {
    std::size_t n = 0;
    for (int w : widths) {
      n += static_cast<std::size_t>(in * w + w);
      in = w;
    }
    return n + static_cast<std::size_t>(in * (c + 1) + c + 1 + in * 7 + 7);
  };
  EXPECT_EQ(init_model<double>(rng, {9, {128, 128, 1024}, 2}).parameter_count(),
            count(9, {128, 128, 1024}, 2));
}

TEST(InitModel, EffectiveWeightsAreFanInScaled) {
  Rng rng(3);
  const auto m = init_model<double>(rng, {3, {64, 64, 512}, 3});
  const auto& w = m.embed[2];
  const Eigen::ArrayXd eff = (w.weight * w.multiplier()).reshaped().array();
  const double sd = std::sqrt((eff - eff.mean()).square().mean());
  EXPECT_NEAR(sd, std::sqrt(2.0 / 64.0), 0.03 * std::sqrt(2.0 / 64.0));
  EXPECT_NEAR(eff.mean(), 0.0, 0.01);
}

TEST(Forward, PermutationInvariantBitwise) {
  std::mt19937_64 rng(4);
  Rng init(4);
  const auto m = init_model<double>(init, {4, {64, 64, 512}, 2});
  const auto mf = init_model<float>(init, {4, {64, 64, 512}, 2});
  for (Eigen::Index n : {512, 37, 576}) {
    const Eigen::MatrixXd x = random_points(n, 4, rng);
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::MatrixXd y(n, 4);
    for (Eigen::Index i = 0; i < n; ++i) y.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
    const auto a = forward(m, x), b = forward(m, y);
    EXPECT_TRUE(a.logits == b.logits) << n;
    EXPECT_TRUE(a.regression == b.regression) << n;
    const Eigen::MatrixXf xf = x.cast<float>(), yf = y.cast<float>();
    EXPECT_TRUE(forward(mf, xf).logits == forward(mf, yf).logits) << n;
  }
}

TEST(Forward, DuplicatedPointsChangeNothing) {
  std::mt19937_64 rng(5);
  Rng init(5);
  const auto m = init_model<double>(init, {3, {64, 64, 512}, 3});
  const Eigen::MatrixXd x = random_points(100, 3, rng);
  Eigen::MatrixXd xx(200, 3);
  xx << x, x;
  const auto a = forward(m, x), b = forward(m, xx);
  EXPECT_TRUE(a.logits == b.logits);
  EXPECT_TRUE(a.regression == b.regression);
}

TEST(Forward, ZeroWeightsGiveBiases) {
  Rng init(6);
  auto m = init_model<double>(init, {3, {8, 8, 16}, 3});
  m.for_each_tensor([](auto& t) { t.setZero(); });
  m.cls_head.bias << 1, -2, 3, 0.5;
  m.reg_head.bias.setLinSpaced(7, -3, 3);
  std::mt19937_64 rng(6);
  const auto p = forward(m, random_points(10, 3, rng));
  EXPECT_EQ(p.logits, Eigen::RowVectorXd(m.cls_head.bias));
  EXPECT_EQ(p.regression, Eigen::RowVectorXd(m.reg_head.bias));
}

TEST(Forward, RejectsShapeMismatch) {
  Rng init(1);
  const auto m = init_model<double>(init, {3, {8}, 1});
  EXPECT_THROW(forward(m, Eigen::MatrixXd(Eigen::MatrixXd::Zero(5, 4))), std::invalid_argument);
  EXPECT_THROW(forward(m, Eigen::MatrixXd(Eigen::MatrixXd::Zero(0, 3))), std::invalid_argument);
}

TEST(Backward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  double worst = 0.0;
  std::string where;
  for (int draw = 0; draw < 20; ++draw) {
    Rng init(100 + draw);
    auto m = init_model<double>(init, {draw % 2 ? 9 : 3, {16, 16, 32}, 2});
    // larger head weights so every parameter receives a measurable gradient
    m.cls_head.weight *= 50.0;
    m.reg_head.weight *= 50.0;
    const Batch b = random_batch(4, 16, m.shape.input_channels, 2, rng);
    auto g = GradientSet<double>::zeros_like(m);
    const double loss = batch_loss(m, b, 1.0, &g);
    // central differences cannot resolve gradients much below eps * loss / h
    const double floor = 1e-6 * std::max(1.0, std::abs(loss));
    const auto analytic = flatten(g);
    auto slots = parameter_slots(m);
    ASSERT_EQ(slots.size(), analytic.size());
    const double h = 1e-5;
    for (std::size_t k = 0; k < slots.size(); ++k) {
      const double orig = *slots[k];
      *slots[k] = orig + h;
      const double up = batch_loss(m, b);
      *slots[k] = orig - h;
      const double down = batch_loss(m, b);
      *slots[k] = orig;
      const double fd = (up - down) / (2 * h);
      const double denom = std::max({std::abs(fd), std::abs(analytic[k]), floor});
      const double rel = std::abs(fd - analytic[k]) / denom;
      if (rel > worst) {
        worst = rel;
        where = "draw " + std::to_string(draw) + " slot " + std::to_string(k) + " of " +
                std::to_string(slots.size()) + ": fd " + std::to_string(fd) + " analytic " +
                std::to_string(analytic[k]);
      }
    }
  }
  EXPECT_LE(worst, 1e-4) << where;
}

TEST(Backward, AllBackgroundLeavesRegressionHeadUntouched) {
  std::mt19937_64 rng(12);
  Rng init(12);
  const auto m = init_model<double>(init, {3, {16, 16, 32}, 2});
  Batch b = random_batch(6, 16, 3, 2, rng);
  for (std::size_t i = 0; i < b.labels.size(); ++i) {
    b.labels[i] = 0;
    b.positive[i] = 0;
  }
  auto g = GradientSet<double>::zeros_like(m);
  batch_loss(m, b, 1.0, &g);
  EXPECT_EQ(g.reg_head.weight.cwiseAbs().sum(), 0.0);
  EXPECT_EQ(g.reg_head.bias.cwiseAbs().sum(), 0.0);
  EXPECT_GT(g.cls_head.weight.cwiseAbs().sum(), 0.0);
}

TEST(Backward, LinearInLossScale) {
  std::mt19937_64 rng(13);
  Rng init(13);
  const auto m = init_model<double>(init, {3, {16, 16, 32}, 2});
  const Batch b = random_batch(4, 16, 3, 2, rng);
  auto g1 = GradientSet<double>::zeros_like(m), g2 = GradientSet<double>::zeros_like(m);
  batch_loss(m, b, 1.0, &g1);
  batch_loss(m, b, 2.0, &g2);
  const auto a = flatten(g1), c = flatten(g2);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(c[i], 2.0 * a[i]);
}

TEST(Backward, RejectsStaleCache) {
  std::mt19937_64 rng(14);
  Rng init(14);
  auto m = init_model<double>(init, {3, {8, 8}, 1});
  ForwardCache<double> cache;
  forward(m, random_points(5, 3, rng), &cache);
  auto g = GradientSet<double>::zeros_like(m);
  auto opt = OptimizerState<double>::create(m, {});
  sgd_step(m, g, opt, 0.1);
  EXPECT_THROW(backward(m, cache, Eigen::RowVectorXd::Zero(2), Eigen::RowVectorXd::Zero(7), g),
               std::logic_error);
  auto other = init_model<double>(init, {3, {8, 8}, 1});
  forward(m, random_points(5, 3, rng), &cache);
  EXPECT_THROW(backward(other, cache, Eigen::RowVectorXd::Zero(2), Eigen::RowVectorXd::Zero(7), g),
               std::logic_error);
}

TEST(SgdStep, Examples) {
  Rng init(1);
  auto m = init_model<double>(init, {1, {1}, 1});
  const auto before = m;
  auto g = GradientSet<double>::zeros_like(m);
  auto opt = OptimizerState<double>::create(m, {0.9, 0.0});
  sgd_step(m, g, opt, 0.1);
  EXPECT_EQ(m.embed[0].weight, before.embed[0].weight);
  EXPECT_EQ(m.cls_head.weight, before.cls_head.weight);

  // scalar hand update
  m.embed[0].weight(0, 0) = 1.0;
  g.embed[0].weight(0, 0) = 1.0;
  sgd_step(m, g, opt, 0.1);
  EXPECT_NEAR(m.embed[0].weight(0, 0), 0.9, 1e-15);
  EXPECT_EQ(opt.velocity.embed[0].weight(0, 0), 1.0);

  // second identical gradient: step grows by 1 + m
  const double p1 = m.embed[0].weight(0, 0);
  sgd_step(m, g, opt, 0.1);
  EXPECT_NEAR((p1 - m.embed[0].weight(0, 0)) / (1.0 - p1), 1.9, 1e-12);
}

TEST(SgdStep, WeightDecayAndNonFinite) {
  Rng init(2);
  auto m = init_model<double>(init, {1, {1}, 1});
  m.embed[0].weight(0, 0) = 2.0;
  auto g = GradientSet<double>::zeros_like(m);
  auto opt = OptimizerState<double>::create(m, {0.0, 0.5});
  sgd_step(m, g, opt, 0.1);
  EXPECT_DOUBLE_EQ(m.embed[0].weight(0, 0), 2.0 - 0.1 * 0.5 * 2.0);

  const auto rev = m.revision;
  g.cls_head.bias(0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(sgd_step(m, g, opt, 0.1), NonFiniteGradient);
  EXPECT_EQ(m.revision, rev);
}

TEST(PolyLr, Examples) {
  EXPECT_EQ(poly_lr(0, 1000, 0.02), 0.02);
  EXPECT_EQ(poly_lr(1000, 1000, 0.02), 0.0);
  EXPECT_DOUBLE_EQ(poly_lr(500, 1000, 0.02), 0.01);
  EXPECT_DOUBLE_EQ(poly_lr(500, 1000, 0.02, 2.0), 0.005);
  EXPECT_THROW(poly_lr(1001, 1000, 0.02), std::invalid_argument);
  EXPECT_THROW(poly_lr(-1, 1000, 0.02), std::invalid_argument);
  double prev = 1.0;
  for (int i = 0; i <= 100; ++i) {
    const double lr = poly_lr(i, 100, 0.02);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(GradientClip, RescalesToMaxNorm) {
  Rng init(3);
  const auto m = init_model<double>(init, {3, {4}, 1});
  auto g = GradientSet<double>::zeros_like(m);
  g.embed[0].weight.setConstant(1.0);  // 12 entries
  g.cls_head.bias.setConstant(2.0);    // 2 entries
  const double n0 = std::sqrt(12.0 + 8.0);
  EXPECT_DOUBLE_EQ(clip_gradient_norm(g, 0.0), n0);
  EXPECT_DOUBLE_EQ(g.norm(), n0);
  EXPECT_DOUBLE_EQ(clip_gradient_norm(g, 1.0), n0);
  EXPECT_NEAR(g.norm(), 1.0, 1e-12);
  EXPECT_NEAR(g.cls_head.bias(0) / g.embed[0].weight(0, 0), 2.0, 1e-12);
}

// Fixed batch whose labels and targets are functions of the point extent.
TEST(Training, FixedBatchLossHalves) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> size(0.4, 4.0), u(-0.5, 0.5);
  Batch b;
  b.targets.resize(64, kRegressionDims);
  for (int i = 0; i < 64; ++i) {
    const double sx = size(rng), sy = size(rng), sz = 0.5 * size(rng);
    Eigen::MatrixXd x(64, 3);
    for (Eigen::Index r = 0; r < 64; ++r) x.row(r) << sx * u(rng), sy * u(rng), sz * u(rng);
    b.points.push_back(x);
    const double area = sx * sy;
    b.labels.push_back(area < 2.0 ? 2 : (area > 6.0 ? 1 : 0));
    b.positive.push_back(b.labels.back() != 0);
    b.targets.row(i) << 0.1 * sx, -0.1 * sy, 0.0, std::log(sx / 2), std::log(sy / 2),
        std::log(sz), 0.05 * (sx - sy);
  }
  Rng init(21);
  auto m = init_model<double>(init, {3, {64, 64, 512}, 2});
  auto opt = OptimizerState<double>::create(m, {0.9, 1e-5});
  const double initial = batch_loss(m, b);
  double last = initial;
  for (int step = 0; step < 200; ++step) {
    auto g = GradientSet<double>::zeros_like(m);
    last = batch_loss(m, b, 1.0, &g);
    sgd_step(m, g, opt, poly_lr(step, 200, 0.02));
  }
  last = batch_loss(m, b);
  EXPECT_LT(last, 0.5 * initial) << "initial " << initial << " final " << last;
}
