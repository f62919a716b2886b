#pragma once

// Mini-PointNet: a shared per-point MLP, max-pooling over points, and two
// affine heads (classification over C+1 labels, 7-value box regression).
// Forward and backward passes are written out by hand.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lidar_rcnn/encoding.hpp"
#include "lidar_rcnn/targets.hpp"

namespace lidar_rcnn {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// y = x * weight / sqrt(in) + bias, applied row-wise. Keeping the fan-in
/// factor out of the stored weights makes one learning rate suit every layer
/// width, since there is no normalization layer to do it.
template <typename Scalar>
struct Affine {
  Matrix<Scalar> weight;  // (in x out)
  RowVector<Scalar> bias;  // (1 x out)

  Eigen::Index in() const { return weight.rows(); }
  Eigen::Index out() const { return weight.cols(); }
  Scalar multiplier() const {
    return static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(in())));
  }
  std::size_t parameter_count() const {
    return static_cast<std::size_t>(weight.size() + bias.size());
  }
};

struct ModelShape {
  int input_channels = 3;
  std::vector<int> widths{64, 64, 512};
  int num_classes = 3;  // foreground classes; the classifier has one more output

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

template <typename Scalar>
struct PointNetModel {
  ModelShape shape;
  std::vector<Affine<Scalar>> embed;
  Affine<Scalar> cls_head;
  Affine<Scalar> reg_head;
  std::uint64_t revision = 0;  // bumped on every update; not serialized

  /// All parameter tensors in a fixed order: (W, b) per embed layer, then the
  /// classification and regression heads.
  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    for (auto& layer : embed) {
      fn(layer.weight);
      fn(layer.bias);
    }
    fn(cls_head.weight);
    fn(cls_head.bias);
    fn(reg_head.weight);
    fn(reg_head.bias);
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    for (const auto& layer : embed) {
      fn(layer.weight);
      fn(layer.bias);
    }
    fn(cls_head.weight);
    fn(cls_head.bias);
    fn(reg_head.weight);
    fn(reg_head.bias);
  }

  std::size_t parameter_count() const {
    std::size_t n = cls_head.parameter_count() + reg_head.parameter_count();
    for (const auto& layer : embed) n += layer.parameter_count();
    return n;
  }

  Eigen::Index feature_width() const { return embed.back().out(); }
};

template <typename Scalar>
PointNetModel<Scalar> init_model(Rng& rng, const ModelShape& shape) {
  if (shape.input_channels <= 0 || shape.num_classes <= 0 || shape.widths.empty()) {
    throw std::invalid_argument("init_model: invalid shape");
  }
  for (int w : shape.widths) {
    if (w <= 0) throw std::invalid_argument("init_model: widths must be positive");
  }
  auto make = [&rng](int in, int out, double gain) {
    Affine<Scalar> a;
    a.weight.resize(in, out);
    a.bias = RowVector<Scalar>::Zero(out);
    std::normal_distribution<double> dist(0.0, gain);
    for (Eigen::Index j = 0; j < a.weight.cols(); ++j) {
      for (Eigen::Index i = 0; i < a.weight.rows(); ++i) {
        a.weight(i, j) = static_cast<Scalar>(dist(rng));
      }
    }
    return a;
  };
  PointNetModel<Scalar> m;
  m.shape = shape;
  int in = shape.input_channels;
  const double he = std::sqrt(2.0);
  for (int w : shape.widths) {
    m.embed.push_back(make(in, w, he));
    in = w;
  }
  m.cls_head = make(in, shape.num_classes + 1, 0.01);
  m.reg_head = make(in, kRegressionDims, 0.01);
  return m;
}

/// Activations of one proposal kept for the backward pass.
template <typename Scalar>
struct ForwardCache {
  std::vector<Matrix<Scalar>> activations;  // input, then post-ReLU per layer
  std::vector<Eigen::Index> argmax;         // winning point per pooled channel
  RowVector<Scalar> pooled;
  std::uint64_t model_tag = 0;
};

template <typename Scalar>
struct Prediction {
  Eigen::RowVectorXd logits;      // (C+1)
  Eigen::RowVectorXd regression;  // 7
};

namespace detail {

template <typename Scalar>
std::uint64_t model_tag(const PointNetModel<Scalar>& m) {
  // identifies the model instance and its shape; stale caches are rejected
  std::uint64_t h = reinterpret_cast<std::uintptr_t>(&m);
  h = h * 0x9E3779B97F4A7C15ULL ^ m.revision;
  return h * 0x9E3779B97F4A7C15ULL ^ m.parameter_count();
}

}  // namespace detail

/// Runs one proposal's (points x channels) features through the network.
template <typename Scalar>
Prediction<Scalar> forward(const PointNetModel<Scalar>& model,
                           const Matrix<Scalar>& points,
                           ForwardCache<Scalar>* cache = nullptr) {
  if (points.cols() != model.shape.input_channels) {
    throw std::invalid_argument("forward: expected " +
                                std::to_string(model.shape.input_channels) +
                                " input channels, got " + std::to_string(points.cols()));
  }
  if (points.rows() == 0) throw std::invalid_argument("forward: no points");

  // Pad with copies of the first point up to a whole number of GEMM row
  // panels. Eigen's remainder-row kernels round differently from the full
  // panels, which would make a point's embedding depend on where it sits in
  // the matrix. Copies cannot change the max, and ties resolve to the
  // original row.
  constexpr Eigen::Index panel = 3 * Eigen::internal::packet_traits<Scalar>::size;
  const Eigen::Index n = points.rows();
  const Eigen::Index padded = (n + panel - 1) / panel * panel;
  Matrix<Scalar> x(padded, points.cols());
  x.topRows(n) = points;
  for (Eigen::Index i = n; i < padded; ++i) x.row(i) = points.row(0);
  if (cache) {
    cache->activations.clear();
    cache->activations.push_back(x);
  }
  for (const auto& layer : model.embed) {
    Matrix<Scalar> z = (x * layer.multiplier()) * layer.weight;
    z.rowwise() += layer.bias;
    x = z.cwiseMax(Scalar(0));
    if (cache) cache->activations.push_back(x);
  }

  // max over points, ties to the lowest index
  const Eigen::Index width = x.cols();
  RowVector<Scalar> pooled(width);
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(width), 0);
  for (Eigen::Index c = 0; c < width; ++c) {
    Scalar best = x(0, c);
    Eigen::Index at = 0;
    for (Eigen::Index p = 1; p < x.rows(); ++p) {
      if (x(p, c) > best) {
        best = x(p, c);
        at = p;
      }
    }
    pooled(c) = best;
    arg[static_cast<std::size_t>(c)] = at;
  }

  const RowVector<Scalar> scaled = pooled * model.cls_head.multiplier();
  RowVector<Scalar> logits = scaled * model.cls_head.weight + model.cls_head.bias;
  RowVector<Scalar> reg = scaled * model.reg_head.weight + model.reg_head.bias;
  if (cache) {
    cache->argmax = std::move(arg);
    cache->pooled = pooled;
    cache->model_tag = detail::model_tag(model);
  }
  return {logits.template cast<double>(), reg.template cast<double>()};
}

/// Gradient tensors shaped like the model's parameters.
template <typename Scalar>
struct GradientSet {
  std::vector<Affine<Scalar>> embed;
  Affine<Scalar> cls_head;
  Affine<Scalar> reg_head;

  static GradientSet zeros_like(const PointNetModel<Scalar>& m) {
    GradientSet g;
    auto z = [](const Affine<Scalar>& a) {
      return Affine<Scalar>{Matrix<Scalar>::Zero(a.weight.rows(), a.weight.cols()),
                            RowVector<Scalar>::Zero(a.bias.size())};
    };
    for (const auto& layer : m.embed) g.embed.push_back(z(layer));
    g.cls_head = z(m.cls_head);
    g.reg_head = z(m.reg_head);
    return g;
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    for (auto& layer : embed) {
      fn(layer.weight);
      fn(layer.bias);
    }
    fn(cls_head.weight);
    fn(cls_head.bias);
    fn(reg_head.weight);
    fn(reg_head.bias);
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    for (const auto& layer : embed) {
      fn(layer.weight);
      fn(layer.bias);
    }
    fn(cls_head.weight);
    fn(cls_head.bias);
    fn(reg_head.weight);
    fn(reg_head.bias);
  }

  void scale(Scalar s) {
    for_each_tensor([s](auto& t) { t *= s; });
  }

  double norm() const {
    double sq = 0.0;
    for_each_tensor([&sq](const auto& t) { sq += t.template cast<double>().squaredNorm(); });
    return std::sqrt(sq);
  }
};

/// Rescales the gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. `max_norm <= 0` disables clipping.
template <typename Scalar>
double clip_gradient_norm(GradientSet<Scalar>& grads, double max_norm) {
  const double n = grads.norm();
  if (max_norm > 0.0 && n > max_norm) grads.scale(static_cast<Scalar>(max_norm / n));
  return n;
}

/// Accumulates into `grads` the parameter gradients given d(loss)/d(logits)
/// and d(loss)/d(regression) for the proposal cached by `forward`.
template <typename Scalar>
void backward(const PointNetModel<Scalar>& model, const ForwardCache<Scalar>& cache,
              const Eigen::RowVectorXd& dlogits, const Eigen::RowVectorXd& dreg,
              GradientSet<Scalar>& grads) {
  if (cache.model_tag != detail::model_tag(model) ||
      cache.activations.size() != model.embed.size() + 1) {
    throw std::logic_error("backward: cache does not belong to this model");
  }
  const RowVector<Scalar> gl = dlogits.cast<Scalar>();
  const RowVector<Scalar> gr = dreg.cast<Scalar>();

  const Scalar hm = model.cls_head.multiplier();
  const RowVector<Scalar> scaled = cache.pooled * hm;
  grads.cls_head.weight.noalias() += scaled.transpose() * gl;
  grads.cls_head.bias += gl;
  grads.reg_head.weight.noalias() += scaled.transpose() * gr;
  grads.reg_head.bias += gr;

  const RowVector<Scalar> gpool = (gl * model.cls_head.weight.transpose() +
                                   gr * model.reg_head.weight.transpose()) * hm;

  // Only the argmax point of each channel receives gradient, so the backward
  // pass runs on the (few) distinct winning points.
  const std::size_t L = model.embed.size();
  const Matrix<Scalar>& top = cache.activations[L];
  std::vector<Eigen::Index> rows;
  std::vector<Eigen::Index> slot(static_cast<std::size_t>(top.rows()), -1);
  for (Eigen::Index c = 0; c < top.cols(); ++c) {
    const Eigen::Index p = cache.argmax[static_cast<std::size_t>(c)];
    if (top(p, c) > Scalar(0) && gpool(c) != Scalar(0) &&
        slot[static_cast<std::size_t>(p)] < 0) {
      slot[static_cast<std::size_t>(p)] = static_cast<Eigen::Index>(rows.size());
      rows.push_back(p);
    }
  }
  if (rows.empty()) return;
  std::sort(rows.begin(), rows.end());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    slot[static_cast<std::size_t>(rows[i])] = static_cast<Eigen::Index>(i);
  }
  const auto n = static_cast<Eigen::Index>(rows.size());

  // gradient wrt the top layer's pre-activation on the gathered rows
  Matrix<Scalar> dz = Matrix<Scalar>::Zero(n, top.cols());
  for (Eigen::Index c = 0; c < top.cols(); ++c) {
    const Eigen::Index p = cache.argmax[static_cast<std::size_t>(c)];
    if (top(p, c) > Scalar(0)) dz(slot[static_cast<std::size_t>(p)], c) = gpool(c);
  }

  for (std::size_t k = L; k-- > 0;) {
    const Matrix<Scalar>& below = cache.activations[k];
    const Scalar m = model.embed[k].multiplier();
    Matrix<Scalar> x(n, below.cols());
    for (Eigen::Index i = 0; i < n; ++i) x.row(i) = below.row(rows[static_cast<std::size_t>(i)]);
    grads.embed[k].weight.noalias() += (x * m).transpose() * dz;
    grads.embed[k].bias += dz.colwise().sum();
    if (k == 0) break;
    Matrix<Scalar> dx = (dz * model.embed[k].weight.transpose()) * m;
    // ReLU of the layer below
    dz = (x.array() > Scalar(0)).select(dx, Scalar(0));
  }
}

// ---------------------------------------------------------------------------
// Optimization

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 1e-5;
};

template <typename Scalar>
struct OptimizerState {
  SgdConfig config;
  GradientSet<Scalar> velocity;

  static OptimizerState create(const PointNetModel<Scalar>& m, SgdConfig cfg) {
    return {cfg, GradientSet<Scalar>::zeros_like(m)};
  }
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// v <- m v + g + wd p ; p <- p - lr v
template <typename Scalar>
void sgd_step(PointNetModel<Scalar>& model, GradientSet<Scalar>& grads,
              OptimizerState<Scalar>& state, double lr) {
  std::size_t bad = 0;
  grads.for_each_tensor([&bad](auto& g) { bad += g.allFinite() ? 0 : 1; });
  if (bad != 0) {
    throw NonFiniteGradient("sgd_step: " + std::to_string(bad) +
                            " gradient tensor(s) contain non-finite values");
  }
  std::vector<Eigen::Map<Matrix<Scalar>>> params;
  std::vector<Eigen::Map<Matrix<Scalar>>> gs;
  std::vector<Eigen::Map<Matrix<Scalar>>> vs;
  auto collect = [](auto& list) {
    return [&list](auto& t) { list.emplace_back(t.data(), t.rows(), t.cols()); };
  };
  model.for_each_tensor(collect(params));
  grads.for_each_tensor(collect(gs));
  state.velocity.for_each_tensor(collect(vs));
  const auto m = static_cast<Scalar>(state.config.momentum);
  const auto wd = static_cast<Scalar>(state.config.weight_decay);
  const auto step = static_cast<Scalar>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    vs[i] = m * vs[i] + gs[i] + wd * params[i];
    params[i] -= step * vs[i];
  }
  ++model.revision;
}

inline double poly_lr(std::int64_t iter, std::int64_t max_iter, double lr0,
                      double power = 1.0) {
  if (max_iter <= 0 || iter < 0 || iter > max_iter) {
    throw std::invalid_argument("poly_lr: iteration out of range");
  }
  return lr0 * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter),
                        power);
}

}  // namespace lidar_rcnn
