#pragma once

// Training loop, refinement pass and latency benchmark.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lidar_rcnn/checkpoint.hpp"
#include "lidar_rcnn/config.hpp"
#include "lidar_rcnn/dataset.hpp"
#include "lidar_rcnn/encoding.hpp"
#include "lidar_rcnn/errors.hpp"
#include "lidar_rcnn/network.hpp"
#include "lidar_rcnn/parallel.hpp"
#include "lidar_rcnn/synthetic.hpp"
#include "lidar_rcnn/targets.hpp"

namespace lidar_rcnn {

/// Perturbs a box for augmentation: uniform noise on center, log-size, heading.
inline Box7 jitter_proposal(const Box7& box, Rng& rng, const BoxNoise& magnitudes) {
  return jitter_box(box, magnitudes, rng);
}

struct LogRecord {
  std::int64_t iteration = 0;  // 1-based, counted after the step
  int epoch = 0;               // 1-based
  double lr = 0.0;
  double cls_loss = 0.0;
  double reg_loss = 0.0;
  double total = 0.0;
};

inline json log_record_to_json(const LogRecord& r) {
  return {{"iteration", r.iteration}, {"epoch", r.epoch},       {"lr", r.lr},
          {"cls_loss", r.cls_loss},   {"reg_loss", r.reg_loss}, {"total", r.total}};
}

inline std::string log_to_jsonl(const std::vector<LogRecord>& log) {
  std::string out;
  for (const auto& r : log) out += log_record_to_json(r).dump() + "\n";
  return out;
}

inline std::vector<LogRecord> read_log(const fs::path& path) {
  std::vector<LogRecord> out;
  detail::for_each_jsonl(path, [&](const json& j, const std::string&) {
    out.push_back({j.at("iteration").get<std::int64_t>(), j.at("epoch").get<int>(),
                   j.at("lr").get<double>(), j.at("cls_loss").get<double>(),
                   j.at("reg_loss").get<double>(), j.at("total").get<double>()});
  });
  return out;
}

/// One training or inference example: a box to be scored and refined within
/// a frame's cloud.
struct Sample {
  const PointCloud* cloud = nullptr;
  Box7 box;
  std::string cls;  // first-stage class; selects the anchor
  RefinementTarget target;
};

struct SampleContext {
  std::vector<std::string> classes;
  AnchorTable anchors;
  EncodingConfig encoding;
  LossConfig loss;

  std::optional<SizeReference> size_reference(const std::string& cls) const {
    if (encoding.variant != Variant::kAnchor) return std::nullopt;
    const auto& a = anchors.at(cls);
    return SizeReference{a.w, a.l, a.h};
  }
};

inline RefinementTarget make_target(const Box7& box, const std::string& cls,
                                    std::span<const LabelledBox> gts, const SampleContext& ctx) {
  RefinementTarget t;
  const Assignment a = assign_label(box, gts, ctx.classes, ctx.loss);
  t.class_label = a.class_label;
  if (a.matched) {
    t.regression = encode_targets(box, gts[*a.matched].box, ctx.size_reference(cls));
    t.valid_regression = true;
  }
  return t;
}

struct EncodedSample {
  FeatureMatrix features;
  bool empty = false;
};

inline EncodedSample encode_sample(const PointCloud& cloud, const Box7& box,
                                   const std::string& cls, const SampleContext& ctx,
                                   std::uint64_t seed) {
  Rng rng(seed);
  const ProposalCrop crop = crop_points(cloud, box, ctx.encoding.enlarge_wl);
  const ProposalCrop sampled = sample_fixed(crop, ctx.encoding.points_per_proposal, rng);
  return {encode(sampled, ctx.encoding, cls, &ctx.anchors), sampled.empty};
}

inline SampleContext context_from(const RunConfig& cfg, const Manifest& manifest) {
  return {manifest.classes, manifest.anchors, cfg.encoding, cfg.train.loss};
}

inline SampleContext context_from(const CheckpointMeta& meta, const LossConfig& loss = {}) {
  return {meta.classes, meta.anchors, meta.encoding, loss};
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  fs::path out_dir;  // empty: nothing is written
  const Checkpoint* resume = nullptr;
  int threads = 1;
  std::function<void(const std::string&)> progress;
  std::function<void(const LogRecord&)> on_step;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LogRecord> log;
  std::size_t samples_per_epoch = 0;
  std::int64_t steps_per_epoch = 0;
};

inline std::string checkpoint_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_epoch_%03d.bin", epoch);
  return buf;
}

namespace detail {

struct TrainingData {
  std::vector<Sample> proposals;  // fixed across epochs
  // ground truth available for jittered positives, with their frame
  std::vector<std::pair<const PointCloud*, LabelledBox>> gts;
  std::map<const PointCloud*, const std::vector<LabelledBox>*> frame_gts;
};

inline TrainingData collect_training_data(const Dataset& ds, const SampleContext& ctx) {
  static const std::vector<LabelledBox> kNoGts;
  TrainingData data;
  for (const auto& frame : ds.split("train")) {
    const PointCloud* cloud = &ds.clouds.at(frame);
    auto git = ds.gts.find(frame);
    const std::vector<LabelledBox>& gts = git == ds.gts.end() ? kNoGts : git->second;
    data.frame_gts[cloud] = &gts;
    for (const auto& g : gts) data.gts.emplace_back(cloud, g);
    auto pit = ds.proposals.find(frame);
    if (pit == ds.proposals.end()) continue;
    for (const auto& p : pit->second) {
      data.proposals.push_back({cloud, p.box, p.cls, make_target(p.box, p.cls, gts, ctx)});
    }
  }
  return data;
}

template <typename Scalar>
TrainingState<Scalar>& state_of(Checkpoint& ck) {
  return std::get<TrainingState<Scalar>>(ck.state);
}

template <typename Scalar>
TrainResult train_impl(const Dataset& ds, const RunConfig& cfg, const TrainOptions& opts) {
  const SampleContext ctx = context_from(cfg, ds.manifest);
  const TrainConfig& tc = cfg.train;
  const TrainingData data = collect_training_data(ds, ctx);
  if (data.proposals.empty()) throw SchemaError("train: the train split has no proposals");

  const auto n_jitter = static_cast<std::size_t>(
      data.gts.empty() ? 0 : std::llround(tc.gt_jitter_ratio * data.proposals.size()));
  const std::size_t per_epoch = data.proposals.size() + n_jitter;
  const auto batch = static_cast<std::size_t>(tc.batch_size);
  const auto steps = static_cast<std::int64_t>((per_epoch + batch - 1) / batch);
  const std::int64_t max_iter = steps * tc.epochs;
  const std::uint64_t hash = training_hash(cfg);

  TrainResult result;
  result.samples_per_epoch = per_epoch;
  result.steps_per_epoch = steps;
  Checkpoint& ck = result.checkpoint;
  Rng rng(cfg.seed);
  int start_epoch = 0;

  if (opts.resume) {
    if (opts.resume->meta.config_hash != hash) {
      throw SchemaError("resume: checkpoint was produced by a different training config");
    }
    if (!std::holds_alternative<TrainingState<Scalar>>(opts.resume->state)) {
      throw SchemaError("resume: checkpoint precision differs from the config");
    }
    ck = *opts.resume;
    rng = rng_from_state(ck.meta.rng_state);
    start_epoch = ck.meta.epoch;
    if (!opts.out_dir.empty() && fs::exists(opts.out_dir / "loss_log.jsonl")) {
      for (const auto& r : read_log(opts.out_dir / "loss_log.jsonl")) {
        if (r.iteration <= ck.meta.iteration) result.log.push_back(r);
      }
    }
  } else {
    ModelShape shape{variant_channels(cfg.encoding.variant), tc.widths,
                     static_cast<int>(ctx.classes.size())};
    auto model = init_model<Scalar>(rng, shape);
    auto opt = OptimizerState<Scalar>::create(model, {tc.momentum, tc.weight_decay});
    ck.state = TrainingState<Scalar>{std::move(model), std::move(opt)};
    ck.meta.encoding = cfg.encoding;
    ck.meta.classes = ctx.classes;
    ck.meta.anchors = ctx.anchors;
    ck.meta.config_hash = hash;
  }
  TrainingState<Scalar>& st = state_of<Scalar>(ck);

  for (int epoch = start_epoch; epoch < tc.epochs; ++epoch) {
    // assemble this epoch's samples
    std::vector<Sample> samples = data.proposals;
    samples.reserve(per_epoch);
    for (std::size_t k = 0; k < n_jitter; ++k) {
      const auto gi = std::uniform_int_distribution<std::size_t>(0, data.gts.size() - 1)(rng);
      const auto& [cloud, gt] = data.gts[gi];
      const Box7 box = jitter_proposal(gt.box, rng, tc.jitter);
      samples.push_back({cloud, box, gt.cls, make_target(box, gt.cls, *data.frame_gts.at(cloud), ctx)});
    }
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (tc.class_balanced) {
      std::map<int, double> freq;
      for (const auto& s : samples) freq[s.target.class_label] += 1.0;
      std::vector<double> w;
      for (const auto& s : samples) w.push_back(1.0 / freq[s.target.class_label]);
      std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
      for (auto& o : order) o = pick(rng);
    } else {
      std::shuffle(order.begin(), order.end(), rng);
    }
    std::vector<std::uint64_t> seeds(order.size());
    for (auto& s : seeds) s = rng();

    for (std::int64_t step = 0; step < steps; ++step) {
      const std::size_t lo = static_cast<std::size_t>(step) * batch;
      const std::size_t hi = std::min(order.size(), lo + batch);
      const std::size_t b = hi - lo;
      std::vector<Matrix<Scalar>> inputs(b);
      parallel_for(b, opts.threads, [&](std::size_t i) {
        const Sample& s = samples[order[lo + i]];
        inputs[i] = encode_sample(*s.cloud, s.box, s.cls, ctx, seeds[lo + i])
                        .features.template cast<Scalar>();
      });

      std::vector<ForwardCache<Scalar>> caches(b);
      Eigen::MatrixXd logits(static_cast<Eigen::Index>(b), st.model.shape.num_classes + 1);
      Eigen::MatrixXd reg(static_cast<Eigen::Index>(b), kRegressionDims);
      Eigen::MatrixXd targets = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(b), kRegressionDims);
      std::vector<int> labels(b);
      std::vector<char> positive_bytes(b);
      for (std::size_t i = 0; i < b; ++i) {
        const Sample& s = samples[order[lo + i]];
        const auto pred = forward(st.model, inputs[i], &caches[i]);
        const auto r = static_cast<Eigen::Index>(i);
        logits.row(r) = pred.logits;
        reg.row(r) = pred.regression;
        labels[i] = s.target.class_label;
        positive_bytes[i] = s.target.valid_regression ? 1 : 0;
        for (int k = 0; k < kRegressionDims; ++k) targets(r, k) = s.target.regression[static_cast<std::size_t>(k)];
      }
      std::unique_ptr<bool[]> positive(new bool[b]);
      for (std::size_t i = 0; i < b; ++i) positive[i] = positive_bytes[i] != 0;

      Eigen::MatrixXd dlogits, dreg;
      const double cls_loss = classification_loss(logits, labels, &dlogits);
      const double reg_loss = regression_loss(reg, targets, std::span<const bool>(positive.get(), b),
                                              tc.loss.smooth_l1_beta, &dreg);
      const double total = total_loss(cls_loss, reg_loss, tc.loss);
      if (opts.on_step) {
        opts.on_step({ck.meta.iteration + 1, epoch + 1, 0.0, cls_loss, reg_loss, total});
      }
      if (!std::isfinite(total)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                           std::to_string(step));
      }
      dreg *= tc.loss.lambda;

      auto grads = GradientSet<Scalar>::zeros_like(st.model);
      for (std::size_t i = 0; i < b; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        backward(st.model, caches[i], dlogits.row(r), dreg.row(r), grads);
      }
      clip_gradient_norm(grads, tc.grad_clip_norm);
      const double lr = poly_lr(ck.meta.iteration, max_iter, tc.lr0, tc.poly_power);
      try {
        sgd_step(st.model, grads, st.optimizer, lr);
      } catch (const NonFiniteGradient& e) {
        throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch + 1) +
                           ", batch " + std::to_string(step));
      }
      ++ck.meta.iteration;
      result.log.push_back({ck.meta.iteration, epoch + 1, lr, cls_loss, reg_loss, total});
    }

    ck.meta.epoch = epoch + 1;
    ck.meta.rng_state = rng_state_string(rng);
    if (!opts.out_dir.empty()) {
      const std::string bytes = serialize_checkpoint(ck);
      write_file_atomic(opts.out_dir / checkpoint_name(epoch + 1), bytes);
      write_file_atomic(opts.out_dir / "checkpoint.bin", bytes);
      write_file_atomic(opts.out_dir / "loss_log.jsonl", log_to_jsonl(result.log));
    }
    if (opts.progress) {
      double sum = 0.0;
      std::size_t n = 0;
      for (auto it = result.log.rbegin(); it != result.log.rend() && it->epoch == epoch + 1; ++it) {
        sum += it->total;
        ++n;
      }
      opts.progress("epoch " + std::to_string(epoch + 1) + "/" + std::to_string(tc.epochs) +
                    " mean loss " + std::to_string(n ? sum / n : 0.0));
    }
  }
  return result;
}

}  // namespace detail

inline TrainResult train(const Dataset& ds, const RunConfig& cfg, const TrainOptions& opts = {}) {
  return cfg.train.precision == Precision::kDouble ? detail::train_impl<double>(ds, cfg, opts)
                                                   : detail::train_impl<float>(ds, cfg, opts);
}

// ---------------------------------------------------------------------------
// Refinement

struct RefineOptions {
  int threads = 1;
  bool pass_through_empty = false;  // keep the first-stage score for empty crops
  double max_log_size = 4.0;        // size regression is clamped to +- this
};

struct RefinedBox {
  BoxRecord record;
  std::vector<double> probabilities;  // softmax over background + classes
};

namespace detail {

inline std::vector<double> softmax(const Eigen::RowVectorXd& logits) {
  const double m = logits.maxCoeff();
  std::vector<double> p(static_cast<std::size_t>(logits.size()));
  double z = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    p[static_cast<std::size_t>(i)] = std::exp(logits(i) - m);
    z += p[static_cast<std::size_t>(i)];
  }
  for (auto& v : p) v /= z;
  return p;
}

template <typename Scalar>
std::vector<RefinedBox> refine_impl(const PointNetModel<Scalar>& model, const SampleContext& ctx,
                                    const PointCloud& cloud, std::span<const Proposal> proposals,
                                    Rng& rng, const RefineOptions& opts) {
  std::vector<std::uint64_t> seeds(proposals.size());
  for (auto& s : seeds) s = rng();
  std::vector<RefinedBox> out(proposals.size());
  parallel_for(proposals.size(), opts.threads, [&](std::size_t i) {
    const Proposal& p = proposals[i];
    const EncodedSample enc = encode_sample(cloud, p.box, p.cls, ctx, seeds[i]);
    RefinedBox& r = out[i];
    r.record.frame = cloud.frame;
    if (enc.empty) {
      r.record.cls = p.cls;
      r.record.box = p.box;
      r.record.score = opts.pass_through_empty ? p.score : 0.0;
      r.record.empty_crop = true;
      r.probabilities.assign(ctx.classes.size() + 1, 0.0);
      r.probabilities[0] = 1.0;
      return;
    }
    const auto pred = forward(model, Matrix<Scalar>(enc.features.template cast<Scalar>()));
    r.probabilities = softmax(pred.logits);
    std::size_t best = 1;
    for (std::size_t k = 2; k < r.probabilities.size(); ++k) {
      if (r.probabilities[k] > r.probabilities[best]) best = k;
    }
    RegressionVector reg{};
    for (int k = 0; k < kRegressionDims; ++k) reg[static_cast<std::size_t>(k)] = pred.regression(k);
    for (int k = 3; k < 6; ++k) {
      auto& v = reg[static_cast<std::size_t>(k)];
      v = std::clamp(v, -opts.max_log_size, opts.max_log_size);
    }
    r.record.cls = ctx.classes[best - 1];
    r.record.box = decode_box(p.box, reg, ctx.size_reference(p.cls));
    r.record.score = r.probabilities[best];
  });
  return out;
}

}  // namespace detail

/// Scores and refines every proposal of one frame.
inline std::vector<RefinedBox> refine(const Checkpoint& ck, const PointCloud& cloud,
                                      std::span<const Proposal> proposals, Rng& rng,
                                      const RefineOptions& opts = {}) {
  const SampleContext ctx = context_from(ck.meta);
  return std::visit(
      [&](const auto& st) {
        return detail::refine_impl(st.model, ctx, cloud, proposals, rng, opts);
      },
      ck.state);
}

// ---------------------------------------------------------------------------
// Latency

struct BenchRow {
  int points = 0;
  double median_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;
};

struct BenchReport {
  std::size_t parameter_count = 0;
  int batch = 0;
  int runs = 0;
  std::vector<BenchRow> rows;
};

template <typename Scalar>
BenchReport bench(const PointNetModel<Scalar>& model, const BenchConfig& cfg, Rng& rng,
                  int threads = 1) {
  for (std::size_t i = 1; i < cfg.points.size(); ++i) {
    if (cfg.points[i] < cfg.points[i - 1]) {
      throw std::invalid_argument("bench: point counts must ascend");
    }
  }
  BenchReport report;
  report.parameter_count = model.parameter_count();
  report.batch = cfg.batch;
  report.runs = cfg.runs;
  std::uniform_real_distribution<double> coord(-2.0, 2.0);
  for (int n : cfg.points) {
    std::vector<Matrix<Scalar>> inputs(static_cast<std::size_t>(cfg.batch));
    for (auto& m : inputs) {
      m.resize(n, model.shape.input_channels);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(coord(rng));
    }
    std::vector<double> sink(inputs.size());
    auto run_once = [&] {
      parallel_for(inputs.size(), threads, [&](std::size_t i) {
        sink[i] = forward(model, inputs[i]).logits(0);
      });
    };
    for (int w = 0; w < cfg.warmup; ++w) run_once();
    std::vector<double> times;
    for (int r = 0; r < cfg.runs; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      run_once();
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    const std::size_t m = times.size();
    const double median = m % 2 ? times[m / 2] : 0.5 * (times[m / 2 - 1] + times[m / 2]);
    report.rows.push_back({n, median, times.front(), times.back()});
  }
  return report;
}

}  // namespace lidar_rcnn
