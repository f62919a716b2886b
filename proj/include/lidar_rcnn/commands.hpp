#pragma once

// The command layer behind the `lidar_rcnn` executable. Every command reads
// and writes the on-disk formats from dataset.hpp, so tests can drive the
// same code paths as the CLI.

#include <cstdio>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "lidar_rcnn/checkpoint.hpp"
#include "lidar_rcnn/config.hpp"
#include "lidar_rcnn/dataset.hpp"
#include "lidar_rcnn/metrics.hpp"
#include "lidar_rcnn/parallel.hpp"
#include "lidar_rcnn/synthetic.hpp"
#include "lidar_rcnn/trainer.hpp"

namespace lidar_rcnn {

inline void echo_config(const fs::path& dir, const RunConfig& cfg) {
  write_file_atomic(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
}

inline std::string frame_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", index);
  return buf;
}

// ---------------------------------------------------------------------------
// generate

struct GenerateSummary {
  std::size_t frames = 0;
  std::size_t train_frames = 0;
  std::size_t val_frames = 0;
  std::size_t gt_boxes = 0;
  std::size_t proposals = 0;
  std::size_t points = 0;
  int placement_failures = 0;
};

/// Synthesizes `cfg.num_scenes` frames. The last round(val_fraction * N)
/// frames form the val split. Anchors are the mean train-split gt sizes.
inline GenerateSummary cmd_generate(const RunConfig& cfg, const fs::path& out_dir) {
  const auto n = static_cast<std::size_t>(cfg.num_scenes);
  Rng rng(cfg.seed);
  std::vector<std::uint64_t> seeds(n);
  for (auto& s : seeds) s = rng();

  std::vector<Scene> scenes(n);
  std::vector<std::vector<Proposal>> proposals(n);
  parallel_for(n, cfg.threads, [&](std::size_t i) {
    Rng local(seeds[i]);
    scenes[i] = generate_scene(cfg.scene, local, frame_id(static_cast<int>(i)));
    proposals[i] = make_proposals(scenes[i], cfg.scene, cfg.proposals, local);
  });

  const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(n)));
  Manifest manifest;
  manifest.classes = cfg.class_names();
  auto& train = manifest.splits["train"];
  auto& val = manifest.splits["val"];
  std::vector<std::pair<Box7, std::string>> train_gts;

  GenerateSummary sum;
  std::string clouds, gts, props;
  for (std::size_t i = 0; i < n; ++i) {
    const Scene& s = scenes[i];
    const bool is_val = i >= n - n_val;
    (is_val ? val : train).push_back(s.frame);
    clouds += cloud_record_line(s.cloud);
    for (const auto& g : s.gts) {
      gts += box_record_line({s.frame, g.cls, g.box, std::nullopt, false});
      if (!is_val) train_gts.emplace_back(g.box, g.cls);
    }
    for (const auto& p : proposals[i]) {
      props += box_record_line({s.frame, p.cls, p.box, p.score, false});
    }
    sum.gt_boxes += s.gts.size();
    sum.proposals += proposals[i].size();
    sum.points += s.cloud.size();
    sum.placement_failures += s.placement_failures;
  }
  manifest.anchors = AnchorTable::from_ground_truth(train_gts);
  // classes without train ground truth fall back to their preset mean size
  for (const auto& p : cfg.scene.classes) {
    if (!manifest.anchors.has(p.name)) {
      manifest.anchors.set(p.name, {p.mean[0], p.mean[1], p.mean[2]});
    }
  }

  write_file_atomic(out_dir / manifest.clouds_file, clouds);
  write_file_atomic(out_dir / manifest.gt_file, gts);
  write_file_atomic(out_dir / manifest.proposals_file, props);
  write_file_atomic(out_dir / "manifest.json", manifest_to_json(manifest).dump(2) + "\n");
  echo_config(out_dir, cfg);

  sum.frames = n;
  sum.train_frames = train.size();
  sum.val_frames = val.size();
  return sum;
}

// ---------------------------------------------------------------------------
// train

struct TrainCommand {
  fs::path dataset;
  fs::path out_dir;
  std::optional<fs::path> resume;  // checkpoint to continue from
  std::function<void(const std::string&)> progress;
};

inline TrainResult cmd_train(const RunConfig& cfg, const TrainCommand& cmd) {
  const Dataset ds = load_dataset(cmd.dataset);
  for (const auto& cls : ds.manifest.classes) {
    if (cfg.encoding.variant == Variant::kAnchor && !ds.manifest.anchors.has(cls)) {
      throw SchemaError("manifest has no anchor for class '" + cls + "'");
    }
    cfg.train.loss.threshold_for(cls);
  }
  std::optional<Checkpoint> resume;
  if (cmd.resume) resume = load_checkpoint(*cmd.resume);
  echo_config(cmd.out_dir, cfg);
  TrainOptions opts;
  opts.out_dir = cmd.out_dir;
  opts.resume = resume ? &*resume : nullptr;
  opts.threads = cfg.threads;
  opts.progress = cmd.progress;
  return train(ds, cfg, opts);
}

// ---------------------------------------------------------------------------
// refine

struct RefineCommand {
  fs::path checkpoint;
  fs::path dataset;
  std::string split = "val";
  fs::path out;  // refined boxes file
  std::optional<Variant> expect_variant;
  bool pass_through_empty = false;
};

/// Refines every proposal of the split's frames. Output records follow the
/// input order; frames are visited in split order.
inline std::vector<BoxRecord> cmd_refine(const RunConfig& cfg, const RefineCommand& cmd) {
  const Checkpoint ck = load_checkpoint(cmd.checkpoint);
  if (cmd.expect_variant && *cmd.expect_variant != ck.meta.encoding.variant) {
    throw SchemaError("checkpoint was trained with variant '" +
                      std::string(variant_name(ck.meta.encoding.variant)) + "', not '" +
                      std::string(variant_name(*cmd.expect_variant)) + "'");
  }
  const Dataset ds = load_dataset(cmd.dataset);
  if (ds.manifest.classes != ck.meta.classes) {
    throw SchemaError("dataset classes differ from the checkpoint's");
  }
  RefineOptions opts;
  opts.threads = cfg.threads;
  opts.pass_through_empty = cmd.pass_through_empty;
  Rng rng(cfg.seed);
  std::vector<BoxRecord> out;
  for (const auto& frame : ds.split(cmd.split)) {
    auto it = ds.proposals.find(frame);
    if (it == ds.proposals.end()) continue;
    for (auto& r : refine(ck, ds.clouds.at(frame), it->second, rng, opts)) {
      out.push_back(std::move(r.record));
    }
  }
  if (!cmd.out.empty()) write_boxes(cmd.out, out);
  return out;
}

// ---------------------------------------------------------------------------
// eval

inline std::vector<EvalFrame> eval_frames(const Dataset& ds, const std::vector<BoxRecord>& dets,
                                          const std::string& split) {
  std::map<std::string, std::size_t> index;
  std::vector<EvalFrame> frames;
  for (const auto& f : ds.split(split)) {
    index[f] = frames.size();
    EvalFrame ef;
    ef.frame = f;
    std::vector<std::size_t> counts;
    auto git = ds.gts.find(f);
    if (git != ds.gts.end()) {
      for (const auto& g : git->second) {
        ef.gts.push_back({g.box, 1.0, g.cls});
        counts.push_back(count_inside(g.box, ds.clouds.at(f)));
      }
    }
    ef.gt_points = std::move(counts);
    frames.push_back(std::move(ef));
  }
  for (const auto& d : dets) {
    if (!ds.clouds.count(d.frame)) {
      throw SchemaError("detections: frame '" + d.frame + "' is not in the dataset");
    }
    auto it = index.find(d.frame);
    if (it == index.end()) continue;  // other split
    frames[it->second].detections.push_back({d.box, d.score.value_or(0.0), d.cls});
  }
  return frames;
}

inline json eval_report_json(const EvalReport& r) {
  json cells = json::object();
  for (const auto& cls : r.classes) {
    for (Difficulty d : {Difficulty::kLevel1, Difficulty::kLevel2}) {
      for (std::size_t k = 0; k < r.ranges.size(); ++k) {
        const MetricCell& c = r.at(cls, d, k);
        const std::string key = cls + "/" + difficulty_name(d) + "/" + r.ranges[k];
        cells[key] = {{"ap", c.ap}, {"aph", c.aph}, {"num_gt", c.num_gt}, {"num_det", c.num_det}};
      }
    }
  }
  return {{"classes", r.classes}, {"ranges", r.ranges}, {"cells", cells}, {"warnings", r.warnings}};
}

/// Text table, one block per difficulty. Values are percentages.
inline std::string format_eval_table(const EvalReport& r, const std::string& title) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  for (Difficulty d : {Difficulty::kLevel1, Difficulty::kLevel2}) {
    os << title << " " << difficulty_name(d) << "\n";
    os << std::left << std::setw(12) << "class" << std::setw(8) << "metric";
    for (const auto& rl : r.ranges) os << std::right << std::setw(10) << rl;
    os << "\n";
    for (const auto& cls : r.classes) {
      for (int m = 0; m < 2; ++m) {
        os << std::left << std::setw(12) << cls << std::setw(8) << (m == 0 ? "AP" : "APH");
        for (std::size_t k = 0; k < r.ranges.size(); ++k) {
          const MetricCell& c = r.at(cls, d, k);
          os << std::right << std::setw(10) << 100.0 * (m == 0 ? c.ap : c.aph);
        }
        os << "\n";
      }
    }
    os << "\n";
  }
  for (const auto& w : r.warnings) os << "warning: " << w << "\n";
  return os.str();
}

struct EvalCommand {
  fs::path detections;
  fs::path dataset;
  std::string split = "val";
  fs::path out_dir;  // report.txt and report.json; empty: nothing written
};

inline EvalReport cmd_eval(const RunConfig& cfg, const EvalCommand& cmd) {
  const Dataset ds = load_dataset(cmd.dataset, false);
  const auto dets = read_boxes(cmd.detections);
  const auto frames = eval_frames(ds, dets, cmd.split);
  for (const auto& cls : ds.manifest.classes) cfg.eval.threshold_for(cls);
  EvalReport report = evaluate(frames, ds.manifest.classes, cfg.eval);
  if (!cmd.out_dir.empty()) {
    const std::string title = std::string("3D AP (") + detail::matching_name(cfg.eval.matching) +
                              " IoU matching, " + cmd.split + " split)";
    write_file_atomic(cmd.out_dir / "report.txt", format_eval_table(report, title));
    write_file_atomic(cmd.out_dir / "report.json", eval_report_json(report).dump(2) + "\n");
    echo_config(cmd.out_dir, cfg);
  }
  return report;
}

// ---------------------------------------------------------------------------
// ambiguity

struct AmbiguityCommand {
  fs::path dataset;
  std::string split = "val";
  std::string boxes = "proposals";  // "proposals" or "gt"
  double enlarge_wl = 1.0;
  fs::path out;  // JSON report; empty: nothing written
};

inline AmbiguityStats cmd_ambiguity(const RunConfig& cfg, const AmbiguityCommand& cmd) {
  if (cmd.boxes != "proposals" && cmd.boxes != "gt") {
    throw SchemaError("ambiguity: --boxes must be 'proposals' or 'gt'");
  }
  if (!(cmd.enlarge_wl >= 0.0)) throw SchemaError("ambiguity: enlargement must be >= 0");
  const Dataset ds = load_dataset(cmd.dataset, cmd.boxes == "proposals");
  const auto frames = ds.split(cmd.split);
  std::vector<AmbiguityStats> per_frame(frames.size());
  parallel_for(frames.size(), cfg.threads, [&](std::size_t i) {
    std::vector<Box7> boxes;
    if (cmd.boxes == "gt") {
      if (auto it = ds.gts.find(frames[i]); it != ds.gts.end()) {
        for (const auto& g : it->second) boxes.push_back(g.box);
      }
    } else if (auto it = ds.proposals.find(frames[i]); it != ds.proposals.end()) {
      for (const auto& p : it->second) boxes.push_back(p.box);
    }
    per_frame[i] = ambiguity_study(ds.clouds.at(frames[i]), boxes, cmd.enlarge_wl);
  });
  AmbiguityStats total;
  for (const auto& s : per_frame) total.merge(s);
  if (!cmd.out.empty()) {
    const json j = {{"split", cmd.split},
                    {"boxes", cmd.boxes},
                    {"frames", frames.size()},
                    {"enlarge_wl", cmd.enlarge_wl},
                    {"proposals", total.proposals},
                    {"same_count", total.same_count},
                    {"lt_10_new", total.lt_10_new},
                    {"frac_same_count", total.frac_same_count()},
                    {"frac_lt_10_new", total.frac_lt_10_new()}};
    write_file_atomic(cmd.out, j.dump(2) + "\n");
  }
  return total;
}

// ---------------------------------------------------------------------------
// bench

struct BenchCommand {
  std::optional<fs::path> checkpoint;  // default: freshly initialized plain model
  fs::path out;                        // JSON report; empty: nothing written
};

inline json bench_report_json(const BenchReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"points", row.points},
                    {"median_ms", row.median_ms},
                    {"min_ms", row.min_ms},
                    {"max_ms", row.max_ms}});
  }
  return {{"parameter_count", r.parameter_count}, {"batch", r.batch}, {"runs", r.runs},
          {"rows", rows}};
}

inline std::string format_bench_table(const BenchReport& r) {
  std::ostringstream os;
  os << "parameters: " << r.parameter_count << "  batch: " << r.batch << "  runs: " << r.runs
     << "\n";
  os << std::setw(8) << "points" << std::setw(14) << "median_ms" << std::setw(12) << "min_ms"
     << std::setw(12) << "max_ms" << "\n";
  os << std::fixed << std::setprecision(3);
  for (const auto& row : r.rows) {
    os << std::setw(8) << row.points << std::setw(14) << row.median_ms << std::setw(12)
       << row.min_ms << std::setw(12) << row.max_ms << "\n";
  }
  return os.str();
}

inline BenchReport cmd_bench(const RunConfig& cfg, const BenchCommand& cmd) {
  Rng rng(cfg.seed);
  BenchReport report;
  if (cmd.checkpoint) {
    const Checkpoint ck = load_checkpoint(*cmd.checkpoint);
    report = std::visit([&](const auto& st) { return bench(st.model, cfg.bench, rng, cfg.threads); },
                        ck.state);
  } else {
    const ModelShape shape{variant_channels(cfg.encoding.variant), cfg.train.widths,
                           static_cast<int>(cfg.scene.classes.size())};
    if (cfg.train.precision == Precision::kDouble) {
      report = bench(init_model<double>(rng, shape), cfg.bench, rng, cfg.threads);
    } else {
      report = bench(init_model<float>(rng, shape), cfg.bench, rng, cfg.threads);
    }
  }
  if (!cmd.out.empty()) write_file_atomic(cmd.out, bench_report_json(report).dump(2) + "\n");
  return report;
}

}  // namespace lidar_rcnn
