// lidar_rcnn: generate synthetic data, train, refine, evaluate, benchmark.
//
// Exit codes: 0 ok, 2 schema/config error, 3 numeric failure, 4 I/O error.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lidar_rcnn/lidar_rcnn.hpp"

namespace lr = lidar_rcnn;
using lr::json;

namespace {

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<int> scenes;
  std::optional<double> val_fraction;
  std::optional<std::string> variant;
  std::optional<int> epochs;
  std::optional<int> batch;
  std::optional<std::string> precision;
  std::optional<int> points_per_proposal;
  std::optional<std::string> matching;
  std::vector<int> bench_points;
  std::optional<int> bench_runs;
};

lr::RunConfig resolve_config(const Overrides& o) {
  json user = json::object();
  if (!o.config_path.empty()) {
    try {
      user = json::parse(lr::read_file(o.config_path));
    } catch (const json::exception& e) {
      throw lr::SchemaError(o.config_path + ": " + e.what());
    }
    if (!user.is_object()) throw lr::SchemaError(o.config_path + ": expected a JSON object");
  }
  if (!user.contains("threads")) user["threads"] = lr::default_threads();
  if (o.seed) user["seed"] = *o.seed;
  if (o.threads) user["threads"] = *o.threads;
  if (o.scenes) user["dataset"]["num_scenes"] = *o.scenes;
  if (o.val_fraction) user["dataset"]["val_fraction"] = *o.val_fraction;
  if (o.variant) user["encoding"]["variant"] = *o.variant;
  if (o.points_per_proposal) user["encoding"]["points_per_proposal"] = *o.points_per_proposal;
  if (o.epochs) user["train"]["epochs"] = *o.epochs;
  if (o.batch) user["train"]["batch_size"] = *o.batch;
  if (o.precision) user["train"]["precision"] = *o.precision;
  if (o.matching) user["eval"]["matching"] = *o.matching;
  if (!o.bench_points.empty()) user["bench"]["points"] = o.bench_points;
  if (o.bench_runs) user["bench"]["runs"] = *o.bench_runs;
  return lr::parse_config(user);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Second-stage LiDAR box refinement toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  Overrides o;
  app.add_option("--config", o.config_path, "JSON run config; missing keys take defaults")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Random seed");
  app.add_option("--threads", o.threads, "Worker threads (default $LIDAR_RCNN_THREADS or 1)");

  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--scenes", o.scenes, "Number of frames");
  gen->add_option("--val-fraction", o.val_fraction, "Fraction of frames in the val split");

  auto* trn = app.add_subcommand("train", "Train a refinement model");
  lr::TrainCommand train_cmd;
  std::string resume;
  trn->add_option("--data", train_cmd.dataset, "Dataset directory")->required();
  trn->add_option("--out", train_cmd.out_dir, "Output directory")->required();
  trn->add_option("--variant", o.variant, "plain|size_normalized|anchor|boundary_offset|virtual_points");
  trn->add_option("--epochs", o.epochs);
  trn->add_option("--batch", o.batch);
  trn->add_option("--precision", o.precision, "float|double");
  trn->add_option("--points", o.points_per_proposal, "Points sampled per proposal");
  trn->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);

  auto* ref = app.add_subcommand("refine", "Rescore and refine proposals");
  lr::RefineCommand refine_cmd;
  std::optional<std::string> expect_variant;
  ref->add_option("--checkpoint", refine_cmd.checkpoint)->required();
  ref->add_option("--data", refine_cmd.dataset, "Dataset directory")->required();
  ref->add_option("--out", refine_cmd.out, "Refined boxes file (JSONL)")->required();
  ref->add_option("--split", refine_cmd.split, "Split to refine")->capture_default_str();
  ref->add_option("--variant", expect_variant, "Fail unless the checkpoint uses this variant");
  ref->add_flag("--pass-through-empty", refine_cmd.pass_through_empty,
                "Keep first-stage scores for proposals with no points");

  auto* evl = app.add_subcommand("eval", "AP/APH report for a detections file");
  lr::EvalCommand eval_cmd;
  evl->add_option("--detections", eval_cmd.detections, "Boxes file with scores")->required();
  evl->add_option("--data", eval_cmd.dataset, "Dataset directory")->required();
  evl->add_option("--split", eval_cmd.split)->capture_default_str();
  evl->add_option("--out", eval_cmd.out_dir, "Directory for report.txt / report.json");
  evl->add_option("--matching", o.matching, "3d|bev");

  auto* amb = app.add_subcommand("ambiguity", "Point-count stability under box enlargement");
  lr::AmbiguityCommand amb_cmd;
  amb->add_option("--data", amb_cmd.dataset, "Dataset directory")->required();
  amb->add_option("--split", amb_cmd.split)->capture_default_str();
  amb->add_option("--boxes", amb_cmd.boxes, "proposals|gt")->capture_default_str();
  amb->add_option("--enlarge", amb_cmd.enlarge_wl, "Width/length enlargement (m)")
      ->capture_default_str();
  amb->add_option("--out", amb_cmd.out, "JSON report");

  auto* bch = app.add_subcommand("bench", "Forward latency versus points per proposal");
  lr::BenchCommand bench_cmd;
  std::string bench_ckpt;
  bch->add_option("--checkpoint", bench_ckpt, "Model to time (default: fresh init)");
  bch->add_option("--points", o.bench_points, "Ascending point counts")->delimiter(',');
  bch->add_option("--runs", o.bench_runs, "Timed runs per point count");
  bch->add_option("--out", bench_cmd.out, "JSON report");

  CLI11_PARSE(app, argc, argv);

  try {
    const lr::RunConfig cfg = resolve_config(o);
    if (gen->parsed()) {
      const auto s = lr::cmd_generate(cfg, gen_out);
      std::cout << "frames " << s.frames << " (train " << s.train_frames << ", val "
                << s.val_frames << "), gt boxes " << s.gt_boxes << ", proposals "
                << s.proposals << ", points " << s.points << "\n";
      if (s.placement_failures > 0) {
        std::cerr << "note: " << s.placement_failures << " objects could not be placed\n";
      }
    } else if (trn->parsed()) {
      if (!resume.empty()) train_cmd.resume = resume;
      train_cmd.progress = [](const std::string& line) { std::cerr << line << "\n"; };
      const auto r = lr::cmd_train(cfg, train_cmd);
      std::cout << "trained " << r.checkpoint.meta.epoch << " epochs, " << r.checkpoint.meta.iteration
                << " iterations, " << r.checkpoint.parameter_count() << " parameters\n";
    } else if (ref->parsed()) {
      if (expect_variant) {
        try {
          refine_cmd.expect_variant = lr::parse_variant(*expect_variant);
        } catch (const std::invalid_argument& e) {
          throw lr::SchemaError(e.what());
        }
      }
      const auto out = lr::cmd_refine(cfg, refine_cmd);
      std::size_t empty = 0;
      for (const auto& r : out) empty += r.empty_crop ? 1 : 0;
      std::cout << "refined " << out.size() << " proposals (" << empty << " empty crops)\n";
    } else if (evl->parsed()) {
      const auto report = lr::cmd_eval(cfg, eval_cmd);
      std::cout << lr::format_eval_table(report, "AP/APH (" + eval_cmd.split + ")");
    } else if (amb->parsed()) {
      const auto s = lr::cmd_ambiguity(cfg, amb_cmd);
      std::cout << "boxes " << s.proposals << "\nfrac_same_count " << s.frac_same_count()
                << "\nfrac_lt_10_new " << s.frac_lt_10_new() << "\n";
    } else if (bch->parsed()) {
      if (!bench_ckpt.empty()) bench_cmd.checkpoint = bench_ckpt;
      std::cout << lr::format_bench_table(lr::cmd_bench(cfg, bench_cmd));
    }
  } catch (const lr::SchemaError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return lr::kExitSchema;
  } catch (const lr::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return lr::kExitNumeric;
  } catch (const lr::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return lr::kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return lr::kExitFailure;
  }
  return lr::kExitOk;
}
