#pragma once

// The run configuration: one versioned JSON document covering scene
// generation, proposal corruption, encoding, training, evaluation and
// benchmarking. Missing keys take defaults; unknown keys are rejected.

#include "json.hpp"

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "lidar_rcnn/encoding.hpp"
#include "lidar_rcnn/errors.hpp"
#include "lidar_rcnn/metrics.hpp"
#include "lidar_rcnn/synthetic.hpp"
#include "lidar_rcnn/targets.hpp"

namespace lidar_rcnn {

using json = nlohmann::json;

inline constexpr int kConfigVersion = 1;

enum class Precision { kFloat, kDouble };

struct TrainConfig {
  int epochs = 60;
  int batch_size = 64;
  double lr0 = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  double poly_power = 1.0;
  double grad_clip_norm = 0.0;  // global L2 norm; 0 disables
  LossConfig loss;
  Precision precision = Precision::kFloat;
  double gt_jitter_ratio = 1.0;  // jittered ground-truth samples per proposal
  BoxNoise jitter{0.5, 0.1, 0.05, 0.17};
  bool class_balanced = false;
  std::vector<int> widths{64, 64, 512};
};

struct BenchConfig {
  std::vector<int> points{64, 128, 256, 512, 1024};
  int batch = 128;
  int runs = 20;
  int warmup = 3;
};

struct RunConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 7;
  int threads = 1;
  int num_scenes = 100;
  double val_fraction = 0.2;
  SceneConfig scene;
  ProposalConfig proposals;
  EncodingConfig encoding;
  TrainConfig train;
  EvalSpec eval;
  BenchConfig bench;

  std::vector<std::string> class_names() const {
    std::vector<std::string> out;
    for (const auto& c : scene.classes) out.push_back(c.name);
    return out;
  }
};

namespace detail {

inline const char* matching_name(MatchIou m) { return m == MatchIou::k3d ? "3d" : "bev"; }

inline const char* interpolation_name(Interpolation i) {
  switch (i) {
    case Interpolation::kAllPoints: return "all_points";
    case Interpolation::k11Point: return "11_point";
    case Interpolation::k40Point: return "40_point";
  }
  return "all_points";
}

inline json noise_to_json(const BoxNoise& n) {
  return {{"center", n.center}, {"z", n.z}, {"log_size", n.log_size}, {"heading", n.heading}};
}

inline BoxNoise noise_from_json(const json& j) {
  return {j.at("center").get<double>(), j.at("z").get<double>(),
          j.at("log_size").get<double>(), j.at("heading").get<double>()};
}

}  // namespace detail

inline json config_to_json(const RunConfig& c) {
  json classes = json::array();
  for (const auto& p : c.scene.classes) {
    classes.push_back({{"name", p.name},
                       {"count", {p.count_min, p.count_max}},
                       {"mean", p.mean},
                       {"sigma", p.sigma}});
  }
  json noise = json::object();
  for (const auto& [cls, n] : c.proposals.noise) noise[cls] = detail::noise_to_json(n);
  const auto& t = c.train;
  return {
      {"version", c.version},
      {"seed", c.seed},
      {"threads", c.threads},
      {"dataset", {{"num_scenes", c.num_scenes}, {"val_fraction", c.val_fraction}}},
      {"scene",
       {{"classes", classes},
        {"min_range", c.scene.min_range},
        {"max_range", c.scene.max_range},
        {"sensor", {c.scene.sensor.x, c.scene.sensor.y, c.scene.sensor.z}},
        {"reference_range", c.scene.reference_range},
        {"object_density", c.scene.object_density},
        {"max_points_per_object", c.scene.max_points_per_object},
        {"ground_density", c.scene.ground_density},
        {"ground_height", c.scene.ground_height},
        {"occlusion_prob", c.scene.occlusion_prob},
        {"occlusion_keep", {c.scene.occlusion_keep_min, c.scene.occlusion_keep_max}},
        {"placement_margin", c.scene.placement_margin},
        {"max_placement_retries", c.scene.max_placement_retries}}},
      {"proposals",
       {{"noise", noise},
        {"fp_rate", c.proposals.fp_rate},
        {"fp_max_iou", c.proposals.fp_max_iou},
        {"fp_max_retries", c.proposals.fp_max_retries}}},
      {"encoding",
       {{"variant", std::string(variant_name(c.encoding.variant))},
        {"points_per_proposal", c.encoding.points_per_proposal},
        {"enlarge_wl", c.encoding.enlarge_wl},
        {"virtual_grid", c.encoding.virtual_grid}}},
      {"train",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"lr0", t.lr0},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"poly_power", t.poly_power},
        {"grad_clip_norm", t.grad_clip_norm},
        {"lambda", t.loss.lambda},
        {"smooth_l1_beta", t.loss.smooth_l1_beta},
        {"iou_pos_threshold", t.loss.iou_pos_threshold},
        {"precision", t.precision == Precision::kFloat ? "float" : "double"},
        {"gt_jitter_ratio", t.gt_jitter_ratio},
        {"jitter", detail::noise_to_json(t.jitter)},
        {"class_balanced", t.class_balanced},
        {"widths", t.widths}}},
      {"eval",
       {{"iou_threshold", c.eval.iou_threshold},
        {"level1_min_points", c.eval.level1_min_points},
        {"level2_min_points", c.eval.level2_min_points},
        {"range_edges", c.eval.range_edges},
        {"matching", detail::matching_name(c.eval.matching)},
        {"interpolation", detail::interpolation_name(c.eval.interpolation)}}},
      {"bench",
       {{"points", c.bench.points},
        {"batch", c.bench.batch},
        {"runs", c.bench.runs},
        {"warmup", c.bench.warmup}}},
  };
}

namespace detail {

// Objects whose keys are user-chosen (class names); replaced wholesale.
inline const std::set<std::string>& free_key_objects() {
  static const std::set<std::string> paths{"/proposals/noise", "/train/iou_pos_threshold",
                                           "/eval/iou_threshold"};
  return paths;
}

inline void merge_checked(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw SchemaError("config" + path + ": expected an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string sub = path + "/" + key;
    if (!base.contains(key)) throw SchemaError("config: unknown key '" + sub + "'");
    json& slot = base[key];
    if (slot.is_object() && !free_key_objects().count(sub)) {
      merge_checked(slot, value, sub);
    } else {
      slot = value;
    }
  }
}

// Rejects keys of `value` that do not appear in `shape`.
inline void check_keys(json shape, const json& value, const std::string& path) {
  merge_checked(shape, value, path);
}

template <typename T>
T get_at(const json& j, const char* key, const std::string& path) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw SchemaError("config" + path + "/" + key + ": " + e.what());
  }
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw SchemaError("config: " + what);
}

}  // namespace detail

/// Validates every field and fills a RunConfig from a complete document.
inline RunConfig config_from_json(const json& j) {
  using detail::get_at;
  using detail::require;
  RunConfig c;
  c.version = get_at<int>(j, "version", "");
  require(c.version == kConfigVersion, "unsupported version " + std::to_string(c.version));
  c.seed = get_at<std::uint64_t>(j, "seed", "");
  c.threads = get_at<int>(j, "threads", "");
  require(c.threads >= 1, "/threads must be >= 1");

  const json& d = j.at("dataset");
  c.num_scenes = get_at<int>(d, "num_scenes", "/dataset");
  c.val_fraction = get_at<double>(d, "val_fraction", "/dataset");
  require(c.num_scenes >= 1, "/dataset/num_scenes must be >= 1");
  require(c.val_fraction >= 0.0 && c.val_fraction <= 1.0, "/dataset/val_fraction must be in [0,1]");

  const json& s = j.at("scene");
  c.scene.classes.clear();
  std::set<std::string> seen;
  for (const auto& p : s.at("classes")) {
    detail::check_keys({{"name", ""}, {"count", {}}, {"mean", {}}, {"sigma", {}}}, p,
                       "/scene/classes[]");
    ClassPreset preset;
    preset.name = get_at<std::string>(p, "name", "/scene/classes[]");
    const auto count = get_at<std::vector<int>>(p, "count", "/scene/classes[]");
    require(count.size() == 2 && count[0] >= 0 && count[1] >= count[0],
            "/scene/classes[]/count must be [min, max]");
    preset.count_min = count[0];
    preset.count_max = count[1];
    preset.mean = get_at<std::array<double, 3>>(p, "mean", "/scene/classes[]");
    preset.sigma = get_at<std::array<double, 3>>(p, "sigma", "/scene/classes[]");
    for (int a = 0; a < 3; ++a) {
      require(preset.mean[a] > 0.0 && preset.sigma[a] >= 0.0,
              "/scene/classes[]: sizes must be positive for " + preset.name);
    }
    require(seen.insert(preset.name).second, "duplicate class " + preset.name);
    c.scene.classes.push_back(preset);
  }
  require(!c.scene.classes.empty(), "/scene/classes must not be empty");
  c.scene.min_range = get_at<double>(s, "min_range", "/scene");
  c.scene.max_range = get_at<double>(s, "max_range", "/scene");
  require(c.scene.min_range >= 0.0 && c.scene.max_range > c.scene.min_range,
          "/scene: need 0 <= min_range < max_range");
  const auto sensor = get_at<std::array<double, 3>>(s, "sensor", "/scene");
  c.scene.sensor = {sensor[0], sensor[1], sensor[2]};
  c.scene.reference_range = get_at<double>(s, "reference_range", "/scene");
  c.scene.object_density = get_at<double>(s, "object_density", "/scene");
  c.scene.max_points_per_object = get_at<std::size_t>(s, "max_points_per_object", "/scene");
  c.scene.ground_density = get_at<double>(s, "ground_density", "/scene");
  c.scene.ground_height = get_at<double>(s, "ground_height", "/scene");
  c.scene.occlusion_prob = get_at<double>(s, "occlusion_prob", "/scene");
  const auto keep = get_at<std::vector<double>>(s, "occlusion_keep", "/scene");
  require(keep.size() == 2 && keep[0] >= 0.0 && keep[1] >= keep[0] && keep[1] <= 1.0,
          "/scene/occlusion_keep must be [min, max] within [0, 1]");
  c.scene.occlusion_keep_min = keep[0];
  c.scene.occlusion_keep_max = keep[1];
  c.scene.placement_margin = get_at<double>(s, "placement_margin", "/scene");
  c.scene.max_placement_retries = get_at<int>(s, "max_placement_retries", "/scene");
  require(c.scene.reference_range > 0.0 && c.scene.object_density >= 0.0 &&
              c.scene.ground_density >= 0.0 && c.scene.ground_height >= 0.0,
          "/scene: densities and ranges must be non-negative");

  const json& p = j.at("proposals");
  c.proposals.noise.clear();
  for (const auto& [cls, n] : p.at("noise").items()) {
    detail::check_keys(detail::noise_to_json({}), n, "/proposals/noise/" + cls);
    try {
      c.proposals.noise[cls] = detail::noise_from_json(n);
    } catch (const json::exception& e) {
      throw SchemaError("config/proposals/noise/" + cls + ": " + e.what());
    }
  }
  c.proposals.fp_rate = get_at<double>(p, "fp_rate", "/proposals");
  c.proposals.fp_max_iou = get_at<double>(p, "fp_max_iou", "/proposals");
  c.proposals.fp_max_retries = get_at<int>(p, "fp_max_retries", "/proposals");
  require(c.proposals.fp_rate >= 0.0, "/proposals/fp_rate must be >= 0");

  const json& e = j.at("encoding");
  try {
    c.encoding.variant = parse_variant(get_at<std::string>(e, "variant", "/encoding"));
  } catch (const std::invalid_argument& ex) {
    throw SchemaError(std::string("config/encoding/variant: ") + ex.what());
  }
  c.encoding.points_per_proposal = get_at<int>(e, "points_per_proposal", "/encoding");
  c.encoding.enlarge_wl = get_at<double>(e, "enlarge_wl", "/encoding");
  c.encoding.virtual_grid = get_at<int>(e, "virtual_grid", "/encoding");
  require(c.encoding.points_per_proposal >= 1, "/encoding/points_per_proposal must be >= 1");
  require(c.encoding.enlarge_wl >= 0.0, "/encoding/enlarge_wl must be >= 0");
  require(c.encoding.virtual_grid >= 2, "/encoding/virtual_grid must be >= 2");

  const json& t = j.at("train");
  auto& tc = c.train;
  tc.epochs = get_at<int>(t, "epochs", "/train");
  tc.batch_size = get_at<int>(t, "batch_size", "/train");
  tc.lr0 = get_at<double>(t, "lr0", "/train");
  tc.momentum = get_at<double>(t, "momentum", "/train");
  tc.weight_decay = get_at<double>(t, "weight_decay", "/train");
  tc.poly_power = get_at<double>(t, "poly_power", "/train");
  tc.grad_clip_norm = get_at<double>(t, "grad_clip_norm", "/train");
  require(tc.grad_clip_norm >= 0.0, "/train/grad_clip_norm must be >= 0");
  tc.loss.lambda = get_at<double>(t, "lambda", "/train");
  tc.loss.smooth_l1_beta = get_at<double>(t, "smooth_l1_beta", "/train");
  tc.loss.iou_pos_threshold =
      get_at<std::map<std::string, double>>(t, "iou_pos_threshold", "/train");
  const auto precision = get_at<std::string>(t, "precision", "/train");
  require(precision == "float" || precision == "double",
          "/train/precision must be 'float' or 'double'");
  tc.precision = precision == "float" ? Precision::kFloat : Precision::kDouble;
  tc.gt_jitter_ratio = get_at<double>(t, "gt_jitter_ratio", "/train");
  detail::check_keys(detail::noise_to_json({}), t.at("jitter"), "/train/jitter");
  tc.jitter = detail::noise_from_json(t.at("jitter"));
  tc.class_balanced = get_at<bool>(t, "class_balanced", "/train");
  tc.widths = get_at<std::vector<int>>(t, "widths", "/train");
  require(tc.epochs >= 1 && tc.batch_size >= 1, "/train: epochs and batch_size must be >= 1");
  require(tc.lr0 > 0.0 && tc.momentum >= 0.0 && tc.weight_decay >= 0.0 && tc.poly_power > 0.0,
          "/train: optimizer hyperparameters out of range");
  require(tc.loss.lambda > 0.0 && tc.loss.smooth_l1_beta > 0.0,
          "/train: lambda and smooth_l1_beta must be positive");
  require(tc.gt_jitter_ratio >= 0.0, "/train/gt_jitter_ratio must be >= 0");
  require(!tc.widths.empty(), "/train/widths must not be empty");
  for (int w : tc.widths) require(w > 0, "/train/widths must be positive");
  for (const auto& [cls, thr] : tc.loss.iou_pos_threshold) {
    require(thr > 0.0 && thr < 1.0, "/train/iou_pos_threshold/" + cls + " must be in (0,1)");
  }

  const json& ev = j.at("eval");
  c.eval.iou_threshold = get_at<std::map<std::string, double>>(ev, "iou_threshold", "/eval");
  for (const auto& [cls, thr] : c.eval.iou_threshold) {
    require(thr > 0.0 && thr < 1.0, "/eval/iou_threshold/" + cls + " must be in (0,1)");
  }
  c.eval.level1_min_points = get_at<std::size_t>(ev, "level1_min_points", "/eval");
  c.eval.level2_min_points = get_at<std::size_t>(ev, "level2_min_points", "/eval");
  c.eval.range_edges = get_at<std::vector<double>>(ev, "range_edges", "/eval");
  for (std::size_t i = 1; i < c.eval.range_edges.size(); ++i) {
    require(c.eval.range_edges[i] > c.eval.range_edges[i - 1], "/eval/range_edges must ascend");
  }
  const auto matching = get_at<std::string>(ev, "matching", "/eval");
  require(matching == "3d" || matching == "bev", "/eval/matching must be '3d' or 'bev'");
  c.eval.matching = matching == "3d" ? MatchIou::k3d : MatchIou::kBev;
  const auto interp = get_at<std::string>(ev, "interpolation", "/eval");
  if (interp == "all_points") c.eval.interpolation = Interpolation::kAllPoints;
  else if (interp == "11_point") c.eval.interpolation = Interpolation::k11Point;
  else if (interp == "40_point") c.eval.interpolation = Interpolation::k40Point;
  else throw SchemaError("config/eval/interpolation: unknown mode '" + interp + "'");

  const json& b = j.at("bench");
  c.bench.points = get_at<std::vector<int>>(b, "points", "/bench");
  c.bench.batch = get_at<int>(b, "batch", "/bench");
  c.bench.runs = get_at<int>(b, "runs", "/bench");
  c.bench.warmup = get_at<int>(b, "warmup", "/bench");
  require(!c.bench.points.empty() && c.bench.batch >= 1 && c.bench.runs >= 1,
          "/bench: points, batch and runs must be non-empty/positive");
  for (std::size_t i = 0; i < c.bench.points.size(); ++i) {
    require(c.bench.points[i] >= 1 && (i == 0 || c.bench.points[i] > c.bench.points[i - 1]),
            "/bench/points must be positive and ascending");
  }

  for (const auto& preset : c.scene.classes) {
    require(tc.loss.iou_pos_threshold.count(preset.name) != 0,
            "/train/iou_pos_threshold has no entry for class " + preset.name);
    require(c.eval.iou_threshold.count(preset.name) != 0,
            "/eval/iou_threshold has no entry for class " + preset.name);
  }
  return c;
}

/// Applies a (possibly partial) user document on top of the defaults.
inline RunConfig parse_config(const json& user) {
  json merged = config_to_json(RunConfig{});
  detail::merge_checked(merged, user, "");
  try {
    return config_from_json(merged);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("config: ") + e.what());
  }
}

inline RunConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("config: ") + e.what());
  }
  return parse_config(j);
}

/// FNV-1a over the canonical dump of everything that shapes training.
inline std::uint64_t training_hash(const RunConfig& c) {
  const json full = config_to_json(c);
  const json relevant = {{"seed", full["seed"]},
                         {"classes", c.class_names()},
                         {"encoding", full["encoding"]},
                         {"train", full["train"]}};
  const std::string text = relevant.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace lidar_rcnn
