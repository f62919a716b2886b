#pragma once

// Desk-scale stand-in for a driving dataset: boxes on a ground plane, points
// sampled on their sensor-facing faces with range-dependent density, sparse
// ground returns, and first-stage proposals simulated by box corruption.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lidar_rcnn/encoding.hpp"
#include "lidar_rcnn/geometry.hpp"
#include "lidar_rcnn/targets.hpp"

namespace lidar_rcnn {

struct ClassPreset {
  std::string name;
  int count_min = 0;
  int count_max = 0;
  // mean and standard deviation of (w, l, h)
  std::array<double, 3> mean{};
  std::array<double, 3> sigma{};
};

struct SceneConfig {
  std::vector<ClassPreset> classes{
      {"vehicle", 4, 9, {1.9, 4.6, 1.7}, {0.12, 0.35, 0.12}},
      {"pedestrian", 2, 5, {0.8, 0.9, 1.7}, {0.08, 0.08, 0.1}},
  };
  double min_range = 4.0;
  double max_range = 60.0;
  Point3 sensor{0.0, 0.0, 2.0};
  double reference_range = 10.0;
  double object_density = 30.0;   // points per m^2 of visible face at reference range
  std::size_t max_points_per_object = 2000;
  double ground_density = 1.0;    // points per m^2 at reference range
  double ground_height = 0.05;    // ground returns have z uniform in [0, ground_height]
  double occlusion_prob = 0.2;
  double occlusion_keep_min = 0.2;
  double occlusion_keep_max = 0.7;
  double placement_margin = 0.5;
  int max_placement_retries = 50;
};

struct Scene {
  std::string frame;
  PointCloud cloud;
  std::vector<LabelledBox> gts;
  int placement_failures = 0;
};

// Object returns sit this far inside the face they were sampled on, so that
// closed-box point counts are not at the mercy of rounding.
inline constexpr double kSurfaceInset = 1e-4;

namespace detail {

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Points on the faces of `box` that look toward the sensor.
inline void sample_visible_faces(const Box7& box, const Point3& sensor, std::size_t count,
                                 Rng& rng, std::vector<Point3>& out) {
  const Point3 s = to_canonical(sensor, box);
  const double hl = 0.5 * box.l;
  const double hw = 0.5 * box.w;
  const double hh = 0.5 * box.h;
  struct Face {
    int axis;     // 0: x, 1: y, 2: z
    double sign;
    double area;
  };
  std::vector<Face> faces;
  if (s.x > hl) faces.push_back({0, 1.0, box.w * box.h});
  if (s.x < -hl) faces.push_back({0, -1.0, box.w * box.h});
  if (s.y > hw) faces.push_back({1, 1.0, box.l * box.h});
  if (s.y < -hw) faces.push_back({1, -1.0, box.l * box.h});
  if (s.z > hh) faces.push_back({2, 1.0, box.l * box.w});
  if (faces.empty()) return;
  std::vector<double> weights;
  for (const auto& f : faces) weights.push_back(f.area);
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  const double half[3] = {hl - kSurfaceInset, hw - kSurfaceInset, hh - kSurfaceInset};
  for (std::size_t i = 0; i < count; ++i) {
    const Face& f = faces[pick(rng)];
    double c[3];
    for (int a = 0; a < 3; ++a) c[a] = uniform(rng, -half[a], half[a]);
    c[f.axis] = f.sign * half[f.axis];
    out.push_back(from_canonical(Point3{c[0], c[1], c[2]}, box));
  }
}

inline double visible_area(const Box7& box, const Point3& sensor) {
  const Point3 s = to_canonical(sensor, box);
  double a = 0.0;
  if (std::abs(s.x) > 0.5 * box.l) a += box.w * box.h;
  if (std::abs(s.y) > 0.5 * box.w) a += box.l * box.h;
  if (s.z > 0.5 * box.h) a += box.l * box.w;
  return a;
}

}  // namespace detail

inline Scene generate_scene(const SceneConfig& cfg, Rng& rng, std::string frame = {}) {
  Scene scene;
  scene.frame = std::move(frame);
  scene.cloud.frame = scene.frame;

  std::vector<Box7> placed;
  for (const auto& preset : cfg.classes) {
    const int n = std::uniform_int_distribution<int>(preset.count_min, preset.count_max)(rng);
    for (int k = 0; k < n; ++k) {
      bool ok = false;
      for (int attempt = 0; attempt < cfg.max_placement_retries && !ok; ++attempt) {
        std::array<double, 3> dims{};
        for (int a = 0; a < 3; ++a) {
          std::normal_distribution<double> nd(preset.mean[a], preset.sigma[a]);
          dims[a] = std::max(0.25 * preset.mean[a], nd(rng));
        }
        const double r = detail::uniform(rng, cfg.min_range, cfg.max_range);
        const double phi = detail::uniform(rng, -kPi, kPi);
        const double heading = detail::uniform(rng, -kPi, kPi);
        const Box7 cand = make_box(r * std::cos(phi), r * std::sin(phi), 0.5 * dims[2],
                                   dims[0], dims[1], dims[2], heading);
        const Box7 padded = enlarge(cand, cfg.placement_margin, cfg.placement_margin);
        ok = std::none_of(placed.begin(), placed.end(), [&](const Box7& other) {
          return bev_iou(padded, enlarge(other, cfg.placement_margin, cfg.placement_margin)) > 0.0;
        });
        if (ok) {
          placed.push_back(cand);
          scene.gts.push_back({cand, preset.name});
        }
      }
      if (!ok) ++scene.placement_failures;
    }
  }

  for (const auto& gt : scene.gts) {
    const double range = std::max(
        std::hypot(gt.box.x - cfg.sensor.x, gt.box.y - cfg.sensor.y), 1e-3);
    const double density =
        cfg.object_density * std::pow(cfg.reference_range / range, 2.0);
    double expected = density * detail::visible_area(gt.box, cfg.sensor);
    if (detail::uniform(rng, 0.0, 1.0) < cfg.occlusion_prob) {
      expected *= detail::uniform(rng, cfg.occlusion_keep_min, cfg.occlusion_keep_max);
    }
    const auto count = std::min<std::size_t>(
        cfg.max_points_per_object,
        static_cast<std::size_t>(std::poisson_distribution<long>(std::max(expected, 0.0))(rng)));
    detail::sample_visible_faces(gt.box, cfg.sensor, count, rng, scene.cloud.points);
  }

  if (cfg.ground_density > 0.0) {
    // density ~ 1/r^2 per unit area means the radius is log-uniform
    const double r0 = 1.0;
    const double r1 = cfg.max_range + 10.0;
    const double mean = 2.0 * kPi * cfg.ground_density * cfg.reference_range *
                        cfg.reference_range * std::log(r1 / r0);
    const long n = std::poisson_distribution<long>(mean)(rng);
    for (long i = 0; i < n; ++i) {
      const double r = r0 * std::pow(r1 / r0, detail::uniform(rng, 0.0, 1.0));
      const double phi = detail::uniform(rng, -kPi, kPi);
      const Point3 p{cfg.sensor.x + r * std::cos(phi), cfg.sensor.y + r * std::sin(phi),
                     detail::uniform(rng, 0.0, cfg.ground_height)};
      // ground under an object is hidden by it
      const bool hidden = std::any_of(scene.gts.begin(), scene.gts.end(),
                                      [&](const LabelledBox& g) { return contains(g.box, p); });
      if (!hidden) scene.cloud.points.push_back(p);
    }
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Proposal corruption

struct BoxNoise {
  double center = 0.0;    // uniform +- meters in x and y
  double z = 0.0;         // uniform +- meters
  double log_size = 0.0;  // uniform +- on log(w), log(l), log(h)
  double heading = 0.0;   // uniform +- radians

  friend bool operator==(const BoxNoise&, const BoxNoise&) = default;
};

/// Uniform perturbation of center, log-size and heading.
inline Box7 jitter_box(const Box7& b, const BoxNoise& n, Rng& rng) {
  if (n.center < 0.0 || n.z < 0.0 || n.log_size < 0.0 || n.heading < 0.0) {
    throw std::invalid_argument("jitter magnitudes must be non-negative");
  }
  if (n == BoxNoise{}) return b;
  auto u = [&rng](double m) { return m > 0.0 ? detail::uniform(rng, -m, m) : 0.0; };
  const double dx = u(n.center);
  const double dy = u(n.center);
  const double dz = u(n.z);
  const double sw = std::exp(u(n.log_size));
  const double sl = std::exp(u(n.log_size));
  const double sh = std::exp(u(n.log_size));
  const double dt = u(n.heading);
  return make_box(b.x + dx, b.y + dy, b.z + dz, b.w * sw, b.l * sl, b.h * sh, b.theta + dt);
}

struct Proposal {
  Box7 box;
  std::string cls;
  double score = 0.0;
};

struct ProposalConfig {
  std::map<std::string, BoxNoise> noise{
      {"vehicle", {0.35, 0.1, 0.15, 0.12}},
      {"pedestrian", {0.15, 0.05, 0.15, 0.3}},
  };
  double fp_rate = 1.0;      // mean false positives per scene
  double fp_max_iou = 0.1;   // false positives stay below this IoU with every gt
  int fp_max_retries = 50;
};

/// One corrupted proposal per ground-truth box plus Poisson false positives.
/// The stub score mimics an informative but noisy first-stage confidence.
inline std::vector<Proposal> make_proposals(const Scene& scene, const SceneConfig& scene_cfg,
                                            const ProposalConfig& cfg, Rng& rng) {
  std::vector<Proposal> out;
  for (const auto& gt : scene.gts) {
    auto it = cfg.noise.find(gt.cls);
    const BoxNoise noise = it == cfg.noise.end() ? BoxNoise{} : it->second;
    const Box7 p = jitter_box(gt.box, noise, rng);
    const double score =
        std::clamp(0.6 * iou_3d(p, gt.box) + 0.4 * detail::uniform(rng, 0.0, 1.0), 0.0, 1.0);
    out.push_back({p, gt.cls, score});
  }
  if (cfg.fp_rate > 0.0 && !scene_cfg.classes.empty()) {
    const long n_fp = std::poisson_distribution<long>(cfg.fp_rate)(rng);
    for (long k = 0; k < n_fp; ++k) {
      const auto ci = std::uniform_int_distribution<std::size_t>(
          0, scene_cfg.classes.size() - 1)(rng);
      const ClassPreset& preset = scene_cfg.classes[ci];
      for (int attempt = 0; attempt < cfg.fp_max_retries; ++attempt) {
        const double r = detail::uniform(rng, scene_cfg.min_range, scene_cfg.max_range);
        const double phi = detail::uniform(rng, -kPi, kPi);
        const Box7 cand = make_box(r * std::cos(phi), r * std::sin(phi), 0.5 * preset.mean[2],
                                   preset.mean[0], preset.mean[1], preset.mean[2],
                                   detail::uniform(rng, -kPi, kPi));
        const bool clear = std::all_of(scene.gts.begin(), scene.gts.end(), [&](const auto& g) {
          return iou_3d(cand, g.box) < cfg.fp_max_iou;
        });
        if (clear) {
          out.push_back({cand, preset.name, 0.4 * detail::uniform(rng, 0.0, 1.0)});
          break;
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Point-count stability under enlargement

struct AmbiguityStats {
  std::size_t proposals = 0;
  std::size_t same_count = 0;
  std::size_t lt_10_new = 0;  // gained between 1 and 9 points

  double frac_same_count() const {
    return proposals == 0 ? 0.0 : static_cast<double>(same_count) / proposals;
  }
  double frac_lt_10_new() const {
    return proposals == 0 ? 0.0 : static_cast<double>(lt_10_new) / proposals;
  }

  void merge(const AmbiguityStats& o) {
    proposals += o.proposals;
    same_count += o.same_count;
    lt_10_new += o.lt_10_new;
  }
};

inline AmbiguityStats ambiguity_study(const PointCloud& cloud, std::span<const Box7> proposals,
                                      double enlarge_wl = 1.0) {
  AmbiguityStats stats;
  for (const Box7& b : proposals) {
    const Box7 big = enlarge(b, enlarge_wl, enlarge_wl);
    std::size_t inner = 0;
    std::size_t outer = 0;
    for (const auto& p : cloud.points) {
      const Point3 q = to_canonical(p, b);
      if (contains_canonical(big, q)) {
        ++outer;
        if (contains_canonical(b, q)) ++inner;
      }
    }
    const std::size_t gained = outer - inner;
    ++stats.proposals;
    if (gained == 0) ++stats.same_count;
    else if (gained < 10) ++stats.lt_10_new;
  }
  return stats;
}

}  // namespace lidar_rcnn
