#pragma once

// 7-DoF box algebra: canonical-frame transforms, enlargement, containment and
// rotated IoU in bird's-eye view and 3D. Everything here is double precision.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace lidar_rcnn {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Wraps an angle into (-pi, pi].
inline double wrap_heading(double theta) {
  if (!std::isfinite(theta)) {
    throw std::invalid_argument("wrap_heading: non-finite angle");
  }
  double r = std::fmod(theta, kTwoPi);  // (-2pi, 2pi)
  if (r <= -kPi) r += kTwoPi;
  if (r > kPi) r -= kTwoPi;
  return r;
}

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend bool operator==(const Point3&, const Point3&) = default;
};

struct PointCloud {
  std::string frame;
  std::vector<Point3> points;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

/// Gravity-aligned oriented box. `w` spans the lateral (y) axis of the box,
/// `l` spans the heading (x) axis and `h` the vertical axis.
struct Box7 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double w = 1.0;
  double l = 1.0;
  double h = 1.0;
  double theta = 0.0;

  friend bool operator==(const Box7&, const Box7&) = default;

  Point3 center() const { return {x, y, z}; }
  double volume() const { return w * l * h; }

  bool valid() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(z) &&
           std::isfinite(theta) && std::isfinite(w) && std::isfinite(l) &&
           std::isfinite(h) && w > 0.0 && l > 0.0 && h > 0.0;
  }
};

/// Builds a box with the heading wrapped, rejecting non-positive dimensions.
inline Box7 make_box(double x, double y, double z, double w, double l, double h,
                     double theta) {
  Box7 b{x, y, z, w, l, h, wrap_heading(theta)};
  if (!b.valid()) throw std::invalid_argument("make_box: invalid box");
  return b;
}

inline Point3 to_canonical(const Point3& p, const Box7& box) {
  const double c = std::cos(box.theta);
  const double s = std::sin(box.theta);
  const double dx = p.x - box.x;
  const double dy = p.y - box.y;
  return {c * dx + s * dy, -s * dx + c * dy, p.z - box.z};
}

inline Point3 from_canonical(const Point3& p, const Box7& box) {
  const double c = std::cos(box.theta);
  const double s = std::sin(box.theta);
  return {c * p.x - s * p.y + box.x, s * p.x + c * p.y + box.y, p.z + box.z};
}

inline PointCloud to_canonical(const PointCloud& cloud, const Box7& box) {
  PointCloud out{cloud.frame, {}};
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(to_canonical(p, box));
  return out;
}

inline PointCloud from_canonical(const PointCloud& cloud, const Box7& box) {
  PointCloud out{cloud.frame, {}};
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(from_canonical(p, box));
  return out;
}

/// Grows width and length; height, center and heading are kept.
inline Box7 enlarge(const Box7& box, double dw, double dl) {
  if (!(dw >= 0.0) || !(dl >= 0.0)) {
    throw std::invalid_argument("enlarge: negative enlargement");
  }
  Box7 out = box;
  out.w += dw;
  out.l += dl;
  return out;
}

/// Closed-box containment of a point already expressed in the box frame.
inline bool contains_canonical(const Box7& box, const Point3& q) {
  return std::abs(q.x) <= 0.5 * box.l && std::abs(q.y) <= 0.5 * box.w &&
         std::abs(q.z) <= 0.5 * box.h;
}

inline bool contains(const Box7& box, const Point3& p) {
  return contains_canonical(box, to_canonical(p, box));
}

inline std::size_t count_inside(const Box7& box, const PointCloud& cloud) {
  std::size_t n = 0;
  for (const auto& p : cloud.points) n += contains(box, p) ? 1 : 0;
  return n;
}

// ---------------------------------------------------------------------------
// Rotated rectangle overlap

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

using Polygon = std::vector<Vec2>;

/// Counter-clockwise BEV footprint corners.
inline std::array<Vec2, 4> bev_corners(const Box7& b) {
  const double c = std::cos(b.theta);
  const double s = std::sin(b.theta);
  const double hl = 0.5 * b.l;
  const double hw = 0.5 * b.w;
  const std::array<Vec2, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  std::array<Vec2, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = {b.x + c * local[i].x - s * local[i].y,
              b.y + s * local[i].x + c * local[i].y};
  }
  return out;
}

inline double polygon_area(const Polygon& poly) {
  double a = 0.0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % n];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::abs(a);
}

namespace detail {

inline double cross(const Vec2& a, const Vec2& b, const Vec2& p) {
  return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
}

inline Vec2 line_intersection(const Vec2& p, const Vec2& q, const Vec2& a,
                              const Vec2& b) {
  const double cp = cross(a, b, p);
  const double cq = cross(a, b, q);
  const double t = cp / (cp - cq);
  return {p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)};
}

}  // namespace detail

/// Sutherland-Hodgman clipping of `subject` against the convex CCW `clip`.
inline Polygon clip_polygon(Polygon subject, const Polygon& clip) {
  const std::size_t m = clip.size();
  for (std::size_t e = 0; e < m && !subject.empty(); ++e) {
    const Vec2& a = clip[e];
    const Vec2& b = clip[(e + 1) % m];
    Polygon next;
    next.reserve(subject.size() + 2);
    const std::size_t n = subject.size();
    for (std::size_t i = 0; i < n; ++i) {
      const Vec2& cur = subject[i];
      const Vec2& prev = subject[(i + n - 1) % n];
      const bool cur_in = detail::cross(a, b, cur) >= 0.0;
      const bool prev_in = detail::cross(a, b, prev) >= 0.0;
      if (cur_in) {
        if (!prev_in) next.push_back(detail::line_intersection(prev, cur, a, b));
        next.push_back(cur);
      } else if (prev_in) {
        next.push_back(detail::line_intersection(prev, cur, a, b));
      }
    }
    subject = std::move(next);
  }
  return subject;
}

inline constexpr double kEmptyAreaEpsilon = 1e-12;

inline double bev_intersection_area(const Box7& a, const Box7& b) {
  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  const Polygon clipped =
      clip_polygon(Polygon(ca.begin(), ca.end()), Polygon(cb.begin(), cb.end()));
  if (clipped.size() < 3) return 0.0;
  const double area = polygon_area(clipped);
  return area < kEmptyAreaEpsilon ? 0.0 : area;
}

namespace detail {

inline double clamp_unit(double v) { return std::clamp(v, 0.0, 1.0); }

// Clipping a against b and b against a give the same polygon up to rounding;
// ordering the pair makes the result exactly symmetric.
inline bool box_less(const Box7& a, const Box7& b) {
  return std::tie(a.x, a.y, a.z, a.w, a.l, a.h, a.theta) <
         std::tie(b.x, b.y, b.z, b.w, b.l, b.h, b.theta);
}

}  // namespace detail

inline double bev_iou(const Box7& a, const Box7& b) {
  if (a == b) return 1.0;
  const bool swap = detail::box_less(b, a);
  const Box7& p = swap ? b : a;
  const Box7& q = swap ? a : b;
  const double inter = bev_intersection_area(p, q);
  if (inter == 0.0) return 0.0;
  const double uni = p.w * p.l + q.w * q.l - inter;
  return detail::clamp_unit(inter / uni);
}

inline double vertical_overlap(const Box7& a, const Box7& b) {
  const double lo = std::max(a.z - 0.5 * a.h, b.z - 0.5 * b.h);
  const double hi = std::min(a.z + 0.5 * a.h, b.z + 0.5 * b.h);
  return std::max(0.0, hi - lo);
}

inline double iou_3d(const Box7& a, const Box7& b) {
  if (a == b) return 1.0;
  const bool swap = detail::box_less(b, a);
  const Box7& p = swap ? b : a;
  const Box7& q = swap ? a : b;
  const double dz = vertical_overlap(p, q);
  if (dz <= 0.0) return 0.0;
  const double inter_area = bev_intersection_area(p, q);
  if (inter_area == 0.0) return 0.0;
  const double inter = inter_area * dz;
  const double uni = p.volume() + q.volume() - inter;
  return detail::clamp_unit(inter / uni);
}

/// Distance of the box center from a sensor origin in the ground plane.
inline double bev_range(const Box7& b, double ox = 0.0, double oy = 0.0) {
  return std::hypot(b.x - ox, b.y - oy);
}

}  // namespace lidar_rcnn
