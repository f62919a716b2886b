#pragma once

// Point pooling per proposal, fixed-cardinality sampling, and the per-point
// feature encodings used to make the refinement network aware of proposal size.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lidar_rcnn/geometry.hpp"

namespace lidar_rcnn {

using Rng = std::mt19937_64;

enum class Variant {
  kPlain,
  kSizeNormalized,
  kAnchor,
  kBoundaryOffset,
  kVirtualPoints,
};

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::kPlain: return "plain";
    case Variant::kSizeNormalized: return "size_normalized";
    case Variant::kAnchor: return "anchor";
    case Variant::kBoundaryOffset: return "boundary_offset";
    case Variant::kVirtualPoints: return "virtual_points";
  }
  return "unknown";
}

inline Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::kPlain, Variant::kSizeNormalized, Variant::kAnchor,
                    Variant::kBoundaryOffset, Variant::kVirtualPoints}) {
    if (variant_name(v) == name) return v;
  }
  throw std::invalid_argument("unknown encoding variant: " + std::string(name));
}

inline int variant_channels(Variant v) {
  switch (v) {
    case Variant::kPlain:
    case Variant::kSizeNormalized: return 3;
    case Variant::kAnchor: return 6;
    case Variant::kBoundaryOffset: return 9;
    case Variant::kVirtualPoints: return 4;
  }
  return 0;
}

struct EncodingConfig {
  Variant variant = Variant::kPlain;
  int points_per_proposal = 512;
  double enlarge_wl = 1.0;
  int virtual_grid = 4;
};

/// Per-class anchor sizes (w, l, h).
class AnchorTable {
 public:
  struct Size {
    double w = 0.0;
    double l = 0.0;
    double h = 0.0;
  };

  AnchorTable() = default;

  void set(const std::string& cls, Size s) {
    if (!(s.w > 0.0 && s.l > 0.0 && s.h > 0.0)) {
      throw std::invalid_argument("anchor sizes must be positive for " + cls);
    }
    sizes_[cls] = s;
  }

  const Size& at(const std::string& cls) const {
    auto it = sizes_.find(cls);
    if (it == sizes_.end()) {
      throw std::out_of_range("no anchor for class '" + cls + "'");
    }
    return it->second;
  }

  bool has(const std::string& cls) const { return sizes_.count(cls) != 0; }
  const std::map<std::string, Size>& entries() const { return sizes_; }

  /// Mean ground-truth size per class.
  template <typename Range>
  static AnchorTable from_ground_truth(const Range& labelled_boxes) {
    std::map<std::string, std::array<double, 4>> acc;
    for (const auto& [box, cls] : labelled_boxes) {
      auto& a = acc[cls];
      a[0] += box.w;
      a[1] += box.l;
      a[2] += box.h;
      a[3] += 1.0;
    }
    AnchorTable table;
    for (const auto& [cls, a] : acc) {
      table.set(cls, {a[0] / a[3], a[1] / a[3], a[2] / a[3]});
    }
    return table;
  }

 private:
  std::map<std::string, Size> sizes_;
};

/// Points pooled from an enlarged proposal, in the proposal's canonical frame.
struct ProposalCrop {
  Box7 proposal;
  std::vector<Point3> points;
  std::size_t raw_count = 0;
  bool empty = false;  // set by sample_fixed when there was nothing to sample
};

inline ProposalCrop crop_points(const PointCloud& cloud, const Box7& proposal,
                                double enlarge_wl) {
  const Box7 region = enlarge(proposal, enlarge_wl, enlarge_wl);
  ProposalCrop crop;
  crop.proposal = proposal;
  for (const auto& p : cloud.points) {
    // proposal and region share center and heading, so one transform serves
    // both the containment test and the stored coordinates
    const Point3 q = to_canonical(p, proposal);
    if (contains_canonical(region, q)) crop.points.push_back(q);
  }
  crop.raw_count = crop.points.size();
  return crop;
}

inline ProposalCrop sample_fixed(const ProposalCrop& crop, int n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample_fixed: n must be >= 1");
  const std::size_t want = static_cast<std::size_t>(n);
  ProposalCrop out;
  out.proposal = crop.proposal;
  out.raw_count = crop.raw_count;
  const std::size_t have = crop.points.size();
  if (have == 0) {
    out.points.assign(want, Point3{});
    out.empty = true;
    return out;
  }
  out.points.reserve(want);
  if (have > want) {
    std::vector<std::size_t> idx(have);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < want; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, have - 1);
      std::swap(idx[i], idx[pick(rng)]);
      out.points.push_back(crop.points[idx[i]]);
    }
  } else {
    out.points = crop.points;
    std::uniform_int_distribution<std::size_t> pick(0, have - 1);
    while (out.points.size() < want) out.points.push_back(crop.points[pick(rng)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-point encodings. Each returns a (num_points x channels) matrix.

using FeatureMatrix = Eigen::MatrixXd;

inline FeatureMatrix encode_plain(const ProposalCrop& crop) {
  FeatureMatrix f(static_cast<Eigen::Index>(crop.points.size()), 3);
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    const Point3& p = crop.points[static_cast<std::size_t>(i)];
    f.row(i) << p.x, p.y, p.z;
  }
  return f;
}

inline FeatureMatrix encode_size_normalized(const ProposalCrop& crop) {
  const Box7& b = crop.proposal;
  FeatureMatrix f(static_cast<Eigen::Index>(crop.points.size()), 3);
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    const Point3& p = crop.points[static_cast<std::size_t>(i)];
    f.row(i) << p.x / b.l, p.y / b.w, p.z / b.h;
  }
  return f;
}

inline FeatureMatrix encode_anchor(const ProposalCrop& crop,
                                   const std::string& class_hint,
                                   const AnchorTable& anchors) {
  const AnchorTable::Size& a = anchors.at(class_hint);
  FeatureMatrix f(static_cast<Eigen::Index>(crop.points.size()), 6);
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    const Point3& p = crop.points[static_cast<std::size_t>(i)];
    f.row(i) << p.x, p.y, p.z, a.w, a.l, a.h;
  }
  return f;
}

/// Signed offsets to the six faces of the un-enlarged proposal.
inline FeatureMatrix encode_boundary_offset(const ProposalCrop& crop) {
  const Box7& b = crop.proposal;
  const double hl = 0.5 * b.l;
  const double hw = 0.5 * b.w;
  const double hh = 0.5 * b.h;
  FeatureMatrix f(static_cast<Eigen::Index>(crop.points.size()), 9);
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    const Point3& p = crop.points[static_cast<std::size_t>(i)];
    f.row(i) << p.x, p.y, p.z, p.x - hl, p.x + hl, p.y - hw, p.y + hw, p.z - hh,
        p.z + hh;
  }
  return f;
}

/// Cell centers of a grid^3 lattice spanning the un-enlarged proposal.
inline std::vector<Point3> virtual_lattice(const Box7& b, int grid) {
  if (grid < 2) throw std::invalid_argument("virtual grid must be >= 2");
  std::vector<Point3> out;
  out.reserve(static_cast<std::size_t>(grid * grid * grid));
  auto center = [grid](int i, double extent) {
    return extent * ((static_cast<double>(i) + 0.5) / grid - 0.5);
  };
  for (int i = 0; i < grid; ++i) {
    for (int j = 0; j < grid; ++j) {
      for (int k = 0; k < grid; ++k) {
        out.push_back({center(i, b.l), center(j, b.w), center(k, b.h)});
      }
    }
  }
  return out;
}

/// Real points flagged 1 followed by grid^3 virtual points flagged 0.
inline FeatureMatrix encode_virtual_points(const ProposalCrop& crop, int grid) {
  const std::vector<Point3> lattice = virtual_lattice(crop.proposal, grid);
  const auto n_real = static_cast<Eigen::Index>(crop.points.size());
  FeatureMatrix f(n_real + static_cast<Eigen::Index>(lattice.size()), 4);
  for (Eigen::Index i = 0; i < n_real; ++i) {
    const Point3& p = crop.points[static_cast<std::size_t>(i)];
    f.row(i) << p.x, p.y, p.z, 1.0;
  }
  for (std::size_t j = 0; j < lattice.size(); ++j) {
    const Point3& p = lattice[j];
    f.row(n_real + static_cast<Eigen::Index>(j)) << p.x, p.y, p.z, 0.0;
  }
  return f;
}

inline FeatureMatrix encode(const ProposalCrop& crop, const EncodingConfig& cfg,
                            const std::string& class_hint = {},
                            const AnchorTable* anchors = nullptr) {
  switch (cfg.variant) {
    case Variant::kPlain: return encode_plain(crop);
    case Variant::kSizeNormalized: return encode_size_normalized(crop);
    case Variant::kAnchor:
      if (anchors == nullptr) {
        throw std::invalid_argument("anchor encoding requires an anchor table");
      }
      return encode_anchor(crop, class_hint, *anchors);
    case Variant::kBoundaryOffset: return encode_boundary_offset(crop);
    case Variant::kVirtualPoints: return encode_virtual_points(crop, cfg.virtual_grid);
  }
  throw std::logic_error("unhandled variant");
}

/// Fixed-size feature matrices for a set of proposals.
struct EncodedBatch {
  Variant variant = Variant::kPlain;
  int channels = 3;
  std::vector<FeatureMatrix> features;
  std::vector<Box7> proposals;

  std::size_t size() const { return features.size(); }

  void push_back(FeatureMatrix f, const Box7& proposal) {
    if (f.cols() != channels) {
      throw std::invalid_argument("EncodedBatch: channel count mismatch");
    }
    if (!features.empty() && f.rows() != features.front().rows()) {
      throw std::invalid_argument("EncodedBatch: point count mismatch");
    }
    features.push_back(std::move(f));
    proposals.push_back(proposal);
  }
};

// ---------------------------------------------------------------------------
// Voxelized alternative input

inline constexpr int kVoxelGrid = 14;

struct VoxelBatch {
  struct Grid {
    Box7 extent;  // enlarged proposal
    // point indices per voxel, flattened as (ix * G + iy) * G + iz
    std::vector<std::vector<std::size_t>> members;
  };

  int grid = kVoxelGrid;
  std::vector<Grid> proposals;

  static constexpr std::size_t flat(int ix, int iy, int iz, int g) {
    return static_cast<std::size_t>((ix * g + iy) * g + iz);
  }
};

inline std::array<int, 3> voxel_index(const Point3& p, const Box7& extent,
                                      int grid) {
  auto axis = [grid](double v, double len) {
    const double t = std::floor((v + 0.5 * len) / len * grid);
    return static_cast<int>(std::clamp(t, 0.0, static_cast<double>(grid - 1)));
  };
  return {axis(p.x, extent.l), axis(p.y, extent.w), axis(p.z, extent.h)};
}

/// Assigns every sampled point to its voxel inside the enlarged proposal.
inline VoxelBatch::Grid voxelize(const ProposalCrop& crop, double enlarge_wl,
                                 int grid = kVoxelGrid) {
  VoxelBatch::Grid g;
  g.extent = enlarge(crop.proposal, enlarge_wl, enlarge_wl);
  g.members.resize(static_cast<std::size_t>(grid * grid * grid));
  if (crop.empty) return g;
  for (std::size_t i = 0; i < crop.points.size(); ++i) {
    const auto [ix, iy, iz] = voxel_index(crop.points[i], g.extent, grid);
    g.members[VoxelBatch::flat(ix, iy, iz, grid)].push_back(i);
  }
  return g;
}

/// Max-pools per-point features into voxels; empty voxels stay zero.
/// Returns a (grid^3 x channels) matrix in flattened voxel order.
inline Eigen::MatrixXd pool_voxels(const VoxelBatch::Grid& g,
                                   const Eigen::MatrixXd& point_features) {
  Eigen::MatrixXd out =
      Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(g.members.size()),
                            point_features.cols());
  for (std::size_t v = 0; v < g.members.size(); ++v) {
    const auto& m = g.members[v];
    if (m.empty()) continue;
    auto row = out.row(static_cast<Eigen::Index>(v));
    row = point_features.row(static_cast<Eigen::Index>(m.front()));
    for (std::size_t k = 1; k < m.size(); ++k) {
      row = row.cwiseMax(point_features.row(static_cast<Eigen::Index>(m[k])));
    }
  }
  return out;
}

}  // namespace lidar_rcnn
