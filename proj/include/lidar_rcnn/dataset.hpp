#pragma once

// On-disk dataset: a JSON manifest plus line-delimited JSON records for point
// clouds and boxes. Distances are meters, angles radians.
//
//   clouds.jsonl     {"frame": "000012", "points": [[x, y, z], ...]}
//   gt_boxes.jsonl   {"frame": "000012", "class": "vehicle",
//                     "box": [x, y, z, w, l, h, theta]}
//   proposals.jsonl  same as gt_boxes plus "score"; refined outputs may add
//                    "empty_crop": true
//
// `w` is the extent along the box's lateral axis, `l` along its heading.

#include "json.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lidar_rcnn/encoding.hpp"
#include "lidar_rcnn/errors.hpp"
#include "lidar_rcnn/geometry.hpp"
#include "lidar_rcnn/synthetic.hpp"
#include "lidar_rcnn/targets.hpp"

namespace lidar_rcnn {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

/// Writes `contents` next to `path` and renames it into place.
inline void write_file_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string());
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Shortest round-trip decimal form.
inline void append_number(std::string& out, double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, end);
}

struct Manifest {
  int format_version = kFormatVersion;
  std::vector<std::string> classes;
  AnchorTable anchors;
  std::map<std::string, std::vector<std::string>> splits;
  std::string clouds_file = "clouds.jsonl";
  std::string gt_file = "gt_boxes.jsonl";
  std::string proposals_file = "proposals.jsonl";
};

inline json manifest_to_json(const Manifest& m) {
  json anchors = json::object();
  for (const auto& [cls, s] : m.anchors.entries()) {
    anchors[cls] = {{"w", s.w}, {"l", s.l}, {"h", s.h}};
  }
  return {{"format_version", m.format_version},
          {"units", {{"distance", "m"}, {"angle", "rad"}}},
          {"box_fields", {"x", "y", "z", "w", "l", "h", "theta"}},
          {"classes", m.classes},
          {"anchors", anchors},
          {"splits", m.splits},
          {"files",
           {{"clouds", m.clouds_file}, {"gt", m.gt_file}, {"proposals", m.proposals_file}}}};
}

inline Manifest manifest_from_json(const json& j) {
  try {
    Manifest m;
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kFormatVersion) {
      throw SchemaError("manifest: unsupported format_version " +
                        std::to_string(m.format_version));
    }
    m.classes = j.at("classes").get<std::vector<std::string>>();
    for (const auto& [cls, s] : j.at("anchors").items()) {
      m.anchors.set(cls, {s.at("w").get<double>(), s.at("l").get<double>(),
                          s.at("h").get<double>()});
    }
    m.splits = j.at("splits").get<std::map<std::string, std::vector<std::string>>>();
    const json& files = j.at("files");
    m.clouds_file = files.at("clouds").get<std::string>();
    m.gt_file = files.at("gt").get<std::string>();
    m.proposals_file = files.at("proposals").get<std::string>();
    return m;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("manifest: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw SchemaError(std::string("manifest: ") + e.what());
  }
}

struct BoxRecord {
  std::string frame;
  std::string cls;
  Box7 box;
  std::optional<double> score;
  bool empty_crop = false;
};

inline std::string box_record_line(const BoxRecord& r) {
  std::string out = "{\"frame\":" + json(r.frame).dump() + ",\"class\":" + json(r.cls).dump() +
                    ",\"box\":[";
  const double f[7] = {r.box.x, r.box.y, r.box.z, r.box.w, r.box.l, r.box.h, r.box.theta};
  for (int i = 0; i < 7; ++i) {
    if (i) out += ',';
    append_number(out, f[i]);
  }
  out += ']';
  if (r.score) {
    out += ",\"score\":";
    append_number(out, *r.score);
  }
  if (r.empty_crop) out += ",\"empty_crop\":true";
  out += "}\n";
  return out;
}

inline std::string cloud_record_line(const PointCloud& c) {
  std::string out = "{\"frame\":" + json(c.frame).dump() + ",\"points\":[";
  out.reserve(out.size() + c.points.size() * 40);
  bool first = true;
  for (const auto& p : c.points) {
    if (!first) out += ',';
    first = false;
    out += '[';
    append_number(out, p.x);
    out += ',';
    append_number(out, p.y);
    out += ',';
    append_number(out, p.z);
    out += ']';
  }
  out += "]}\n";
  return out;
}

namespace detail {

template <typename Fn>
void for_each_jsonl(const fs::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.filename().string() + ":" + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw SchemaError(where + ": " + e.what());
    }
    try {
      fn(j, where);
    } catch (const json::exception& e) {
      throw SchemaError(where + ": " + e.what());
    }
  }
}

inline double finite_field(const json& v, const std::string& where, const char* name) {
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw SchemaError(where + ": field '" + name + "' is not finite");
  return d;
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> allowed,
                           const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw SchemaError(where + ": unknown field '" + k + "'");
  }
}

}  // namespace detail

inline std::vector<PointCloud> read_clouds(const fs::path& path) {
  std::vector<PointCloud> out;
  detail::for_each_jsonl(path, [&](const json& j, const std::string& where) {
    detail::reject_unknown(j, {"frame", "points"}, where);
    PointCloud c;
    c.frame = j.at("frame").get<std::string>();
    const json& pts = j.at("points");
    c.points.reserve(pts.size());
    for (const auto& p : pts) {
      if (p.size() < 3) throw SchemaError(where + ": point with fewer than 3 coordinates");
      c.points.push_back({detail::finite_field(p[0], where, "x"),
                          detail::finite_field(p[1], where, "y"),
                          detail::finite_field(p[2], where, "z")});
    }
    out.push_back(std::move(c));
  });
  return out;
}

inline std::vector<BoxRecord> read_boxes(const fs::path& path) {
  std::vector<BoxRecord> out;
  detail::for_each_jsonl(path, [&](const json& j, const std::string& where) {
    detail::reject_unknown(j, {"frame", "class", "box", "score", "empty_crop"}, where);
    BoxRecord r;
    r.frame = j.at("frame").get<std::string>();
    r.cls = j.at("class").get<std::string>();
    const json& b = j.at("box");
    if (!b.is_array() || b.size() != 7) throw SchemaError(where + ": 'box' needs 7 numbers");
    static const char* names[7] = {"x", "y", "z", "w", "l", "h", "theta"};
    double f[7];
    for (int i = 0; i < 7; ++i) f[i] = detail::finite_field(b[static_cast<std::size_t>(i)], where, names[i]);
    if (f[3] <= 0.0 || f[4] <= 0.0 || f[5] <= 0.0) {
      throw SchemaError(where + ": box dimensions must be positive");
    }
    r.box = make_box(f[0], f[1], f[2], f[3], f[4], f[5], f[6]);
    if (j.contains("score")) {
      const double s = detail::finite_field(j.at("score"), where, "score");
      if (s < 0.0 || s > 1.0) throw SchemaError(where + ": score outside [0, 1]");
      r.score = s;
    }
    if (j.contains("empty_crop")) r.empty_crop = j.at("empty_crop").get<bool>();
    out.push_back(std::move(r));
  });
  return out;
}

inline void write_boxes(const fs::path& path, const std::vector<BoxRecord>& records) {
  std::string out;
  for (const auto& r : records) out += box_record_line(r);
  write_file_atomic(path, out);
}

/// A loaded dataset, indexed by frame id.
struct Dataset {
  fs::path root;
  Manifest manifest;
  std::map<std::string, PointCloud> clouds;
  std::map<std::string, std::vector<LabelledBox>> gts;
  std::map<std::string, std::vector<Proposal>> proposals;

  std::vector<std::string> split(const std::string& name) const {
    auto it = manifest.splits.find(name);
    if (it == manifest.splits.end()) throw SchemaError("dataset has no split '" + name + "'");
    return it->second;
  }
};

inline std::map<std::string, std::vector<Proposal>> group_proposals(
    const std::vector<BoxRecord>& records) {
  std::map<std::string, std::vector<Proposal>> out;
  for (const auto& r : records) out[r.frame].push_back({r.box, r.cls, r.score.value_or(0.0)});
  return out;
}

inline Dataset load_dataset(const fs::path& root, bool with_proposals = true) {
  Dataset ds;
  ds.root = root;
  json mj;
  try {
    mj = json::parse(read_file(root / "manifest.json"));
  } catch (const json::exception& e) {
    throw SchemaError(std::string("manifest.json: ") + e.what());
  }
  ds.manifest = manifest_from_json(mj);
  for (auto& c : read_clouds(root / ds.manifest.clouds_file)) {
    std::string frame = c.frame;
    if (!ds.clouds.emplace(frame, std::move(c)).second) {
      throw SchemaError("clouds: duplicate frame " + frame);
    }
  }
  auto check_frame = [&](const BoxRecord& r, const char* file) {
    if (!ds.clouds.count(r.frame)) {
      throw SchemaError(std::string(file) + ": frame '" + r.frame + "' has no cloud record");
    }
  };
  for (const auto& r : read_boxes(root / ds.manifest.gt_file)) {
    check_frame(r, "gt");
    ds.gts[r.frame].push_back({r.box, r.cls});
  }
  if (with_proposals && fs::exists(root / ds.manifest.proposals_file)) {
    const auto recs = read_boxes(root / ds.manifest.proposals_file);
    for (const auto& r : recs) check_frame(r, "proposals");
    ds.proposals = group_proposals(recs);
  }
  for (const auto& [split, frames] : ds.manifest.splits) {
    for (const auto& f : frames) {
      if (!ds.clouds.count(f)) {
        throw SchemaError("manifest split '" + split + "' names unknown frame " + f);
      }
    }
  }
  return ds;
}

}  // namespace lidar_rcnn
