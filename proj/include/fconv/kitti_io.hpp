#pragma once

// Scene data types and KITTI-format readers/writers.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fconv/boxes.hpp"
#include "fconv/common.hpp"

namespace fconv {

enum class CloudFrame { sensor, camera_rect };

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<float> intensities;  // empty or one per point
  CloudFrame frame = CloudFrame::sensor;

  std::size_t size() const { return points.size(); }
};

struct CameraCalib {
  Mat34 projection;        // rectified camera projection (P2)
  Mat3 rect_rotation;      // R0_rect
  Mat34 sensor_to_camera;  // Tr_velo_to_cam

  void validate() const {
    if (orthonormality_error(rect_rotation) > 1e-6) throw MalformedFileError("calib: R0_rect is not orthonormal");
    if (orthonormality_error(sensor_to_camera.rotation()) > 1e-6)
      throw MalformedFileError("calib: Tr_velo_to_cam rotation is not orthonormal");
  }
};

struct RegionProposal2D {
  double u_min = 0, v_min = 0, u_max = 0, v_max = 0;
  int category = 0;
  double score_2d = 1.0;

  double center_u() const { return 0.5 * (u_min + u_max); }
  double center_v() const { return 0.5 * (v_min + v_max); }
  double width() const { return u_max - u_min; }
  double height() const { return v_max - v_min; }
  bool valid() const { return u_min < u_max && v_min < v_max && std::isfinite(score_2d); }
};

enum class Difficulty { easy = 0, moderate = 1, hard = 2, ignore = 3 };

inline const char* to_string(Difficulty d) {
  switch (d) {
    case Difficulty::easy: return "easy";
    case Difficulty::moderate: return "moderate";
    case Difficulty::hard: return "hard";
    case Difficulty::ignore: return "ignore";
  }
  return "ignore";
}

/// Categories known to the detector; anything else parses as category -1 with difficulty ignore.
inline const std::vector<std::string>& category_names() {
  static const std::vector<std::string> names{"Car", "Pedestrian", "Cyclist"};
  return names;
}

inline int category_id(const std::string& name) {
  const auto& n = category_names();
  const auto it = std::find(n.begin(), n.end(), name);
  return it == n.end() ? -1 : static_cast<int>(it - n.begin());
}

inline std::string category_name(int id) {
  const auto& n = category_names();
  if (id < 0 || id >= static_cast<int>(n.size())) return "DontCare";
  return n[static_cast<std::size_t>(id)];
}

struct Label {
  std::string type;
  int category = -1;
  Difficulty difficulty = Difficulty::ignore;
  double truncation = 0.0;
  int occlusion = 0;
  double alpha = 0.0;
  std::array<double, 4> image_box{};  // left, top, right, bottom
  OrientedBox3D box;                  // volumetric center, camera_rect frame
};

struct SceneSample {
  std::string frame_id;
  PointCloud cloud;
  CameraCalib calib;
  std::vector<RegionProposal2D> proposals;
  std::optional<std::vector<Label>> labels;
};

inline Difficulty kitti_difficulty(double box_height_px, int occlusion, double truncation) {
  if (box_height_px >= 40.0 && occlusion <= 0 && truncation <= 0.15) return Difficulty::easy;
  if (box_height_px >= 25.0 && occlusion <= 1 && truncation <= 0.30) return Difficulty::moderate;
  if (box_height_px >= 25.0 && occlusion <= 2 && truncation <= 0.50) return Difficulty::hard;
  return Difficulty::ignore;
}

namespace detail {

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out << text;
}

inline std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream ss(line);
  std::vector<std::string> out;
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

inline double parse_double(const std::string& tok, const std::string& ctx) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw MalformedFileError(ctx + ": not a number: '" + tok + "'");
  }
}

/// Shortest text that reads back to the same double.
inline std::string format_exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  std::string s = buf;
  if (s == "-0" || s.find_first_not_of("-0.") == std::string::npos) {
    // Normalize negative zero so output bytes do not depend on the sign of rounding noise.
    if (!s.empty() && s[0] == '-') s.erase(0, 1);
  }
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Point clouds: flat little-endian float32 records (x, y, z, reflectance).

inline PointCloud decode_kitti_cloud(std::span<const unsigned char> bytes) {
  if (bytes.size() % 16 != 0)
    throw MalformedFileError("point file size " + std::to_string(bytes.size()) + " is not a multiple of 16");
  PointCloud cloud;
  const std::size_t n = bytes.size() / 16;
  cloud.points.reserve(n);
  cloud.intensities.reserve(n);
  auto read_f32 = [&](std::size_t off) {
    std::uint32_t u = 0;
    for (int b = 3; b >= 0; --b) u = (u << 8) | bytes[off + static_cast<std::size_t>(b)];
    return std::bit_cast<float>(u);
  };
  for (std::size_t i = 0; i < n; ++i) {
    const float x = read_f32(16 * i), y = read_f32(16 * i + 4), z = read_f32(16 * i + 8), r = read_f32(16 * i + 12);
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z))
      throw MalformedFileError("non-finite coordinate in point record " + std::to_string(i));
    cloud.points.push_back({x, y, z});
    cloud.intensities.push_back(r);
  }
  cloud.frame = CloudFrame::sensor;
  return cloud;
}

inline PointCloud load_kitti_cloud(const std::filesystem::path& path) {
  const std::string raw = detail::read_text(path);
  return decode_kitti_cloud(
      std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(raw.data()), raw.size()));
}

inline std::string encode_kitti_cloud(const PointCloud& cloud) {
  std::string out;
  out.reserve(cloud.size() * 16);
  auto put = [&](float f) {
    const auto u = std::bit_cast<std::uint32_t>(f);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xffu));
  };
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 p = cloud.points[i];
    put(static_cast<float>(p.x));
    put(static_cast<float>(p.y));
    put(static_cast<float>(p.z));
    put(cloud.intensities.empty() ? 0.0f : cloud.intensities[i]);
  }
  return out;
}

inline void save_kitti_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  detail::write_text(path, encode_kitti_cloud(cloud));
}

// ---------------------------------------------------------------------------
// Calibration: "KEY: v0 v1 ..." lines.

inline CameraCalib parse_kitti_calib(const std::string& text) {
  std::map<std::string, std::vector<double>> entries;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    const std::string key = line.substr(0, colon);
    std::vector<double> vals;
    for (const auto& tok : detail::split_ws(line.substr(colon + 1))) vals.push_back(detail::parse_double(tok, key));
    entries[key] = std::move(vals);
  }
  auto need = [&](const std::string& key, std::size_t count) -> const std::vector<double>& {
    const auto it = entries.find(key);
    if (it == entries.end()) throw MalformedFileError("calib: missing " + key);
    if (it->second.size() != count)
      throw MalformedFileError("calib: " + key + " has " + std::to_string(it->second.size()) + " values, expected " +
                               std::to_string(count));
    return it->second;
  };
  CameraCalib c;
  const auto& p2 = need("P2", 12);
  std::copy(p2.begin(), p2.end(), c.projection.m.begin());
  const auto& r0 = need("R0_rect", 9);
  std::copy(r0.begin(), r0.end(), c.rect_rotation.m.begin());
  const auto& tr = need("Tr_velo_to_cam", 12);
  std::copy(tr.begin(), tr.end(), c.sensor_to_camera.m.begin());
  c.validate();
  return c;
}

inline CameraCalib load_kitti_calib(const std::filesystem::path& path) {
  return parse_kitti_calib(detail::read_text(path));
}

inline std::string serialize_kitti_calib(const CameraCalib& c) {
  auto row = [](const std::string& key, std::span<const double> v) {
    std::string s = key + ":";
    for (double x : v) s += " " + detail::format_exact(x);
    return s + "\n";
  };
  std::string out;
  for (const char* k : {"P0", "P1", "P2", "P3"}) out += row(k, c.projection.m);
  out += row("R0_rect", c.rect_rotation.m);
  out += row("Tr_velo_to_cam", c.sensor_to_camera.m);
  return out;
}

// ---------------------------------------------------------------------------
// Labels: type trunc occ alpha left top right bottom h w l x y z ry [score].

inline Label parse_kitti_label_line(const std::string& line) {
  const auto t = detail::split_ws(line);
  if (t.size() < 15) throw MalformedFileError("label line has " + std::to_string(t.size()) + " fields: '" + line + "'");
  auto num = [&](std::size_t i) { return detail::parse_double(t[i], "label"); };
  Label l;
  l.type = t[0];
  l.category = category_id(l.type);
  l.truncation = num(1);
  l.occlusion = static_cast<int>(num(2));
  l.alpha = num(3);
  l.image_box = {num(4), num(5), num(6), num(7)};
  const double h = num(8), w = num(9), len = num(10);
  const double x = num(11), y = num(12), z = num(13), ry = num(14);
  // KITTI stores the bottom-face center; y points down, so the volumetric center is h/2 above.
  l.box = OrientedBox3D({x, y - 0.5 * h, z}, std::max(len, kMinDecodedSize), std::max(w, kMinDecodedSize),
                        std::max(h, kMinDecodedSize), ry);
  l.difficulty = l.category < 0 ? Difficulty::ignore
                                : kitti_difficulty(l.image_box[3] - l.image_box[1], l.occlusion, l.truncation);
  return l;
}

inline std::vector<Label> parse_kitti_labels(const std::string& text) {
  std::vector<Label> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_kitti_label_line(line));
  }
  return out;
}

inline std::vector<Label> load_kitti_labels(const std::filesystem::path& path) {
  return parse_kitti_labels(detail::read_text(path));
}

inline std::string serialize_kitti_label(const Label& l) {
  const auto& b = l.box;
  std::ostringstream s;
  auto f = [](double v) { return detail::format_exact(v); };
  s << l.type << ' ' << f(l.truncation) << ' ' << l.occlusion << ' ' << f(l.alpha);
  for (double v : l.image_box) s << ' ' << f(v);
  s << ' ' << f(b.h) << ' ' << f(b.w) << ' ' << f(b.l) << ' ' << f(b.center.x) << ' ' << f(b.center.y + 0.5 * b.h)
    << ' ' << f(b.center.z) << ' ' << f(b.yaw) << '\n';
  return s.str();
}

inline std::string serialize_kitti_labels(std::span<const Label> labels) {
  std::string out;
  for (const auto& l : labels) out += serialize_kitti_label(l);
  return out;
}

// ---------------------------------------------------------------------------
// Proposals: "frame_id category u_min v_min u_max v_max score" per line.

struct FrameProposal {
  std::string frame_id;
  RegionProposal2D proposal;
};

inline std::vector<FrameProposal> parse_proposals(const std::string& text) {
  std::vector<FrameProposal> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = detail::split_ws(line);
    if (t.empty() || t[0][0] == '#') continue;
    const std::string ctx = "proposals line " + std::to_string(lineno);
    if (t.size() != 7) throw MalformedFileError(ctx + ": expected 7 fields");
    FrameProposal fp;
    fp.frame_id = t[0];
    fp.proposal.category = category_id(t[1]);
    if (fp.proposal.category < 0) throw MalformedFileError(ctx + ": unknown category '" + t[1] + "'");
    fp.proposal.u_min = detail::parse_double(t[2], ctx);
    fp.proposal.v_min = detail::parse_double(t[3], ctx);
    fp.proposal.u_max = detail::parse_double(t[4], ctx);
    fp.proposal.v_max = detail::parse_double(t[5], ctx);
    fp.proposal.score_2d = detail::parse_double(t[6], ctx);
    if (!fp.proposal.valid()) throw MalformedFileError(ctx + ": degenerate box or score");
    out.push_back(fp);
  }
  return out;
}

inline std::vector<FrameProposal> load_proposals(const std::filesystem::path& path) {
  return parse_proposals(detail::read_text(path));
}

inline std::string serialize_proposals(std::span<const FrameProposal> props) {
  std::string out;
  for (const auto& fp : props) {
    const auto& p = fp.proposal;
    out += fp.frame_id + " " + category_name(p.category) + " " + detail::format_fixed(p.u_min, 3) + " " +
           detail::format_fixed(p.v_min, 3) + " " + detail::format_fixed(p.u_max, 3) + " " +
           detail::format_fixed(p.v_max, 3) + " " + detail::format_fixed(p.score_2d, 4) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frames and projection.

inline PointCloud sensor_to_rect(const PointCloud& cloud, const CameraCalib& calib) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const Vec3& p : cloud.points) out.points.push_back(calib.rect_rotation * calib.sensor_to_camera.apply(p));
  out.intensities = cloud.intensities;
  out.frame = CloudFrame::camera_rect;
  return out;
}

/// Pixel coordinates of a rectified-camera point, or nullopt when it is not in front of the camera.
inline std::optional<std::pair<double, double>> project(const CameraCalib& calib, Vec3 p) {
  if (!(p.z > 0.0)) return std::nullopt;
  const Vec3 q = calib.projection.apply(p);
  if (!(q.z > 0.0)) return std::nullopt;
  return std::pair{q.x / q.z, q.y / q.z};
}

inline std::vector<std::size_t> points_in_proposal(const PointCloud& cloud, const CameraCalib& calib,
                                                   const RegionProposal2D& proposal) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto uv = project(calib, cloud.points[i]);
    if (!uv) continue;
    const auto [u, v] = *uv;
    if (u >= proposal.u_min && u <= proposal.u_max && v >= proposal.v_min && v <= proposal.v_max) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory layout: velodyne/<id>.bin, calib/<id>.txt, label_2/<id>.txt, proposals.txt.

struct DatasetPaths {
  std::filesystem::path root;

  std::filesystem::path cloud(const std::string& id) const { return root / "velodyne" / (id + ".bin"); }
  std::filesystem::path calib(const std::string& id) const { return root / "calib" / (id + ".txt"); }
  std::filesystem::path label(const std::string& id) const { return root / "label_2" / (id + ".txt"); }
  std::filesystem::path proposals() const { return root / "proposals.txt"; }
};

/// Frame ids present in the dataset, sorted.
inline std::vector<std::string> list_frames(const DatasetPaths& ds) {
  const auto dir = ds.root / "calib";
  if (!std::filesystem::is_directory(dir)) throw MissingFileError("no calib directory under " + ds.root.string());
  std::vector<std::string> ids;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".txt") ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline SceneSample load_scene(const DatasetPaths& ds, const std::string& id,
                              std::span<const FrameProposal> all_proposals, bool with_labels) {
  SceneSample s;
  s.frame_id = id;
  s.cloud = load_kitti_cloud(ds.cloud(id));
  s.calib = load_kitti_calib(ds.calib(id));
  for (const auto& fp : all_proposals)
    if (fp.frame_id == id) s.proposals.push_back(fp.proposal);
  if (with_labels && std::filesystem::exists(ds.label(id))) s.labels = load_kitti_labels(ds.label(id));
  return s;
}

}  // namespace fconv
