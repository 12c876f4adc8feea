#pragma once

// Oriented 3D boxes in a camera-style frame: x right, y down (gravity), z forward.
// Yaw rotates about y; a box's length axis points along (cos yaw, 0, -sin yaw).
// The bird's-eye plane is (x, z).

#include <algorithm>
#include <array>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "fconv/common.hpp"

namespace fconv {

struct OrientedBox3D {
  Vec3 center;
  double l = 1.0, w = 1.0, h = 1.0;
  double yaw = 0.0;

  OrientedBox3D() = default;
  OrientedBox3D(Vec3 c, double length, double width, double height, double heading)
      : center(c), l(length), w(width), h(height), yaw(wrap_angle(heading)) {}

  double volume() const { return l * w * h; }
  Mat3 rotation() const { return rot_y(yaw); }
};

inline OrientedBox3D translated(const OrientedBox3D& b, Vec3 t) {
  OrientedBox3D o = b;
  o.center = b.center + t;
  return o;
}

/// Same center and yaw, sizes multiplied by `factor`.
inline OrientedBox3D scaled(const OrientedBox3D& b, double factor) {
  return OrientedBox3D(b.center, b.l * factor, b.w * factor, b.h * factor, b.yaw);
}

/// Box expressed in a frame reached by `rot_y(frame_yaw)` about the origin, then `offset`.
/// Only yaw-type frame rotations keep boxes gravity aligned; tilted frames carry the box
/// yaw through their yaw component.
inline OrientedBox3D transform_box(const OrientedBox3D& b, const Mat3& rotation, double frame_yaw,
                                   Vec3 offset = {}) {
  return OrientedBox3D(rotation * b.center + offset, b.l, b.w, b.h, b.yaw + frame_yaw);
}

inline bool point_in_box(Vec3 p, const OrientedBox3D& b, double scale = 1.0) {
  const Vec3 local = b.rotation().transposed() * (p - b.center);
  return std::abs(local.x) <= 0.5 * b.l * scale && std::abs(local.y) <= 0.5 * b.h * scale &&
         std::abs(local.z) <= 0.5 * b.w * scale;
}

struct BoxOffsets {
  std::array<double, 7> v{};  // dx, dy, dz, dl, dw, dh, dtheta

  double& operator[](std::size_t i) { return v[i]; }
  double operator[](std::size_t i) const { return v[i]; }
};

inline BoxOffsets encode(const OrientedBox3D& gt, const OrientedBox3D& anchor) {
  return {{gt.center.x - anchor.center.x, gt.center.y - anchor.center.y, gt.center.z - anchor.center.z,
           (gt.l - anchor.l) / anchor.l, (gt.w - anchor.w) / anchor.w, (gt.h - anchor.h) / anchor.h,
           wrap_angle(gt.yaw - anchor.yaw)}};
}

inline constexpr double kMinDecodedSize = 1e-3;

struct DecodedBox {
  OrientedBox3D box;
  bool clamped = false;
};

inline DecodedBox decode(const BoxOffsets& d, const OrientedBox3D& anchor) {
  DecodedBox out;
  auto size = [&](double a, double delta) {
    const double s = a + delta * a;
    if (s <= 0.0 || !std::isfinite(s)) {
      out.clamped = true;
      return kMinDecodedSize;
    }
    return s;
  };
  const double l = size(anchor.l, d[3]);
  const double w = size(anchor.w, d[4]);
  const double h = size(anchor.h, d[5]);
  out.box = OrientedBox3D({anchor.center.x + d[0], anchor.center.y + d[1], anchor.center.z + d[2]}, l, w,
                          h, anchor.yaw + d[6]);
  return out;
}

/// Local corner signs (length, height, width) in canonical order: top face (y = -h/2)
/// starting at (+l/2, +w/2) and walking (+,+) (-,+) (-,-) (+,-), then the bottom face
/// in the same order.
inline constexpr std::array<std::array<double, 3>, 8> kCornerSigns{{{+1, -1, +1},
                                                                   {-1, -1, +1},
                                                                   {-1, -1, -1},
                                                                   {+1, -1, -1},
                                                                   {+1, +1, +1},
                                                                   {-1, +1, +1},
                                                                   {-1, +1, -1},
                                                                   {+1, +1, -1}}};

inline std::array<Vec3, 8> corners(const OrientedBox3D& b) {
  const Mat3 r = b.rotation();
  std::array<Vec3, 8> out;
  for (std::size_t i = 0; i < 8; ++i) {
    const auto& s = kCornerSigns[i];
    out[i] = b.center + r * Vec3{0.5 * b.l * s[0], 0.5 * b.h * s[1], 0.5 * b.w * s[2]};
  }
  return out;
}

/// Recovers (center, sizes, yaw) from canonically ordered corners.
inline OrientedBox3D box_from_corners(const std::array<Vec3, 8>& c) {
  Vec3 center;
  for (const auto& p : c) center = center + p;
  center = (1.0 / 8.0) * center;
  const Vec3 len = c[0] - c[1];
  const Vec3 wid = c[0] - c[3];
  const Vec3 hgt = c[4] - c[0];
  return OrientedBox3D(center, norm(len), norm(wid), norm(hgt), std::atan2(-len.z, len.x));
}

// ---------------------------------------------------------------------------
// Bird's-eye polygon clipping.

struct Point2 {
  double x = 0.0, y = 0.0;
};

inline double cross(Point2 o, Point2 a, Point2 b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

inline double polygon_area(std::span<const Point2> poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Point2 p = poly[i], q = poly[(i + 1) % poly.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * a;
}

/// Footprint of the box in the (x, z) plane, counterclockwise (positive signed area).
inline std::array<Point2, 4> bev_polygon(const OrientedBox3D& b) {
  const auto c = corners(b);
  std::array<Point2, 4> poly{{{c[0].x, c[0].z}, {c[1].x, c[1].z}, {c[2].x, c[2].z}, {c[3].x, c[3].z}}};
  if (polygon_area(poly) < 0.0) std::reverse(poly.begin(), poly.end());
  return poly;
}

/// Sutherland-Hodgman clipping of `subject` by the convex counterclockwise `clip`.
inline std::vector<Point2> clip_polygon(std::span<const Point2> subject, std::span<const Point2> clip) {
  std::vector<Point2> out(subject.begin(), subject.end());
  for (std::size_t e = 0; e < clip.size() && !out.empty(); ++e) {
    const Point2 a = clip[e], b = clip[(e + 1) % clip.size()];
    std::vector<Point2> in;
    in.swap(out);
    for (std::size_t i = 0; i < in.size(); ++i) {
      const Point2 p = in[i], q = in[(i + 1) % in.size()];
      const double cp = cross(a, b, p), cq = cross(a, b, q);
      const bool p_in = cp >= 0.0, q_in = cq >= 0.0;
      if (p_in) out.push_back(p);
      if (p_in != q_in) {
        const double t = cp / (cp - cq);
        out.push_back({p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)});
      }
    }
  }
  return out;
}

inline constexpr double kDegenerateArea = 1e-12;

/// Computed relative to a's center so a common translation of both boxes changes nothing.
inline double bev_intersection_area(const OrientedBox3D& a, const OrientedBox3D& b) {
  const auto pa = bev_polygon(translated(a, Vec3{} - a.center));
  const auto pb = bev_polygon(translated(b, Vec3{} - a.center));
  const auto inter = clip_polygon(pa, pb);
  if (inter.size() < 3) return 0.0;
  return std::max(0.0, polygon_area(inter));
}

inline double iou_bev(const OrientedBox3D& a, const OrientedBox3D& b) {
  const double area_a = a.l * a.w, area_b = b.l * b.w;
  if (area_a < kDegenerateArea || area_b < kDegenerateArea) return 0.0;
  const double inter = bev_intersection_area(a, b);
  const double uni = area_a + area_b - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

inline double vertical_overlap(const OrientedBox3D& a, const OrientedBox3D& b) {
  const double dy = b.center.y - a.center.y;
  const double top = std::max(-0.5 * a.h, dy - 0.5 * b.h);
  const double bottom = std::min(0.5 * a.h, dy + 0.5 * b.h);
  return std::max(0.0, bottom - top);
}

inline double iou_3d(const OrientedBox3D& a, const OrientedBox3D& b) {
  const double va = a.volume(), vb = b.volume();
  if (va < kDegenerateArea || vb < kDegenerateArea) return 0.0;
  const double dy = vertical_overlap(a, b);
  if (dy <= 0.0) return 0.0;
  const double inter = bev_intersection_area(a, b) * dy;
  const double uni = va + vb - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

struct ScoredBox {
  OrientedBox3D box;
  double score = 0.0;
};

/// Greedy rotated NMS over 3D IoU. Returns kept indices in descending-score order;
/// equal scores keep input order.
inline std::vector<std::size_t> nms_rotated(std::span<const ScoredBox> dets, double iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<std::size_t> kept;
  std::vector<bool> suppressed(dets.size(), false);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t cur = order[i];
    if (suppressed[cur]) continue;
    kept.push_back(cur);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const std::size_t other = order[j];
      if (!suppressed[other] && iou_3d(dets[cur].box, dets[other].box) > iou_threshold) suppressed[other] = true;
    }
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Anchors.

struct MeanSize {
  double l = 1.0, w = 1.0, h = 1.0;
};

inline double yaw_bin_center(std::size_t bin, std::size_t num_bins) {
  return -kPi + (static_cast<double>(bin) + 0.5) * 2.0 * kPi / static_cast<double>(num_bins);
}

/// Index of the bin whose center is closest (after wrapping) to `yaw`.
inline std::size_t nearest_yaw_bin(double yaw, std::size_t num_bins) {
  std::size_t best = 0;
  double best_d = 1e300;
  for (std::size_t i = 0; i < num_bins; ++i) {
    const double d = std::abs(wrap_angle(yaw - yaw_bin_center(i, num_bins)));
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

/// Anchors at every output position, laid out position-major, then category, then yaw bin.
class AnchorSet {
 public:
  AnchorSet() = default;
  AnchorSet(std::vector<Vec3> centers, std::vector<MeanSize> sizes, std::size_t num_bins)
      : centers_(std::move(centers)), sizes_(std::move(sizes)), num_bins_(num_bins) {
    if (num_bins_ == 0) throw ConfigError("anchor yaw bin count must be >= 1");
    for (const auto& s : sizes_)
      if (!(s.l > 0 && s.w > 0 && s.h > 0)) throw ConfigError("anchor mean sizes must be positive");
  }

  std::size_t positions() const { return centers_.size(); }
  std::size_t categories() const { return sizes_.size(); }
  std::size_t bins() const { return num_bins_; }
  std::size_t size() const { return positions() * categories() * bins(); }

  Vec3 center(std::size_t pos) const { return centers_[pos]; }
  const std::vector<Vec3>& centers() const { return centers_; }
  const std::vector<MeanSize>& mean_sizes() const { return sizes_; }

  OrientedBox3D anchor(std::size_t pos, std::size_t category, std::size_t bin) const {
    const MeanSize& s = sizes_[category];
    return OrientedBox3D(centers_[pos], s.l, s.w, s.h, yaw_bin_center(bin, num_bins_));
  }
  std::size_t flat_index(std::size_t pos, std::size_t category, std::size_t bin) const {
    return (pos * categories() + category) * bins() + bin;
  }

 private:
  std::vector<Vec3> centers_;
  std::vector<MeanSize> sizes_;
  std::size_t num_bins_ = 1;
};

}  // namespace fconv
