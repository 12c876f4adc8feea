#pragma once

// Frustum frames and sliding-frustum point grouping.

#include <cmath>
#include <cstdint>
#include <vector>

#include "fconv/boxes.hpp"
#include "fconv/common.hpp"
#include "fconv/kitti_io.hpp"

namespace fconv {

inline Mat3 inverse(const Mat3& a) {
  Mat3 inv;
  inv(0, 0) = a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1);
  inv(0, 1) = a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2);
  inv(0, 2) = a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1);
  inv(1, 0) = a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2);
  inv(1, 1) = a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0);
  inv(1, 2) = a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2);
  inv(2, 0) = a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0);
  inv(2, 1) = a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1);
  inv(2, 2) = a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0);
  const double det = a(0, 0) * inv(0, 0) + a(0, 1) * inv(1, 0) + a(0, 2) * inv(2, 0);
  if (std::abs(det) < 1e-300) throw ConfigError("singular 3x3 matrix");
  for (double& v : inv.m) v /= det;
  return inv;
}

/// Rigid frame in which the detector works: x = rotation * (p - origin).
/// For proposal frustums the rotation is rot_x(pitch) * rot_y(yaw) and the frustum axis is +z.
/// Boxes carry only the yaw part of the rotation; the small pitch tilt is not represented
/// in box orientation.
struct FrustumFrame {
  Mat3 rotation;
  Vec3 axis_origin;
  double yaw = 0.0;
  double pitch = 0.0;

  Vec3 to_frame(Vec3 p) const { return rotation * (p - axis_origin); }
  Vec3 from_frame(Vec3 q) const { return rotation.transposed() * q + axis_origin; }

  OrientedBox3D box_to_frame(const OrientedBox3D& b) const {
    return OrientedBox3D(to_frame(b.center), b.l, b.w, b.h, b.yaw + yaw);
  }
  OrientedBox3D box_from_frame(const OrientedBox3D& b) const {
    return OrientedBox3D(from_frame(b.center), b.l, b.w, b.h, b.yaw - yaw);
  }

  static FrustumFrame from_angles(double yaw, double pitch, Vec3 origin = {}) {
    return {rot_x(pitch) * rot_y(yaw), origin, yaw, pitch};
  }
};

/// Unit ray (camera_rect) through a pixel.
inline Vec3 pixel_ray(const CameraCalib& calib, double u, double v) {
  const Mat3 m = calib.projection.rotation();
  return normalized(inverse(m) * Vec3{u, v, 1.0});
}

/// Yaw about y, then pitch about x, taking the proposal's center ray onto +z.
inline FrustumFrame frustum_frame(const RegionProposal2D& proposal, const CameraCalib& calib) {
  const Vec3 r = pixel_ray(calib, proposal.center_u(), proposal.center_v());
  const double yaw = std::atan2(-r.x, r.z);
  const double pitch = std::atan2(r.y, std::hypot(r.x, r.z));
  return FrustumFrame::from_angles(yaw, pitch);
}

struct SlabResolution {
  double stride = 0.25;  // s
  double height = 0.5;   // u
};

struct DepthRange {
  double min = 0.0;
  double max = 70.0;
};

inline std::size_t slab_count(const SlabResolution& res, const DepthRange& range) {
  return static_cast<std::size_t>(std::ceil((range.max - range.min) / res.stride - 1e-9));
}

struct FrustumSequence {
  FrustumFrame frame;
  SlabResolution res;
  DepthRange range;
  std::size_t length = 0;                          // L
  std::vector<Vec3> points;                        // frustum-frame coordinates
  std::vector<std::vector<std::uint32_t>> groups;  // per-slab indices into `points`
  std::vector<Vec3> centroids;                     // per-slab axis midpoints

  double slab_start(std::size_t t) const { return range.min + static_cast<double>(t) * res.stride; }
};

inline bool in_slab(double z, double start, double height) { return z >= start && z < start + height; }

inline void validate(const SlabResolution& res, const DepthRange& range) {
  if (!(res.stride > 0.0) || !(res.height > 0.0)) throw ConfigError("slab stride and height must be positive");
  if (res.height < res.stride) throw ConfigError("slab height must be >= stride");
  if (!(range.max > range.min)) throw ConfigError("depth_max must exceed depth_min");
}

/// Groups frustum-frame points into slabs [min + t*s, min + t*s + u), restricted to [min, max).
inline FrustumSequence build_sequence_in_frame(std::vector<Vec3> frame_points, const FrustumFrame& frame,
                                               const SlabResolution& res, const DepthRange& range) {
  validate(res, range);
  FrustumSequence seq;
  seq.frame = frame;
  seq.res = res;
  seq.range = range;
  seq.length = slab_count(res, range);
  seq.points = std::move(frame_points);
  seq.groups.assign(seq.length, {});
  seq.centroids.reserve(seq.length);
  for (std::size_t t = 0; t < seq.length; ++t) seq.centroids.push_back({0.0, 0.0, seq.slab_start(t) + 0.5 * res.height});

  const auto last = static_cast<long>(seq.length) - 1;
  for (std::size_t i = 0; i < seq.points.size(); ++i) {
    const double z = seq.points[i].z;
    if (!(z >= range.min && z < range.max)) continue;
    const long hi = std::min(last, static_cast<long>(std::floor((z - range.min) / res.stride)) + 1);
    const long lo = std::max(0L, static_cast<long>(std::floor((z - range.min - res.height) / res.stride)) - 1);
    for (long t = lo; t <= hi; ++t)
      if (in_slab(z, seq.slab_start(static_cast<std::size_t>(t)), res.height))
        seq.groups[static_cast<std::size_t>(t)].push_back(static_cast<std::uint32_t>(i));
  }
  return seq;
}

inline FrustumSequence build_sequence(std::span<const Vec3> rect_points, const FrustumFrame& frame,
                                      const SlabResolution& res, const DepthRange& range) {
  std::vector<Vec3> local;
  local.reserve(rect_points.size());
  for (const Vec3& p : rect_points) local.push_back(frame.to_frame(p));
  return build_sequence_in_frame(std::move(local), frame, res, range);
}

inline void validate_resolution_ladder(std::span<const SlabResolution> resolutions, const DepthRange& range) {
  if (resolutions.empty()) throw ConfigError("at least one frustum resolution is required");
  const std::size_t base = slab_count(resolutions[0], range);
  for (std::size_t r = 1; r < resolutions.size(); ++r) {
    const auto& prev = resolutions[r - 1];
    const auto& cur = resolutions[r];
    if (std::abs(cur.stride - 2.0 * prev.stride) > 1e-9 * prev.stride ||
        std::abs(cur.height - 2.0 * prev.height) > 1e-9 * prev.height)
      throw ConfigError("frustum resolutions must each double the previous (level " + std::to_string(r) + ")");
    if (slab_count(cur, range) * (std::size_t{1} << r) != base)
      throw ConfigError("depth range is not divisible into L/2^r slabs at level " + std::to_string(r));
  }
}

inline std::vector<FrustumSequence> multi_resolution_sequences_in_frame(const std::vector<Vec3>& frame_points,
                                                                        const FrustumFrame& frame,
                                                                        std::span<const SlabResolution> resolutions,
                                                                        const DepthRange& range) {
  validate_resolution_ladder(resolutions, range);
  std::vector<FrustumSequence> out;
  out.reserve(resolutions.size());
  for (const auto& res : resolutions) out.push_back(build_sequence_in_frame(frame_points, frame, res, range));
  return out;
}

inline std::vector<FrustumSequence> multi_resolution_sequences(std::span<const Vec3> rect_points,
                                                               const FrustumFrame& frame,
                                                               std::span<const SlabResolution> resolutions,
                                                               const DepthRange& range) {
  std::vector<Vec3> local;
  local.reserve(rect_points.size());
  for (const Vec3& p : rect_points) local.push_back(frame.to_frame(p));
  return multi_resolution_sequences_in_frame(local, frame, resolutions, range);
}

/// Axis midpoints of the `output_length` positions at which the header predicts. The output
/// grid has stride and height scaled by length/output_length relative to the base resolution.
inline std::vector<Vec3> output_centroids(const SlabResolution& base, const DepthRange& range, std::size_t length,
                                          std::size_t output_length) {
  const double ratio = static_cast<double>(length) / static_cast<double>(output_length);
  std::vector<Vec3> out;
  out.reserve(output_length);
  for (std::size_t j = 0; j < output_length; ++j)
    out.push_back({0.0, 0.0, range.min + static_cast<double>(j) * base.stride * ratio + 0.5 * base.height * ratio});
  return out;
}

inline AnchorSet build_anchors(const FrustumSequence& output_seq, std::vector<MeanSize> mean_sizes,
                               std::size_t num_bins) {
  return AnchorSet(output_seq.centroids, std::move(mean_sizes), num_bins);
}

inline AnchorSet build_anchors(std::vector<Vec3> centers, std::vector<MeanSize> mean_sizes, std::size_t num_bins) {
  return AnchorSet(std::move(centers), std::move(mean_sizes), num_bins);
}

}  // namespace fconv
