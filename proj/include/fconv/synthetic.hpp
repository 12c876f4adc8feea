#pragma once

// Desk-scale synthetic scenes: gravity-aligned boxes on a ground plane, surface points on
// the camera-facing faces, uniform clutter, and exact 2D proposals from projected corners.

#include <map>
#include <string>
#include <vector>

#include "fconv/boxes.hpp"
#include "fconv/kitti_io.hpp"
#include "fconv/random.hpp"

namespace fconv {

struct CategoryTemplate {
  std::string name;
  MeanSize size;
};

struct SyntheticConfig {
  std::vector<CategoryTemplate> templates{{"Car", {3.9, 1.6, 1.56}}};
  std::size_t boxes_per_scene = 3;
  double depth_min = 6.0, depth_max = 28.0;
  double size_jitter = 0.05;  // relative, uniform
  std::size_t points_per_box = 400;
  std::size_t clutter_points = 300;
  double noise_sigma = 0.02;
  double camera_height = 1.65;  // ground plane at y = camera_height
  double fx = 721.5377, fy = 721.5377, cx = 609.5593, cy = 172.854;
  double image_width = 1242.0, image_height = 375.0;
  double score_2d_min = 0.8, score_2d_max = 1.0;
  std::size_t max_retries = 200;
};

/// Calibration used by generated scenes: pinhole P2 with no baseline, identity R0_rect, and a
/// sensor frame with x forward, y left, z up.
inline CameraCalib synthetic_calib(const SyntheticConfig& cfg) {
  CameraCalib c;
  c.projection = Mat34{{cfg.fx, 0, cfg.cx, 0, 0, cfg.fy, cfg.cy, 0, 0, 0, 1, 0}};
  c.rect_rotation = Mat3::identity();
  c.sensor_to_camera = Mat34{{0, -1, 0, 0, 0, 0, -1, -0.08, 1, 0, 0, -0.27}};
  return c;
}

/// Image-space bounds of the projected corners, clipped to the image.
inline RegionProposal2D project_box(const OrientedBox3D& box, const CameraCalib& calib, double width,
                                    double height) {
  double u0 = 1e300, v0 = 1e300, u1 = -1e300, v1 = -1e300;
  for (const Vec3& c : corners(box)) {
    const Vec3 q = calib.projection.apply(c);
    const double u = q.x / q.z, v = q.y / q.z;
    u0 = std::min(u0, u);
    v0 = std::min(v0, v);
    u1 = std::max(u1, u);
    v1 = std::max(v1, v);
  }
  RegionProposal2D p;
  p.u_min = std::clamp(u0, 0.0, width - 1.0);
  p.v_min = std::clamp(v0, 0.0, height - 1.0);
  p.u_max = std::clamp(u1, 0.0, width - 1.0);
  p.v_max = std::clamp(v1, 0.0, height - 1.0);
  return p;
}

namespace detail {

struct Face {
  Vec3 center, normal, axis_a, axis_b;  // axis_* are half-extent vectors
};

inline std::array<Face, 6> box_faces(const OrientedBox3D& b) {
  const Mat3 r = b.rotation();
  const Vec3 ex = r * Vec3{0.5 * b.l, 0, 0}, ey = r * Vec3{0, 0.5 * b.h, 0}, ez = r * Vec3{0, 0, 0.5 * b.w};
  return {{{b.center + ex, normalized(ex), ey, ez},
           {b.center - ex, -1.0 * normalized(ex), ey, ez},
           {b.center + ey, normalized(ey), ex, ez},
           {b.center - ey, -1.0 * normalized(ey), ex, ez},
           {b.center + ez, normalized(ez), ex, ey},
           {b.center - ez, -1.0 * normalized(ez), ex, ey}}};
}

inline bool fits_in_image(const OrientedBox3D& box, const CameraCalib& calib, const SyntheticConfig& cfg) {
  for (const Vec3& c : corners(box)) {
    if (c.z < 1.0) return false;
    const Vec3 q = calib.projection.apply(c);
    const double u = q.x / q.z, v = q.y / q.z;
    if (u < 0.0 || u > cfg.image_width - 1.0 || v < 0.0 || v > cfg.image_height - 1.0) return false;
  }
  return true;
}

// Goes through volatile storage: GCC 11 at -O3 vectorizes the plain double->float->double casts
// into a no-op for some lanes, so in-memory scenes would differ from their files and between builds.
inline Vec3 round_to_float(Vec3 p) {
  volatile float f[3] = {static_cast<float>(p.x), static_cast<float>(p.y), static_cast<float>(p.z)};
  return {f[0], f[1], f[2]};
}

}  // namespace detail

/// Generates one labeled scene. The cloud is in the sensor frame, rounded to float precision
/// so that the in-memory scene matches its on-disk encoding.
inline SceneSample make_synthetic_scene(const SyntheticConfig& cfg, Rng& rng, const std::string& frame_id = "000000") {
  if (cfg.templates.empty()) throw ConfigError("synthetic generator needs at least one category template");
  SceneSample scene;
  scene.frame_id = frame_id;
  scene.calib = synthetic_calib(cfg);
  const CameraCalib& calib = scene.calib;

  std::vector<Label> labels;
  for (std::size_t n = 0; n < cfg.boxes_per_scene; ++n) {
    const CategoryTemplate& tpl = cfg.templates[n % cfg.templates.size()];
    bool placed = false;
    for (std::size_t attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
      const double l = tpl.size.l * (1.0 + uniform(rng, -cfg.size_jitter, cfg.size_jitter));
      const double w = tpl.size.w * (1.0 + uniform(rng, -cfg.size_jitter, cfg.size_jitter));
      const double h = tpl.size.h * (1.0 + uniform(rng, -cfg.size_jitter, cfg.size_jitter));
      const double z = uniform(rng, cfg.depth_min, cfg.depth_max);
      const double half_fov = (cfg.cx - 20.0) / cfg.fx * z;
      const double x = uniform(rng, -half_fov, half_fov);
      const double yaw = uniform(rng, -kPi, kPi);
      const OrientedBox3D box({x, cfg.camera_height - 0.5 * h, z}, l, w, h, yaw);
      if (!detail::fits_in_image(box, calib, cfg)) continue;
      bool overlaps = false;
      for (const auto& other : labels)
        if (iou_bev(scaled(box, 1.2), scaled(other.box, 1.2)) > 0.0) overlaps = true;
      if (overlaps) continue;
      Label lab;
      lab.type = tpl.name;
      lab.category = category_id(tpl.name);
      lab.box = box;
      const RegionProposal2D p = project_box(box, calib, cfg.image_width, cfg.image_height);
      lab.image_box = {p.u_min, p.v_min, p.u_max, p.v_max};
      lab.alpha = wrap_angle(yaw - std::atan2(x, z));
      lab.difficulty = lab.category < 0 ? Difficulty::ignore : kitti_difficulty(p.v_max - p.v_min, 0, 0.0);
      labels.push_back(lab);
      placed = true;
    }
    if (!placed)
      throw GenerationError("could not place box " + std::to_string(n) + " without overlap after " +
                            std::to_string(cfg.max_retries) + " attempts");
  }

  // Surface points on faces that face the camera (at the origin).
  std::vector<Vec3> rect_points;
  for (const auto& lab : labels) {
    const auto faces = detail::box_faces(lab.box);
    std::vector<double> weight(6, 0.0);
    double total = 0.0;
    for (std::size_t f = 0; f < 6; ++f) {
      const Vec3 to_cam = -1.0 * faces[f].center;
      const double facing = dot(faces[f].normal, normalized(to_cam));
      if (facing <= 0.0) continue;
      weight[f] = 4.0 * norm(faces[f].axis_a) * norm(faces[f].axis_b) * facing;
      total += weight[f];
    }
    for (std::size_t i = 0; i < cfg.points_per_box && total > 0.0; ++i) {
      const double pick = uniform(rng, 0.0, total);
      std::size_t f = 0, last = 0;
      double acc = 0.0;
      for (; f < 6; ++f) {
        if (weight[f] == 0.0) continue;
        last = f;
        acc += weight[f];
        if (pick < acc) break;
      }
      if (f == 6) f = last;
      const double a = uniform(rng, -1.0, 1.0), b = uniform(rng, -1.0, 1.0);
      const Vec3 p = faces[f].center + a * faces[f].axis_a + b * faces[f].axis_b;
      const Vec3 noise{normal(rng, 0.0, cfg.noise_sigma), normal(rng, 0.0, cfg.noise_sigma),
                       normal(rng, 0.0, cfg.noise_sigma)};
      rect_points.push_back(p + noise);
    }
  }
  // Clutter outside the (inflated) boxes.
  for (std::size_t i = 0; i < cfg.clutter_points; ++i) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      const double z = uniform(rng, 2.0, cfg.depth_max + 10.0);
      const double half = (cfg.cx / cfg.fx) * z;
      const Vec3 p{uniform(rng, -half, half), uniform(rng, cfg.camera_height - 3.0, cfg.camera_height), z};
      bool inside = false;
      for (const auto& lab : labels) inside = inside || point_in_box(p, scaled(lab.box, 1.3));
      if (inside) continue;
      rect_points.push_back(p);
      break;
    }
  }

  // Store in the sensor frame (R0_rect is the identity for generated scenes).
  const Mat34 cam_to_sensor = rigid_inverse(calib.sensor_to_camera);
  scene.cloud.frame = CloudFrame::sensor;
  for (const Vec3& p : rect_points) {
    scene.cloud.points.push_back(detail::round_to_float(cam_to_sensor.apply(p)));
    scene.cloud.intensities.push_back(static_cast<float>(uniform(rng, 0.0, 1.0)));
  }

  for (const auto& lab : labels) {
    RegionProposal2D p{lab.image_box[0], lab.image_box[1], lab.image_box[2], lab.image_box[3],
                       std::max(0, lab.category), uniform(rng, cfg.score_2d_min, cfg.score_2d_max)};
    scene.proposals.push_back(p);
  }
  scene.labels = std::move(labels);
  return scene;
}

}  // namespace fconv
