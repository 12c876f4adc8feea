#pragma once

// Reference implementations used as test oracles. Each one is written independently of the
// library code it checks: plain loops, explicit trigonometry, no shared helpers beyond the
// value types.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "fconv/boxes.hpp"
#include "fconv/geometry.hpp"
#include "fconv/kitti_io.hpp"

namespace oracle {

using fconv::OrientedBox3D;
using fconv::Vec3;

/// Box-local coordinates (along length, height, width) by explicit trigonometry.
inline Vec3 local_coords(const Vec3& p, const OrientedBox3D& b) {
  const double dx = p.x - b.center.x, dy = p.y - b.center.y, dz = p.z - b.center.z;
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  // Length axis (c, 0, -s), width axis (s, 0, c).
  return {dx * c - dz * s, dy, dx * s + dz * c};
}

inline bool inside(const Vec3& p, const OrientedBox3D& b, double scale = 1.0) {
  const Vec3 q = local_coords(p, b);
  return std::abs(q.x) <= 0.5 * b.l * scale && std::abs(q.y) <= 0.5 * b.h * scale && std::abs(q.z) <= 0.5 * b.w * scale;
}

/// Axis-aligned bounds of a box (x, y, z min/max).
inline void bounds(const OrientedBox3D& b, double lo[3], double hi[3]) {
  const double c = std::abs(std::cos(b.yaw)), s = std::abs(std::sin(b.yaw));
  const double ex = 0.5 * (b.l * c + b.w * s), ez = 0.5 * (b.l * s + b.w * c);
  lo[0] = b.center.x - ex;
  hi[0] = b.center.x + ex;
  lo[1] = b.center.y - 0.5 * b.h;
  hi[1] = b.center.y + 0.5 * b.h;
  lo[2] = b.center.z - ez;
  hi[2] = b.center.z + ez;
}

/// Monte-Carlo IoU: uniform samples in the joint bounding region. `bev` drops the vertical axis.
inline double monte_carlo_iou(const OrientedBox3D& a, const OrientedBox3D& b, bool bev, std::size_t samples,
                              std::mt19937_64& rng) {
  double alo[3], ahi[3], blo[3], bhi[3], lo[3], hi[3];
  bounds(a, alo, ahi);
  bounds(b, blo, bhi);
  for (int i = 0; i < 3; ++i) {
    lo[i] = std::min(alo[i], blo[i]);
    hi[i] = std::max(ahi[i], bhi[i]);
  }
  std::uniform_real_distribution<double> ux(lo[0], hi[0]), uy(lo[1], hi[1]), uz(lo[2], hi[2]);
  std::size_t both = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    Vec3 p{ux(rng), bev ? a.center.y : uy(rng), uz(rng)};
    Vec3 q = p;
    if (bev) q.y = b.center.y;
    if (inside(p, a) && inside(q, b)) ++both;
  }
  const double region = (hi[0] - lo[0]) * (hi[2] - lo[2]) * (bev ? 1.0 : (hi[1] - lo[1]));
  const double inter = region * static_cast<double>(both) / static_cast<double>(samples);
  const double va = a.l * a.w * (bev ? 1.0 : a.h), vb = b.l * b.w * (bev ? 1.0 : b.h);
  return inter / (va + vb - inter);
}

/// Greedy NMS by repeated arg-max over the remaining set: O(n^2) picks, each scanning all.
template <class IouFn>
std::vector<std::size_t> nms_reference(const std::vector<OrientedBox3D>& boxes, const std::vector<double>& scores,
                                       double thr, IouFn iou) {
  const std::size_t n = boxes.size();
  std::vector<bool> alive(n, true);
  std::vector<std::size_t> kept;
  while (true) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i)
      if (alive[i] && (best == n || scores[i] > scores[best])) best = i;
    if (best == n) break;
    kept.push_back(best);
    alive[best] = false;
    for (std::size_t i = 0; i < n; ++i)
      if (alive[i] && iou(boxes[best], boxes[i]) > thr) alive[i] = false;
  }
  return kept;
}

/// Slab membership of every (point, slab) pair by direct interval test.
inline std::vector<std::vector<std::uint32_t>> slab_members(const std::vector<Vec3>& frame_points, double depth_min,
                                                            double depth_max, double s, double u, std::size_t L) {
  std::vector<std::vector<std::uint32_t>> g(L);
  for (std::size_t i = 0; i < frame_points.size(); ++i) {
    const double z = frame_points[i].z;
    if (!(z >= depth_min && z < depth_max)) continue;
    for (std::size_t t = 0; t < L; ++t) {
      const double start = depth_min + static_cast<double>(t) * s;
      if (z >= start && z < start + u) g[t].push_back(static_cast<std::uint32_t>(i));
    }
  }
  return g;
}

/// Point-in-proposal by explicit 3x4 projection of each point.
inline std::vector<std::size_t> proposal_members(const std::vector<Vec3>& rect_points, const fconv::Mat34& P,
                                                 const fconv::RegionProposal2D& box) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < rect_points.size(); ++i) {
    const Vec3& p = rect_points[i];
    if (!(p.z > 0)) continue;
    double q[3];
    for (int r = 0; r < 3; ++r) q[r] = P.m[4 * r] * p.x + P.m[4 * r + 1] * p.y + P.m[4 * r + 2] * p.z + P.m[4 * r + 3];
    if (!(q[2] > 0)) continue;
    const double u = q[0] / q[2], v = q[1] / q[2];
    if (u >= box.u_min && u <= box.u_max && v >= box.v_min && v <= box.v_max) out.push_back(i);
  }
  return out;
}

enum Label { negative = 0, positive = 1, ignore = 2 };

/// Assignment of every (anchor position, category) pair against every gt.
struct AssignOracle {
  std::vector<int> label, gt;
};

inline AssignOracle assign(const std::vector<Vec3>& centers, std::size_t K,
                           const std::vector<std::pair<OrientedBox3D, std::size_t>>& gts, double shrink) {
  AssignOracle o;
  o.label.assign(centers.size() * K, negative);
  o.gt.assign(centers.size() * K, -1);
  for (std::size_t p = 0; p < centers.size(); ++p)
    for (std::size_t k = 0; k < K; ++k) {
      double best = 1e300;
      bool in_full = false;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].second != k) continue;
        if (inside(centers[p], gts[g].first, shrink)) {
          const Vec3 d = centers[p] - gts[g].first.center;
          const double dist = std::sqrt(d.x * d.x + d.y * d.y + d.z * d.z);
          if (dist < best) {
            best = dist;
            o.gt[p * K + k] = static_cast<int>(g);
          }
        } else if (inside(centers[p], gts[g].first)) {
          in_full = true;
        }
      }
      o.label[p * K + k] = o.gt[p * K + k] >= 0 ? positive : (in_full ? ignore : negative);
    }
  return o;
}

}  // namespace oracle
