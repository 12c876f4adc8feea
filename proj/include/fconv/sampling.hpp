#pragma once

// Fixed-size point sampling and training-time augmentation.

#include <algorithm>
#include <vector>

#include "fconv/boxes.hpp"
#include "fconv/kitti_io.hpp"
#include "fconv/random.hpp"

namespace fconv {

/// Draws exactly `n` indices from `indices`: without replacement when there are enough,
/// with replacement otherwise. An empty input yields an empty result. The input is sorted
/// first, so the result depends only on the multiset of indices and the generator state.
inline std::vector<std::size_t> sample_fixed(std::vector<std::size_t> indices, std::size_t n, Rng& rng) {
  if (n == 0) throw ConfigError("sample_fixed: n must be >= 1");
  std::vector<std::size_t> out;
  if (indices.empty()) return out;
  std::sort(indices.begin(), indices.end());
  out.reserve(n);
  if (indices.size() >= n) {
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + uniform_index(rng, indices.size() - i);
      std::swap(indices[i], indices[j]);
      out.push_back(indices[i]);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) out.push_back(indices[uniform_index(rng, indices.size())]);
  }
  return out;
}

struct AugmentConfig {
  double jitter_frac = 0.1;  // proposal center jitter, fraction of box size
  double scale_frac = 0.1;   // proposal scale in [1 - s, 1 + s]
  double flip_prob = 0.5;
  double shift_max = 1.0;  // meters along the frustum axis
};

inline RegionProposal2D augment_proposal(const RegionProposal2D& p, Rng& rng, const AugmentConfig& cfg) {
  const double w = p.width(), h = p.height();
  const double du = uniform(rng, -cfg.jitter_frac, cfg.jitter_frac) * w;
  const double dv = uniform(rng, -cfg.jitter_frac, cfg.jitter_frac) * h;
  const double s = uniform(rng, 1.0 - cfg.scale_frac, 1.0 + cfg.scale_frac);
  RegionProposal2D out = p;
  const double cu = p.center_u() + du, cv = p.center_v() + dv;
  out.u_min = cu - 0.5 * s * w;
  out.u_max = cu + 0.5 * s * w;
  out.v_min = cv - 0.5 * s * h;
  out.v_max = cv + 0.5 * s * h;
  if (cfg.jitter_frac == 0.0 && cfg.scale_frac == 0.0) return p;
  return out;
}

/// Flip about the frustum's vertical plane (x -> -x) and shift along the axis (z += shift),
/// both in the frustum frame.
struct PointAugmentation {
  bool flip = false;
  double shift = 0.0;

  Vec3 apply(Vec3 p) const { return {flip ? -p.x : p.x, p.y, p.z + shift}; }

  OrientedBox3D apply(const OrientedBox3D& b) const {
    const Vec3 c = apply(b.center);
    return OrientedBox3D(c, b.l, b.w, b.h, flip ? kPi - b.yaw : b.yaw);
  }

  void apply_in_place(std::vector<Vec3>& points) const {
    if (!flip && shift == 0.0) return;
    for (auto& p : points) p = apply(p);
  }
};

inline PointAugmentation draw_point_augmentation(Rng& rng, const AugmentConfig& cfg) {
  PointAugmentation a;
  a.flip = bernoulli(rng, cfg.flip_prob);
  a.shift = uniform(rng, -cfg.shift_max, cfg.shift_max);
  return a;
}

/// Convenience: draws and applies an augmentation; returns it so labels can follow.
inline PointAugmentation augment_points(std::vector<Vec3>& points, Rng& rng, const AugmentConfig& cfg) {
  const PointAugmentation a = draw_point_augmentation(rng, cfg);
  a.apply_in_place(points);
  return a;
}

}  // namespace fconv
