#pragma once

// Anchor target assignment and the three training losses: focal classification,
// center/size/angle regression, and the corner regularizer.

#include <cstdint>
#include <vector>

#include "fconv/boxes.hpp"
#include "fconv/net.hpp"
#include "fconv/tensor.hpp"

namespace fconv {

enum class AnchorLabel : std::uint8_t { negative = 0, positive = 1, ignore = 2 };

struct GtBox {
  OrientedBox3D box;  // same frame as the anchors
  std::size_t category = 0;
};

struct AssignmentResult {
  std::size_t positions = 0;
  std::size_t categories = 0;
  std::vector<AnchorLabel> labels;  // [position * K + category]
  std::vector<int> matched_gt;      // index into the gt list, -1 unless positive
  std::vector<int> matched_bin;     // nearest yaw bin of the matched gt, -1 unless positive

  std::size_t slot(std::size_t pos, std::size_t k) const { return pos * categories + k; }
  AnchorLabel label(std::size_t pos, std::size_t k) const { return labels[slot(pos, k)]; }

  /// Classification target of a position: 0 background, k + 1 for category k, -1 ignored.
  /// A position positive for several categories takes the one whose matched center is closest.
  std::vector<int> class_targets(std::span<const GtBox> gts, const AnchorSet& anchors) const {
    std::vector<int> out(positions, 0);
    for (std::size_t p = 0; p < positions; ++p) {
      double best = 1e300;
      bool any_ignore = false;
      for (std::size_t k = 0; k < categories; ++k) {
        const AnchorLabel l = label(p, k);
        if (l == AnchorLabel::ignore) any_ignore = true;
        if (l != AnchorLabel::positive) continue;
        const double d = norm(gts[static_cast<std::size_t>(matched_gt[slot(p, k)])].box.center - anchors.center(p));
        if (d < best) {
          best = d;
          out[p] = static_cast<int>(k) + 1;
        }
      }
      if (out[p] == 0 && any_ignore) out[p] = -1;
    }
    return out;
  }

  std::size_t positive_count() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), AnchorLabel::positive));
  }
};

/// Positive: anchor center inside a gt box of the same category shrunk by `shrink_ratio`
/// (nearest-center gt wins). Ignore: inside the full box but no shrunken one. Else negative.
inline AssignmentResult assign_targets(const AnchorSet& anchors, std::span<const GtBox> gts,
                                       double shrink_ratio = 0.5) {
  AssignmentResult a;
  a.positions = anchors.positions();
  a.categories = anchors.categories();
  const std::size_t n = a.positions * a.categories;
  a.labels.assign(n, AnchorLabel::negative);
  a.matched_gt.assign(n, -1);
  a.matched_bin.assign(n, -1);
  for (std::size_t p = 0; p < a.positions; ++p) {
    const Vec3 c = anchors.center(p);
    for (std::size_t k = 0; k < a.categories; ++k) {
      const std::size_t s = a.slot(p, k);
      double best = 1e300;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].category != k) continue;
        if (point_in_box(c, gts[g].box, shrink_ratio)) {
          const double d = norm(gts[g].box.center - c);
          if (d < best) {
            best = d;
            a.labels[s] = AnchorLabel::positive;
            a.matched_gt[s] = static_cast<int>(g);
          }
        } else if (a.labels[s] == AnchorLabel::negative && point_in_box(c, gts[g].box)) {
          a.labels[s] = AnchorLabel::ignore;
        }
      }
      if (a.labels[s] == AnchorLabel::positive)
        a.matched_bin[s] = static_cast<int>(
            nearest_yaw_bin(gts[static_cast<std::size_t>(a.matched_gt[s])].box.yaw, anchors.bins()));
    }
  }
  return a;
}

/// Everything the losses need about one sample of a batch.
struct SampleTargets {
  AnchorSet anchors;
  std::vector<GtBox> gts;
  AssignmentResult assignment;
};

enum class BinSupervision { matched, all };

struct LossConfig {
  double shrink_ratio = 0.5;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;  // negative disables class weighting
  double lambda_reg = 1.0;
  double lambda_corner = 10.0;
  double smooth_l1_delta = 1.0;
  BinSupervision bins = BinSupervision::all;
};

template <class T>
struct LossBreakdown {
  Tensor<T> total, focal, regression, corner;
};

template <class T>
Tensor<T> focal_loss(const Tensor<T>& class_logits, std::span<const SampleTargets> targets, double gamma = 2.0,
                     double alpha = 0.25) {
  if (class_logits.rank() != 3 || class_logits.dim(0) != targets.size())
    throw ShapeError("focal_loss: logits " + shape_str(class_logits.shape()) + " for " +
                     std::to_string(targets.size()) + " samples");
  const std::size_t len = class_logits.dim(1), classes = class_logits.dim(2);
  std::vector<std::size_t> idx;
  std::vector<T> weight;
  std::size_t positives = 0;
  for (std::size_t b = 0; b < targets.size(); ++b) {
    const auto& tg = targets[b];
    if (tg.assignment.positions != len || tg.assignment.categories + 1 != classes)
      throw ShapeError("focal_loss: assignment does not match logits " + shape_str(class_logits.shape()));
    const std::vector<int> cls = tg.assignment.class_targets(tg.gts, tg.anchors);
    for (std::size_t p = 0; p < len; ++p) {
      if (cls[p] < 0) continue;
      idx.push_back((b * len + p) * classes + static_cast<std::size_t>(cls[p]));
      const bool fg = cls[p] > 0;
      positives += fg ? 1 : 0;
      weight.push_back(alpha < 0.0 ? T(1) : static_cast<T>(fg ? alpha : 1.0 - alpha));
    }
  }
  if (idx.empty()) return scale(sum(class_logits), T(0));
  const std::size_t m = idx.size();
  const Tensor<T> lp = gather(log_softmax(class_logits, 2), std::move(idx));
  const Tensor<T> one_minus_p = add_scalar(scale(exp(lp), T(-1)), T(1));
  const Tensor<T> modulator = pow_scalar(clamp_min(one_minus_p, T(0)), static_cast<T>(gamma));
  const Tensor<T> w(Shape{m}, std::move(weight));
  const Tensor<T> per = mul(mul(w, modulator), lp);
  return scale(sum(per), static_cast<T>(-1.0 / static_cast<double>(std::max<std::size_t>(1, positives))));
}

namespace detail {

/// Supervised (sample, position, category, bin) slots with their targets.
struct RegSlot {
  std::size_t base = 0;  // flat index of the slot's first offset in reg_offsets
  OrientedBox3D anchor;
  OrientedBox3D gt;
  BoxOffsets target;
};

inline std::vector<RegSlot> regression_slots(const Shape& reg_shape, std::span<const SampleTargets> targets,
                                             BinSupervision bins, std::size_t& positives) {
  if (reg_shape.size() != 3 || reg_shape[0] != targets.size())
    throw ShapeError("regression: offsets " + shape_str(reg_shape) + " for " + std::to_string(targets.size()) +
                     " samples");
  std::vector<RegSlot> slots;
  positives = 0;
  const std::size_t len = reg_shape[1], ch = reg_shape[2];
  for (std::size_t b = 0; b < targets.size(); ++b) {
    const auto& tg = targets[b];
    const auto& as = tg.assignment;
    const std::size_t nbins = tg.anchors.bins();
    if (as.positions != len || ch != as.categories * nbins * 7)
      throw ShapeError("regression: assignment does not match offsets " + shape_str(reg_shape));
    for (std::size_t p = 0; p < len; ++p)
      for (std::size_t k = 0; k < as.categories; ++k) {
        const std::size_t s = as.slot(p, k);
        if (as.labels[s] != AnchorLabel::positive) continue;
        ++positives;
        const OrientedBox3D& gt = tg.gts[static_cast<std::size_t>(as.matched_gt[s])].box;
        const std::size_t first = bins == BinSupervision::matched ? static_cast<std::size_t>(as.matched_bin[s]) : 0;
        const std::size_t last = bins == BinSupervision::matched ? first + 1 : nbins;
        for (std::size_t i = first; i < last; ++i) {
          const OrientedBox3D anchor = tg.anchors.anchor(p, k, i);
          slots.push_back({((b * len + p) * as.categories * nbins + k * nbins + i) * 7, anchor, gt, encode(gt, anchor)});
        }
      }
  }
  return slots;
}

template <class T>
Tensor<T> component(const Tensor<T>& reg, std::span<const RegSlot> slots, std::size_t j) {
  std::vector<std::size_t> idx;
  idx.reserve(slots.size());
  for (const auto& s : slots) idx.push_back(s.base + j);
  return gather(reg, std::move(idx));
}

template <class T, class F>
Tensor<T> constant(std::span<const RegSlot> slots, F f) {
  std::vector<T> v;
  v.reserve(slots.size());
  for (const auto& s : slots) v.push_back(static_cast<T>(f(s)));
  return Tensor<T>(Shape{slots.size()}, std::move(v));
}

}  // namespace detail

/// Center: Euclidean distance of the center offsets. Size and angle: smooth L1 on the remaining
/// four offsets. Only positive slots contribute; normalized by the positive count (and by the
/// number of supervised bins per positive).
template <class T>
Tensor<T> regression_loss(const Tensor<T>& reg_offsets, std::span<const SampleTargets> targets,
                          BinSupervision bins = BinSupervision::all, double delta = 1.0) {
  std::size_t positives = 0;
  const auto slots = detail::regression_slots(reg_offsets.shape(), targets, bins, positives);
  if (slots.empty()) return scale(sum(reg_offsets), T(0));
  const std::span<const detail::RegSlot> sv(slots);
  Tensor<T> center_sq;
  for (std::size_t j = 0; j < 3; ++j) {
    const Tensor<T> d = sub(detail::component(reg_offsets, sv, j),
                            detail::constant<T>(sv, [j](const detail::RegSlot& s) { return s.target[j]; }));
    center_sq = j == 0 ? square(d) : add(center_sq, square(d));
  }
  Tensor<T> total = sum(sqrt(center_sq));
  for (std::size_t j = 3; j < 7; ++j) {
    const Tensor<T> d = sub(detail::component(reg_offsets, sv, j),
                            detail::constant<T>(sv, [j](const detail::RegSlot& s) { return s.target[j]; }));
    total = add(total, sum(smooth_l1(d, static_cast<T>(delta))));
  }
  const double per_positive = static_cast<double>(slots.size()) / static_cast<double>(positives);
  return scale(total, static_cast<T>(1.0 / (static_cast<double>(positives) * per_positive)));
}

/// Smooth-L1 of the 8 corner distances between the decoded prediction and the gt, taking the
/// smaller of the gt and its yaw+pi twin; averaged over corners and positives.
template <class T>
Tensor<T> corner_loss(const Tensor<T>& reg_offsets, std::span<const SampleTargets> targets,
                      BinSupervision bins = BinSupervision::all, double delta = 1.0) {
  std::size_t positives = 0;
  const auto slots = detail::regression_slots(reg_offsets.shape(), targets, bins, positives);
  if (slots.empty()) return scale(sum(reg_offsets), T(0));
  const std::span<const detail::RegSlot> sv(slots);
  auto comp = [&](std::size_t j) { return detail::component(reg_offsets, sv, j); };
  auto anchor_const = [&](auto f) { return detail::constant<T>(sv, [f](const detail::RegSlot& s) { return f(s.anchor); }); };

  const Tensor<T> cx = add(comp(0), anchor_const([](const OrientedBox3D& a) { return a.center.x; }));
  const Tensor<T> cy = add(comp(1), anchor_const([](const OrientedBox3D& a) { return a.center.y; }));
  const Tensor<T> cz = add(comp(2), anchor_const([](const OrientedBox3D& a) { return a.center.z; }));
  auto decoded_size = [&](std::size_t j, auto get) {
    const Tensor<T> a = anchor_const(get);
    return clamp_min(mul(a, add_scalar(comp(j), T(1))), static_cast<T>(kMinDecodedSize));
  };
  const Tensor<T> l = decoded_size(3, [](const OrientedBox3D& a) { return a.l; });
  const Tensor<T> w = decoded_size(4, [](const OrientedBox3D& a) { return a.w; });
  const Tensor<T> h = decoded_size(5, [](const OrientedBox3D& a) { return a.h; });
  const Tensor<T> yaw = add(comp(6), anchor_const([](const OrientedBox3D& a) { return a.yaw; }));
  const Tensor<T> c = cos(yaw), s = sin(yaw);

  std::array<Tensor<T>, 2> branch;
  for (int flip = 0; flip < 2; ++flip) {
    Tensor<T> acc;
    for (std::size_t i = 0; i < 8; ++i) {
      const auto& sg = kCornerSigns[i];
      const Tensor<T> lx = scale(l, static_cast<T>(0.5 * sg[0]));
      const Tensor<T> ly = scale(h, static_cast<T>(0.5 * sg[1]));
      const Tensor<T> lz = scale(w, static_cast<T>(0.5 * sg[2]));
      const Tensor<T> px = add(cx, add(mul(c, lx), mul(s, lz)));
      const Tensor<T> py = add(cy, ly);
      const Tensor<T> pz = add(cz, sub(mul(c, lz), mul(s, lx)));
      const auto gt_corner = [i, flip](const detail::RegSlot& sl, int axis) {
        OrientedBox3D g = sl.gt;
        if (flip) g.yaw = wrap_angle(g.yaw + kPi);
        return corners(g)[i][axis];
      };
      const Tensor<T> dx = sub(px, detail::constant<T>(sv, [&](const detail::RegSlot& sl) { return gt_corner(sl, 0); }));
      const Tensor<T> dy = sub(py, detail::constant<T>(sv, [&](const detail::RegSlot& sl) { return gt_corner(sl, 1); }));
      const Tensor<T> dz = sub(pz, detail::constant<T>(sv, [&](const detail::RegSlot& sl) { return gt_corner(sl, 2); }));
      const Tensor<T> dist = sqrt(add(add(square(dx), square(dy)), square(dz)));
      const Tensor<T> term = smooth_l1(dist, static_cast<T>(delta));
      acc = i == 0 ? term : add(acc, term);
    }
    branch[static_cast<std::size_t>(flip)] = acc;
  }
  const Tensor<T> best = minimum(branch[0], branch[1]);
  const double per_positive = static_cast<double>(slots.size()) / static_cast<double>(positives);
  return scale(sum(best), static_cast<T>(1.0 / (8.0 * static_cast<double>(positives) * per_positive)));
}

template <class T>
LossBreakdown<T> total_loss(const HeaderOutput<T>& out, std::span<const SampleTargets> targets,
                            const LossConfig& cfg) {
  LossBreakdown<T> r;
  r.focal = focal_loss(out.class_logits, targets, cfg.focal_gamma, cfg.focal_alpha);
  r.regression = regression_loss(out.reg_offsets, targets, cfg.bins, cfg.smooth_l1_delta);
  r.corner = corner_loss(out.reg_offsets, targets, cfg.bins, cfg.smooth_l1_delta);
  r.total = add(add(r.focal, scale(r.regression, static_cast<T>(cfg.lambda_reg))),
                scale(r.corner, static_cast<T>(cfg.lambda_corner)));
  return r;
}

}  // namespace fconv
