#pragma once

// KITTI-style average precision for 3D and bird's-eye-view boxes.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fconv/boxes.hpp"
#include "fconv/kitti_io.hpp"
#include "fconv/pipeline.hpp"

namespace fconv {

enum class EvalMode { box3d, bev };

inline const char* to_string(EvalMode m) { return m == EvalMode::box3d ? "3d" : "bev"; }

struct EvalConfig {
  std::map<std::string, double> iou{{"Car", 0.7}, {"Pedestrian", 0.5}, {"Cyclist", 0.5}};
  std::size_t recall_points = 11;  // 11 (0, 0.1, ..., 1) or 40 (1/40, ..., 1)

  void validate() const {
    for (const auto& [cat, t] : iou)
      if (!(t > 0.0 && t <= 1.0)) throw ConfigError("eval IoU threshold for " + cat + " must be in (0, 1]");
    if (recall_points != 11 && recall_points != 40) throw ConfigError("eval.recall_points must be 11 or 40");
  }
};

struct EvalScene {
  std::string frame_id;
  std::vector<Label> gts;
  std::vector<DetectionResult> dets;
};

struct APResult {
  std::string category;
  Difficulty difficulty = Difficulty::moderate;
  EvalMode mode = EvalMode::box3d;
  std::optional<double> ap;  // absent when the category has no ground truth at this difficulty
  std::size_t gt_count = 0, tp = 0, fp = 0;
};

/// Recall sample positions of the interpolated curve.
inline std::vector<double> recall_samples(std::size_t points) {
  std::vector<double> r;
  if (points == 11)
    for (int i = 0; i <= 10; ++i) r.push_back(i / 10.0);
  else
    for (std::size_t i = 1; i <= points; ++i) r.push_back(static_cast<double>(i) / static_cast<double>(points));
  return r;
}

/// Scored outcomes (score, true positive?) and a gt count to an interpolated AP. Tied scores
/// form a single operating point, so the result does not depend on input order.
inline double interpolated_ap(std::vector<std::pair<double, bool>> outcomes, std::size_t gt_count,
                              std::size_t recall_points) {
  if (gt_count == 0) return 0.0;
  std::stable_sort(outcomes.begin(), outcomes.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::pair<double, double>> pr;  // (recall, precision)
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    (outcomes[i].second ? tp : fp) += 1;
    if (i + 1 < outcomes.size() && outcomes[i + 1].first == outcomes[i].first) continue;
    pr.push_back({static_cast<double>(tp) / static_cast<double>(gt_count),
                  static_cast<double>(tp) / static_cast<double>(tp + fp)});
  }
  double sum = 0.0;
  const auto rs = recall_samples(recall_points);
  for (double r : rs) {
    double best = 0.0;
    for (const auto& [rec, prec] : pr)
      if (rec >= r - 1e-12) best = std::max(best, prec);
    sum += best;
  }
  return sum / static_cast<double>(rs.size());
}

namespace detail {

inline double eval_iou(const OrientedBox3D& a, const OrientedBox3D& b, EvalMode mode) {
  return mode == EvalMode::box3d ? iou_3d(a, b) : iou_bev(a, b);
}

/// Whether a gt counts at `difficulty` under the cumulative filter (moderate includes easy).
inline bool counts_at(Difficulty gt, Difficulty level) {
  return gt != Difficulty::ignore && static_cast<int>(gt) <= static_cast<int>(level);
}

}  // namespace detail

/// Greedy matching of one scene for one category: detections in descending fused score take
/// the unmatched counted gt with the highest IoU above the threshold. A detection that instead
/// overlaps an ignored gt (harder difficulty, or DontCare) above the threshold is dropped.
inline void match_scene(const EvalScene& scene, int category, Difficulty level, double thr, EvalMode mode,
                        std::vector<std::pair<double, bool>>& outcomes, std::size_t& gt_count) {
  std::vector<const Label*> counted, ignored;
  for (const auto& g : scene.gts) {
    if (g.category == category && detail::counts_at(g.difficulty, level))
      counted.push_back(&g);
    else if (g.category == category || g.category < 0)
      ignored.push_back(&g);
  }
  gt_count += counted.size();
  std::vector<const DetectionResult*> dets;
  for (const auto& d : scene.dets)
    if (d.category == category) dets.push_back(&d);
  std::stable_sort(dets.begin(), dets.end(),
                   [](const DetectionResult* a, const DetectionResult* b) { return a->score_fused > b->score_fused; });
  std::vector<bool> used(counted.size(), false);
  for (const DetectionResult* d : dets) {
    double best = thr;
    std::size_t pick = counted.size();
    for (std::size_t g = 0; g < counted.size(); ++g) {
      if (used[g]) continue;
      const double iou = detail::eval_iou(d->box, counted[g]->box, mode);
      if (iou > best) {
        best = iou;
        pick = g;
      }
    }
    if (pick < counted.size()) {
      used[pick] = true;
      outcomes.push_back({d->score_fused, true});
      continue;
    }
    bool absorbed = false;
    for (const Label* g : ignored) absorbed = absorbed || detail::eval_iou(d->box, g->box, mode) > thr;
    if (!absorbed) outcomes.push_back({d->score_fused, false});
  }
}

inline APResult average_precision(std::span<const EvalScene> scenes, const std::string& category, Difficulty level,
                                  const EvalConfig& cfg, EvalMode mode) {
  const auto it = cfg.iou.find(category);
  if (it == cfg.iou.end()) throw ConfigError("no IoU threshold configured for " + category);
  const int cat = category_id(category);
  APResult r;
  r.category = category;
  r.difficulty = level;
  r.mode = mode;
  std::vector<std::pair<double, bool>> outcomes;
  for (const auto& s : scenes) match_scene(s, cat, level, it->second, mode, outcomes, r.gt_count);
  for (const auto& [score, tp] : outcomes) (tp ? r.tp : r.fp) += 1;
  if (r.gt_count > 0) r.ap = interpolated_ap(std::move(outcomes), r.gt_count, cfg.recall_points);
  return r;
}

/// Every configured category at easy/moderate/hard, in both modes.
inline std::vector<APResult> evaluate(std::span<const EvalScene> scenes, const EvalConfig& cfg) {
  cfg.validate();
  std::vector<APResult> out;
  for (EvalMode mode : {EvalMode::box3d, EvalMode::bev})
    for (const auto& [cat, thr] : cfg.iou)
      for (Difficulty d : {Difficulty::easy, Difficulty::moderate, Difficulty::hard})
        out.push_back(average_precision(scenes, cat, d, cfg, mode));
  return out;
}

/// Groups detections and labels by frame id; frames with labels but no detections are kept.
inline std::vector<EvalScene> make_eval_scenes(const std::map<std::string, std::vector<Label>>& labels,
                                               std::span<const DetectionResult> dets) {
  std::map<std::string, EvalScene> by_id;
  for (const auto& [id, gts] : labels) {
    by_id[id].frame_id = id;
    by_id[id].gts = gts;
  }
  for (const auto& d : dets) {
    auto& s = by_id[d.frame_id];
    s.frame_id = d.frame_id;
    s.dets.push_back(d);
  }
  std::vector<EvalScene> out;
  for (auto& [id, s] : by_id) out.push_back(std::move(s));
  return out;
}

inline std::string format_results_table(std::span<const APResult> results) {
  std::ostringstream s;
  s << "mode category   difficulty  AP        gts  tp   fp\n";
  for (const auto& r : results) {
    char line[160];
    std::snprintf(line, sizeof line, "%-4s %-10s %-11s %-9s %-4zu %-4zu %zu\n", to_string(r.mode), r.category.c_str(),
                  to_string(r.difficulty), r.ap ? detail::format_fixed(*r.ap, 4).c_str() : "absent", r.gt_count, r.tp,
                  r.fp);
    s << line;
  }
  return s.str();
}

/// "ap.<mode>.<category>.<difficulty>=<value|absent>" lines.
inline std::string format_results_kv(std::span<const APResult> results) {
  std::string out;
  for (const auto& r : results)
    out += std::string("ap.") + to_string(r.mode) + "." + r.category + "." + to_string(r.difficulty) + "=" +
           (r.ap ? detail::format_fixed(*r.ap, 6) : std::string("absent")) + "\n";
  return out;
}

}  // namespace fconv
