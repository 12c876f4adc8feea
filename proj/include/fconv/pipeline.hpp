#pragma once

// Training, inference, refinement and the detection file format.

#include <algorithm>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fconv/boxes.hpp"
#include "fconv/checkpoint.hpp"
#include "fconv/geometry.hpp"
#include "fconv/kitti_io.hpp"
#include "fconv/losses.hpp"
#include "fconv/net.hpp"
#include "fconv/optim.hpp"
#include "fconv/random.hpp"
#include "fconv/sampling.hpp"

namespace fconv {

// ---------------------------------------------------------------------------
// Model description: architecture plus the category list and anchor sizes.

/// "Car:3.9,1.6,1.56;Pedestrian:0.8,0.6,1.73" (l, w, h per category).
inline std::vector<std::pair<std::string, MeanSize>> parse_mean_sizes(const std::string& text) {
  std::vector<std::pair<std::string, MeanSize>> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ';')) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("mean size entry '" + item + "' lacks 'Name:'");
    std::string name = item.substr(0, colon);
    name.erase(0, name.find_first_not_of(' '));
    name.erase(name.find_last_not_of(' ') + 1);
    std::stringstream vs(item.substr(colon + 1));
    std::string tok;
    std::vector<double> v;
    while (std::getline(vs, tok, ',')) {
      try {
        std::size_t used = 0;
        v.push_back(std::stod(tok, &used));
      } catch (const std::exception&) {
        throw ConfigError("mean size entry '" + item + "' has a bad number");
      }
    }
    if (v.size() != 3 || !(v[0] > 0 && v[1] > 0 && v[2] > 0))
      throw ConfigError("mean size entry '" + item + "' needs three positive sizes l,w,h");
    out.push_back({name, {v[0], v[1], v[2]}});
  }
  return out;
}

inline std::string format_mean_sizes(const std::vector<std::pair<std::string, MeanSize>>& sizes) {
  std::string out;
  for (const auto& [name, s] : sizes) {
    if (!out.empty()) out += ';';
    out += name + ":" + detail::format_exact(s.l) + "," + detail::format_exact(s.w) + "," + detail::format_exact(s.h);
  }
  return out;
}

struct ModelSpec {
  NetConfig net;
  std::vector<std::string> categories;  // index = network category
  std::vector<MeanSize> mean_sizes;
  std::string stage = "detect";  // or "refine"

  int index_of(int global_category) const {
    const std::string name = category_name(global_category);
    const auto it = std::find(categories.begin(), categories.end(), name);
    return it == categories.end() ? -1 : static_cast<int>(it - categories.begin());
  }
  int global_category(std::size_t k) const { return category_id(categories.at(k)); }

  void validate() const {
    net.validate();
    if (categories.size() != net.num_categories)
      throw ConfigError("model has " + std::to_string(categories.size()) + " categories but the network predicts " +
                        std::to_string(net.num_categories));
    if (mean_sizes.size() != categories.size()) throw ConfigError("one mean size per category is required");
    for (const auto& c : categories)
      if (category_id(c) < 0) throw ConfigError("unknown category '" + c + "'");
  }
};

/// Builds a spec whose categories are the named entries of `sizes`, in order.
inline ModelSpec make_model_spec(NetConfig net, const std::vector<std::pair<std::string, MeanSize>>& sizes,
                                 std::string stage = "detect") {
  ModelSpec s;
  for (const auto& [name, m] : sizes) {
    s.categories.push_back(name);
    s.mean_sizes.push_back(m);
  }
  net.num_categories = s.categories.size();
  s.net = std::move(net);
  s.stage = std::move(stage);
  s.validate();
  return s;
}

template <class T>
struct Model {
  ModelSpec spec;
  FConvNet<T> net;

  Model(ModelSpec s, Rng& rng) : spec(std::move(s)), net(spec.net, rng) {}
  Model(ModelSpec s, FConvNet<T> n) : spec(std::move(s)), net(std::move(n)) {}
};

template <class T>
CheckpointData model_to_checkpoint(const Model<T>& m) {
  std::vector<std::pair<std::string, MeanSize>> sizes;
  for (std::size_t k = 0; k < m.spec.categories.size(); ++k) sizes.push_back({m.spec.categories[k], m.spec.mean_sizes[k]});
  return model_checkpoint(m.net, {{"model.stage", m.spec.stage}, {"anchors.mean_sizes", format_mean_sizes(sizes)}});
}

template <class T>
Model<T> model_from_checkpoint_data(const CheckpointData& ck) {
  const auto stage = ck.meta.find("model.stage");
  const auto sizes = ck.meta.find("anchors.mean_sizes");
  if (stage == ck.meta.end() || sizes == ck.meta.end()) throw MalformedFileError("checkpoint lacks model metadata");
  ModelSpec spec = make_model_spec(net_config_from_metadata(ck.meta), parse_mean_sizes(sizes->second), stage->second);
  return Model<T>(spec, model_from_checkpoint<T>(ck));
}

// ---------------------------------------------------------------------------
// Network examples.

/// One frustum (or refinement crop) ready for the network: points grouped into slabs at every
/// resolution, anchors at the output positions, and the ground truths in the same frame.
struct FrustumExample {
  FrustumFrame frame;
  std::vector<FrustumSequence> seqs;
  std::vector<float> intensities;  // per point of seqs[*].points
  AnchorSet anchors;
  std::vector<GtBox> gts;
  std::size_t raw_points = 0;  // points inside the region before sampling
};

inline FrustumExample make_example(std::vector<Vec3> frame_points, std::vector<float> intensities,
                                   const FrustumFrame& frame, const std::vector<SlabResolution>& ladder,
                                   const DepthRange& range, std::vector<MeanSize> sizes, std::size_t bins) {
  FrustumExample ex;
  ex.frame = frame;
  ex.seqs = multi_resolution_sequences_in_frame(frame_points, frame, ladder, range);
  ex.intensities = std::move(intensities);
  const std::size_t len = ex.seqs[0].length;
  ex.anchors = build_anchors(output_centroids(ladder[0], range, len, len / 2), std::move(sizes), bins);
  return ex;
}

/// Labels of the spec's categories, expressed in `frame` and passed through `aug`.
inline std::vector<GtBox> frame_gts(std::span<const Label> labels, const ModelSpec& spec, const FrustumFrame& frame,
                                    const PointAugmentation& aug = {}) {
  std::vector<GtBox> out;
  for (const auto& l : labels) {
    const int k = spec.index_of(l.category);
    if (l.category < 0 || k < 0) continue;
    out.push_back({aug.apply(frame.box_to_frame(l.box)), static_cast<std::size_t>(k)});
  }
  return out;
}

/// Camera-rect cloud of a scene.
inline PointCloud rect_cloud(const SceneSample& s) {
  return s.cloud.frame == CloudFrame::camera_rect ? s.cloud : sensor_to_rect(s.cloud, s.calib);
}

/// First-stage example for one 2D proposal. With `aug`, the proposal is jittered and the
/// points flipped/shifted (labels follow).
inline FrustumExample frustum_example(const PointCloud& rect, const CameraCalib& calib, const RegionProposal2D& proposal,
                                      const ModelSpec& spec, std::size_t n_points, Rng& rng,
                                      const AugmentConfig* aug = nullptr, const std::vector<Label>* labels = nullptr) {
  const RegionProposal2D prop = aug ? augment_proposal(proposal, rng, *aug) : proposal;
  const FrustumFrame frame = frustum_frame(prop, calib);
  const std::vector<std::size_t> idx = points_in_proposal(rect, calib, prop);
  std::vector<Vec3> pts;
  std::vector<float> inten;
  if (!idx.empty()) {
    for (std::size_t i : sample_fixed(idx, n_points, rng)) {
      pts.push_back(frame.to_frame(rect.points[i]));
      inten.push_back(rect.intensities.empty() ? 0.0f : rect.intensities[i]);
    }
  }
  const PointAugmentation pa = aug ? draw_point_augmentation(rng, *aug) : PointAugmentation{};
  pa.apply_in_place(pts);
  FrustumExample ex = make_example(std::move(pts), std::move(inten), frame, spec.net.resolutions, spec.net.range,
                                   spec.mean_sizes, spec.net.yaw_bins);
  ex.raw_points = idx.size();
  if (labels) ex.gts = frame_gts(*labels, spec, frame, pa);
  return ex;
}

struct RefineConfig {
  double expand = 1.2;
  std::size_t min_points = 5;
  std::size_t points = 512;
  // Box perturbation used to synthesize first-stage inputs when training the refiner.
  double jitter_center = 0.1;  // fraction of the box size
  double jitter_size = 0.1;    // relative
  double jitter_yaw = 0.2;     // radians
};

/// Normalized frame of Fig. 5: origin at the box center, box length axis along +z.
inline FrustumFrame refine_frame(const OrientedBox3D& box) {
  return FrustumFrame::from_angles(-(box.yaw + 0.5 * kPi), 0.0, box.center);
}

/// Slab ladder of a refinement crop: the depth range spans the expanded length and the
/// strides scale with it so that the slab counts match the refinement network.
inline std::pair<std::vector<SlabResolution>, DepthRange> refine_ladder(const OrientedBox3D& box, const NetConfig& net,
                                                                        double expand) {
  const double half = 0.5 * expand * box.l;
  const DepthRange range{-half, half};
  const double s0 = 2.0 * half / static_cast<double>(net.length());
  const double ratio = net.resolutions[0].height / net.resolutions[0].stride;
  return {doubling_resolutions(s0, ratio * s0, net.resolutions.size()), range};
}

/// Refinement example around a first-stage (camera-rect) box. Anchors take the box's own size
/// so zero offsets at the center position reproduce the input box.
inline FrustumExample refine_example(const PointCloud& rect, const OrientedBox3D& box, const ModelSpec& spec,
                                     const RefineConfig& cfg, Rng& rng, const std::vector<Label>* labels = nullptr) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < rect.size(); ++i)
    if (point_in_box(rect.points[i], box, cfg.expand)) idx.push_back(i);
  const FrustumFrame frame = refine_frame(box);
  std::vector<Vec3> pts;
  std::vector<float> inten;
  if (!idx.empty()) {
    for (std::size_t i : sample_fixed(idx, cfg.points, rng)) {
      pts.push_back(frame.to_frame(rect.points[i]));
      inten.push_back(rect.intensities.empty() ? 0.0f : rect.intensities[i]);
    }
  }
  const auto [ladder, range] = refine_ladder(box, spec.net, cfg.expand);
  std::vector<MeanSize> sizes(spec.categories.size(), MeanSize{box.l, box.w, box.h});
  FrustumExample ex = make_example(std::move(pts), std::move(inten), frame, ladder, range, std::move(sizes),
                                   spec.net.yaw_bins);
  ex.raw_points = idx.size();
  if (labels) ex.gts = frame_gts(*labels, spec, frame);
  return ex;
}

/// Perturbed copy of a ground-truth box, standing in for a first-stage estimate.
inline OrientedBox3D jitter_box(const OrientedBox3D& b, const RefineConfig& cfg, Rng& rng) {
  const Vec3 local{uniform(rng, -cfg.jitter_center, cfg.jitter_center) * b.l,
                   uniform(rng, -cfg.jitter_center, cfg.jitter_center) * b.h,
                   uniform(rng, -cfg.jitter_center, cfg.jitter_center) * b.w};
  const double l = b.l * (1.0 + uniform(rng, -cfg.jitter_size, cfg.jitter_size));
  const double w = b.w * (1.0 + uniform(rng, -cfg.jitter_size, cfg.jitter_size));
  const double h = b.h * (1.0 + uniform(rng, -cfg.jitter_size, cfg.jitter_size));
  const double yaw = b.yaw + uniform(rng, -cfg.jitter_yaw, cfg.jitter_yaw);
  return OrientedBox3D(b.center + b.rotation() * local, l, w, h, yaw);
}

template <class T>
NetInput<T> make_net_input(std::span<const FrustumExample* const> batch, const NetConfig& cfg) {
  NetInput<T> in;
  in.batch = batch.size();
  std::vector<const std::vector<float>*> inten;
  for (const auto* ex : batch) inten.push_back(&ex->intensities);
  for (std::size_t r = 0; r < cfg.levels(); ++r) {
    std::vector<const FrustumSequence*> seqs;
    for (const auto* ex : batch) seqs.push_back(&ex->seqs.at(r));
    in.levels.push_back(make_level_input<T>(seqs, cfg.use_intensity, inten));
  }
  return in;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 50;
  std::size_t max_steps = 0;  // 0 = no cap
  double lr = 1e-3;
  std::size_t lr_decay_every = 20;  // epochs
  double lr_decay = 0.1;
  AdamConfig adam{};
  std::size_t points = 1024;
  bool augment = true;
  AugmentConfig augmentation{};
  LossConfig loss{};
};

struct TrainLog {
  std::vector<double> step_loss;
  std::vector<double> epoch_loss;  // mean over the epoch's steps
  std::size_t steps = 0;
  std::size_t skipped_batches = 0;
};

/// Generic loop: `make(item, rng)` builds the example for one training item (with labels).
/// Items with no points are dropped from their batch; an empty batch is skipped with a warning.
template <class T>
TrainLog train_loop(Model<T>& model, std::size_t items,
                    const std::function<FrustumExample(std::size_t, Rng&)>& make, const TrainConfig& cfg, Rng& rng,
                    std::ostream* log = nullptr) {
  TrainLog out;
  if (cfg.batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  const StepSchedule sched{cfg.lr, cfg.lr_decay_every, cfg.lr_decay};
  AdamConfig ac = cfg.adam;
  ac.lr = cfg.lr;
  Adam<T> opt(model.net.parameters(), ac);
  std::vector<std::size_t> order(items);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_steps && out.steps >= cfg.max_steps) break;
    for (std::size_t i = 0; i < items; ++i) order[i] = i;
    for (std::size_t i = items; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    opt.set_lr(sched.at(epoch));
    double epoch_sum = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < items; start += cfg.batch_size) {
      if (cfg.max_steps && out.steps >= cfg.max_steps) break;
      std::vector<FrustumExample> batch;
      for (std::size_t j = start; j < std::min(items, start + cfg.batch_size); ++j) {
        FrustumExample ex = make(order[j], rng);
        if (ex.raw_points > 0) batch.push_back(std::move(ex));
      }
      if (batch.empty()) {
        ++out.skipped_batches;
        if (log) *log << "warning: skipped empty batch at epoch " << epoch << "\n";
        continue;
      }
      std::vector<const FrustumExample*> ptrs;
      std::vector<SampleTargets> targets;
      for (const auto& ex : batch) {
        ptrs.push_back(&ex);
        targets.push_back({ex.anchors, ex.gts, assign_targets(ex.anchors, ex.gts, cfg.loss.shrink_ratio)});
      }
      const NetInput<T> in = make_net_input<T>(ptrs, model.spec.net);
      Tape<T> tape;
      for (auto& p : model.net.parameters()) {
        Tensor<T> t = p.tensor;
        tape.watch(t);
      }
      const HeaderOutput<T> outp = model.net.forward(in, Mode::train);
      const LossBreakdown<T> loss = total_loss(outp, std::span<const SampleTargets>(targets), cfg.loss);
      tape.backward(loss.total);
      tape.release();
      opt.step();
      const double v = static_cast<double>(loss.total.item());
      out.step_loss.push_back(v);
      epoch_sum += v;
      ++epoch_steps;
      ++out.steps;
    }
    if (epoch_steps) {
      out.epoch_loss.push_back(epoch_sum / static_cast<double>(epoch_steps));
      if (log)
        *log << "epoch " << epoch << " steps " << out.steps << " lr " << opt.lr() << " loss "
             << detail::format_fixed(out.epoch_loss.back(), 6) << "\n";
    }
  }
  return out;
}

/// First stage: one item per labeled (scene, proposal) pair.
template <class T>
TrainLog train_detector(Model<T>& model, const std::vector<SceneSample>& scenes, const TrainConfig& cfg, Rng& rng,
                        std::ostream* log = nullptr) {
  std::vector<PointCloud> rects;
  std::vector<std::pair<std::size_t, std::size_t>> items;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    rects.push_back(rect_cloud(scenes[s]));
    if (!scenes[s].labels) continue;
    for (std::size_t p = 0; p < scenes[s].proposals.size(); ++p) items.push_back({s, p});
  }
  const AugmentConfig* aug = cfg.augment ? &cfg.augmentation : nullptr;
  auto make = [&](std::size_t i, Rng& r) {
    const auto [s, p] = items[i];
    return frustum_example(rects[s], scenes[s].calib, scenes[s].proposals[p], model.spec, cfg.points, r, aug,
                           &*scenes[s].labels);
  };
  return train_loop<T>(model, items.size(), make, cfg, rng, log);
}

/// Refinement stage: one item per labeled object of a model category, cropped around a
/// jittered copy of its box.
template <class T>
TrainLog train_refiner(Model<T>& model, const std::vector<SceneSample>& scenes, const TrainConfig& cfg,
                       const RefineConfig& rcfg, Rng& rng, std::ostream* log = nullptr) {
  std::vector<PointCloud> rects;
  std::vector<std::pair<std::size_t, std::size_t>> items;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    rects.push_back(rect_cloud(scenes[s]));
    if (!scenes[s].labels) continue;
    for (std::size_t j = 0; j < scenes[s].labels->size(); ++j)
      if (model.spec.index_of((*scenes[s].labels)[j].category) >= 0) items.push_back({s, j});
  }
  auto make = [&](std::size_t i, Rng& r) {
    const auto [s, j] = items[i];
    const OrientedBox3D input = jitter_box((*scenes[s].labels)[j].box, rcfg, r);
    return refine_example(rects[s], input, model.spec, rcfg, r, &*scenes[s].labels);
  };
  return train_loop<T>(model, items.size(), make, cfg, rng, log);
}

// ---------------------------------------------------------------------------
// Inference.

struct DetectionResult {
  std::string frame_id;
  int category = 0;  // global category id
  OrientedBox3D box;  // camera_rect
  double score_3d = 0.0;
  double score_2d = 0.0;
  double score_fused = 0.0;
  std::size_t proposal = 0;
};

struct InferConfig {
  double fg_threshold = 0.1;
  double nms_iou = 0.1;
  std::size_t points = 1024;
  std::size_t batch = 16;
  std::size_t workers = 1;
  std::uint64_t seed = 0;
};

/// Runs `fn(i)` for i in [0, n) on up to `workers` threads. Each index is handled by exactly
/// one call, so results written per index do not depend on the worker count.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Per-item generator, independent of how items are split over workers.
inline Rng item_rng(std::uint64_t seed, std::size_t scene, std::size_t item) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(scene), static_cast<std::uint32_t>(item)};
  return Rng(seq);
}

/// Eval-mode forward over `examples` in chunks of `batch`; empty examples get no output.
template <class T>
std::vector<std::optional<HeaderOutput<T>>> forward_examples(Model<T>& model, const std::vector<FrustumExample>& examples,
                                                             std::size_t batch, std::size_t workers) {
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < examples.size(); ++i)
    if (examples[i].raw_points > 0) live.push_back(i);
  batch = std::max<std::size_t>(1, batch);
  const std::size_t chunks = (live.size() + batch - 1) / batch;
  std::vector<std::optional<HeaderOutput<T>>> out(examples.size());
  parallel_for(chunks, workers, [&](std::size_t c) {
    std::vector<const FrustumExample*> ptrs;
    const std::size_t lo = c * batch, hi = std::min(live.size(), lo + batch);
    for (std::size_t j = lo; j < hi; ++j) ptrs.push_back(&examples[live[j]]);
    const HeaderOutput<T> o = model.net.forward(make_net_input<T>(ptrs, model.spec.net), Mode::eval);
    const std::size_t len = o.class_logits.dim(1), cls = o.class_logits.dim(2), reg = o.reg_offsets.dim(2);
    for (std::size_t j = lo; j < hi; ++j) {
      const std::size_t b = j - lo;
      auto take = [&](const Tensor<T>& t, std::size_t ch) {
        const auto v = t.values().subspan(b * len * ch, len * ch);
        return Tensor<T>(Shape{1, len, ch}, std::vector<T>(v.begin(), v.end()));
      };
      out[live[j]] = HeaderOutput<T>{take(o.class_logits, cls), take(o.reg_offsets, reg)};
    }
  });
  return out;
}

namespace detail {

/// Softmax of one position's logits, in double.
template <class T>
std::vector<double> position_probs(const Tensor<T>& logits, std::size_t pos) {
  const std::size_t c = logits.dim(2);
  std::vector<double> p(c);
  double mx = -1e300;
  for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(logits.values()[pos * c + j]));
  double z = 0.0;
  for (std::size_t j = 0; j < c; ++j) z += p[j] = std::exp(static_cast<double>(logits.values()[pos * c + j]) - mx);
  for (double& v : p) v /= z;
  return p;
}

template <class T>
BoxOffsets slot_offsets(const Tensor<T>& reg, std::size_t pos, std::size_t k, std::size_t bin, std::size_t bins) {
  const std::size_t ch = reg.dim(2);
  BoxOffsets o;
  const std::size_t base = pos * ch + (k * bins + bin) * 7;
  for (std::size_t j = 0; j < 7; ++j) o[j] = static_cast<double>(reg.values()[base + j]);
  return o;
}

/// Class-wise NMS over pooled detections, ranked by score_3d. Survivors keep rank order.
inline std::vector<DetectionResult> nms_detections(const std::vector<DetectionResult>& dets, double iou) {
  std::map<int, std::vector<std::size_t>> by_cat;
  for (std::size_t i = 0; i < dets.size(); ++i) by_cat[dets[i].category].push_back(i);
  std::vector<DetectionResult> out;
  for (const auto& [cat, ids] : by_cat) {
    std::vector<ScoredBox> sb;
    for (std::size_t i : ids) sb.push_back({dets[i].box, dets[i].score_3d});
    for (std::size_t k : nms_rotated(sb, iou)) out.push_back(dets[ids[k]]);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const DetectionResult& a, const DetectionResult& b) { return a.score_fused > b.score_fused; });
  return out;
}

}  // namespace detail

/// First-stage detections of one scene. `scene_index` only seeds the per-proposal sampling.
template <class T>
std::vector<DetectionResult> infer_scene(Model<T>& model, const SceneSample& scene, const InferConfig& cfg,
                                         std::size_t scene_index = 0) {
  const PointCloud rect = rect_cloud(scene);
  std::vector<FrustumExample> examples(scene.proposals.size());
  parallel_for(scene.proposals.size(), cfg.workers, [&](std::size_t p) {
    Rng rng = item_rng(cfg.seed, scene_index, p);
    examples[p] = frustum_example(rect, scene.calib, scene.proposals[p], model.spec, cfg.points, rng);
  });
  const auto outputs = forward_examples(model, examples, cfg.batch, cfg.workers);
  const std::size_t bins = model.spec.net.yaw_bins;
  std::vector<DetectionResult> cands;
  for (std::size_t p = 0; p < examples.size(); ++p) {
    if (!outputs[p]) continue;
    const auto& o = *outputs[p];
    const FrustumExample& ex = examples[p];
    for (std::size_t pos = 0; pos < ex.anchors.positions(); ++pos) {
      const std::vector<double> prob = detail::position_probs(o.class_logits, pos);
      if (!(1.0 - prob[0] > cfg.fg_threshold)) continue;
      std::size_t k = 0;
      for (std::size_t j = 1; j < model.spec.categories.size(); ++j)
        if (prob[j + 1] > prob[k + 1]) k = j;
      for (std::size_t bin = 0; bin < bins; ++bin) {
        const DecodedBox d = decode(detail::slot_offsets(o.reg_offsets, pos, k, bin, bins), ex.anchors.anchor(pos, k, bin));
        DetectionResult det;
        det.frame_id = scene.frame_id;
        det.category = model.spec.global_category(k);
        det.box = ex.frame.box_from_frame(d.box);
        det.score_3d = prob[k + 1];
        det.score_2d = scene.proposals[p].score_2d;
        det.score_fused = det.score_2d + det.score_3d;
        det.proposal = p;
        cands.push_back(det);
      }
    }
  }
  return detail::nms_detections(cands, cfg.nms_iou);
}

/// Second stage. Each detection is re-estimated inside its expanded, pose-normalized box: the
/// output is the box decoded at the position with the highest category probability (ties go to
/// the position nearest the box center) from the yaw bin nearest the input orientation.
/// Detections with fewer than `min_points` points, or of a category the refiner lacks, pass
/// through unchanged.
template <class T>
std::vector<DetectionResult> refine_scene(Model<T>& refiner, const SceneSample& scene,
                                          const std::vector<DetectionResult>& dets, const RefineConfig& rcfg,
                                          const InferConfig& cfg, std::size_t scene_index = 0) {
  const PointCloud rect = rect_cloud(scene);
  std::vector<FrustumExample> examples(dets.size());
  parallel_for(dets.size(), cfg.workers, [&](std::size_t i) {
    if (refiner.spec.index_of(dets[i].category) < 0) return;
    Rng rng = item_rng(cfg.seed ^ 0x5eed5eedULL, scene_index, i);
    examples[i] = refine_example(rect, dets[i].box, refiner.spec, rcfg, rng);
    if (examples[i].raw_points < rcfg.min_points) examples[i].raw_points = 0;
  });
  const auto outputs = forward_examples(refiner, examples, cfg.batch, cfg.workers);
  const std::size_t bins = refiner.spec.net.yaw_bins;
  std::vector<DetectionResult> out;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (!outputs[i]) {
      out.push_back(dets[i]);
      continue;
    }
    const auto& o = *outputs[i];
    const FrustumExample& ex = examples[i];
    const std::size_t k = static_cast<std::size_t>(refiner.spec.index_of(dets[i].category));
    std::size_t best = 0;
    double best_p = -1.0;
    for (std::size_t pos = 0; pos < ex.anchors.positions(); ++pos) {
      const double p = detail::position_probs(o.class_logits, pos)[k + 1];
      if (p > best_p || (p == best_p && std::abs(ex.anchors.center(pos).z) < std::abs(ex.anchors.center(best).z))) {
        best = pos;
        best_p = p;
      }
    }
    const std::size_t bin = nearest_yaw_bin(ex.frame.box_to_frame(dets[i].box).yaw, bins);
    const DecodedBox d = decode(detail::slot_offsets(o.reg_offsets, best, k, bin, bins), ex.anchors.anchor(best, k, bin));
    DetectionResult r = dets[i];
    r.box = ex.frame.box_from_frame(d.box);
    r.score_3d = best_p;
    r.score_fused = r.score_2d + r.score_3d;
    out.push_back(r);
  }
  return detail::nms_detections(out, cfg.nms_iou);
}

// ---------------------------------------------------------------------------
// Detection files: "frame_id category x y z l w h yaw score_3d score_2d score_fused".

inline std::string serialize_detections(std::span<const DetectionResult> dets) {
  std::string out;
  for (const auto& d : dets) {
    const auto& b = d.box;
    out += d.frame_id + " " + category_name(d.category);
    for (double v : {b.center.x, b.center.y, b.center.z, b.l, b.w, b.h, b.yaw, d.score_3d, d.score_2d, d.score_fused})
      out += " " + detail::format_fixed(v, 6);
    out += "\n";
  }
  return out;
}

inline std::vector<DetectionResult> parse_detections(const std::string& text) {
  std::vector<DetectionResult> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = detail::split_ws(line);
    if (t.empty() || t[0][0] == '#') continue;
    const std::string ctx = "detections line " + std::to_string(lineno);
    if (t.size() != 12) throw MalformedFileError(ctx + ": expected 12 fields, got " + std::to_string(t.size()));
    DetectionResult d;
    d.frame_id = t[0];
    d.category = category_id(t[1]);
    if (d.category < 0) throw MalformedFileError(ctx + ": unknown category '" + t[1] + "'");
    double v[10];
    for (int i = 0; i < 10; ++i) v[i] = detail::parse_double(t[2 + static_cast<std::size_t>(i)], ctx);
    if (!(v[3] > 0 && v[4] > 0 && v[5] > 0)) throw MalformedFileError(ctx + ": non-positive box size");
    d.box = OrientedBox3D({v[0], v[1], v[2]}, v[3], v[4], v[5], v[6]);
    d.score_3d = v[7];
    d.score_2d = v[8];
    d.score_fused = v[9];
    out.push_back(d);
  }
  return out;
}

inline void save_detections(const std::filesystem::path& path, std::span<const DetectionResult> dets) {
  detail::write_text(path, serialize_detections(dets));
}

inline std::vector<DetectionResult> load_detections(const std::filesystem::path& path) {
  return parse_detections(detail::read_text(path));
}

// ---------------------------------------------------------------------------
// Viewer export: Wavefront OBJ with the points as vertices and each box as 12 line elements.

inline std::string export_obj(const PointCloud& rect, std::span<const OrientedBox3D> boxes,
                              const std::vector<std::string>& box_names = {}) {
  std::ostringstream s;
  s << "# points " << rect.size() << " boxes " << boxes.size() << "\n";
  auto v = [&](const Vec3& p) {
    s << "v " << detail::format_fixed(p.x, 4) << ' ' << detail::format_fixed(p.y, 4) << ' '
      << detail::format_fixed(p.z, 4) << "\n";
  };
  s << "o points\n";
  for (const Vec3& p : rect.points) v(p);
  for (std::size_t i = 0; i < rect.size(); ++i) s << "p " << i + 1 << "\n";
  static constexpr int edges[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                       {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};
  std::size_t base = rect.size() + 1;
  for (std::size_t b = 0; b < boxes.size(); ++b) {
    s << "o " << (b < box_names.size() ? box_names[b] : "box" + std::to_string(b)) << "\n";
    for (const Vec3& c : corners(boxes[b])) v(c);
    for (const auto& e : edges) s << "l " << base + static_cast<std::size_t>(e[0]) << ' ' << base + static_cast<std::size_t>(e[1]) << "\n";
    base += 8;
  }
  return s.str();
}

}  // namespace fconv
