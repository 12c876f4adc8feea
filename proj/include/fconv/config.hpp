#pragma once

// Flat key/value configuration: a registry of known keys with defaults, a "key = value" file
// format, command-line overrides, and conversion into the typed settings of each stage.
//
// Resolution order: registry defaults < config file < --preset / --seed / ... flags < key=value.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fconv/eval.hpp"
#include "fconv/kitti_io.hpp"
#include "fconv/net.hpp"
#include "fconv/pipeline.hpp"
#include "fconv/synthetic.hpp"

namespace fconv {

enum class KeyType { text, real, count, boolean, choice };

struct KeyInfo {
  std::string key;
  KeyType type;
  std::string fallback;
  std::vector<std::string> choices{};  // KeyType::choice only
};

inline const std::vector<KeyInfo>& config_registry() {
  static const std::vector<KeyInfo> keys = {
      {"seed", KeyType::count, "0"},
      {"workers", KeyType::count, "1"},

      {"net.preset", KeyType::choice, "kitti-4block", preset_names()},
      {"net.widths", KeyType::text, ""},           // empty: from preset
      {"net.deconv_filters", KeyType::count, "0"},  // 0: from preset
      {"net.pointnet_hidden", KeyType::text, ""},
      {"net.stride0", KeyType::real, "0"},  // 0: from preset
      {"net.height0", KeyType::real, "0"},  // 0: 2 * stride0
      {"net.depth_min", KeyType::text, ""},
      {"net.depth_max", KeyType::text, ""},
      {"net.yaw_bins", KeyType::count, "0"},  // 0: from preset
      {"net.multi_resolution", KeyType::boolean, "true"},
      {"net.use_intensity", KeyType::boolean, "false"},
      {"anchors.mean_sizes", KeyType::text, "Car:3.9,1.6,1.56"},

      {"data.points_per_proposal", KeyType::count, "1024"},
      {"augment.enabled", KeyType::boolean, "true"},
      {"augment.jitter_frac", KeyType::real, "0.1"},
      {"augment.scale_frac", KeyType::real, "0.1"},
      {"augment.flip_prob", KeyType::real, "0.5"},
      {"augment.shift_max", KeyType::real, "1"},

      {"loss.shrink_ratio", KeyType::real, "0.5"},
      {"loss.focal_gamma", KeyType::real, "2"},
      {"loss.focal_alpha", KeyType::real, "0.25"},
      {"loss.lambda_reg", KeyType::real, "1"},
      {"loss.lambda_corner", KeyType::real, "10"},
      {"loss.smooth_l1_delta", KeyType::real, "1"},
      {"loss.yaw_bins_supervised", KeyType::choice, "all", {"all", "matched"}},

      {"train.batch_size", KeyType::count, "32"},
      {"train.epochs", KeyType::count, "50"},
      {"train.max_steps", KeyType::count, "0"},
      {"train.lr", KeyType::real, "0.001"},
      {"train.lr_decay_every", KeyType::count, "20"},
      {"train.lr_decay", KeyType::real, "0.1"},
      {"train.weight_decay", KeyType::real, "0.0001"},
      {"train.adam_beta1", KeyType::real, "0.9"},
      {"train.adam_beta2", KeyType::real, "0.999"},
      {"train.adam_eps", KeyType::real, "1e-08"},

      {"infer.fg_threshold", KeyType::real, "0.1"},
      {"infer.nms_iou", KeyType::real, "0.1"},
      {"infer.batch", KeyType::count, "16"},

      {"refine.expand", KeyType::real, "1.2"},
      {"refine.min_points", KeyType::count, "5"},
      {"refine.points", KeyType::count, "512"},
      {"refine.length", KeyType::count, "32"},
      {"refine.widths", KeyType::text, "32,32,64,64"},
      {"refine.deconv_filters", KeyType::count, "32"},
      {"refine.pointnet_hidden", KeyType::text, "32,64"},
      {"refine.yaw_bins", KeyType::count, "2"},
      {"refine.jitter_center", KeyType::real, "0.1"},
      {"refine.jitter_size", KeyType::real, "0.1"},
      {"refine.jitter_yaw", KeyType::real, "0.2"},

      {"synth.count", KeyType::count, "10"},
      {"synth.templates", KeyType::text, "Car:3.9,1.6,1.56"},
      {"synth.boxes_per_scene", KeyType::count, "3"},
      {"synth.depth_min", KeyType::real, "6"},
      {"synth.depth_max", KeyType::real, "28"},
      {"synth.size_jitter", KeyType::real, "0.05"},
      {"synth.points_per_box", KeyType::count, "400"},
      {"synth.clutter_points", KeyType::count, "300"},
      {"synth.noise_sigma", KeyType::real, "0.02"},
      {"synth.proposal_jitter", KeyType::real, "0"},

      {"eval.iou.Car", KeyType::real, "0.7"},
      {"eval.iou.Pedestrian", KeyType::real, "0.5"},
      {"eval.iou.Cyclist", KeyType::real, "0.5"},
      {"eval.recall_points", KeyType::choice, "11", {"11", "40"}},
  };
  return keys;
}

class Config {
 public:
  Config() {
    for (const auto& k : config_registry()) values_[k.key] = k.fallback;
  }

  void set(const std::string& key, const std::string& value) {
    const KeyInfo& info = lookup(key);
    check(info, value);
    values_[key] = value;
  }

  /// "key=value".
  void apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + kv + "' is not key=value");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }

  /// "key = value" lines; blank lines and '#' comments are skipped.
  void load_text(const std::string& text, const std::string& origin = "config") {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      if (trim(line).empty()) continue;
      if (line.find('=') == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      apply_override(line);
    }
  }

  void load_file(const std::filesystem::path& path) { load_text(detail::read_text(path), path.string()); }

  const std::string& get(const std::string& key) const {
    lookup(key);
    return values_.at(key);
  }
  double real(const std::string& key) const { return std::stod(get(key)); }
  std::size_t count(const std::string& key) const { return static_cast<std::size_t>(std::stoull(get(key))); }
  bool flag(const std::string& key) const {
    const std::string& v = get(key);
    return v == "true" || v == "1";
  }

  /// Resolved configuration in registry order, one "key = value" per line.
  std::string dump() const {
    std::string out;
    for (const auto& k : config_registry()) out += k.key + " = " + values_.at(k.key) + "\n";
    return out;
  }

  static std::string valid_keys() {
    std::string out;
    for (const auto& k : config_registry()) out += (out.empty() ? "" : ", ") + k.key;
    return out;
  }

 private:
  static std::string trim(std::string s) {
    s.erase(0, s.find_first_not_of(" \t\r"));
    s.erase(s.find_last_not_of(" \t\r") + 1);
    return s;
  }

  static const KeyInfo& lookup(const std::string& key) {
    for (const auto& k : config_registry())
      if (k.key == key) return k;
    throw ConfigError("unknown config key '" + key + "'; valid keys: " + valid_keys());
  }

  static void check(const KeyInfo& info, const std::string& v) {
    const std::string bad = "config key " + info.key + ": ";
    switch (info.type) {
      case KeyType::text:
        return;
      case KeyType::real: {
        std::size_t used = 0;
        double d = 0.0;
        try {
          d = std::stod(v, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used != v.size() || v.empty() || !std::isfinite(d)) throw ConfigError(bad + "'" + v + "' is not a number");
        return;
      }
      case KeyType::count:
        if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
          throw ConfigError(bad + "'" + v + "' is not a non-negative integer");
        return;
      case KeyType::boolean:
        if (v != "true" && v != "false" && v != "1" && v != "0") throw ConfigError(bad + "'" + v + "' is not a boolean");
        return;
      case KeyType::choice:
        if (std::find(info.choices.begin(), info.choices.end(), v) == info.choices.end()) {
          std::string c;
          for (const auto& x : info.choices) c += (c.empty() ? "" : ", ") + x;
          throw ConfigError(bad + "'" + v + "' is not one of " + c);
        }
        return;
    }
  }

  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Typed settings.

namespace detail {

inline std::vector<std::size_t> size_list(const Config& c, const std::string& key) {
  try {
    return parse_sizes(c.get(key));
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": expected a comma-separated list of integers");
  }
}

}  // namespace detail

inline NetConfig net_config(const Config& c) {
  NetConfig n = make_preset(c.get("net.preset"));
  if (!c.get("net.widths").empty()) n.widths = detail::size_list(c, "net.widths");
  if (c.count("net.deconv_filters")) n.deconv_filters = c.count("net.deconv_filters");
  if (!c.get("net.pointnet_hidden").empty()) n.pointnet_hidden = detail::size_list(c, "net.pointnet_hidden");
  double s0 = n.resolutions[0].stride, h0 = n.resolutions[0].height;
  if (c.real("net.stride0") > 0) {
    s0 = c.real("net.stride0");
    h0 = 2.0 * s0;
  }
  if (c.real("net.height0") > 0) h0 = c.real("net.height0");
  n.resolutions = doubling_resolutions(s0, h0, n.widths.size());
  if (!c.get("net.depth_min").empty()) n.range.min = detail::parse_double(c.get("net.depth_min"), "net.depth_min");
  if (!c.get("net.depth_max").empty()) n.range.max = detail::parse_double(c.get("net.depth_max"), "net.depth_max");
  if (c.count("net.yaw_bins")) n.yaw_bins = c.count("net.yaw_bins");
  n.multi_resolution = c.flag("net.multi_resolution");
  n.use_intensity = c.flag("net.use_intensity");
  n.num_categories = parse_mean_sizes(c.get("anchors.mean_sizes")).size();
  n.validate();
  return n;
}

inline ModelSpec detector_spec(const Config& c) {
  return make_model_spec(net_config(c), parse_mean_sizes(c.get("anchors.mean_sizes")), "detect");
}

/// The refinement network uses a nominal unit-stride ladder; actual strides are rescaled per box.
inline ModelSpec refiner_spec(const Config& c) {
  NetConfig n;
  n.preset = "refine";
  n.widths = detail::size_list(c, "refine.widths");
  n.pointnet_hidden = detail::size_list(c, "refine.pointnet_hidden");
  n.deconv_filters = c.count("refine.deconv_filters");
  n.resolutions = doubling_resolutions(1.0, 2.0, n.widths.size());
  n.range = {0.0, static_cast<double>(c.count("refine.length"))};
  n.yaw_bins = c.count("refine.yaw_bins");
  n.use_intensity = c.flag("net.use_intensity");
  n.multi_resolution = c.flag("net.multi_resolution");
  return make_model_spec(n, parse_mean_sizes(c.get("anchors.mean_sizes")), "refine");
}

inline LossConfig loss_config(const Config& c) {
  LossConfig l;
  l.shrink_ratio = c.real("loss.shrink_ratio");
  l.focal_gamma = c.real("loss.focal_gamma");
  l.focal_alpha = c.real("loss.focal_alpha");
  l.lambda_reg = c.real("loss.lambda_reg");
  l.lambda_corner = c.real("loss.lambda_corner");
  l.smooth_l1_delta = c.real("loss.smooth_l1_delta");
  l.bins = c.get("loss.yaw_bins_supervised") == "matched" ? BinSupervision::matched : BinSupervision::all;
  if (!(l.shrink_ratio > 0.0 && l.shrink_ratio <= 1.0)) throw ConfigError("loss.shrink_ratio must be in (0, 1]");
  return l;
}

inline TrainConfig train_config(const Config& c) {
  TrainConfig t;
  t.batch_size = c.count("train.batch_size");
  t.epochs = c.count("train.epochs");
  t.max_steps = c.count("train.max_steps");
  t.lr = c.real("train.lr");
  t.lr_decay_every = c.count("train.lr_decay_every");
  t.lr_decay = c.real("train.lr_decay");
  t.adam.weight_decay = c.real("train.weight_decay");
  t.adam.beta1 = c.real("train.adam_beta1");
  t.adam.beta2 = c.real("train.adam_beta2");
  t.adam.eps = c.real("train.adam_eps");
  t.points = c.count("data.points_per_proposal");
  t.augment = c.flag("augment.enabled");
  t.augmentation = {c.real("augment.jitter_frac"), c.real("augment.scale_frac"), c.real("augment.flip_prob"),
                    c.real("augment.shift_max")};
  t.loss = loss_config(c);
  if (t.batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (t.points == 0) throw ConfigError("data.points_per_proposal must be >= 1");
  return t;
}

/// Training settings for the refiner: same optimizer and losses, refinement point count.
inline TrainConfig refine_train_config(const Config& c) {
  TrainConfig t = train_config(c);
  t.points = c.count("refine.points");
  t.augment = false;
  return t;
}

inline InferConfig infer_config(const Config& c) {
  InferConfig i;
  i.fg_threshold = c.real("infer.fg_threshold");
  i.nms_iou = c.real("infer.nms_iou");
  i.points = c.count("data.points_per_proposal");
  i.batch = c.count("infer.batch");
  i.workers = std::max<std::size_t>(1, c.count("workers"));
  i.seed = c.count("seed");
  return i;
}

inline RefineConfig refine_config(const Config& c) {
  RefineConfig r;
  r.expand = c.real("refine.expand");
  r.min_points = c.count("refine.min_points");
  r.points = c.count("refine.points");
  r.jitter_center = c.real("refine.jitter_center");
  r.jitter_size = c.real("refine.jitter_size");
  r.jitter_yaw = c.real("refine.jitter_yaw");
  if (!(r.expand >= 1.0)) throw ConfigError("refine.expand must be >= 1");
  if (r.points == 0) throw ConfigError("refine.points must be >= 1");
  return r;
}

inline SyntheticConfig synthetic_config(const Config& c) {
  SyntheticConfig s;
  s.templates.clear();
  for (const auto& [name, size] : parse_mean_sizes(c.get("synth.templates"))) {
    if (category_id(name) < 0) throw ConfigError("synth.templates: unknown category '" + name + "'");
    s.templates.push_back({name, size});
  }
  s.boxes_per_scene = c.count("synth.boxes_per_scene");
  s.depth_min = c.real("synth.depth_min");
  s.depth_max = c.real("synth.depth_max");
  s.size_jitter = c.real("synth.size_jitter");
  s.points_per_box = c.count("synth.points_per_box");
  s.clutter_points = c.count("synth.clutter_points");
  s.noise_sigma = c.real("synth.noise_sigma");
  if (!(s.depth_max > s.depth_min && s.depth_min > 1.0)) throw ConfigError("synth depth range must satisfy 1 < min < max");
  return s;
}

inline EvalConfig eval_config(const Config& c) {
  EvalConfig e;
  for (const auto& name : category_names()) e.iou[name] = c.real("eval.iou." + name);
  e.recall_points = c.count("eval.recall_points");
  e.validate();
  return e;
}

}  // namespace fconv
