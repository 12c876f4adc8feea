#pragma once

// F-ConvNet: per-slab PointNet streams, a 1D fully convolutional ladder over the slab axis
// with transposed-conv fusion, optional multi-resolution merges, and a two-branch header.
//
// All feature maps are channel-last [batch, slabs, channels].

#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fconv/geometry.hpp"
#include "fconv/random.hpp"
#include "fconv/tensor.hpp"

namespace fconv {

struct ConvSpec {
  std::size_t kernel = 3, filters = 0, stride = 1, pad = 1;
};

struct FcnConfig {
  std::size_t input_width = 0;              // d_0
  std::vector<std::vector<ConvSpec>> blocks;  // Block1..BlockN
  std::vector<ConvSpec> deconvs;            // for Block2..BlockN
  std::vector<ConvSpec> merges;             // for Block2..BlockN (multi-resolution only)
  std::size_t length = 0;                   // L
  std::size_t output_length = 0;            // L~
};

struct NetConfig {
  std::string preset = "kitti-4block";
  std::vector<SlabResolution> resolutions;
  DepthRange range;
  std::vector<std::size_t> widths;  // d_r, also the width of Block r+1
  std::size_t deconv_filters = 256;
  std::vector<std::size_t> pointnet_hidden{64, 128};
  bool multi_resolution = true;
  bool use_intensity = false;
  std::size_t num_categories = 1;  // K
  std::size_t yaw_bins = 12;       // N
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;

  std::size_t input_channels() const { return use_intensity ? 4 : 3; }
  std::size_t length() const { return slab_count(resolutions.at(0), range); }
  std::size_t output_length() const { return length() / 2; }
  std::size_t levels() const { return multi_resolution ? widths.size() : 1; }
  std::size_t fused_width() const { return deconv_filters * (widths.size() - 1); }
  std::size_t reg_channels() const { return num_categories * yaw_bins * 7; }

  void validate() const {
    if (widths.size() < 2) throw ConfigError("net: need at least two FCN blocks");
    if (resolutions.size() != widths.size())
      throw ConfigError("net: " + std::to_string(resolutions.size()) + " resolutions for " +
                        std::to_string(widths.size()) + " blocks");
    validate_resolution_ladder(resolutions, range);
    if (length() % (std::size_t{1} << (widths.size() - 1)) != 0)
      throw ConfigError("net: L=" + std::to_string(length()) + " is not divisible by 2^(blocks-1)");
    if (pointnet_hidden.size() != 2) throw ConfigError("net: pointnet_hidden needs two widths");
    if (num_categories == 0 || yaw_bins == 0) throw ConfigError("net: K and N must be >= 1");
  }

  /// Block1 keeps the length; every later block halves it with a stride-2 conv and doubles
  /// the deconv kernel/stride so all deconv outputs land on L/2.
  FcnConfig fcn() const {
    FcnConfig f;
    f.input_width = widths[0];
    f.length = length();
    f.output_length = output_length();
    for (std::size_t b = 0; b < widths.size(); ++b) {
      if (b == 0) {
        f.blocks.push_back({{3, widths[0], 1, 1}});
        continue;
      }
      f.blocks.push_back({{3, widths[b], 2, 1}, {3, widths[b], 1, 1}});
      const std::size_t up = std::size_t{1} << (b - 1);
      f.deconvs.push_back({up, deconv_filters, up, 0});
      f.merges.push_back({1, widths[b], 1, 0});
    }
    return f;
  }
};

inline std::vector<SlabResolution> doubling_resolutions(double stride0, double height0, std::size_t count) {
  std::vector<SlabResolution> out;
  for (std::size_t r = 0; r < count; ++r) {
    const double f = static_cast<double>(std::size_t{1} << r);
    out.push_back({stride0 * f, height0 * f});
  }
  return out;
}

inline std::vector<std::string> preset_names() { return {"kitti-4block", "sunrgbd-5block", "desk", "toy"}; }

/// Named architectures. "kitti-4block" and "sunrgbd-5block" follow the published layer tables;
/// "desk" and "toy" are scaled-down ladders for CPU experiments and gradient checks.
inline NetConfig make_preset(const std::string& name) {
  NetConfig c;
  c.preset = name;
  if (name == "kitti-4block") {
    c.resolutions = doubling_resolutions(0.25, 0.5, 4);
    c.range = {0.0, 70.0};
    c.widths = {128, 128, 256, 512};
    c.deconv_filters = 256;
  } else if (name == "sunrgbd-5block") {
    c.resolutions = doubling_resolutions(0.1, 0.2, 5);
    c.range = {0.0, 8.0};
    c.widths = {64, 128, 256, 512, 512};
    c.deconv_filters = 256;
    c.num_categories = 10;
  } else if (name == "desk") {
    c.resolutions = doubling_resolutions(0.25, 0.5, 4);
    c.range = {0.0, 32.0};
    c.widths = {32, 32, 64, 64};
    c.deconv_filters = 32;
    c.pointnet_hidden = {32, 64};
  } else if (name == "toy") {
    c.resolutions = doubling_resolutions(1.0, 2.0, 4);
    c.range = {0.0, 8.0};
    c.widths = {16, 16, 16, 16};
    c.deconv_filters = 16;
    c.pointnet_hidden = {16, 16};
    c.yaw_bins = 4;
  } else {
    std::string valid;
    for (const auto& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (valid: " + valid + ")");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Serialization of the architecture into checkpoint metadata.

namespace detail {

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.push_back(static_cast<std::size_t>(std::stoull(tok)));
  return out;
}

}  // namespace detail

inline std::map<std::string, std::string> to_metadata(const NetConfig& c) {
  std::map<std::string, std::string> m;
  m["net.preset"] = c.preset;
  m["net.stride0"] = detail::format_exact(c.resolutions.at(0).stride);
  m["net.height0"] = detail::format_exact(c.resolutions.at(0).height);
  m["net.depth_min"] = detail::format_exact(c.range.min);
  m["net.depth_max"] = detail::format_exact(c.range.max);
  m["net.widths"] = detail::join_sizes(c.widths);
  m["net.deconv_filters"] = std::to_string(c.deconv_filters);
  m["net.pointnet_hidden"] = detail::join_sizes(c.pointnet_hidden);
  m["net.multi_resolution"] = c.multi_resolution ? "1" : "0";
  m["net.use_intensity"] = c.use_intensity ? "1" : "0";
  m["net.num_categories"] = std::to_string(c.num_categories);
  m["net.yaw_bins"] = std::to_string(c.yaw_bins);
  m["net.bn_momentum"] = detail::format_exact(c.bn_momentum);
  m["net.bn_eps"] = detail::format_exact(c.bn_eps);
  return m;
}

inline NetConfig net_config_from_metadata(const std::map<std::string, std::string>& m) {
  auto get = [&](const std::string& k) {
    const auto it = m.find(k);
    if (it == m.end()) throw MalformedFileError("checkpoint metadata lacks " + k);
    return it->second;
  };
  NetConfig c;
  c.preset = get("net.preset");
  c.widths = detail::parse_sizes(get("net.widths"));
  c.resolutions = doubling_resolutions(std::stod(get("net.stride0")), std::stod(get("net.height0")), c.widths.size());
  c.range = {std::stod(get("net.depth_min")), std::stod(get("net.depth_max"))};
  c.deconv_filters = std::stoull(get("net.deconv_filters"));
  c.pointnet_hidden = detail::parse_sizes(get("net.pointnet_hidden"));
  c.multi_resolution = get("net.multi_resolution") == "1";
  c.use_intensity = get("net.use_intensity") == "1";
  c.num_categories = std::stoull(get("net.num_categories"));
  c.yaw_bins = std::stoull(get("net.yaw_bins"));
  c.bn_momentum = std::stod(get("net.bn_momentum"));
  c.bn_eps = std::stod(get("net.bn_eps"));
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Network inputs.

/// Point-slab memberships of one resolution for a batch: one row per (point, slab) pair,
/// holding coordinates relative to the slab centroid. Row segment id = sample * L_r + slab.
template <class T>
struct LevelInput {
  Tensor<T> coords;  // [P, C]
  std::vector<std::uint32_t> segment;
  std::size_t batch = 0;
  std::size_t length = 0;  // L_r
};

template <class T>
LevelInput<T> make_level_input(std::span<const FrustumSequence* const> seqs, bool use_intensity,
                               std::span<const std::vector<float>* const> intensities = {}) {
  LevelInput<T> in;
  in.batch = seqs.size();
  in.length = seqs.empty() ? 0 : seqs[0]->length;
  const std::size_t ch = use_intensity ? 4 : 3;
  std::vector<T> vals;
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const FrustumSequence& s = *seqs[b];
    if (s.length != in.length) throw ShapeError("make_level_input: mixed slab counts in one batch");
    for (std::size_t t = 0; t < s.length; ++t) {
      const Vec3 c = s.centroids[t];
      for (std::uint32_t i : s.groups[t]) {
        const Vec3 p = s.points[i] - c;
        vals.push_back(static_cast<T>(p.x));
        vals.push_back(static_cast<T>(p.y));
        vals.push_back(static_cast<T>(p.z));
        if (use_intensity)
          vals.push_back(b < intensities.size() && intensities[b] ? static_cast<T>((*intensities[b])[i]) : T(0));
        in.segment.push_back(static_cast<std::uint32_t>(b * s.length + t));
      }
    }
  }
  const std::size_t rows = in.segment.size();
  in.coords = Tensor<T>(Shape{rows, ch}, std::move(vals));
  return in;
}

template <class T>
struct NetInput {
  std::size_t batch = 0;
  std::vector<LevelInput<T>> levels;
};

template <class T>
struct HeaderOutput {
  Tensor<T> class_logits;  // [B, L~, K+1]
  Tensor<T> reg_offsets;   // [B, L~, K*N*7], category-major, then yaw bin, then 7 offsets
};

using ShapeTrace = std::vector<std::pair<std::string, Shape>>;

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

// ---------------------------------------------------------------------------
// Model.

template <class T>
class FConvNet {
 public:
  FConvNet(NetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build(&rng);
  }

  /// Zero-initialized weights (identity BN); used before loading a checkpoint.
  explicit FConvNet(NetConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build(nullptr);
  }

  const NetConfig& config() const { return cfg_; }

  /// Shared-weight PointNet of `level` over one slab's relative points [M, C]; returns [d].
  Tensor<T> pointnet_forward(std::size_t level, const Tensor<T>& rel_points, Mode mode) {
    const std::vector<std::uint32_t> seg(rel_points.dim(0), 0);
    return reshape(pointnet_rows(level, rel_points, seg, 1, mode), Shape{cfg_.widths[level]});
  }

  /// PointNet features for every slab of a batch: [B, L_r, d_r].
  Tensor<T> pointnet_level(std::size_t level, const LevelInput<T>& in, Mode mode) {
    if (in.coords.rank() != 2 || in.coords.dim(1) != cfg_.input_channels())
      throw ShapeError("pointnet: expected [P," + std::to_string(cfg_.input_channels()) + "] input, got " +
                       shape_str(in.coords.shape()));
    const Tensor<T> rows = pointnet_rows(level, in.coords, in.segment, in.batch * in.length, mode);
    return reshape(rows, Shape{in.batch, in.length, cfg_.widths[level]});
  }

  /// Feature map [L, d] of a single sequence at `level`.
  Tensor<T> assemble_feature_map(const FrustumSequence& seq, std::size_t level, Mode mode) {
    const FrustumSequence* one[] = {&seq};
    const LevelInput<T> in = make_level_input<T>(std::span<const FrustumSequence* const>(one), cfg_.use_intensity);
    return reshape(pointnet_level(level, in, mode), Shape{seq.length, cfg_.widths[level]});
  }

  /// FCN over per-resolution maps [B, L/2^r, d_r]; returns the fused map [B, L~, D_cat].
  Tensor<T> fcn_forward(std::span<const Tensor<T>> maps, Mode mode, ShapeTrace* trace = nullptr) {
    if (maps.empty()) throw ShapeError("fcn: no input maps");
    const FcnConfig f = cfg_.fcn();
    auto note = [&](const std::string& name, const Tensor<T>& t) {
      if (trace) trace->emplace_back(name, t.shape());
    };
    Tensor<T> x = maps[0];
    if (x.rank() != 3 || x.dim(2) != f.input_width)
      throw ShapeError("fcn: input map " + shape_str(x.shape()) + " does not match width " +
                       std::to_string(f.input_width));
    note("input", x);
    std::vector<Tensor<T>> ups;
    for (std::size_t b = 0; b < f.blocks.size(); ++b) {
      for (std::size_t j = 0; j < f.blocks[b].size(); ++j) x = conv_bn_relu(blocks_[b][j], x, mode);
      note("block" + std::to_string(b + 1), x);
      if (b == 0) continue;
      if (cfg_.multi_resolution && b < maps.size()) {
        const Tensor<T>& extra = maps[b];
        if (extra.rank() != 3 || extra.dim(0) != x.dim(0) || extra.dim(1) != x.dim(1) || extra.dim(2) != cfg_.widths[b])
          throw shape_mismatch("fcn merge", x.shape(), extra.shape());
        x = conv_bn_relu(merges_[b - 1], concat({x, extra}, 2), mode);
        note("merge" + std::to_string(b + 1), x);
      }
      Tensor<T> up = deconv_bn_relu(deconvs_[b - 1], x, mode);
      if (up.dim(1) != f.output_length)
        throw ShapeError("fcn: deconv" + std::to_string(b + 1) + " produced length " + std::to_string(up.dim(1)) +
                         ", expected " + std::to_string(f.output_length));
      note("deconv" + std::to_string(b + 1), up);
      ups.push_back(std::move(up));
    }
    Tensor<T> fused = concat(std::span<const Tensor<T>>(ups), 2);
    note("fused", fused);
    return fused;
  }

  HeaderOutput<T> header_forward(const Tensor<T>& fused) {
    return {conv1d(fused, head_cls_w_, &head_cls_b_, 1, 0), conv1d(fused, head_reg_w_, &head_reg_b_, 1, 0)};
  }

  HeaderOutput<T> forward(const NetInput<T>& in, Mode mode, ShapeTrace* trace = nullptr) {
    if (in.levels.size() < cfg_.levels())
      throw ShapeError("net: " + std::to_string(in.levels.size()) + " input levels, need " +
                       std::to_string(cfg_.levels()));
    std::vector<Tensor<T>> maps;
    for (std::size_t r = 0; r < cfg_.levels(); ++r) {
      maps.push_back(pointnet_level(r, in.levels[r], mode));
      if (trace) trace->emplace_back("pointnet" + std::to_string(r), maps.back().shape());
    }
    const Tensor<T> fused = fcn_forward(maps, mode, trace);
    HeaderOutput<T> out = header_forward(fused);
    if (trace) {
      trace->emplace_back("class_logits", out.class_logits.shape());
      trace->emplace_back("reg_offsets", out.reg_offsets.shape());
    }
    return out;
  }

  std::vector<NamedTensor<T>> parameters() const { return params_; }
  std::vector<NamedTensor<T>> buffers() const { return buffers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  /// Sets every header weight and bias to zero.
  void zero_header() {
    for (auto* t : {&head_cls_w_, &head_cls_b_, &head_reg_w_, &head_reg_b_})
      std::fill(t->mutable_values().begin(), t->mutable_values().end(), T(0));
  }

  Tensor<T>& head_cls_bias() { return head_cls_b_; }
  Tensor<T>& head_reg_bias() { return head_reg_b_; }

 private:
  struct Bn {
    Tensor<T> gamma, beta;
    BatchNormState<T> state;
  };
  struct Conv {
    Tensor<T> weight;  // [K, Cin, Cout]
    ConvSpec spec;
    Bn bn;
  };
  struct PointNet {
    std::vector<Tensor<T>> weights;  // [Cin, Cout] per FC layer
    std::vector<Bn> bns;
  };

  Tensor<T> pointnet_rows(std::size_t level, const Tensor<T>& coords, std::span<const std::uint32_t> segment,
                          std::size_t segments, Mode mode) {
    PointNet& pn = pointnets_.at(level);
    Tensor<T> h = coords;
    for (std::size_t j = 0; j < pn.weights.size(); ++j) {
      if (h.dim(0) == 0) {
        h = Tensor<T>(Shape{0, pn.weights[j].dim(1)});
        continue;
      }
      h = relu(batchnorm(matmul(h, pn.weights[j]), pn.bns[j].gamma, pn.bns[j].beta, pn.bns[j].state, mode));
    }
    return segment_max(h, segment, segments);
  }

  Tensor<T> conv_bn_relu(Conv& c, const Tensor<T>& x, Mode mode) {
    return relu(batchnorm(conv1d(x, c.weight, static_cast<const Tensor<T>*>(nullptr), c.spec.stride, c.spec.pad),
                          c.bn.gamma, c.bn.beta, c.bn.state, mode));
  }

  Tensor<T> deconv_bn_relu(Conv& c, const Tensor<T>& x, Mode mode) {
    return relu(batchnorm(deconv1d(x, c.weight, static_cast<const Tensor<T>*>(nullptr), c.spec.stride, c.spec.pad),
                          c.bn.gamma, c.bn.beta, c.bn.state, mode));
  }

  Tensor<T> he_init(Shape shape, std::size_t fan_in, Rng* rng, double gain = 1.0) {
    Tensor<T> t(std::move(shape));
    if (!rng) return t;
    const double sd = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.mutable_values()) v = static_cast<T>(normal(*rng, 0.0, sd));
    return t;
  }

  Bn make_bn(const std::string& name, std::size_t c) {
    Bn bn{Tensor<T>(Shape{c}, T(1)), Tensor<T>(Shape{c}, T(0)), BatchNormState<T>(c)};
    bn.state.momentum = static_cast<T>(cfg_.bn_momentum);
    bn.state.eps = static_cast<T>(cfg_.bn_eps);
    params_.push_back({name + ".gamma", bn.gamma});
    params_.push_back({name + ".beta", bn.beta});
    buffers_.push_back({name + ".running_mean", bn.state.running_mean});
    buffers_.push_back({name + ".running_var", bn.state.running_var});
    return bn;
  }

  Conv make_conv(const std::string& name, const ConvSpec& spec, std::size_t cin, Rng* rng) {
    Conv c{he_init(Shape{spec.kernel, cin, spec.filters}, spec.kernel * cin, rng), spec, {}};
    params_.push_back({name + ".weight", c.weight});
    c.bn = make_bn(name + ".bn", spec.filters);
    return c;
  }

  void build(Rng* rng) {
    const FcnConfig f = cfg_.fcn();
    for (std::size_t r = 0; r < cfg_.levels(); ++r) {
      PointNet pn;
      const std::size_t widths[] = {cfg_.pointnet_hidden[0], cfg_.pointnet_hidden[1], cfg_.widths[r]};
      std::size_t cin = cfg_.input_channels();
      for (std::size_t j = 0; j < 3; ++j) {
        const std::string name = "pointnet" + std::to_string(r) + ".fc" + std::to_string(j);
        pn.weights.push_back(he_init(Shape{cin, widths[j]}, cin, rng));
        params_.push_back({name + ".weight", pn.weights.back()});
        pn.bns.push_back(make_bn(name + ".bn", widths[j]));
        cin = widths[j];
      }
      pointnets_.push_back(std::move(pn));
    }
    std::size_t cin = f.input_width;
    for (std::size_t b = 0; b < f.blocks.size(); ++b) {
      std::vector<Conv> convs;
      for (std::size_t j = 0; j < f.blocks[b].size(); ++j) {
        convs.push_back(make_conv("fcn.block" + std::to_string(b + 1) + ".conv" + std::to_string(j), f.blocks[b][j],
                                  cin, rng));
        cin = f.blocks[b][j].filters;
      }
      blocks_.push_back(std::move(convs));
      if (b == 0) continue;
      if (cfg_.multi_resolution)
        merges_.push_back(make_conv("fcn.merge" + std::to_string(b + 1), f.merges[b - 1], cin + cfg_.widths[b], rng));
      deconvs_.push_back(make_conv("fcn.deconv" + std::to_string(b + 1), f.deconvs[b - 1], cin, rng));
    }
    const std::size_t fused = cfg_.fused_width(), k = cfg_.num_categories;
    head_cls_w_ = Tensor<T>(Shape{1, fused, k + 1});
    head_cls_b_ = Tensor<T>(Shape{k + 1});
    head_reg_w_ = Tensor<T>(Shape{1, fused, cfg_.reg_channels()});
    head_reg_b_ = Tensor<T>(Shape{cfg_.reg_channels()});
    if (rng) {
      for (auto& v : head_cls_w_.mutable_values()) v = static_cast<T>(normal(*rng, 0.0, 0.01));
      for (auto& v : head_reg_w_.mutable_values()) v = static_cast<T>(normal(*rng, 0.0, 0.01));
      // Background prior of 0.99 so early focal-loss gradients are not dominated by negatives.
      head_cls_b_.mutable_values()[0] = static_cast<T>(std::log(99.0 * static_cast<double>(k)));
    }
    params_.push_back({"head.cls.weight", head_cls_w_});
    params_.push_back({"head.cls.bias", head_cls_b_});
    params_.push_back({"head.reg.weight", head_reg_w_});
    params_.push_back({"head.reg.bias", head_reg_b_});
  }

  NetConfig cfg_;
  std::vector<PointNet> pointnets_;
  std::vector<std::vector<Conv>> blocks_;
  std::vector<Conv> merges_;
  std::vector<Conv> deconvs_;
  Tensor<T> head_cls_w_, head_cls_b_, head_reg_w_, head_reg_b_;
  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
};

}  // namespace fconv
