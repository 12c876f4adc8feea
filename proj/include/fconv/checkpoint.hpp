#pragma once

// Checkpoint container: a versioned header, string metadata, then named tensors
// (name, dtype, shape, raw little-endian values).
//
//   "FCONVCKP" u32:version u32:meta_count { str:key str:value }*
//   u32:tensor_count { str:name u8:dtype(1=f32, 2=f64) u32:rank u64:dims[rank] values }*
//   str = u32:length bytes

#include <bit>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "fconv/kitti_io.hpp"
#include "fconv/net.hpp"
#include "fconv/tensor.hpp"

namespace fconv {

inline constexpr char kCheckpointMagic[8] = {'F', 'C', 'O', 'N', 'V', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

struct StoredTensor {
  std::string name;
  DType dtype = DType::f64;
  Shape shape;
  std::vector<double> values;  // widened for in-memory handling
};

struct CheckpointData {
  std::map<std::string, std::string> meta;
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_ += s;
  }
  void raw(const char* p, std::size_t n) { buf_.append(p, n); }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : buf_(b) {}
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw MalformedFileError("checkpoint truncated");
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const CheckpointData& ck) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 8);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.meta.size()));
  for (const auto& [k, v] : ck.meta) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    if (numel(t.shape) != t.values.size()) throw ShapeError("checkpoint tensor " + t.name + " has inconsistent shape");
    w.str(t.name);
    w.u8(static_cast<std::uint8_t>(t.dtype));
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    for (double v : t.values) {
      if (t.dtype == DType::f32)
        w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      else
        w.u64(std::bit_cast<std::uint64_t>(v));
    }
  }
  return w.bytes();
}

inline CheckpointData decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 8, std::string(kCheckpointMagic, 8)) != 0)
    throw MalformedFileError("not a checkpoint file (bad magic)");
  const std::string body = bytes.substr(8);
  detail::ByteReader r(body);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw MalformedFileError("unsupported checkpoint version " + std::to_string(version));
  CheckpointData ck;
  const std::uint32_t nmeta = r.u32();
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    std::string k = r.str();
    ck.meta[k] = r.str();
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.str();
    const std::uint8_t dt = r.u8();
    if (dt != 1 && dt != 2) throw MalformedFileError("checkpoint tensor " + t.name + ": unknown dtype");
    t.dtype = static_cast<DType>(dt);
    const std::uint32_t rank = r.u32();
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(static_cast<std::size_t>(r.u64()));
    const std::size_t n = numel(t.shape);
    t.values.reserve(n);
    for (std::size_t j = 0; j < n; ++j)
      t.values.push_back(t.dtype == DType::f32 ? static_cast<double>(std::bit_cast<float>(r.u32()))
                                               : std::bit_cast<double>(r.u64()));
    ck.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw MalformedFileError("trailing bytes after checkpoint");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointData& ck) {
  detail::write_text(path, encode_checkpoint(ck));
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_text(path));
}

template <class T>
StoredTensor store(const std::string& name, const Tensor<T>& t) {
  return {name, std::is_same_v<T, float> ? DType::f32 : DType::f64, t.shape(),
          std::vector<double>(t.values().begin(), t.values().end())};
}

/// Snapshot of a model: architecture metadata plus parameters and batchnorm statistics.
template <class T>
CheckpointData model_checkpoint(const FConvNet<T>& net, std::map<std::string, std::string> extra_meta = {}) {
  CheckpointData ck;
  ck.meta = to_metadata(net.config());
  for (auto& [k, v] : extra_meta) ck.meta[k] = v;
  for (const auto& p : net.parameters()) ck.tensors.push_back(store(p.name, p.tensor));
  for (const auto& b : net.buffers()) ck.tensors.push_back(store(b.name, b.tensor));
  return ck;
}

template <class T>
void load_weights(FConvNet<T>& net, const CheckpointData& ck) {
  auto assign = [&](const NamedTensor<T>& dst) {
    const StoredTensor* src = ck.find(dst.name);
    if (!src) throw MalformedFileError("checkpoint lacks tensor " + dst.name);
    if (src->shape != dst.tensor.shape())
      throw ShapeError("checkpoint tensor " + dst.name + " has shape " + shape_str(src->shape) + ", model expects " +
                       shape_str(dst.tensor.shape()));
    Tensor<T> t = dst.tensor;
    auto out = t.mutable_values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(src->values[i]);
  };
  for (const auto& p : net.parameters()) assign(p);
  for (const auto& b : net.buffers()) assign(b);
}

template <class T>
FConvNet<T> model_from_checkpoint(const CheckpointData& ck) {
  FConvNet<T> net(net_config_from_metadata(ck.meta));
  load_weights(net, ck);
  return net;
}

}  // namespace fconv
