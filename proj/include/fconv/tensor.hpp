#pragma once

// Dense tensors with reverse-mode differentiation.
//
// Layout: row-major. Sequence ops (conv1d, deconv1d, batchnorm) use channel-last
// [batch, length, channels] tensors; batchnorm normalizes over every leading axis.
//
// A Tensor is a shared handle: copies alias the same storage. Gradients are recorded only
// when at least one input has been watched by a Tape; otherwise ops compute values only.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fconv/common.hpp"

namespace fconv {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

inline ShapeError shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  return ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

template <class T>
class Tape;

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  Tape<T>* tape = nullptr;
  std::function<void()> backward;

  T* ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : node_(std::make_shared<TensorNode<T>>()) {}
  explicit Tensor(Shape shape, T fill = T(0)) : Tensor() {
    node_->value.assign(numel(shape), fill);
    node_->shape = std::move(shape);
  }
  Tensor(Shape shape, std::vector<T> values) : Tensor() {
    if (numel(shape) != values.size())
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }
  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  const T* data() const { return node_->value.data(); }
  T* mutable_data() { return node_->value.data(); }
  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  T at(std::size_t i) const { return node_->value.at(i); }

  /// Gradient from the most recent backward pass; empty if none reached this tensor.
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tape<T>* tape() const { return node_->tape; }

  /// Value copy with no tape link.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape(), std::vector<U>(node_->value.begin(), node_->value.end()));
  }

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Records differentiable ops for one backward pass. Not thread-safe; one per training step.
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() { release(); }

  /// Marks a leaf (input or parameter) as differentiable on this tape and clears its gradient.
  void watch(Tensor<T>& t) {
    auto& n = *t.node();
    if (n.tape && n.tape != this) throw std::logic_error("tensor is already watched by another tape");
    n.tape = this;
    n.requires_grad = true;
    n.grad.assign(n.value.size(), T(0));
    leaves_.push_back(t.node());
  }

  void record(const std::shared_ptr<TensorNode<T>>& n) { ops_.push_back(n); }

  void backward(const Tensor<T>& output) {
    if (output.size() != 1) throw ShapeError("backward needs a scalar, got " + shape_str(output.shape()));
    if (!output.requires_grad()) return;
    output.node()->ensure_grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      auto& n = **it;
      if (n.grad.empty() || !n.backward) continue;
      n.backward();
    }
  }

  /// Unlinks every tensor from this tape. Leaf gradients are kept.
  void release() {
    for (auto& n : ops_) {
      n->backward = nullptr;
      n->tape = nullptr;
      n->requires_grad = false;
    }
    for (auto& n : leaves_) {
      n->tape = nullptr;
      n->requires_grad = false;
    }
    ops_.clear();
    leaves_.clear();
  }

  std::size_t recorded_ops() const { return ops_.size(); }

 private:
  std::vector<std::shared_ptr<TensorNode<T>>> ops_;
  std::vector<std::shared_ptr<TensorNode<T>>> leaves_;
};

namespace detail {

template <class T>
Tape<T>* tape_of(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = nullptr;
  for (const auto* t : inputs) {
    if (!t->requires_grad()) continue;
    if (tape && t->tape() != tape) throw std::logic_error("op mixes tensors from different tapes");
    tape = t->tape();
  }
  return tape;
}

template <class T>
Tape<T>* tape_of(std::span<const Tensor<T>> inputs) {
  Tape<T>* tape = nullptr;
  for (const auto& t : inputs) {
    if (!t.requires_grad()) continue;
    if (tape && t.tape() != tape) throw std::logic_error("op mixes tensors from different tapes");
    tape = t.tape();
  }
  return tape;
}

template <class T, class Fn>
void attach(Tensor<T>& out, Tape<T>& tape, Fn&& fn) {
  auto& n = *out.node();
  n.requires_grad = true;
  n.tape = &tape;
  n.backward = std::forward<Fn>(fn);
  tape.record(out.node());
}

/// Decomposes `shape` around `axis` into (outer, extent, inner) loop counts.
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return {outer, shape[axis], inner};
}

/// Elementwise unary op with derivative df(x, y) where y = f(x).
template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.mutable_data();
  for (std::size_t i = 0; i < x.size(); ++i) ov[i] = f(xv[i]);
  if (auto* tape = tape_of({&x})) {
    attach(out, *tape, [xn = x.node(), on = out.node().get(), df] {
      T* g = xn->ensure_grad();
      const T* og = on->grad.data();
      for (std::size_t i = 0; i < on->value.size(); ++i) g[i] += og[i] * df(xn->value[i], on->value[i]);
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic.

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw shape_mismatch("add", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.mutable_data()[i] = a.data()[i] + b.data()[i];
  if (auto* tape = detail::tape_of({&a, &b})) {
    detail::attach(out, *tape, [an = a.node(), bn = b.node(), on = out.node().get()] {
      for (auto* n : {an.get(), bn.get()}) {
        if (!n->requires_grad) continue;
        T* g = n->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw shape_mismatch("sub", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.mutable_data()[i] = a.data()[i] - b.data()[i];
  if (auto* tape = detail::tape_of({&a, &b})) {
    detail::attach(out, *tape, [an = a.node(), bn = b.node(), on = out.node().get()] {
      if (an->requires_grad) {
        T* g = an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        T* g = bn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] -= on->grad[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw shape_mismatch("mul", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.mutable_data()[i] = a.data()[i] * b.data()[i];
  if (auto* tape = detail::tape_of({&a, &b})) {
    detail::attach(out, *tape, [an = a.node(), bn = b.node(), on = out.node().get()] {
      if (an->requires_grad) {
        T* g = an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        T* g = bn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i] * an->value[i];
      }
    });
  }
  return out;
}

/// Elementwise minimum; ties send the gradient to `a`.
template <class T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw shape_mismatch("minimum", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.mutable_data()[i] = std::min(a.data()[i], b.data()[i]);
  if (auto* tape = detail::tape_of({&a, &b})) {
    detail::attach(out, *tape, [an = a.node(), bn = b.node(), on = out.node().get()] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const bool pick_a = an->value[i] <= bn->value[i];
        auto* n = pick_a ? an.get() : bn.get();
        if (n->requires_grad) n->ensure_grad()[i] += on->grad[i];
      }
    });
  }
  return out;
}

/// Adds a per-channel bias along the last axis.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() == 0 || bias.rank() != 1 || bias.dim(0) != x.shape().back())
    throw shape_mismatch("add_bias", x.shape(), bias.shape());
  const std::size_t c = bias.size(), rows = x.size() / c;
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out.mutable_data()[r * c + j] = x.data()[r * c + j] + bias.data()[j];
  if (auto* tape = detail::tape_of({&x, &bias})) {
    detail::attach(out, *tape, [xn = x.node(), bn = bias.node(), on = out.node().get(), rows, c] {
      const T* og = on->grad.data();
      if (xn->requires_grad) {
        T* g = xn->ensure_grad();
        for (std::size_t i = 0; i < rows * c; ++i) g[i] += og[i];
      }
      if (bn->requires_grad) {
        T* g = bn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) g[j] += og[r * c + j];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return s * v; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

/// Gradient 0 at x = 0 (subgradient convention).
template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::abs(v); },
                       [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

/// Gradient defined as 0 where the output is 0.
template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::sqrt(v); },
                       [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

template <class T>
Tensor<T> sin(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::sin(v); }, [](T v, T) { return std::cos(v); });
}

template <class T>
Tensor<T> cos(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::cos(v); }, [](T v, T) { return -std::sin(v); });
}

/// x^p for x >= 0.
template <class T>
Tensor<T> pow_scalar(const Tensor<T>& x, T p) {
  return detail::unary(x, [p](T v) { return std::pow(v, p); },
                       [p](T v, T) { return p == T(0) ? T(0) : p * std::pow(v, p - T(1)); });
}

/// Clamps from below; gradient passes only where x > lo.
template <class T>
Tensor<T> clamp_min(const Tensor<T>& x, T lo) {
  return detail::unary(x, [lo](T v) { return v > lo ? v : lo; }, [lo](T v, T) { return v > lo ? T(1) : T(0); });
}

/// Huber-style smooth L1: 0.5 x^2 / delta for |x| < delta, |x| - 0.5 delta otherwise.
template <class T>
Tensor<T> smooth_l1(const Tensor<T>& x, T delta = T(1)) {
  return detail::unary(
      x, [delta](T v) { return std::abs(v) < delta ? T(0.5) * v * v / delta : std::abs(v) - T(0.5) * delta; },
      [delta](T v, T) { return std::abs(v) < delta ? v / delta : (v > T(0) ? T(1) : T(-1)); });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping.

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.values()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (auto* tape = detail::tape_of({&x})) {
    detail::attach(out, *tape, [xn = x.node(), on = out.node().get()] {
      T* g = xn->ensure_grad();
      const T og = on->grad[0];
      for (std::size_t i = 0; i < xn->value.size(); ++i) g[i] += og;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(std::max<std::size_t>(1, x.size())));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) throw shape_mismatch("reshape", x.shape(), shape);
  Tensor<T> out(std::move(shape), std::vector<T>(x.values().begin(), x.values().end()));
  if (auto* tape = detail::tape_of({&x})) {
    detail::attach(out, *tape, [xn = x.node(), on = out.node().get()] {
      T* g = xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i];
    });
  }
  return out;
}

/// Flat gather: out[i] = x.flat[indices[i]].
template <class T>
Tensor<T> gather(const Tensor<T>& x, std::vector<std::size_t> indices) {
  Tensor<T> out(Shape{indices.size()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.size())
      throw ShapeError("gather: index " + std::to_string(indices[i]) + " out of range for " + shape_str(x.shape()));
    out.mutable_data()[i] = x.data()[indices[i]];
  }
  if (auto* tape = detail::tape_of({&x})) {
    detail::attach(out, *tape, [xn = x.node(), on = out.node().get(), idx = std::move(indices)] {
      T* g = xn->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += on->grad[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw ShapeError("concat: axis out of range for " + shape_str(shape));
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = shape;
    if (a.size() != b.size()) throw shape_mismatch("concat", shape, p.shape());
    a[axis] = b[axis] = 0;
    if (a != b) throw shape_mismatch("concat", shape, p.shape());
    total += p.dim(axis);
  }
  shape[axis] = total;
  const auto [outer, extent, inner] = detail::split_axis(shape, axis);
  (void)extent;
  Tensor<T> out(shape);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data() + o * chunk, chunk, out.mutable_data() + o * total * inner + offset * inner);
    offset += p.dim(axis);
  }
  if (auto* tape = detail::tape_of(parts)) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    detail::attach(out, *tape,
                   [nodes = std::move(nodes), offsets = std::move(offsets), on = out.node().get(), outer = outer,
                    inner = inner, total, axis] {
                     for (std::size_t k = 0; k < nodes.size(); ++k) {
                       auto& n = *nodes[k];
                       if (!n.requires_grad) continue;
                       T* g = n.ensure_grad();
                       const std::size_t chunk = n.shape[axis] * inner;
                       for (std::size_t o = 0; o < outer; ++o) {
                         const T* src = on->grad.data() + o * total * inner + offsets[k] * inner;
                         for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += src[i];
                       }
                     }
                   });
  }
  return out;
}

template <class T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, std::size_t axis) {
  const std::vector<Tensor<T>> v(parts);
  return concat(std::span<const Tensor<T>>(v), axis);
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto [outer, extent, inner] = detail::split_axis(x.shape(), axis);
  if (begin > end || end > extent)
    throw ShapeError("slice: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                     shape_str(x.shape()));
  Shape shape = x.shape();
  shape[axis] = end - begin;
  Tensor<T> out(shape);
  const std::size_t chunk = (end - begin) * inner;
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data() + o * extent * inner + begin * inner, chunk, out.mutable_data() + o * chunk);
  if (auto* tape = detail::tape_of({&x})) {
    detail::attach(out, *tape,
                   [xn = x.node(), on = out.node().get(), outer = outer, extent = extent, inner = inner, begin, chunk] {
                     T* g = xn->ensure_grad();
                     for (std::size_t o = 0; o < outer; ++o)
                       for (std::size_t i = 0; i < chunk; ++i)
                         g[o * extent * inner + begin * inner + i] += on->grad[o * chunk + i];
                   });
  }
  return out;
}

/// Max along `axis` (axis removed from the shape). Ties resolve to the lowest index;
/// the gradient flows only to that position.
template <class T>
struct MaxResult {
  Tensor<T> values;
  std::vector<std::size_t> argmax;  // per output element, index along the reduced axis
};

template <class T>
MaxResult<T> max_over_axis(const Tensor<T>& x, std::size_t axis) {
  const auto [outer, extent, inner] = detail::split_axis(x.shape(), axis);
  if (extent == 0) throw ShapeError("max_over_axis: empty axis in " + shape_str(x.shape()));
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  MaxResult<T> r{Tensor<T>(shape), std::vector<std::size_t>(outer * inner, 0)};
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t best = 0;
      T bv = x.data()[o * extent * inner + i];
      for (std::size_t k = 1; k < extent; ++k) {
        const T v = x.data()[(o * extent + k) * inner + i];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      r.values.mutable_data()[o * inner + i] = bv;
      r.argmax[o * inner + i] = best;
    }
  if (auto* tape = detail::tape_of({&x})) {
    detail::attach(r.values, *tape,
                   [xn = x.node(), on = r.values.node().get(), am = r.argmax, extent = extent, inner = inner] {
                     T* g = xn->ensure_grad();
                     for (std::size_t j = 0; j < am.size(); ++j) {
                       const std::size_t o = j / inner, i = j % inner;
                       g[(o * extent + am[j]) * inner + i] += on->grad[j];
                     }
                   });
  }
  return r;
}

/// Row-group max: rows of x [P, C] with segment id s are max-pooled into out[s, :].
/// Segments with no rows produce zeros. Ties resolve to the earliest row.
template <class T>
Tensor<T> segment_max(const Tensor<T>& x, std::span<const std::uint32_t> segment, std::size_t num_segments) {
  if (x.rank() != 2 || segment.size() != x.dim(0))
    throw ShapeError("segment_max: " + std::to_string(segment.size()) + " segment ids for " + shape_str(x.shape()));
  const std::size_t c = x.dim(1);
  Tensor<T> out(Shape{num_segments, c});
  std::vector<std::int64_t> arg(num_segments * c, -1);
  T* ov = out.mutable_data();
  for (std::size_t p = 0; p < segment.size(); ++p) {
    const std::size_t s = segment[p];
    if (s >= num_segments) throw ShapeError("segment_max: segment id out of range");
    const T* row = x.data() + p * c;
    for (std::size_t j = 0; j < c; ++j) {
      auto& a = arg[s * c + j];
      if (a < 0 || row[j] > ov[s * c + j]) {
        ov[s * c + j] = row[j];
        a = static_cast<std::int64_t>(p);
      }
    }
  }
  if (auto* tape = detail::tape_of({&x})) {
    detail::attach(out, *tape, [xn = x.node(), on = out.node().get(), arg = std::move(arg), c] {
      T* g = xn->ensure_grad();
      for (std::size_t k = 0; k < arg.size(); ++k)
        if (arg[k] >= 0) g[static_cast<std::size_t>(arg[k]) * c + k % c] += on->grad[k];
    });
  }
  return out;
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  const auto [outer, extent, inner] = detail::split_axis(x.shape(), axis);
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      auto at = [&, o = o, i = i](std::size_t k) { return (o * extent + k) * inner + i; };
      T m = x.data()[at(0)];
      for (std::size_t k = 1; k < extent; ++k) m = std::max(m, x.data()[at(k)]);
      T s = T(0);
      for (std::size_t k = 0; k < extent; ++k) s += std::exp(x.data()[at(k)] - m);
      const T lse = m + std::log(s);
      for (std::size_t k = 0; k < extent; ++k) out.mutable_data()[at(k)] = x.data()[at(k)] - lse;
    }
  if (auto* tape = detail::tape_of({&x})) {
    detail::attach(out, *tape, [xn = x.node(), on = out.node().get(), outer = outer, extent = extent, inner = inner] {
      T* g = xn->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          T gs = T(0);
          for (std::size_t k = 0; k < extent; ++k) gs += on->grad[(o * extent + k) * inner + i];
          for (std::size_t k = 0; k < extent; ++k) {
            const std::size_t j = (o * extent + k) * inner + i;
            g[j] += on->grad[j] - std::exp(on->value[j]) * gs;
          }
        }
    });
  }
  return out;
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  return exp(log_softmax(x, axis));
}

// ---------------------------------------------------------------------------
// Linear algebra and sequence ops.

/// [N, K] x [K, M] -> [N, M].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) throw shape_mismatch("matmul", a.shape(), b.shape());
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor<T> out(Shape{n, m});
  T* ov = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a.data()[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b.data() + p * m;
      T* orow = ov + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  if (auto* tape = detail::tape_of({&a, &b})) {
    detail::attach(out, *tape, [an = a.node(), bn = b.node(), on = out.node().get(), n, k, m] {
      const T* og = on->grad.data();
      if (an->requires_grad) {
        T* g = an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            T s = T(0);
            const T* brow = bn->value.data() + p * m;
            const T* grow = og + i * m;
            for (std::size_t j = 0; j < m; ++j) s += grow[j] * brow[j];
            g[i * k + p] += s;
          }
      }
      if (bn->requires_grad) {
        T* g = bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const T av = an->value[i * k + p];
            if (av == T(0)) continue;
            const T* grow = og + i * m;
            T* gb = g + p * m;
            for (std::size_t j = 0; j < m; ++j) gb[j] += av * grow[j];
          }
      }
    });
  }
  return out;
}

inline std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (length + 2 * pad < kernel) return 0;
  return (length + 2 * pad - kernel) / stride + 1;
}

inline std::size_t deconv1d_output_length(std::size_t length, std::size_t kernel, std::size_t stride,
                                          std::size_t pad) {
  if (length == 0) return 0;
  const std::size_t full = (length - 1) * stride + kernel;
  if (full < 2 * pad) return 0;
  return full - 2 * pad;
}

namespace detail {

inline void check_seq_op(const char* op, const Shape& x, const Shape& w, const Shape& bias) {
  if (x.size() != 3 || w.size() != 3 || x[2] != w[1]) throw shape_mismatch(op, x, w);
  if (!bias.empty() && (bias.size() != 1 || bias[0] != w[2])) throw shape_mismatch(op, w, bias);
}

}  // namespace detail

/// x [B, L, Cin], weight [K, Cin, Cout], optional bias [Cout] -> [B, Lout, Cout].
/// out[b, t, :] = bias + sum_k x[b, t*stride - pad + k, :] * weight[k].
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, std::size_t stride,
                 std::size_t pad) {
  detail::check_seq_op("conv1d", x.shape(), weight.shape(), bias ? bias->shape() : Shape{});
  if (stride == 0) throw ShapeError("conv1d: stride must be positive");
  const std::size_t nb = x.dim(0), len = x.dim(1), cin = x.dim(2), k = weight.dim(0), cout = weight.dim(2);
  const std::size_t lout = conv1d_output_length(len, k, stride, pad);
  Tensor<T> out(Shape{nb, lout, cout});
  T* ov = out.mutable_data();
  const T* xv = x.data();
  const T* wv = weight.data();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t t = 0; t < lout; ++t) {
      T* orow = ov + (b * lout + t) * cout;
      if (bias) std::copy_n(bias->data(), cout, orow);
      for (std::size_t kk = 0; kk < k; ++kk) {
        const long src = static_cast<long>(t * stride + kk) - static_cast<long>(pad);
        if (src < 0 || src >= static_cast<long>(len)) continue;
        const T* xrow = xv + (b * len + static_cast<std::size_t>(src)) * cin;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const T v = xrow[ci];
          if (v == T(0)) continue;
          const T* wrow = wv + (kk * cin + ci) * cout;
          for (std::size_t co = 0; co < cout; ++co) orow[co] += v * wrow[co];
        }
      }
    }
  const Tensor<T> no_bias;
  const Tensor<T>& bref = bias ? *bias : no_bias;
  if (auto* tape = detail::tape_of({&x, &weight, &bref})) {
    detail::attach(out, *tape,
                   [xn = x.node(), wn = weight.node(), bn = bias ? bias->node() : nullptr, on = out.node().get(), nb,
                    len, cin, k, cout, lout, stride, pad] {
                     const T* og = on->grad.data();
                     T* gx = xn->requires_grad ? xn->ensure_grad() : nullptr;
                     T* gw = wn->requires_grad ? wn->ensure_grad() : nullptr;
                     for (std::size_t b = 0; b < nb; ++b)
                       for (std::size_t t = 0; t < lout; ++t) {
                         const T* grow = og + (b * lout + t) * cout;
                         for (std::size_t kk = 0; kk < k; ++kk) {
                           const long src = static_cast<long>(t * stride + kk) - static_cast<long>(pad);
                           if (src < 0 || src >= static_cast<long>(len)) continue;
                           const std::size_t xoff = (b * len + static_cast<std::size_t>(src)) * cin;
                           for (std::size_t ci = 0; ci < cin; ++ci) {
                             const T* wrow = wn->value.data() + (kk * cin + ci) * cout;
                             if (gx) {
                               T s = T(0);
                               for (std::size_t co = 0; co < cout; ++co) s += grow[co] * wrow[co];
                               gx[xoff + ci] += s;
                             }
                             if (gw) {
                               const T v = xn->value[xoff + ci];
                               if (v == T(0)) continue;
                               T* gwrow = gw + (kk * cin + ci) * cout;
                               for (std::size_t co = 0; co < cout; ++co) gwrow[co] += v * grow[co];
                             }
                           }
                         }
                       }
                     if (bn && bn->requires_grad) {
                       T* gb = bn->ensure_grad();
                       for (std::size_t r = 0; r < nb * lout; ++r)
                         for (std::size_t co = 0; co < cout; ++co) gb[co] += og[r * cout + co];
                     }
                   });
  }
  return out;
}

/// Transposed convolution. x [B, L, Cin], weight [K, Cin, Cout] -> [B, (L-1)*stride + K - 2*pad, Cout].
/// Input position t scatters into output positions t*stride - pad + k.
template <class T>
Tensor<T> deconv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, std::size_t stride,
                   std::size_t pad) {
  detail::check_seq_op("deconv1d", x.shape(), weight.shape(), bias ? bias->shape() : Shape{});
  if (stride == 0) throw ShapeError("deconv1d: stride must be positive");
  const std::size_t nb = x.dim(0), len = x.dim(1), cin = x.dim(2), k = weight.dim(0), cout = weight.dim(2);
  const std::size_t lout = deconv1d_output_length(len, k, stride, pad);
  Tensor<T> out(Shape{nb, lout, cout});
  T* ov = out.mutable_data();
  if (bias)
    for (std::size_t r = 0; r < nb * lout; ++r) std::copy_n(bias->data(), cout, ov + r * cout);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t t = 0; t < len; ++t) {
      const T* xrow = x.data() + (b * len + t) * cin;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const long dst = static_cast<long>(t * stride + kk) - static_cast<long>(pad);
        if (dst < 0 || dst >= static_cast<long>(lout)) continue;
        T* orow = ov + (b * lout + static_cast<std::size_t>(dst)) * cout;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const T v = xrow[ci];
          if (v == T(0)) continue;
          const T* wrow = weight.data() + (kk * cin + ci) * cout;
          for (std::size_t co = 0; co < cout; ++co) orow[co] += v * wrow[co];
        }
      }
    }
  const Tensor<T> no_bias;
  const Tensor<T>& bref = bias ? *bias : no_bias;
  if (auto* tape = detail::tape_of({&x, &weight, &bref})) {
    detail::attach(out, *tape,
                   [xn = x.node(), wn = weight.node(), bn = bias ? bias->node() : nullptr, on = out.node().get(), nb,
                    len, cin, k, cout, lout, stride, pad] {
                     const T* og = on->grad.data();
                     T* gx = xn->requires_grad ? xn->ensure_grad() : nullptr;
                     T* gw = wn->requires_grad ? wn->ensure_grad() : nullptr;
                     for (std::size_t b = 0; b < nb; ++b)
                       for (std::size_t t = 0; t < len; ++t) {
                         const std::size_t xoff = (b * len + t) * cin;
                         for (std::size_t kk = 0; kk < k; ++kk) {
                           const long dst = static_cast<long>(t * stride + kk) - static_cast<long>(pad);
                           if (dst < 0 || dst >= static_cast<long>(lout)) continue;
                           const T* grow = og + (b * lout + static_cast<std::size_t>(dst)) * cout;
                           for (std::size_t ci = 0; ci < cin; ++ci) {
                             const T* wrow = wn->value.data() + (kk * cin + ci) * cout;
                             if (gx) {
                               T s = T(0);
                               for (std::size_t co = 0; co < cout; ++co) s += grow[co] * wrow[co];
                               gx[xoff + ci] += s;
                             }
                             if (gw) {
                               const T v = xn->value[xoff + ci];
                               if (v == T(0)) continue;
                               T* gwrow = gw + (kk * cin + ci) * cout;
                               for (std::size_t co = 0; co < cout; ++co) gwrow[co] += v * grow[co];
                             }
                           }
                         }
                       }
                     if (bn && bn->requires_grad) {
                       T* gb = bn->ensure_grad();
                       for (std::size_t r = 0; r < nb * lout; ++r)
                         for (std::size_t co = 0; co < cout; ++co) gb[co] += og[r * cout + co];
                     }
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization.

template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.9);  // weight kept on the old running value
  T eps = T(1e-5);

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

enum class Mode { train, eval };

/// Normalizes x [..., C] per channel. Train mode uses batch statistics over all leading axes
/// and updates the running averages; eval mode is the fixed affine map from running statistics.
template <class T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                    Mode mode) {
  if (x.rank() == 0 || gamma.rank() != 1 || gamma.dim(0) != x.shape().back() || beta.shape() != gamma.shape())
    throw shape_mismatch("batchnorm", x.shape(), gamma.shape());
  const std::size_t c = gamma.size(), rows = x.size() / c;
  std::vector<T> mu(c, T(0)), inv_std(c, T(0));
  if (mode == Mode::train && rows > 0) {
    std::vector<T> var(c, T(0));
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) mu[j] += x.data()[r * c + j];
    for (auto& m : mu) m /= static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const T d = x.data()[r * c + j] - mu[j];
        var[j] += d * d;
      }
    for (std::size_t j = 0; j < c; ++j) {
      const T biased = var[j] / static_cast<T>(rows);
      inv_std[j] = T(1) / std::sqrt(biased + state.eps);
      const T unbiased = rows > 1 ? var[j] / static_cast<T>(rows - 1) : biased;
      auto& rm = state.running_mean.mutable_data()[j];
      auto& rv = state.running_var.mutable_data()[j];
      rm = state.momentum * rm + (T(1) - state.momentum) * mu[j];
      rv = state.momentum * rv + (T(1) - state.momentum) * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mu[j] = state.running_mean.data()[j];
      inv_std[j] = T(1) / std::sqrt(state.running_var.data()[j] + state.eps);
    }
  }
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t i = r * c + j;
      xhat[i] = (x.data()[i] - mu[j]) * inv_std[j];
      out.mutable_data()[i] = gamma.data()[j] * xhat[i] + beta.data()[j];
    }
  if (auto* tape = detail::tape_of({&x, &gamma, &beta})) {
    detail::attach(out, *tape,
                   [xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node().get(), xhat = std::move(xhat),
                    inv_std = std::move(inv_std), rows, c, train = mode == Mode::train] {
                     const T* og = on->grad.data();
                     std::vector<T> sum_g(c, T(0)), sum_gx(c, T(0));
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < c; ++j) {
                         sum_g[j] += og[r * c + j];
                         sum_gx[j] += og[r * c + j] * xhat[r * c + j];
                       }
                     if (gn->requires_grad) {
                       T* g = gn->ensure_grad();
                       for (std::size_t j = 0; j < c; ++j) g[j] += sum_gx[j];
                     }
                     if (bn->requires_grad) {
                       T* g = bn->ensure_grad();
                       for (std::size_t j = 0; j < c; ++j) g[j] += sum_g[j];
                     }
                     if (!xn->requires_grad) return;
                     T* g = xn->ensure_grad();
                     const T n = static_cast<T>(rows);
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < c; ++j) {
                         const std::size_t i = r * c + j;
                         const T gam = gn->value[j];
                         if (train)
                           g[i] += gam * inv_std[j] * (og[i] - sum_g[j] / n - xhat[i] * sum_gx[j] / n);
                         else
                           g[i] += gam * inv_std[j] * og[i];
                       }
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct GradCheckReport {
  double max_rel_error = 0.0;      // over coordinates whose gradient the differences resolve
  double max_rel_error_all = 0.0;  // every checked coordinate, denominator floored at 1e-8
  double noise = 0.0;              // rounding noise of a central difference of f
  double max_unresolved_abs_error = 0.0;
  std::size_t checked = 0;
  std::size_t unresolved = 0;  // |fd| + |ad| too small for a relative comparison at `rel_digits`
  std::size_t skipped = 0;     // coordinates at non-differentiable points
};

/// Compares tape gradients of the scalar `f()` with central differences over every coordinate
/// of `inputs`. `f` must read the inputs it is given. Coordinates where the two one-sided
/// slopes disagree (a kink such as relu at 0 or a max switch inside the stencil) are skipped.
/// A central difference carries rounding noise of a few ulps of f over 2*eps, so a relative
/// error of 10^-rel_digits is only measurable for gradients above 10^rel_digits times that noise;
/// smaller ones must instead agree in absolute terms within the noise.
template <class F>
GradCheckReport grad_check(F&& f, std::span<Tensor<double>* const> inputs, double eps = 1e-5,
                           double kink_tol = 1e-3, int rel_digits = 4) {
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    for (auto* in : inputs) tape.watch(*in);
    const Tensor<double> y = f();
    tape.backward(y);
    for (auto* in : inputs) {
      auto g = in->grad();
      analytic.emplace_back(g.begin(), g.end());
      if (analytic.back().empty()) analytic.back().assign(in->size(), 0.0);
    }
  }
  GradCheckReport rep;
  const double f0 = f().item();
  rep.noise = 8.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f0)) / (2.0 * eps);
  const double resolvable = rep.noise * std::pow(10.0, rel_digits);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto vals = inputs[t]->mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + eps;
      const double fp = f().item();
      vals[i] = orig - eps;
      const double fm = f().item();
      vals[i] = orig;
      const double fwd = (fp - f0) / eps, bwd = (f0 - fm) / eps;
      if (std::abs(fwd - bwd) > kink_tol * std::max(1.0, std::abs(fwd) + std::abs(bwd))) {
        ++rep.skipped;
        continue;
      }
      const double fd = (fp - fm) / (2.0 * eps);
      const double ad = analytic[t][i];
      const double diff = std::abs(fd - ad), mag = std::abs(fd) + std::abs(ad);
      rep.max_rel_error_all = std::max(rep.max_rel_error_all, diff / std::max(1e-8, mag));
      if (mag >= resolvable) {
        rep.max_rel_error = std::max(rep.max_rel_error, diff / mag);
      } else {
        rep.max_unresolved_abs_error = std::max(rep.max_unresolved_abs_error, diff);
        ++rep.unresolved;
      }
      ++rep.checked;
    }
  }
  return rep;
}

template <class F>
GradCheckReport grad_check(F&& f, Tensor<double>& x, double eps = 1e-5) {
  Tensor<double>* in[] = {&x};
  return grad_check(std::forward<F>(f), std::span<Tensor<double>* const>(in), eps);
}

}  // namespace fconv
