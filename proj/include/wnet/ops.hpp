// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <string>

#include "wnet/graph.hpp"
#include "wnet/kernels.hpp"

namespace wnet {

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
Graph<T>* graph_of(const std::vector<Var<T>>& inputs) {
  Graph<T>* g = nullptr;
  for (const auto& v : inputs) {
    if (!v.requires_grad()) continue;
    if (g && v.graph() != g) throw GraphError("operands belong to different graphs");
    g = v.graph();
  }
  return g;
}

template <class T>
Var<T> emit(std::string op, Tensor<T> value, std::vector<Var<T>> inputs, BackwardFn<T> fn,
            bool twice_differentiable = true) {
  for (const auto& v : inputs) {
    if (!v) throw GraphError("op '" + op + "' received an undefined operand");
  }
  if (Graph<T>* g = graph_of(inputs)) {
    return g->record(std::move(op), std::move(value), inputs, std::move(fn), twice_differentiable);
  }
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = std::move(op);
  return Var<T>(std::move(n));
}

// Maps a flat index of the broadcast result onto a flat index of an operand.
class BroadcastMap {
 public:
  BroadcastMap(const Shape& out, const Shape& in) : out_total_(numel(out)), in_total_(numel(in)) {
    if (in.size() > out.size()) throw ShapeError("cannot broadcast " + to_string(in) + " to " + to_string(out));
    Shape aligned(out.size() - in.size(), 1);
    aligned.insert(aligned.end(), in.begin(), in.end());
    for (std::size_t d = 0; d < out.size(); ++d) {
      if (aligned[d] != out[d] && aligned[d] != 1) {
        throw ShapeError("cannot broadcast " + to_string(in) + " to " + to_string(out));
      }
    }
    if (aligned == out) {
      kind_ = Kind::same;
    } else if (in_total_ == 1) {
      kind_ = Kind::scalar;
    } else if (matches_suffix(aligned, out)) {
      kind_ = Kind::suffix;
    } else if (matches_prefix(aligned, out)) {
      kind_ = Kind::prefix;
      inner_ = out_total_ / in_total_;
    } else {
      kind_ = Kind::general;
      table_.resize(static_cast<std::size_t>(out_total_));
      Shape strides(out.size(), 0);
      Index s = 1;
      for (std::size_t d = out.size(); d-- > 0;) {
        strides[d] = aligned[d] == 1 ? 0 : s;
        s *= aligned[d];
      }
      Shape idx(out.size(), 0);
      for (Index i = 0; i < out_total_; ++i) {
        Index off = 0;
        for (std::size_t d = 0; d < out.size(); ++d) off += idx[d] * strides[d];
        table_[static_cast<std::size_t>(i)] = off;
        for (std::size_t d = out.size(); d-- > 0;) {
          if (++idx[d] < out[d]) break;
          idx[d] = 0;
        }
      }
    }
  }

  /// Materializes `in` broadcast to the output shape.
  template <class T>
  void expand(const T* in, T* out) const {
    switch (kind_) {
      case Kind::same: std::copy(in, in + out_total_, out); return;
      case Kind::scalar: std::fill(out, out + out_total_, in[0]); return;
      case Kind::suffix:
        for (Index base = 0; base < out_total_; base += in_total_) std::copy(in, in + in_total_, out + base);
        return;
      case Kind::prefix:
        for (Index o = 0; o < in_total_; ++o) std::fill(out + o * inner_, out + (o + 1) * inner_, in[o]);
        return;
      default:
        for (Index i = 0; i < out_total_; ++i) out[i] = in[table_[static_cast<std::size_t>(i)]];
    }
  }

  /// Accumulates an output-shaped array into a zeroed `in`-shaped array.
  template <class T>
  void reduce(const T* full, T* in) const {
    switch (kind_) {
      case Kind::same:
        for (Index i = 0; i < out_total_; ++i) in[i] += full[i];
        return;
      case Kind::scalar: {
        T acc = 0;
        for (Index i = 0; i < out_total_; ++i) acc += full[i];
        in[0] += acc;
        return;
      }
      case Kind::suffix:
        for (Index base = 0; base < out_total_; base += in_total_) {
          const T* src = full + base;
          for (Index j = 0; j < in_total_; ++j) in[j] += src[j];
        }
        return;
      case Kind::prefix:
        for (Index o = 0; o < in_total_; ++o) {
          T acc = 0;
          const T* src = full + o * inner_;
          for (Index j = 0; j < inner_; ++j) acc += src[j];
          in[o] += acc;
        }
        return;
      default:
        for (Index i = 0; i < out_total_; ++i) in[table_[static_cast<std::size_t>(i)]] += full[i];
    }
  }

  Index operator()(Index i) const {
    switch (kind_) {
      case Kind::same: return i;
      case Kind::scalar: return 0;
      case Kind::suffix: return i % in_total_;
      case Kind::prefix: return i / inner_;
      default: return table_[static_cast<std::size_t>(i)];
    }
  }

 private:
  enum class Kind { same, scalar, suffix, prefix, general };

  static bool matches_suffix(const Shape& in, const Shape& out) {
    std::size_t p = 0;
    while (p < in.size() && in[p] == 1 && out[p] != 1) ++p;
    for (std::size_t d = p; d < in.size(); ++d) {
      if (in[d] != out[d]) return false;
    }
    return true;
  }
  static bool matches_prefix(const Shape& in, const Shape& out) {
    std::size_t p = in.size();
    while (p > 0 && in[p - 1] == 1) --p;
    for (std::size_t d = 0; d < p; ++d) {
      if (in[d] != out[d]) return false;
    }
    return true;
  }

  Kind kind_ = Kind::same;
  Index out_total_ = 0, in_total_ = 0, inner_ = 1;
  std::vector<Index> table_;
};

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const Index da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const Index db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("incompatible shapes " + to_string(a) + " and " + to_string(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

template <class T, class F>
Tensor<T> binary_map(const Tensor<T>& a, const Tensor<T>& b, F f) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor<T> out(out_shape);
  const Index n = out.size();
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  if (a.shape() == out_shape && b.shape() == out_shape) {
    for (Index i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  if (a.shape() != out_shape) {
    Tensor<T> ea(out_shape);
    BroadcastMap(out_shape, a.shape()).expand(pa, ea.data());
    return binary_map(ea, b, f);
  }
  Tensor<T> eb(out_shape);
  BroadcastMap(out_shape, b.shape()).expand(pb, eb.data());
  const T* pe = eb.data();
  for (Index i = 0; i < n; ++i) po[i] = f(pa[i], pe[i]);
  return out;
}

template <class T, class F>
Tensor<T> unary_map(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (Index i = 0; i < a.size(); ++i) po[i] = f(pa[i]);
  return out;
}

template <class T>
Tensor<T> reduce_to(const Tensor<T>& x, const Shape& shape) {
  Tensor<T> out(shape);
  BroadcastMap(x.shape(), shape).reduce(x.data(), out.data());
  return out;
}

template <class T>
Tensor<T> expand_to(const Tensor<T>& x, const Shape& shape) {
  Tensor<T> out(shape);
  BroadcastMap(shape, x.shape()).expand(x.data(), out.data());
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

template <class T>
Var<T> sum_to(const Var<T>& x, const Shape& shape);

template <class T>
Var<T> broadcast_to(const Var<T>& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  const Shape from = x.shape();
  return detail::emit<T>("broadcast_to", detail::expand_to(x.value(), shape), {x},
                         [from](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                           return std::vector<Var<T>>{sum_to(g, from)};
                         });
}

/// Sums broadcast axes away so the result has `shape`.
template <class T>
Var<T> sum_to(const Var<T>& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  const Shape from = x.shape();
  return detail::emit<T>("sum_to", detail::reduce_to(x.value(), shape), {x},
                         [from](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                           return std::vector<Var<T>>{broadcast_to(g, from)};
                         });
}

template <class T>
Var<T> reshape(const Var<T>& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  const Shape from = x.shape();
  return detail::emit<T>("reshape", x.value().reshaped(shape), {x},
                         [from](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                           return std::vector<Var<T>>{reshape(g, from)};
                         });
}

/// (N, ...) -> (N, prod(...)).
template <class T>
Var<T> flatten(const Var<T>& x) {
  return reshape(x, Shape{x.dim(0), x.size() / x.dim(0)});
}

template <class T>
Var<T> sum_all(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().values()) acc += v;
  const Shape from = x.shape();
  return detail::emit<T>("sum", Tensor<T>::scalar(acc), {x},
                         [from](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                           return std::vector<Var<T>>{broadcast_to(g, from)};
                         });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy-style broadcasting)
// ---------------------------------------------------------------------------

template <class T>
Var<T> neg(const Var<T>& x);
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> scale(const Var<T>& x, T c);

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const Shape sa = a.shape(), sb = b.shape();
  return detail::emit<T>("add", detail::binary_map(a.value(), b.value(), std::plus<T>{}), {a, b},
                         [sa, sb](const Var<T>&, const Var<T>& g, const std::vector<bool>& needs) {
                           std::vector<Var<T>> out(2);
                           if (needs[0]) out[0] = sum_to(g, sa);
                           if (needs[1]) out[1] = sum_to(g, sb);
                           return out;
                         });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  const Shape sa = a.shape(), sb = b.shape();
  return detail::emit<T>("sub", detail::binary_map(a.value(), b.value(), std::minus<T>{}), {a, b},
                         [sa, sb](const Var<T>&, const Var<T>& g, const std::vector<bool>& needs) {
                           std::vector<Var<T>> out(2);
                           if (needs[0]) out[0] = sum_to(g, sa);
                           if (needs[1]) out[1] = sum_to(neg(g), sb);
                           return out;
                         });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const Shape sa = a.shape(), sb = b.shape();
  return detail::emit<T>("mul", detail::binary_map(a.value(), b.value(), std::multiplies<T>{}), {a, b},
                         [a, b, sa, sb](const Var<T>&, const Var<T>& g, const std::vector<bool>& needs) {
                           std::vector<Var<T>> out(2);
                           if (needs[0]) out[0] = sum_to(mul(g, b), sa);
                           if (needs[1]) out[1] = sum_to(mul(g, a), sb);
                           return out;
                         });
}

template <class T>
Var<T> neg(const Var<T>& x) {
  return scale(x, T(-1));
}

template <class T>
Var<T> scale(const Var<T>& x, T c) {
  return detail::emit<T>("scale", detail::unary_map(x.value(), [c](T v) { return v * c; }), {x},
                         [c](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                           return std::vector<Var<T>>{scale(g, c)};
                         });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return detail::emit<T>("add_scalar", detail::unary_map(x.value(), [c](T v) { return v + c; }), {x},
                         [](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                           return std::vector<Var<T>>{g};
                         });
}

template <class T>
Var<T> square(const Var<T>& x) {
  return detail::emit<T>("square", detail::unary_map(x.value(), [](T v) { return v * v; }), {x},
                         [x](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                           return std::vector<Var<T>>{mul(g, scale(x, T(2)))};
                         });
}

namespace detail {
// f(y) = 0.5 / y for y > 0, else 0: the derivative factor of sqrt at output y.
template <class T>
Var<T> sqrt_grad_factor(const Var<T>& y) {
  return emit<T>("sqrt_grad_factor", unary_map(y.value(), [](T v) { return v > T(0) ? T(0.5) / v : T(0); }), {y},
                 [](const Var<T>& out, const Var<T>& g, const std::vector<bool>&) {
                   // d/dy (0.5/y) = -0.5/y^2 = -2 f(y)^2
                   return std::vector<Var<T>>{mul(g, scale(square(out), T(-2)))};
                 });
}
}  // namespace detail

/// Square root with derivative 0 at exactly 0.
template <class T>
Var<T> sqrt(const Var<T>& x) {
  return detail::emit<T>("sqrt", detail::unary_map(x.value(), [](T v) { return std::sqrt(v); }), {x},
                         [](const Var<T>& out, const Var<T>& g, const std::vector<bool>&) {
                           return std::vector<Var<T>>{mul(g, detail::sqrt_grad_factor(out))};
                         });
}

template <class T>
Var<T> rsqrt(const Var<T>& x) {
  return detail::emit<T>("rsqrt", detail::unary_map(x.value(), [](T v) { return T(1) / std::sqrt(v); }), {x},
                         [](const Var<T>& out, const Var<T>& g, const std::vector<bool>&) {
                           return std::vector<Var<T>>{mul(g, scale(mul(out, square(out)), T(-0.5)))};
                         });
}

template <class T>
Var<T> abs(const Var<T>& x) {
  Tensor<T> sign = detail::unary_map(x.value(), [](T v) { return T((v > 0) - (v < 0)); });
  return detail::emit<T>("abs", detail::unary_map(x.value(), [](T v) { return std::abs(v); }), {x},
                         [sign = std::move(sign)](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                           return std::vector<Var<T>>{mul(g, Var<T>::constant(sign))};
                         });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// max(x, 0); subgradient 0 at the kink.
template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> mask = detail::unary_map(x.value(), [](T v) { return T(v > 0); });
  Tensor<T> y = detail::unary_map(x.value(), [](T v) { return v > 0 ? v : T(0); });
  return detail::emit<T>("relu", std::move(y), {x},
                         [mask = std::move(mask)](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                           return std::vector<Var<T>>{mul(g, Var<T>::constant(mask))};
                         });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.2)) {
  Tensor<T> factor = detail::unary_map(x.value(), [slope](T v) { return v > 0 ? T(1) : slope; });
  Tensor<T> y = detail::unary_map(x.value(), [slope](T v) { return v > 0 ? v : slope * v; });
  return detail::emit<T>("leaky_relu", std::move(y), {x},
                         [factor = std::move(factor)](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                           return std::vector<Var<T>>{mul(g, Var<T>::constant(factor))};
                         });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  return detail::emit<T>("tanh", detail::unary_map(x.value(), [](T v) { return std::tanh(v); }), {x},
                         [](const Var<T>& out, const Var<T>& g, const std::vector<bool>&) {
                           return std::vector<Var<T>>{mul(g, add_scalar(neg(square(out)), T(1)))};
                         });
}

// ---------------------------------------------------------------------------
// Channel concatenation (last axis)
// ---------------------------------------------------------------------------

template <class T>
Var<T> pad_channels(const Var<T>& x, Index begin, Index total);

template <class T>
Var<T> slice_channels(const Var<T>& x, Index begin, Index count) {
  const Index c = x.shape().back();
  if (begin < 0 || count < 0 || begin + count > c) throw ShapeError("channel slice out of range");
  Shape s = x.shape();
  s.back() = count;
  Tensor<T> out(s);
  const Index rows = x.size() / c;
  for (Index r = 0; r < rows; ++r) {
    std::copy_n(x.value().data() + r * c + begin, count, out.data() + r * count);
  }
  return detail::emit<T>("slice_channels", std::move(out), {x},
                         [begin, c](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                           return std::vector<Var<T>>{pad_channels(g, begin, c)};
                         });
}

/// Embeds x at channel offset `begin` of a zero tensor with `total` channels.
template <class T>
Var<T> pad_channels(const Var<T>& x, Index begin, Index total) {
  const Index c = x.shape().back();
  if (begin < 0 || begin + c > total) throw ShapeError("channel pad out of range");
  Shape s = x.shape();
  s.back() = total;
  Tensor<T> out(s);
  const Index rows = x.size() / std::max<Index>(c, 1);
  for (Index r = 0; r < rows; ++r) {
    std::copy_n(x.value().data() + r * c, c, out.data() + r * total + begin);
  }
  return detail::emit<T>("pad_channels", std::move(out), {x},
                         [begin, c](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                           return std::vector<Var<T>>{slice_channels(g, begin, c)};
                         });
}

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels of empty list");
  if (xs.size() == 1) return xs.front();
  Shape lead = xs.front().shape();
  lead.pop_back();
  Index total = 0;
  std::vector<Index> widths;
  for (const auto& x : xs) {
    Shape l = x.shape();
    if (l.empty()) throw ShapeError("concat_channels of scalar");
    widths.push_back(l.back());
    l.pop_back();
    if (l != lead) {
      throw ShapeError("concat_channels extent mismatch: " + to_string(xs.front().shape()) + " vs " +
                       to_string(x.shape()));
    }
    total += widths.back();
  }
  Shape s = lead;
  s.push_back(total);
  Tensor<T> out(s);
  const Index rows = numel(lead);
  Index offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const T* src = xs[k].value().data();
    for (Index r = 0; r < rows; ++r) {
      std::copy_n(src + r * widths[k], widths[k], out.data() + r * total + offset);
    }
    offset += widths[k];
  }
  return detail::emit<T>("concat_channels", std::move(out), xs,
                         [widths](const Var<T>&, const Var<T>& g, const std::vector<bool>& needs) {
                           std::vector<Var<T>> parts(widths.size());
                           Index off = 0;
                           for (std::size_t k = 0; k < widths.size(); ++k) {
                             if (needs[k]) parts[k] = slice_channels(g, off, widths[k]);
                             off += widths[k];
                           }
                           return parts;
                         });
}

// ---------------------------------------------------------------------------
// Linear algebra and convolution
// ---------------------------------------------------------------------------

/// op(a) * op(b) for rank-2 operands.
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool ta = false, bool tb = false) {
  if (a.shape().size() != 2 || b.shape().size() != 2) throw ShapeError("matmul expects rank-2 operands");
  return detail::emit<T>(
      "matmul", kernels::matmul(a.value(), b.value(), ta, tb), {a, b},
      [a, b, ta, tb](const Var<T>&, const Var<T>& g, const std::vector<bool>& needs) {
        std::vector<Var<T>> out(2);
        if (!ta && !tb) {
          if (needs[0]) out[0] = matmul(g, b, false, true);
          if (needs[1]) out[1] = matmul(a, g, true, false);
        } else if (!ta && tb) {
          if (needs[0]) out[0] = matmul(g, b, false, false);
          if (needs[1]) out[1] = matmul(g, a, true, false);
        } else if (ta && !tb) {
          if (needs[0]) out[0] = matmul(b, g, false, true);
          if (needs[1]) out[1] = matmul(a, g, false, false);
        } else {
          if (needs[0]) out[0] = matmul(b, g, true, true);
          if (needs[1]) out[1] = matmul(g, a, true, true);
        }
        return out;
      });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, Index stride);
template <class T>
Var<T> conv_transpose2d(const Var<T>& s, const Var<T>& w, Index stride, Index out_h, Index out_w);
template <class T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& s, Index kernel, Index stride);

namespace detail {
template <class T>
void check_filter(const Shape& w) {
  if (w.size() != 4 || w[0] != w[1]) {
    throw ShapeError("filter bank must be (k,k,c_in,c_out), got " + to_string(w));
  }
}
template <class T>
void check_image(const Shape& x, const char* what) {
  if (x.size() != 4) throw ShapeError(std::string(what) + " must be (N,H,W,C), got " + to_string(x));
}
}  // namespace detail

/// Zero-padded "same" convolution; filters are (k, k, c_in, c_out).
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, Index stride) {
  detail::check_image<T>(x.shape(), "conv2d input");
  detail::check_filter<T>(w.shape());
  if (x.dim(3) != w.dim(2)) {
    throw ShapeError("conv2d channel mismatch: input " + to_string(x.shape()) + ", filters " +
                     to_string(w.shape()));
  }
  const ConvGeometry geo = same_geometry(x.dim(1), x.dim(2), w.dim(0), stride);
  return detail::emit<T>(
      "conv2d", kernels::conv_forward(x.value(), w.value(), geo), {x, w},
      [x, w, geo](const Var<T>&, const Var<T>& g, const std::vector<bool>& needs) {
        std::vector<Var<T>> out(2);
        if (needs[0]) out[0] = conv_transpose2d(g, w, geo.stride, geo.in_h, geo.in_w);
        if (needs[1]) out[1] = conv2d_weight_grad(x, g, geo.kernel, geo.stride);
        return out;
      });
}

/// Adjoint of conv2d in its data argument: maps (N,h,w,c_out) onto
/// (N,out_h,out_w,c_in) with the same (k,k,c_in,c_out) filter bank.
template <class T>
Var<T> conv_transpose2d(const Var<T>& s, const Var<T>& w, Index stride, Index out_h, Index out_w) {
  detail::check_image<T>(s.shape(), "conv_transpose2d input");
  detail::check_filter<T>(w.shape());
  if (s.dim(3) != w.dim(3)) {
    throw ShapeError("conv_transpose2d channel mismatch: input " + to_string(s.shape()) + ", filters " +
                     to_string(w.shape()));
  }
  const ConvGeometry geo = same_geometry(out_h, out_w, w.dim(0), stride);
  if (geo.out_h != s.dim(1) || geo.out_w != s.dim(2)) {
    throw ShapeError("conv_transpose2d: input " + to_string(s.shape()) + " does not map to " +
                     std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  return detail::emit<T>(
      "conv_transpose2d", kernels::conv_transpose_forward(s.value(), w.value(), geo), {s, w},
      [s, w, geo](const Var<T>&, const Var<T>& g, const std::vector<bool>& needs) {
        std::vector<Var<T>> out(2);
        if (needs[0]) out[0] = conv2d(g, w, geo.stride);
        if (needs[1]) out[1] = conv2d_weight_grad(g, s, geo.kernel, geo.stride);
        return out;
      });
}

/// Stride-s upsampling "deconvolution": spatial extents multiplied by stride.
/// Filters are (k, k, c_out, c_in), i.e. the layout of the mirrored conv.
template <class T>
Var<T> deconv2d(const Var<T>& x, const Var<T>& w, Index stride) {
  detail::check_image<T>(x.shape(), "deconv2d input");
  return conv_transpose2d(x, w, stride, x.dim(1) * stride, x.dim(2) * stride);
}

/// Filter gradient of conv2d as a differentiable op of (large, small).
template <class T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& s, Index kernel, Index stride) {
  const ConvGeometry geo = same_geometry(x.dim(1), x.dim(2), kernel, stride);
  if (geo.out_h != s.dim(1) || geo.out_w != s.dim(2) || x.dim(0) != s.dim(0)) {
    throw ShapeError("conv2d_weight_grad extent mismatch");
  }
  return detail::emit<T>(
      "conv2d_weight_grad", kernels::conv_weight_forward(x.value(), s.value(), geo), {x, s},
      [x, s, geo](const Var<T>&, const Var<T>& g, const std::vector<bool>& needs) {
        std::vector<Var<T>> out(2);
        if (needs[0]) out[0] = conv_transpose2d(s, g, geo.stride, geo.in_h, geo.in_w);
        if (needs[1]) out[1] = conv2d(x, g, geo.stride);
        return out;
      });
}

// ---------------------------------------------------------------------------
// Classification loss
// ---------------------------------------------------------------------------

/// Per-sample -log softmax(logits)[label]; logits are (N, K).
template <class T>
Var<T> softmax_nll(const Var<T>& logits, const std::vector<int>& labels) {
  if (logits.shape().size() != 2) throw ShapeError("softmax_nll expects (N,K) logits");
  const Index n = logits.dim(0), k = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n) throw ShapeError("softmax_nll label count mismatch");
  Tensor<T> probs({n, k});
  Tensor<T> loss({n});
  const T* x = logits.value().data();
  for (Index r = 0; r < n; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= k) {
      throw std::out_of_range("label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
    }
    const T* row = x + r * k;
    const T mx = *std::max_element(row, row + k);
    T z = 0;
    for (Index c = 0; c < k; ++c) z += std::exp(row[c] - mx);
    for (Index c = 0; c < k; ++c) probs[r * k + c] = std::exp(row[c] - mx) / z;
    loss[r] = std::log(z) + mx - row[y];
  }
  return detail::emit<T>(
      "softmax_nll", std::move(loss), {logits},
      [probs = std::move(probs), labels](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
        Tensor<T> d = probs;
        const Index n = d.dim(0), k = d.dim(1);
        for (Index r = 0; r < n; ++r) {
          d[r * k + labels[static_cast<std::size_t>(r)]] -= T(1);
          for (Index c = 0; c < k; ++c) d[r * k + c] *= g.value()[r];
        }
        return std::vector<Var<T>>{Var<T>::constant(std::move(d))};
      },
      /*twice_differentiable=*/false);
}

// ---------------------------------------------------------------------------
// Reductions used by the losses
// ---------------------------------------------------------------------------

template <class T>
Var<T> mean_all(const Var<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

/// Per-sample mean over every non-batch axis; result is (N, 1, ..., 1).
template <class T>
Var<T> mean_per_sample(const Var<T>& x) {
  Shape s(x.shape().size(), 1);
  s[0] = x.dim(0);
  return scale(sum_to(x, s), T(x.dim(0)) / static_cast<T>(x.size()));
}

namespace detail {
template <class T>
Var<T> accumulate(const Var<T>& a, const Var<T>& b, bool record) {
  if (record) return add(a, b);
  Tensor<T> sum = a.value();
  const T* pb = b.value().data();
  T* ps = sum.data();
  for (Index i = 0; i < sum.size(); ++i) ps[i] += pb[i];
  return Var<T>::constant(std::move(sum));
}
}  // namespace detail

}  // namespace wnet
