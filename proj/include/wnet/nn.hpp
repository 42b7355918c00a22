// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <deque>
#include <map>
#include <memory>

#include "wnet/ops.hpp"
#include "wnet/random.hpp"

namespace wnet {

enum class Mode { train, eval };

/// Per-forward settings threaded through every layer.
template <class T>
struct Context {
  Graph<T>& graph;
  Mode mode = Mode::eval;
  /// Whether train-mode batch norm folds batch moments into running moments.
  bool update_stats = true;
  /// Dropout stream; required in train mode when any dropout rate is nonzero.
  Rng* rng = nullptr;

  bool training() const noexcept { return mode == Mode::train; }
};

/// Named parameters and buffers with stable addresses.
template <class T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;

  Parameter<T>& add(std::string name, Tensor<T> value, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    items_.push_back(Parameter<T>{name, std::move(value), trainable});
    index_[name] = &items_.back();
    return items_.back();
  }

  Parameter<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return *it->second;
  }
  const Parameter<T>& at(const std::string& name) const {
    return const_cast<ParameterSet*>(this)->at(name);
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  std::size_t size() const { return items_.size(); }

  /// Number of trainable scalars.
  Index trainable_count() const {
    Index n = 0;
    for (const auto& p : items_) n += p.trainable ? p.value.size() : 0;
    return n;
  }

  /// Copies values by name; shapes must agree exactly.
  void assign_from(const ParameterSet& other) {
    for (auto& p : items_) {
      const auto& src = other.at(p.name);
      if (src.value.shape() != p.value.shape()) throw ShapeError("shape mismatch for '" + p.name + "'");
      p.value = src.value;
    }
  }

 private:
  std::deque<Parameter<T>> items_;
  std::map<std::string, Parameter<T>*> index_;
};

template <class T>
Tensor<T> truncated_normal_tensor(Shape shape, double sigma, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(truncated_normal(rng, sigma));
  return t;
}

inline constexpr double kInitStddev = 0.02;

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <class T>
struct Conv2d {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  Index stride = 1;

  Conv2d() = default;
  Conv2d(ParameterSet<T>& ps, const std::string& name, Index kernel, Index in, Index out, Index stride_,
         Rng& rng, bool with_bias = true)
      : stride(stride_) {
    weight = &ps.add(name + ".w", truncated_normal_tensor<T>({kernel, kernel, in, out}, kInitStddev, rng));
    if (with_bias) bias = &ps.add(name + ".b", Tensor<T>({out}));
  }

  Var<T> operator()(Context<T>& ctx, const Var<T>& x) const {
    Var<T> y = conv2d(x, ctx.graph.param(*weight), stride);
    return bias ? add(y, ctx.graph.param(*bias)) : y;
  }
};

/// Upsampling transposed convolution; weight layout (k, k, out, in).
template <class T>
struct Deconv2d {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  Index stride = 2;

  Deconv2d() = default;
  Deconv2d(ParameterSet<T>& ps, const std::string& name, Index kernel, Index in, Index out, Index stride_,
           Rng& rng, bool with_bias = true)
      : stride(stride_) {
    weight = &ps.add(name + ".w", truncated_normal_tensor<T>({kernel, kernel, out, in}, kInitStddev, rng));
    if (with_bias) bias = &ps.add(name + ".b", Tensor<T>({out}));
  }

  Var<T> operator()(Context<T>& ctx, const Var<T>& x) const {
    Var<T> y = deconv2d(x, ctx.graph.param(*weight), stride);
    return bias ? add(y, ctx.graph.param(*bias)) : y;
  }
};

template <class T>
struct Dense {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;

  Dense() = default;
  Dense(ParameterSet<T>& ps, const std::string& name, Index in, Index out, Rng& rng) {
    weight = &ps.add(name + ".w", truncated_normal_tensor<T>({in, out}, kInitStddev, rng));
    bias = &ps.add(name + ".b", Tensor<T>({out}));
  }

  Index in_features() const { return weight->value.dim(0); }
  Index out_features() const { return weight->value.dim(1); }

  Var<T> operator()(Context<T>& ctx, const Var<T>& x) const {
    if (x.shape().size() != 2 || x.dim(1) != in_features()) {
      throw ShapeError("dense expects (N," + std::to_string(in_features()) + "), got " + to_string(x.shape()));
    }
    return add(matmul(x, ctx.graph.param(*weight)), ctx.graph.param(*bias));
  }
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

/// Fused batch normalization over every axis but the last. First-order only.
template <class T>
Var<T> batch_norm(Context<T>& ctx, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  Parameter<T>& running_mean, Parameter<T>& running_var) {
  const Index c = x.shape().back();
  const Index m = x.size() / c;
  const T eps = static_cast<T>(kBatchNormEpsilon);
  Tensor<T> mean({c}), var({c});
  const T* px = x.value().data();
  if (ctx.training()) {
    if (x.dim(0) < 2) throw ConfigError("batch norm in train mode needs a batch of at least 2");
    std::vector<double> acc(static_cast<std::size_t>(c), 0.0), acc2(static_cast<std::size_t>(c), 0.0);
    for (Index r = 0; r < m; ++r) {
      for (Index k = 0; k < c; ++k) acc[static_cast<std::size_t>(k)] += px[r * c + k];
    }
    for (Index k = 0; k < c; ++k) mean[k] = static_cast<T>(acc[static_cast<std::size_t>(k)] / m);
    for (Index r = 0; r < m; ++r) {
      for (Index k = 0; k < c; ++k) {
        const double d = px[r * c + k] - mean[k];
        acc2[static_cast<std::size_t>(k)] += d * d;
      }
    }
    for (Index k = 0; k < c; ++k) var[k] = static_cast<T>(acc2[static_cast<std::size_t>(k)] / m);
    if (ctx.update_stats) {
      const T mom = static_cast<T>(kBatchNormMomentum);
      for (Index k = 0; k < c; ++k) {
        running_mean.value[k] = mom * running_mean.value[k] + (T(1) - mom) * mean[k];
        running_var.value[k] = mom * running_var.value[k] + (T(1) - mom) * var[k];
      }
    }
  } else {
    mean = running_mean.value;
    var = running_var.value;
  }
  Tensor<T> inv_std({c});
  for (Index k = 0; k < c; ++k) inv_std[k] = T(1) / std::sqrt(var[k] + eps);
  Tensor<T> xhat(x.shape()), y(x.shape());
  const T* pg = gamma.value().data();
  const T* pb = beta.value().data();
  for (Index r = 0; r < m; ++r) {
    for (Index k = 0; k < c; ++k) {
      const T h = (px[r * c + k] - mean[k]) * inv_std[k];
      xhat[r * c + k] = h;
      y[r * c + k] = pg[k] * h + pb[k];
    }
  }
  const bool training = ctx.training();
  Tensor<T> gamma_value = gamma.value();
  return detail::emit<T>(
      "batch_norm", std::move(y), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), gamma_value = std::move(gamma_value), training, c,
       m](const Var<T>&, const Var<T>& gv, const std::vector<bool>& needs) {
        const Tensor<T>& g = gv.value();
        std::vector<double> sum_g(static_cast<std::size_t>(c), 0.0), sum_gx(static_cast<std::size_t>(c), 0.0);
        for (Index r = 0; r < m; ++r) {
          for (Index k = 0; k < c; ++k) {
            sum_g[static_cast<std::size_t>(k)] += g[r * c + k];
            sum_gx[static_cast<std::size_t>(k)] += g[r * c + k] * xhat[r * c + k];
          }
        }
        std::vector<Var<T>> out(3);
        if (needs[0]) {
          Tensor<T> dx(g.shape());
          for (Index k = 0; k < c; ++k) {
            const double a = static_cast<double>(gamma_value[k]) * inv_std[k];
            const double mg = sum_g[static_cast<std::size_t>(k)] / m;
            const double mgx = sum_gx[static_cast<std::size_t>(k)] / m;
            for (Index r = 0; r < m; ++r) {
              const Index i = r * c + k;
              dx[i] = training ? static_cast<T>(a * (g[i] - mg - xhat[i] * mgx)) : static_cast<T>(a * g[i]);
            }
          }
          out[0] = Var<T>::constant(std::move(dx));
        }
        if (needs[1]) {
          Tensor<T> dg({c});
          for (Index k = 0; k < c; ++k) dg[k] = static_cast<T>(sum_gx[static_cast<std::size_t>(k)]);
          out[1] = Var<T>::constant(std::move(dg));
        }
        if (needs[2]) {
          Tensor<T> db({c});
          for (Index k = 0; k < c; ++k) db[k] = static_cast<T>(sum_g[static_cast<std::size_t>(k)]);
          out[2] = Var<T>::constant(std::move(db));
        }
        return out;
      },
      /*twice_differentiable=*/false);
}

template <class T>
struct BatchNorm {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;
  Parameter<T>* running_mean = nullptr;
  Parameter<T>* running_var = nullptr;

  BatchNorm() = default;
  BatchNorm(ParameterSet<T>& ps, const std::string& name, Index channels) {
    gamma = &ps.add(name + ".gamma", Tensor<T>({channels}, T(1)));
    beta = &ps.add(name + ".beta", Tensor<T>({channels}));
    running_mean = &ps.add(name + ".running_mean", Tensor<T>({channels}), /*trainable=*/false);
    running_var = &ps.add(name + ".running_var", Tensor<T>({channels}, T(1)), /*trainable=*/false);
  }

  Var<T> operator()(Context<T>& ctx, const Var<T>& x) const {
    return batch_norm(ctx, x, ctx.graph.param(*gamma), ctx.graph.param(*beta), *running_mean, *running_var);
  }
};

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Per-sample normalization over all features, per-channel scale and shift.
/// Built from primitive ops so it supports second derivatives.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(kLayerNormEpsilon)) {
  const Var<T> centered = sub(x, mean_per_sample(x));
  const Var<T> var = mean_per_sample(square(centered));
  const Var<T> normalized = mul(centered, rsqrt(add_scalar(var, eps)));
  return add(mul(normalized, gamma), beta);
}

template <class T>
struct LayerNorm {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;

  LayerNorm() = default;
  LayerNorm(ParameterSet<T>& ps, const std::string& name, Index channels) {
    gamma = &ps.add(name + ".gamma", Tensor<T>({channels}, T(1)));
    beta = &ps.add(name + ".beta", Tensor<T>({channels}));
  }

  Var<T> operator()(Context<T>& ctx, const Var<T>& x) const {
    return layer_norm(x, ctx.graph.param(*gamma), ctx.graph.param(*beta));
  }
};

/// Inverted dropout: survivors are scaled by 1/(1-rate) in train mode;
/// eval mode is the identity.
template <class T>
Var<T> dropout(Context<T>& ctx, const Var<T>& x, double rate) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  if (!ctx.training() || rate == 0.0) return x;
  if (!ctx.rng) throw ConfigError("train-mode dropout needs a random stream");
  Tensor<T> mask(x.shape());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : mask.values()) m = uniform01(*ctx.rng) < rate ? T(0) : keep_scale;
  return mul(x, Var<T>::constant(std::move(mask)));
}

/// norm -> relu -> conv -> norm -> relu -> conv, added to the input.
template <class T>
struct ResidualBlock {
  BatchNorm<T> norm1, norm2;
  Conv2d<T> conv1, conv2;

  ResidualBlock() = default;
  ResidualBlock(ParameterSet<T>& ps, const std::string& name, Index channels, Index kernel, Rng& rng)
      : norm1(ps, name + ".bn1", channels),
        norm2(ps, name + ".bn2", channels),
        conv1(ps, name + ".conv1", kernel, channels, channels, 1, rng),
        conv2(ps, name + ".conv2", kernel, channels, channels, 1, rng) {}

  Var<T> operator()(Context<T>& ctx, const Var<T>& x) const {
    Var<T> h = conv1(ctx, relu(norm1(ctx, x)));
    h = conv2(ctx, relu(norm2(ctx, h)));
    return add(x, h);
  }

  std::vector<Parameter<T>*> branch_weights() const {
    return {conv1.weight, conv1.bias, conv2.weight, conv2.bias};
  }
};

/// M shape-preserving residual blocks applied in sequence.
template <class T>
struct ResidualChain {
  std::vector<ResidualBlock<T>> blocks;

  ResidualChain() = default;
  ResidualChain(ParameterSet<T>& ps, const std::string& name, Index channels, Index blocks_count, Index kernel,
                Rng& rng) {
    for (Index b = 0; b < blocks_count; ++b) {
      blocks.emplace_back(ps, name + ".block" + std::to_string(b), channels, kernel, rng);
    }
  }

  Var<T> operator()(Context<T>& ctx, const Var<T>& x) const {
    Var<T> h = x;
    for (const auto& b : blocks) h = b(ctx, h);
    return h;
  }
};

}  // namespace wnet
