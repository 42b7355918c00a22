// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <numeric>

#include "wnet/glyph_data.hpp"
#include "wnet/nn.hpp"
#include "wnet/optim.hpp"

namespace wnet {

struct CriticConfig {
  std::vector<Index> widths{64, 128, 256, 512};
  Index kernel = 5;
  Index image_size = 64;
  /// Channel count of the concatenated input triple.
  Index channels = 3;
  /// Dropout on the flattened features before both heads (train mode).
  double dropout = 0.2;
  double leaky_slope = 0.2;
  /// I: style classes of the auxiliary head.
  Index styles = 3;

  void validate() const {
    if (widths.empty()) throw ConfigError("critic needs at least one conv layer");
    if (image_size % (Index{1} << widths.size()) != 0) throw ConfigError("image size must halve cleanly per layer");
    if (dropout < 0 || dropout >= 1) throw ConfigError("dropout rate must lie in [0, 1)");
    if (styles < 1) throw ConfigError("style head needs at least one class");
  }
  Index feature_count() const {
    const Index side = image_size >> widths.size();
    return side * side * widths.back();
  }
};

template <class T>
struct CriticOutput {
  /// (B,1), no squashing.
  Var<T> score;
  /// (B,I).
  Var<T> style_logits;
};

/// Wasserstein critic D over (prototype, candidate, reference) with an
/// auxiliary style classifier sharing the convolutional trunk.
template <class T>
class Critic {
 public:
  explicit Critic(const CriticConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    Index in = cfg_.channels;
    for (std::size_t l = 0; l < cfg_.widths.size(); ++l) {
      const std::string name = "critic.conv" + std::to_string(l + 1);
      convs_.emplace_back(params_, name, cfg_.kernel, in, cfg_.widths[l], 2, rng);
      norms_.push_back(l == 0 ? LayerNorm<T>{} : LayerNorm<T>(params_, "critic.ln" + std::to_string(l + 1), cfg_.widths[l]));
      in = cfg_.widths[l];
    }
    score_ = Dense<T>(params_, "critic.score", cfg_.feature_count(), 1, rng);
    style_ = Dense<T>(params_, "critic.style", cfg_.feature_count(), cfg_.styles, rng);
  }

  Critic(const Critic&) = delete;
  Critic& operator=(const Critic&) = delete;

  const CriticConfig& config() const noexcept { return cfg_; }
  ParameterSet<T>& parameters() noexcept { return params_; }
  const ParameterSet<T>& parameters() const noexcept { return params_; }

  /// Forward over an already-concatenated (B,H,W,channels) input.
  CriticOutput<T> forward(Context<T>& ctx, const Var<T>& x) const {
    if (x.shape().size() != 4 || x.dim(1) != cfg_.image_size || x.dim(2) != cfg_.image_size ||
        x.dim(3) != cfg_.channels) {
      throw ShapeError("critic expects (B," + std::to_string(cfg_.image_size) + "," +
                       std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.channels) + "), got " +
                       to_string(x.shape()));
    }
    Var<T> h = x;
    for (std::size_t l = 0; l < convs_.size(); ++l) {
      h = convs_[l](ctx, h);
      if (l > 0) h = norms_[l](ctx, h);
      h = leaky_relu(h, static_cast<T>(cfg_.leaky_slope));
    }
    h = dropout(ctx, flatten(h), cfg_.dropout);
    return {score_(ctx, h), style_(ctx, h)};
  }

  CriticOutput<T> operator()(Context<T>& ctx, const Var<T>& prototype, const Var<T>& candidate,
                             const Var<T>& reference) const {
    return forward(ctx, concat_channels<T>({prototype, candidate, reference}));
  }

  const Dense<T>& score_head() const { return score_; }
  const Dense<T>& style_head() const { return style_; }

 private:
  CriticConfig cfg_;
  ParameterSet<T> params_;
  std::vector<Conv2d<T>> convs_;
  std::vector<LayerNorm<T>> norms_;
  Dense<T> score_, style_;
};

// ---------------------------------------------------------------------------
// Perceptual feature network φ
// ---------------------------------------------------------------------------

inline constexpr int kFeatureStages = 5;

struct FeatureNetConfig {
  std::array<Index, kFeatureStages> widths{16, 32, 64, 128, 128};
  Index kernel = 3;
  Index styles = 3;
};

template <class T>
using FeatureStack = std::array<Var<T>, kFeatureStages>;

/// Five conv stages (stride 1, then stride 2) plus a dense style classifier.
/// Once frozen its parameters enter graphs as constants.
template <class T>
class FeatureNet {
 public:
  explicit FeatureNet(const FeatureNetConfig& cfg, Rng& rng) : cfg_(cfg) {
    Index in = 1;
    for (int s = 0; s < kFeatureStages; ++s) {
      const auto w = cfg_.widths[static_cast<std::size_t>(s)];
      convs_[static_cast<std::size_t>(s)] = Conv2d<T>(params_, "phi.conv" + std::to_string(s + 1), cfg_.kernel, in, w, s == 0 ? 1 : 2, rng);
      in = w;
    }
    const Index side = 64 >> (kFeatureStages - 1);
    classifier_ = Dense<T>(params_, "phi.classifier", side * side * in, cfg_.styles, rng);
    for (auto* w : {convs_[0].weight, convs_[1].weight, convs_[2].weight, convs_[3].weight, convs_[4].weight,
                    classifier_.weight}) {
      const Index fan_in = w->value.size() / w->value.shape().back();
      w->value = truncated_normal_tensor<T>(w->value.shape(), std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
    }
  }

  FeatureNet(const FeatureNet&) = delete;
  FeatureNet& operator=(const FeatureNet&) = delete;

  const FeatureNetConfig& config() const noexcept { return cfg_; }
  ParameterSet<T>& parameters() noexcept { return params_; }
  const ParameterSet<T>& parameters() const noexcept { return params_; }

  bool frozen() const noexcept { return frozen_; }
  void freeze() noexcept { frozen_ = true; }

  /// φ1..φ5 of a (B,64,64,1) batch.
  FeatureStack<T> features(Context<T>& ctx, const Var<T>& x) const {
    if (x.shape().size() != 4 || x.dim(1) != 64 || x.dim(2) != 64 || x.dim(3) != 1) {
      throw ShapeError("feature network expects (B,64,64,1), got " + to_string(x.shape()));
    }
    FeatureStack<T> out;
    Var<T> h = x;
    for (std::size_t s = 0; s < kFeatureStages; ++s) {
      const auto& c = convs_[s];
      h = relu(add(conv2d(h, bind(ctx, *c.weight), c.stride), bind(ctx, *c.bias)));
      out[s] = h;
    }
    return out;
  }

  Var<T> logits(Context<T>& ctx, const FeatureStack<T>& stack) const {
    return add(matmul(flatten(stack.back()), bind(ctx, *classifier_.weight)), bind(ctx, *classifier_.bias));
  }

  /// Argmax style label (0-based) per sample.
  std::vector<int> predict(const Tensor<T>& images) const {
    Graph<T> g;
    NoGradGuard<T> guard(g);
    Context<T> ctx{g};
    const Tensor<T> l = logits(ctx, features(ctx, g.input(images))).value();
    std::vector<int> out;
    const Index k = l.dim(1);
    for (Index n = 0; n < l.dim(0); ++n) {
      const T* row = l.data() + n * k;
      out.push_back(static_cast<int>(std::max_element(row, row + k) - row));
    }
    return out;
  }

 private:
  Var<T> bind(Context<T>& ctx, Parameter<T>& p) const {
    return frozen_ ? ctx.graph.input(p.value) : ctx.graph.param(p);
  }

  FeatureNetConfig cfg_;
  ParameterSet<T> params_;
  std::array<Conv2d<T>, kFeatureStages> convs_;
  Dense<T> classifier_;
  bool frozen_ = false;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FeatureTrainConfig {
  Index max_epochs = 20;
  double accuracy_floor = 0.90;
  Index batch = 16;
  double lr = 1e-3;
};

struct FeatureTrainReport {
  Index epochs = 0;
  double accuracy = 0;
  std::vector<double> epoch_losses;
};

/// Fraction of non-prototype corpus glyphs whose argmax style is correct.
template <class T>
double feature_accuracy(const FeatureNet<T>& net, const CorpusIndex& corpus) {
  std::vector<const Tensor<float>*> glyphs;
  std::vector<int> labels;
  for (const auto& [key, r] : corpus) {
    if (r.style_id == kPrototypeStyle) continue;
    glyphs.push_back(&r.image);
    labels.push_back(r.style_id - 1);
  }
  if (glyphs.empty()) return 0.0;
  Index correct = 0;
  for (std::size_t b = 0; b < glyphs.size(); b += 64) {
    const std::vector<const Tensor<float>*> chunk(glyphs.begin() + static_cast<std::ptrdiff_t>(b),
                                                  glyphs.begin() + static_cast<std::ptrdiff_t>(std::min(b + 64, glyphs.size())));
    const auto pred = net.predict(stack_glyphs<T>(chunk));
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[b + i];
  }
  return static_cast<double>(correct) / static_cast<double>(glyphs.size());
}

/// Trains the style classifier until the accuracy floor is met at an epoch
/// boundary, then freezes the network. Throws TrainingError with the
/// per-epoch trace if the floor is not reached.
template <class T>
FeatureTrainReport train_feature_network(FeatureNet<T>& net, const CorpusIndex& corpus, Rng& rng,
                                         const FeatureTrainConfig& cfg = {}) {
  if (corpus.styles().size() < 2) throw DataError("feature network needs at least two styles");
  if (net.frozen()) throw TrainingError("feature network is already frozen");
  std::vector<const GlyphRecord*> items;
  for (const auto& [key, r] : corpus) {
    if (r.style_id != kPrototypeStyle) items.push_back(&r);
  }
  Adam<T> adam(net.parameters(), AdamConfig{0.9, 0.999, 1e-8, 0.0});
  FeatureTrainReport report;
  for (Index epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[uniform_index(rng, i)]);
    double total = 0;
    for (std::size_t b = 0; b < items.size(); b += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t e = std::min(items.size(), b + static_cast<std::size_t>(cfg.batch));
      std::vector<const Tensor<float>*> imgs;
      std::vector<int> labels;
      for (std::size_t i = b; i < e; ++i) {
        imgs.push_back(&items[i]->image);
        labels.push_back(items[i]->style_id - 1);
      }
      Graph<T> g;
      Context<T> ctx{g, Mode::train};
      const Var<T> loss = mean_all(softmax_nll(net.logits(ctx, net.features(ctx, g.input(stack_glyphs<T>(imgs)))), labels));
      total += static_cast<double>(loss.item()) * static_cast<double>(e - b);
      adam.step(g.backward(loss), cfg.lr);
    }
    report.epochs = epoch + 1;
    report.epoch_losses.push_back(total / static_cast<double>(items.size()));
    report.accuracy = feature_accuracy(net, corpus);
    if (report.accuracy >= cfg.accuracy_floor) {
      net.freeze();
      return report;
    }
  }
  std::ostringstream msg;
  msg << "feature network reached accuracy " << report.accuracy << " < " << cfg.accuracy_floor << " after "
      << report.epochs << " epochs; losses:";
  for (double l : report.epoch_losses) msg << ' ' << l;
  throw TrainingError(msg.str());
}

}  // namespace wnet
