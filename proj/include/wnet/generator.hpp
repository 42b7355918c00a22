// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <set>

#include "wnet/nn.hpp"

namespace wnet {

inline constexpr int kEncoderLayers = 6;
inline constexpr Index kBottleneckWidth = 512;

struct GeneratorConfig {
  /// Output channels of encoder layers L1..L6 (both encoders).
  std::vector<Index> widths{64, 128, 256, 512, 512, 512};
  /// Residual blocks per chain.
  Index blocks = 5;
  Index kernel = 5;
  Index residual_kernel = 3;
  /// Encoder layers whose outputs are shortcut-concatenated from both encoders.
  std::vector<int> shortcut_layers{5, 4};
  /// Content-encoder layers passed through a residual chain into the decoder.
  std::vector<int> residual_layers{3, 2, 1};
  double dropout = 0.5;
  /// Decoder stages 1..dropout_stages use dropout in train mode.
  int dropout_stages = 3;
  /// J: content-head classes.
  Index chars = 16;
  /// I: style-head classes.
  Index styles = 3;

  void validate() const {
    if (widths.size() != kEncoderLayers) throw ConfigError("generator needs exactly 6 encoder widths");
    if (widths.back() != kBottleneckWidth) throw ConfigError("bottleneck width must be 512");
    for (Index w : widths) {
      if (w < 1) throw ConfigError("encoder widths must be positive");
    }
    if (blocks < 1) throw ConfigError("residual chains need at least one block");
    if (chars < 1 || styles < 1) throw ConfigError("head sizes must be positive");
    if (dropout < 0 || dropout >= 1) throw ConfigError("dropout rate must lie in [0, 1)");
    std::set<int> seen;
    for (int l : shortcut_layers) {
      if (l < 1 || l > 5 || !seen.insert(l).second) throw ConfigError("invalid shortcut layer " + std::to_string(l));
    }
    for (int l : residual_layers) {
      if (l < 1 || l > 5 || !seen.insert(l).second) throw ConfigError("invalid residual layer " + std::to_string(l));
    }
  }

  bool is_shortcut(int layer) const {
    return std::find(shortcut_layers.begin(), shortcut_layers.end(), layer) != shortcut_layers.end();
  }
  bool is_residual(int layer) const {
    return std::find(residual_layers.begin(), residual_layers.end(), layer) != residual_layers.end();
  }
};

/// Feature maps L1..L6 of one encoder pass.
template <class T>
struct EncoderActivations {
  std::array<Var<T>, kEncoderLayers> layers;

  const Var<T>& level(int l) const { return layers.at(static_cast<std::size_t>(l - 1)); }
  /// Flattened L6: (B, 512).
  Var<T> code() const { return flatten(layers.back()); }
  Index batch() const { return layers.front().dim(0); }
};

template <class T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(ParameterSet<T>& ps, const std::string& name, const GeneratorConfig& cfg, Rng& rng) {
    Index in = 1;
    for (int l = 0; l < kEncoderLayers; ++l) {
      const std::string layer = name + ".conv" + std::to_string(l + 1);
      convs_[static_cast<std::size_t>(l)] = Conv2d<T>(ps, layer, cfg.kernel, in, cfg.widths[static_cast<std::size_t>(l)], 2, rng);
      if (l > 0) norms_[static_cast<std::size_t>(l)] = BatchNorm<T>(ps, name + ".bn" + std::to_string(l + 1), cfg.widths[static_cast<std::size_t>(l)]);
      in = cfg.widths[static_cast<std::size_t>(l)];
    }
  }

  EncoderActivations<T> operator()(Context<T>& ctx, const Var<T>& x) const {
    if (x.shape().size() != 4 || x.dim(1) != 64 || x.dim(2) != 64 || x.dim(3) != 1) {
      throw ShapeError("encoder expects (B,64,64,1), got " + to_string(x.shape()));
    }
    EncoderActivations<T> acts;
    Var<T> h = x;
    for (std::size_t l = 0; l < kEncoderLayers; ++l) {
      h = convs_[l](ctx, h);
      if (l > 0) h = norms_[l](ctx, h);
      h = relu(h);
      acts.layers[l] = h;
    }
    return acts;
  }

 private:
  std::array<Conv2d<T>, kEncoderLayers> convs_;
  std::array<BatchNorm<T>, kEncoderLayers> norms_;
};

/// Output of one generator pass, with both encoders' activations for the
/// auxiliary losses.
template <class T>
struct GeneratorOutput {
  Var<T> image;
  EncoderActivations<T> content;
  EncoderActivations<T> style;
};

/// Enc_p, Enc_r, Dec and the two encoder classifier heads.
template <class T>
class Generator {
 public:
  explicit Generator(const GeneratorConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    content_encoder_ = Encoder<T>(params_, "enc_p", cfg_, rng);
    style_encoder_ = Encoder<T>(params_, "enc_r", cfg_, rng);
    const Index code = kBottleneckWidth;
    const Index chain_kernel = 1;  // the bottleneck is 1x1
    style_chain_ = ResidualChain<T>(params_, "enc_r.chain6", code, cfg_.blocks, chain_kernel, rng);
    for (int l : cfg_.residual_layers) {
      content_chains_[static_cast<std::size_t>(l - 1)] =
          ResidualChain<T>(params_, "enc_p.chain" + std::to_string(l), width(l), cfg_.blocks, cfg_.residual_kernel, rng);
    }
    Index in = 3 * code;
    for (int s = 1; s <= kEncoderLayers; ++s) {
      const int level = kEncoderLayers - s;  // encoder layer with matching spatial size; 0 = image
      const Index out = level == 0 ? 1 : width(level);
      const std::string name = "dec.deconv" + std::to_string(s);
      deconvs_[static_cast<std::size_t>(s - 1)] = Deconv2d<T>(params_, name, cfg_.kernel, in, out, 2, rng);
      if (level > 0) {
        norms_[static_cast<std::size_t>(s - 1)] = BatchNorm<T>(params_, "dec.bn" + std::to_string(s), out);
        in = out;
        if (cfg_.is_shortcut(level)) in += 2 * width(level);
        if (cfg_.is_residual(level)) in += width(level);
      }
    }
    head_p_ = Dense<T>(params_, "head_p", code, cfg_.chars, rng);
    head_r_ = Dense<T>(params_, "head_r", code, cfg_.styles, rng);
  }

  Generator(const Generator&) = delete;
  Generator& operator=(const Generator&) = delete;

  const GeneratorConfig& config() const noexcept { return cfg_; }
  ParameterSet<T>& parameters() noexcept { return params_; }
  const ParameterSet<T>& parameters() const noexcept { return params_; }

  EncoderActivations<T> encode_content(Context<T>& ctx, const Var<T>& x) const { return content_encoder_(ctx, x); }
  EncoderActivations<T> encode_style(Context<T>& ctx, const Var<T>& x) const { return style_encoder_(ctx, x); }

  /// Decoder over both activation sets; batch extents must agree.
  Var<T> decode(Context<T>& ctx, const EncoderActivations<T>& content, const EncoderActivations<T>& style) const {
    if (content.batch() != style.batch()) throw ShapeError("content and style batches differ");
    const Var<T> style_code = style.level(kEncoderLayers);
    Var<T> h = concat_channels<T>({content.level(kEncoderLayers), style_code, style_chain_(ctx, style_code)});
    for (int s = 1; s <= kEncoderLayers; ++s) {
      const int level = kEncoderLayers - s;
      h = deconvs_[static_cast<std::size_t>(s - 1)](ctx, h);
      if (level == 0) return tanh(h);
      h = norms_[static_cast<std::size_t>(s - 1)](ctx, h);
      if (s <= cfg_.dropout_stages) h = dropout(ctx, h, cfg_.dropout);
      h = relu(h);
      std::vector<Var<T>> parts{h};
      if (cfg_.is_shortcut(level)) {
        parts.push_back(content.level(level));
        parts.push_back(style.level(level));
      }
      if (cfg_.is_residual(level)) {
        parts.push_back(content_chains_[static_cast<std::size_t>(level - 1)](ctx, content.level(level)));
      }
      if (parts.size() > 1) h = concat_channels<T>(parts);
    }
    return h;
  }

  /// G(prototype, reference).
  GeneratorOutput<T> operator()(Context<T>& ctx, const Var<T>& prototype, const Var<T>& reference) const {
    GeneratorOutput<T> out{Var<T>{}, encode_content(ctx, prototype), encode_style(ctx, reference)};
    out.image = decode(ctx, out.content, out.style);
    return out;
  }

  /// θ_p: J-way logits from a content code.
  Var<T> classify_content(Context<T>& ctx, const Var<T>& code) const { return head_p_(ctx, code); }
  /// θ_r: I-way logits from a style code.
  Var<T> classify_style(Context<T>& ctx, const Var<T>& code) const { return head_r_(ctx, code); }

  const ResidualChain<T>& style_chain() const { return style_chain_; }
  const ResidualChain<T>& content_chain(int layer) const {
    if (!cfg_.is_residual(layer)) throw ConfigError("layer has no residual chain");
    return content_chains_[static_cast<std::size_t>(layer - 1)];
  }

 private:
  Index width(int layer) const { return cfg_.widths[static_cast<std::size_t>(layer - 1)]; }

  GeneratorConfig cfg_;
  ParameterSet<T> params_;
  Encoder<T> content_encoder_, style_encoder_;
  ResidualChain<T> style_chain_;
  std::array<ResidualChain<T>, kEncoderLayers - 1> content_chains_;
  std::array<Deconv2d<T>, kEncoderLayers> deconvs_;
  std::array<BatchNorm<T>, kEncoderLayers> norms_;
  Dense<T> head_p_, head_r_;
};

}  // namespace wnet
