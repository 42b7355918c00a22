// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "wnet/critic.hpp"
#include "wnet/generator.hpp"
#include "wnet/losses.hpp"
#include "wnet/optim.hpp"

namespace wnet {

struct TrainConfig {
  LossWeights weights;
  Index batch = 16;
  Index epochs = 1;
  /// 0 selects triplet_count / batch for the training corpus.
  Index iterations_per_epoch = 0;
  Index d_steps = 1;
  double lr = 0.0005;
  /// Per-epoch factor γ of lr = lr · γ^epoch.
  double lr_decay = 0.99;
  AdamConfig adam;
  std::uint64_t seed = 0;
  /// Squared two-sided penalty (‖g‖−1)²; false selects |‖g‖−1|.
  bool gp_squared = true;
  GeneratorConfig generator;
  CriticConfig critic;
  FeatureNetConfig phi;
  FeatureTrainConfig phi_train;

  void validate() const {
    if (batch < 2) throw ConfigError("batch size must be at least 2 (batch norm in train mode)");
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (iterations_per_epoch < 0) throw ConfigError("iterations per epoch must be non-negative");
    if (d_steps < 1) throw ConfigError("d-steps per g-step must be at least 1");
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
    if (!(lr_decay > 0)) throw ConfigError("learning-rate decay must be positive");
    for (double w : {weights.alpha, weights.alpha_gp, weights.beta_d, weights.beta_p, weights.beta_r,
                     weights.lambda_l1, weights.lambda_phi, weights.psi_p, weights.psi_r}) {
      if (!(w >= 0)) throw ConfigError("loss weights must be non-negative");
    }
    generator.validate();
    critic.validate();
  }
};

/// Copy of `cfg` with head sizes and critic input fitted to a corpus.
inline TrainConfig fit_to_corpus(TrainConfig cfg, const CorpusIndex& corpus) {
  cfg.generator.chars = corpus.char_count();
  cfg.generator.styles = corpus.style_count();
  cfg.critic.styles = corpus.style_count();
  cfg.phi.styles = corpus.style_count();
  return cfg;
}

/// Narrower encoder, decoder and critic widths for single-core runs; every
/// other field is kept.
inline TrainConfig apply_desk_widths(TrainConfig cfg) {
  cfg.generator.widths = {16, 32, 64, 128, 256, 512};
  cfg.critic.widths = {16, 32, 64, 128};
  return cfg;
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, alpha, alpha_gp, beta_d, beta_p, beta_r, lambda_l1,
                                                lambda_phi, psi_p, psi_r)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AdamConfig, beta1, beta2, epsilon, weight_decay)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GeneratorConfig, widths, blocks, kernel, residual_kernel,
                                                shortcut_layers, residual_layers, dropout, dropout_stages, chars,
                                                styles)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CriticConfig, widths, kernel, image_size, channels, dropout,
                                                leaky_slope, styles)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FeatureNetConfig, widths, kernel, styles)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FeatureTrainConfig, max_epochs, accuracy_floor, batch, lr)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, weights, batch, epochs, iterations_per_epoch, d_steps,
                                                lr, lr_decay, adam, seed, gp_squared, generator, critic, phi,
                                                phi_train)

inline std::string to_json_text(const TrainConfig& cfg) { return nlohmann::json(cfg).dump(); }

inline TrainConfig train_config_from_json(const std::string& text) {
  try {
    return nlohmann::json::parse(text).get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed training config: ") + e.what());
  }
}

}  // namespace wnet
