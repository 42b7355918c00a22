// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "wnet/critic.hpp"

namespace wnet {

struct LossWeights {
  double alpha = 3.0;
  double alpha_gp = 10.0;
  double beta_d = 1.0;
  double beta_p = 0.2;
  double beta_r = 0.2;
  double lambda_l1 = 50.0;
  double lambda_phi = 75.0;
  double psi_p = 3.0;
  double psi_r = 5.0;
};

/// Every term of one training iteration. `dac` is the G-step value and
/// `dac_critic` the D-step value of the same auxiliary-classifier loss.
struct LossBreakdown {
  double adv_g = 0;
  double adv_d = 0;
  double adv_gp = 0;
  double dac = 0;
  double dac_critic = 0;
  double l1 = 0;
  double phi = 0;
  double const_p = 0;
  double const_r = 0;
  double enc_p_cls = 0;
  double enc_r_cls = 0;
  double loss_g = 0;
  double loss_d = 0;

  /// (name, value) for every field, in a fixed order.
  std::vector<std::pair<std::string, double>> fields() const {
    return {{"adv_g", adv_g},         {"adv_d", adv_d},         {"adv_gp", adv_gp},     {"dac", dac},
            {"dac_critic", dac_critic}, {"l1", l1},               {"phi", phi},           {"const_p", const_p},
            {"const_r", const_r},     {"enc_p_cls", enc_p_cls}, {"enc_r_cls", enc_r_cls}, {"loss_g", loss_g},
            {"loss_d", loss_d}};
  }
};

inline double generator_objective(const LossBreakdown& b, const LossWeights& w) {
  return -w.alpha * b.adv_g + w.beta_d * b.dac + w.beta_p * b.enc_p_cls + w.beta_r * b.enc_r_cls +
         w.lambda_l1 * b.l1 + w.lambda_phi * b.phi + w.psi_p * b.const_p + w.psi_r * b.const_r;
}

inline double critic_objective(const LossBreakdown& b, const LossWeights& w) {
  return w.alpha * b.adv_d + w.alpha_gp * b.adv_gp + w.beta_d * b.dac_critic;
}

/// Fills loss_g and loss_d from the individual terms.
inline LossBreakdown assemble_objectives(LossBreakdown b, const LossWeights& w) {
  b.loss_g = generator_objective(b, w);
  b.loss_d = critic_objective(b, w);
  return b;
}

/// x̂ = ε·real + (1−ε)·fake with one ε per sample.
template <class T>
Tensor<T> interpolate(const Tensor<T>& real, const Tensor<T>& fake, const std::vector<double>& eps) {
  if (real.shape() != fake.shape()) throw ShapeError("interpolate: real and fake shapes differ");
  const Index n = real.dim(0);
  if (static_cast<Index>(eps.size()) != n) throw ShapeError("interpolate: one epsilon per sample required");
  const Index per = real.size() / std::max<Index>(n, 1);
  Tensor<T> out(real.shape());
  for (Index s = 0; s < n; ++s) {
    const double e = eps[static_cast<std::size_t>(s)];
    for (Index i = s * per; i < (s + 1) * per; ++i) {
      out[i] = static_cast<T>(e * static_cast<double>(real[i]) + (1.0 - e) * static_cast<double>(fake[i]));
    }
  }
  return out;
}

/// ε ~ Uniform[0,1] per sample.
template <class T>
Tensor<T> interpolate(const Tensor<T>& real, const Tensor<T>& fake, Rng& rng) {
  std::vector<double> eps(static_cast<std::size_t>(real.dim(0)));
  for (auto& e : eps) e = uniform01(rng);
  return interpolate(real, fake, eps);
}

template <class T>
struct AdversarialTerms {
  Var<T> adv_g;
  Var<T> adv_d;
};

/// adv_g = mean fake score; adv_d = mean real score − mean fake score.
template <class T>
AdversarialTerms<T> adv_losses(const Var<T>& real_scores, const Var<T>& fake_scores) {
  const Var<T> fake_mean = mean_all(fake_scores);
  return {fake_mean, sub(mean_all(real_scores), fake_mean)};
}

/// Batch mean of (‖∇_x̂ score‖₂ − 1)², or of |‖∇_x̂ score‖₂ − 1| when
/// `squared` is false. Differentiable with respect to the critic.
template <class T>
Var<T> gradient_penalty(Graph<T>& graph, const Var<T>& scores, const Var<T>& interpolated, bool squared = true) {
  const Var<T> g = graph.grad(sum_all(scores), interpolated, /*create_graph=*/true);
  Shape per_sample(g.shape().size(), 1);
  per_sample[0] = g.dim(0);
  const Var<T> norms = sqrt(sum_to(square(g), per_sample));
  const Var<T> gap = add_scalar(norms, T(-1));
  return mean_all(squared ? square(gap) : abs(gap));
}

/// Batch-mean NLL of real and fake style logits, summed.
template <class T>
Var<T> dac_loss(const Var<T>& real_logits, const Var<T>& fake_logits, const std::vector<int>& labels) {
  return add(mean_all(softmax_nll(real_logits, labels)), mean_all(softmax_nll(fake_logits, labels)));
}

/// Mean absolute pixel difference.
template <class T>
Var<T> l1_loss(const Var<T>& target, const Var<T>& generated) {
  return mean_all(abs(sub(target, generated)));
}

/// sqrt of the sum over stages of mean squared feature differences.
template <class T>
Var<T> phi_loss(const FeatureStack<T>& target, const FeatureStack<T>& generated) {
  Var<T> total;
  for (std::size_t s = 0; s < target.size(); ++s) {
    const Var<T> term = mean_all(square(sub(target[s], generated[s])));
    total = s == 0 ? term : add(total, term);
  }
  return sqrt(total);
}

/// Mean squared difference between two codes of the same encoder.
template <class T>
Var<T> const_loss(const Var<T>& original_code, const Var<T>& generated_code) {
  return mean_all(square(sub(original_code, generated_code)));
}

/// Batch-mean NLL of an encoder head on the original inputs.
template <class T>
Var<T> enc_cls_loss(const Var<T>& logits, const std::vector<int>& labels) {
  return mean_all(softmax_nll(logits, labels));
}

}  // namespace wnet
