// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "support/gradcheck.hpp"
#include "wnet/losses.hpp"

using namespace wnet;
using wnet::testing::random_tensor;
using wnet::testing::parameter_gradcheck;
using wnet::testing::relative_error;

namespace {

using D = double;

Var<D> constant(const Tensor<D>& t) { return Var<D>::constant(t); }

Tensor<D> filled(Shape s, D v) { return Tensor<D>(std::move(s), v); }

CriticConfig tiny_critic_config() {
  CriticConfig cfg;
  cfg.widths = {4, 8};
  cfg.image_size = 8;
  cfg.dropout = 0.0;
  cfg.styles = 3;
  return cfg;
}

/// Two-layer encoder, dense head and two-layer decoder on 8x8 images.
struct TinyGenerator {
  ParameterSet<D> ps;
  Conv2d<D> enc1, enc2;
  Dense<D> head;
  Deconv2d<D> dec1, dec2;

  explicit TinyGenerator(Rng& rng)
      : enc1(ps, "enc1", 3, 1, 4, 2, rng),
        enc2(ps, "enc2", 3, 4, 4, 2, rng),
        head(ps, "head", 16, 3, rng),
        dec1(ps, "dec1", 3, 8, 4, 2, rng),
        dec2(ps, "dec2", 3, 4, 1, 2, rng) {
    for (auto& p : ps) {
      for (auto& v : p.value.values()) v = uniform(rng, -0.5, 0.5);
    }
  }

  Var<D> encode(Context<D>& ctx, const Var<D>& x) const { return leaky_relu(enc2(ctx, leaky_relu(enc1(ctx, x)))); }
  Var<D> generate(Context<D>& ctx, const Var<D>& proto, const Var<D>& ref) const {
    const Var<D> h = concat_channels<D>({encode(ctx, proto), encode(ctx, ref)});
    return tanh(dec2(ctx, leaky_relu(dec1(ctx, h))));
  }
};

/// Five frozen stages over 8x8 inputs.
struct TinyFeatures {
  ParameterSet<D> ps;
  std::vector<Conv2d<D>> convs;

  explicit TinyFeatures(Rng& rng) {
    Index in = 1;
    for (int s = 0; s < 5; ++s) {
      convs.emplace_back(ps, "phi" + std::to_string(s), 3, in, 3, s == 0 || s == 4 ? 1 : 2, rng);
      in = 3;
    }
    for (auto& p : ps) {
      for (auto& v : p.value.values()) v = uniform(rng, -0.6, 0.6);
    }
  }
  FeatureStack<D> operator()(const Var<D>& x) const {
    FeatureStack<D> out;
    Var<D> h = x;
    for (std::size_t s = 0; s < 5; ++s) {
      h = tanh(add(conv2d(h, constant(convs[s].weight->value), convs[s].stride), constant(convs[s].bias->value)));
      out[s] = h;
    }
    return out;
  }
};

struct MiniSetup {
  Rng rng;
  TinyGenerator gen;
  Critic<D> critic;
  TinyFeatures phi;
  Tensor<D> proto, ref, target;
  std::vector<int> styles{0, 2};

  explicit MiniSetup(std::uint64_t seed)
      : rng(derive_rng(seed, 77)), gen(rng), critic(tiny_critic_config(), rng), phi(rng) {
    for (auto& p : critic.parameters()) {
      if (p.name.find(".w") != std::string::npos) {
        for (auto& v : p.value.values()) v = uniform(rng, -0.3, 0.3);
      }
    }
    proto = random_tensor({2, 8, 8, 1}, rng);
    ref = random_tensor({2, 8, 8, 1}, rng);
    target = random_tensor({2, 8, 8, 1}, rng);
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// Weights and assembly
// ---------------------------------------------------------------------------

TEST(LossWeights, DefaultsMatchPublishedValues) {
  const LossWeights w;
  EXPECT_EQ(w.alpha, 3.0);
  EXPECT_EQ(w.alpha_gp, 10.0);
  EXPECT_EQ(w.beta_d, 1.0);
  EXPECT_EQ(w.beta_p, 0.2);
  EXPECT_EQ(w.beta_r, 0.2);
  EXPECT_EQ(w.lambda_l1, 50.0);
  EXPECT_EQ(w.lambda_phi, 75.0);
  EXPECT_EQ(w.psi_p, 3.0);
  EXPECT_EQ(w.psi_r, 5.0);
}

TEST(Assemble, AllTermsOne) {
  LossBreakdown b;
  b.adv_g = b.adv_d = b.adv_gp = b.dac = b.dac_critic = b.l1 = b.phi = b.const_p = b.const_r = b.enc_p_cls =
      b.enc_r_cls = 1.0;
  const auto out = assemble_objectives(b, LossWeights{});
  EXPECT_NEAR(out.loss_g, 131.4, 1e-12);
  EXPECT_NEAR(out.loss_d, 14.0, 1e-12);
}

TEST(Assemble, AllTermsZero) {
  const auto out = assemble_objectives(LossBreakdown{}, LossWeights{});
  EXPECT_EQ(out.loss_g, 0.0);
  EXPECT_EQ(out.loss_d, 0.0);
}

TEST(Assemble, WeightedSumOfRandomTerms) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    LossBreakdown b;
    b.adv_g = uniform(rng, -5, 5);
    b.adv_d = uniform(rng, -5, 5);
    b.adv_gp = uniform(rng, 0, 5);
    b.dac = uniform(rng, 0, 5);
    b.dac_critic = uniform(rng, 0, 5);
    b.l1 = uniform(rng, 0, 2);
    b.phi = uniform(rng, 0, 2);
    b.const_p = uniform(rng, 0, 2);
    b.const_r = uniform(rng, 0, 2);
    b.enc_p_cls = uniform(rng, 0, 3);
    b.enc_r_cls = uniform(rng, 0, 3);
    const auto out = assemble_objectives(b, LossWeights{});
    const double g = -3 * b.adv_g + b.dac + 0.2 * b.enc_p_cls + 0.2 * b.enc_r_cls + 50 * b.l1 + 75 * b.phi +
                     3 * b.const_p + 5 * b.const_r;
    const double d = 3 * b.adv_d + 10 * b.adv_gp + b.dac_critic;
    EXPECT_NEAR(out.loss_g, g, 1e-12 * std::max(1.0, std::abs(g)));
    EXPECT_NEAR(out.loss_d, d, 1e-12 * std::max(1.0, std::abs(d)));
  }
}

// ---------------------------------------------------------------------------
// Individual terms
// ---------------------------------------------------------------------------

TEST(Interpolate, Endpoints) {
  const auto real = filled({2, 2, 2, 1}, 1.0);
  const auto fake = filled({2, 2, 2, 1}, -1.0);
  EXPECT_EQ(interpolate(real, fake, {1.0, 1.0}), real);
  EXPECT_EQ(interpolate(real, fake, {0.0, 0.0}), fake);
  const auto mid = interpolate(real, fake, {0.5, 0.5});
  for (D v : mid.values()) EXPECT_EQ(v, 0.0);
}

TEST(Interpolate, PerSampleEpsilonInUnitInterval) {
  Rng rng(4);
  const auto real = filled({64, 3, 3, 1}, 1.0);
  const auto fake = filled({64, 3, 3, 1}, 0.0);
  const auto x = interpolate(real, fake, rng);
  for (Index n = 0; n < 64; ++n) {
    const D e = x[n * 9];
    EXPECT_GE(e, 0.0);
    EXPECT_LE(e, 1.0);
    for (Index i = 1; i < 9; ++i) EXPECT_EQ(x[n * 9 + i], e);
  }
}

TEST(AdvLosses, MeansOfScores) {
  const auto t = adv_losses(constant(filled({4, 1}, 2.0)), constant(filled({4, 1}, 0.5)));
  EXPECT_DOUBLE_EQ(t.adv_d.item(), 1.5);
  EXPECT_DOUBLE_EQ(t.adv_g.item(), 0.5);
  const auto same = adv_losses(constant(filled({3, 1}, 0.7)), constant(filled({3, 1}, 0.7)));
  EXPECT_EQ(same.adv_d.item(), 0.0);
  const auto one = adv_losses(constant(filled({1, 1}, 4.0)), constant(filled({1, 1}, 1.0)));
  EXPECT_EQ(one.adv_d.item(), 3.0);
  EXPECT_EQ(one.adv_g.item(), 1.0);
}

TEST(GradientPenalty, LinearCriticClosedForm) {
  Graph<D> g;
  const auto x = g.variable(Tensor<D>({1, 2, 2, 1}, 0.3));
  const auto score = scale(sum_to(x, Shape{1, 1, 1, 1}), 2.0);
  EXPECT_NEAR(gradient_penalty(g, score, x).item(), 9.0, 1e-12);
}

TEST(GradientPenalty, UnitNormGivesZeroAndUnsquaredFlag) {
  Graph<D> g;
  const auto x = g.variable(Tensor<D>({2, 2, 2, 1}, 0.1));
  const auto unit = scale(sum_to(x, Shape{2, 1, 1, 1}), 0.5);  // ||g|| = 0.5 * 2 = 1
  EXPECT_NEAR(gradient_penalty(g, unit, x).item(), 0.0, 1e-15);
  Graph<D> h;
  const auto y = h.variable(Tensor<D>({1, 2, 2, 1}, 0.1));
  EXPECT_NEAR(gradient_penalty(h, scale(sum_to(y, Shape{1, 1, 1, 1}), 2.0), y, /*squared=*/false).item(), 3.0,
              1e-12);
}

TEST(GradientPenalty, NonNegativeOnRandomCritics) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    MiniSetup m(seed);
    Graph<D> g;
    Context<D> ctx{g};
    const auto xh = g.variable(interpolate(m.target, m.proto, m.rng));
    const auto s = m.critic(ctx, g.input(m.proto), xh, g.input(m.ref)).score;
    EXPECT_GE(gradient_penalty(g, s, xh).item(), 0.0);
  }
}

TEST(GradientPenalty, DoubleBackwardMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    MiniSetup m(seed);
    const auto xhat = interpolate(m.target, m.proto, m.rng);
    auto loss = [&](Graph<D>& g) {
      Context<D> ctx{g};
      const auto x = g.variable(xhat);
      return gradient_penalty(g, m.critic(ctx, g.input(m.proto), x, g.input(m.ref)).score, x);
    };
    EXPECT_LE(parameter_gradcheck(loss, {&m.critic.parameters()}), 1e-3) << "seed " << seed;
  }
}

TEST(DacLoss, Examples) {
  EXPECT_NEAR(dac_loss(constant(filled({3, 5}, 0.0)), constant(filled({3, 5}, 1.0)), {0, 2, 4}).item(),
              2 * std::log(5.0), 1e-12);
  Tensor<D> logits({1, 2});
  logits[0] = 1.0;
  EXPECT_NEAR(dac_loss(constant(logits), constant(logits), {0}).item(), 0.6266, 1e-4);
  Tensor<D> sure({1, 3});
  sure[1] = 60.0;
  EXPECT_LT(dac_loss(constant(sure), constant(sure), {1}).item(), 1e-20);
}

TEST(ReconstructionLosses, IdenticalImagesAreZero) {
  Rng rng(5);
  TinyFeatures phi(rng);
  const auto x = random_tensor({2, 8, 8, 1}, rng);
  EXPECT_EQ(l1_loss(constant(x), constant(x)).item(), 0.0);
  EXPECT_EQ(phi_loss(phi(constant(x)), phi(constant(x))).item(), 0.0);
}

TEST(ReconstructionLosses, OppositeConstantImages) {
  EXPECT_EQ(l1_loss(constant(filled({2, 4, 4, 1}, 1.0)), constant(filled({2, 4, 4, 1}, -1.0))).item(), 2.0);
}

TEST(ReconstructionLosses, PhiMatchesTwoPassRecomputation) {
  Rng rng(6);
  TinyFeatures phi(rng);
  const auto a = random_tensor({3, 8, 8, 1}, rng);
  const auto b = random_tensor({3, 8, 8, 1}, rng);
  const auto fa = phi(constant(a));
  const auto fb = phi(constant(b));
  double total = 0;
  for (std::size_t s = 0; s < 5; ++s) {
    const auto& x = fa[s].value();
    const auto& y = fb[s].value();
    std::vector<double> diff(static_cast<std::size_t>(x.size()));
    for (Index i = 0; i < x.size(); ++i) diff[static_cast<std::size_t>(i)] = x[i] - y[i];
    double sq = 0;
    for (double d : diff) sq += d * d;
    total += sq / static_cast<double>(diff.size());
  }
  EXPECT_NEAR(phi_loss(fa, fb).item(), std::sqrt(total), 1e-12);
}

TEST(ConstLoss, Examples) {
  Rng rng(7);
  const auto c = random_tensor({4, 512}, rng);
  EXPECT_EQ(const_loss(constant(c), constant(c)).item(), 0.0);
  Tensor<D> shifted = c;
  for (auto& v : shifted.values()) v += 0.25;
  EXPECT_NEAR(const_loss(constant(c), constant(shifted)).item(), 0.0625, 1e-12);
}

TEST(ConstLoss, InvariantToBatchPermutation) {
  Rng rng(8);
  const auto a = random_tensor({4, 16}, rng);
  const auto b = random_tensor({4, 16}, rng);
  auto permute = [](const Tensor<D>& t) {
    std::vector<Tensor<D>> parts{slice_batch(t, 3, 1), slice_batch(t, 0, 1), slice_batch(t, 2, 1),
                                 slice_batch(t, 1, 1)};
    return concat_batch<D>(parts);
  };
  EXPECT_NEAR(const_loss(constant(a), constant(b)).item(), const_loss(constant(permute(a)), constant(permute(b))).item(),
              1e-15);
}

TEST(ConstLoss, SelfConsistencyThroughEncoder) {
  Rng rng(9);
  TinyGenerator gen(rng);
  Graph<D> g;
  Context<D> ctx{g};
  const auto x = random_tensor({2, 8, 8, 1}, rng);
  EXPECT_EQ(const_loss(gen.encode(ctx, g.input(x)), gen.encode(ctx, g.input(x))).item(), 0.0);
}

TEST(EncClsLoss, UniformAndPerfectHeads) {
  EXPECT_NEAR(enc_cls_loss(constant(filled({2, 16}, 0.3)), {1, 15}).item(), std::log(16.0), 1e-12);
  Tensor<D> sure({1, 16});
  sure[5] = 80.0;
  EXPECT_LT(enc_cls_loss(constant(sure), {5}).item(), 1e-30);
}

TEST(EncClsLoss, GradientReachesEncoderConvolution) {
  Rng rng(10);
  TinyGenerator gen(rng);
  Graph<D> g;
  Context<D> ctx{g};
  const auto code = flatten(gen.encode(ctx, g.input(random_tensor({2, 8, 8, 1}, rng))));
  const auto grads = g.backward(enc_cls_loss(gen.head(ctx, code), {0, 2}));
  double n = 0;
  for (D v : grads.of(*gen.enc1.weight).values()) n += v * v;
  EXPECT_GT(n, 0.0);
}

TEST(LossTerms, NonNegativeOnRandomInputs) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    MiniSetup m(seed);
    Graph<D> g;
    Context<D> ctx{g};
    const auto fake = m.gen.generate(ctx, g.input(m.proto), g.input(m.ref));
    const auto real_out = m.critic(ctx, g.input(m.proto), g.input(m.target), g.input(m.ref));
    const auto fake_out = m.critic(ctx, g.input(m.proto), fake, g.input(m.ref));
    EXPECT_GE(dac_loss(real_out.style_logits, fake_out.style_logits, m.styles).item(), 0.0);
    EXPECT_GE(l1_loss(g.input(m.target), fake).item(), 0.0);
    EXPECT_GE(phi_loss(m.phi(g.input(m.target)), m.phi(fake)).item(), 0.0);
    EXPECT_GE(const_loss(flatten(m.gen.encode(ctx, g.input(m.proto))), flatten(m.gen.encode(ctx, fake))).item(), 0.0);
    EXPECT_GE(enc_cls_loss(m.gen.head(ctx, flatten(m.gen.encode(ctx, g.input(m.proto)))), {0, 1}).item(), 0.0);
  }
}

// ---------------------------------------------------------------------------
// Parameter gradients of every term on a miniature model
// ---------------------------------------------------------------------------

class TermGradients : public ::testing::TestWithParam<std::string> {};

TEST_P(TermGradients, MatchFiniteDifferences) {
  const std::string term = GetParam();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    MiniSetup m(seed);
    const auto xhat = interpolate(m.target, m.proto, m.rng);
    auto loss = [&](Graph<D>& g) -> Var<D> {
      Context<D> ctx{g};
      const auto proto = g.input(m.proto);
      const auto ref = g.input(m.ref);
      const auto target = g.input(m.target);
      const auto fake = m.gen.generate(ctx, proto, ref);
      if (term == "adv_g") return adv_losses(m.critic(ctx, proto, target, ref).score, m.critic(ctx, proto, fake, ref).score).adv_g;
      if (term == "adv_d") return adv_losses(m.critic(ctx, proto, target, ref).score, m.critic(ctx, proto, fake, ref).score).adv_d;
      if (term == "adv_gp") {
        const auto x = g.variable(xhat);
        return gradient_penalty(g, m.critic(ctx, proto, x, ref).score, x);
      }
      if (term == "dac") {
        return dac_loss(m.critic(ctx, proto, target, ref).style_logits, m.critic(ctx, proto, fake, ref).style_logits,
                        m.styles);
      }
      if (term == "l1") return l1_loss(target, fake);
      if (term == "phi") return phi_loss(m.phi(target), m.phi(fake));
      if (term == "const") return const_loss(flatten(m.gen.encode(ctx, proto)), flatten(m.gen.encode(ctx, fake)));
      return enc_cls_loss(m.gen.head(ctx, flatten(m.gen.encode(ctx, proto))), {1, 2});
    };
    EXPECT_LE(parameter_gradcheck(loss, {&m.gen.ps, &m.critic.parameters()}), 1e-3) << term << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllTerms, TermGradients,
                         ::testing::Values("adv_g", "adv_d", "adv_gp", "dac", "l1", "phi", "const", "enc_cls"));
