// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "wnet/generator.hpp"
#include "wnet/critic.hpp"

using namespace wnet;

namespace {

GeneratorConfig narrow_generator() {
  GeneratorConfig cfg;
  cfg.widths = {8, 16, 32, 64, 128, 512};
  cfg.blocks = 2;
  return cfg;
}

template <class T>
Tensor<T> random_images(Index batch, Rng& rng) {
  Tensor<T> t({batch, 64, 64, 1});
  for (auto& v : t.values()) v = static_cast<T>(uniform01(rng) < 0.3 ? 1.0 : -1.0);
  return t;
}

// Independent count: conv/deconv weights + biases, BN gamma/beta, dense heads.
Index expected_generator_parameters(const GeneratorConfig& c) {
  auto conv = [](Index k, Index in, Index out) { return k * k * in * out + out; };
  const auto& w = c.widths;
  Index n = 0;
  for (int e = 0; e < 2; ++e) {
    Index in = 1;
    for (std::size_t l = 0; l < 6; ++l) {
      n += conv(c.kernel, in, w[l]);
      if (l > 0) n += 2 * w[l];
      in = w[l];
    }
  }
  auto chain = [&](Index ch, Index k) { return c.blocks * (2 * conv(k, ch, ch) + 4 * ch); };
  n += chain(512, 1);
  for (int l : c.residual_layers) n += chain(w[static_cast<std::size_t>(l - 1)], c.residual_kernel);
  Index in = 3 * 512;
  for (int s = 1; s <= 6; ++s) {
    const int level = 6 - s;
    const Index out = level == 0 ? 1 : w[static_cast<std::size_t>(level - 1)];
    n += conv(c.kernel, in, out);
    if (level > 0) {
      n += 2 * out;
      in = out;
      if (c.is_shortcut(level)) in += 2 * out;
      if (c.is_residual(level)) in += out;
    }
  }
  n += 512 * c.chars + c.chars + 512 * c.styles + c.styles;
  return n;
}

double norm(const GradientMap<double>& grads, const Parameter<double>& p) {
  if (!grads.contains(p)) return 0.0;
  double n = 0;
  for (double v : grads.of(p).values()) n += v * v;
  return std::sqrt(n);
}

}  // namespace

TEST(Encoder, LayerSizesAndCodeLength) {
  Rng rng(1);
  Generator<float> g(narrow_generator(), rng);
  Graph<float> graph;
  Context<float> ctx{graph};
  const auto acts = g.encode_content(ctx, graph.input(random_images<float>(1, rng)));
  const Index sizes[] = {32, 16, 8, 4, 2, 1};
  for (int l = 1; l <= 6; ++l) {
    EXPECT_EQ(acts.level(l).dim(1), sizes[l - 1]);
    EXPECT_EQ(acts.level(l).dim(2), sizes[l - 1]);
  }
  EXPECT_EQ(acts.code().shape(), (Shape{1, 512}));
  const auto style = g.encode_style(ctx, graph.input(random_images<float>(1, rng)));
  EXPECT_EQ(style.code().shape(), (Shape{1, 512}));
}

TEST(Encoder, RejectsWrongSpatialSize) {
  Rng rng(1);
  Generator<float> g(narrow_generator(), rng);
  Graph<float> graph;
  Context<float> ctx{graph};
  EXPECT_THROW(g.encode_content(ctx, graph.input(Tensor<float>({1, 32, 32, 1}))), ShapeError);
}

TEST(Generator, DefaultConfigShapesAndRange) {
  Rng rng(2);
  Generator<float> g(GeneratorConfig{}, rng);
  for (Index b : {1, 2}) {
    Graph<float> graph;
    Rng drop(3);
    Context<float> ctx{graph, b == 1 ? Mode::eval : Mode::train, true, &drop};
    const auto out = g(ctx, graph.input(random_images<float>(b, rng)), graph.input(random_images<float>(b, rng)));
    EXPECT_EQ(out.image.shape(), (Shape{b, 64, 64, 1}));
    EXPECT_EQ(out.content.code().shape(), (Shape{b, 512}));
    EXPECT_EQ(out.style.code().shape(), (Shape{b, 512}));
    for (float v : out.image.value().values()) {
      ASSERT_GT(v, -1.f);
      ASSERT_LT(v, 1.f);
    }
  }
}

TEST(Generator, BatchOfSixteenInTrainMode) {
  Rng rng(2);
  Generator<float> g(narrow_generator(), rng);
  Graph<float> graph;
  Context<float> ctx{graph, Mode::train, true, &rng};
  const auto out = g(ctx, graph.input(random_images<float>(16, rng)), graph.input(random_images<float>(16, rng)));
  EXPECT_EQ(out.image.shape(), (Shape{16, 64, 64, 1}));
}

TEST(Generator, TrainModeBatchOfOneIsError) {
  Rng rng(2);
  Generator<float> g(narrow_generator(), rng);
  Graph<float> graph;
  Context<float> ctx{graph, Mode::train, true, &rng};
  EXPECT_THROW(g(ctx, graph.input(random_images<float>(1, rng)), graph.input(random_images<float>(1, rng))),
               ConfigError);
}

TEST(Generator, BottleneckConcatenatesBothCodesAndStyleChain) {
  Rng rng(2);
  Generator<float> g(narrow_generator(), rng);
  const auto& w = g.parameters().at("dec.deconv1.w").value;
  EXPECT_EQ(w.dim(3), 3 * 512);
  EXPECT_EQ(g.style_chain().blocks.size(), 2u);
  EXPECT_EQ(g.parameters().at("enc_r.chain6.block0.conv1.w").value.shape(), (Shape{1, 1, 512, 512}));
  EXPECT_FALSE(g.parameters().contains("enc_r.chain1.block0.conv1.w"));
}

TEST(Generator, EvalIsDeterministicAndPermutationEquivariant) {
  Rng rng(4);
  Generator<double> g(narrow_generator(), rng);
  const auto protos = random_images<double>(3, rng);
  const auto refs = random_images<double>(3, rng);
  auto run = [&](const Tensor<double>& p, const Tensor<double>& r) {
    Graph<double> graph;
    Context<double> ctx{graph};
    return g(ctx, graph.input(p), graph.input(r)).image.value();
  };
  const auto a = run(protos, refs);
  EXPECT_EQ(a, run(protos, refs));
  const std::vector<Index> perm{2, 0, 1};
  auto permute = [&](const Tensor<double>& t) {
    std::vector<Tensor<double>> parts;
    for (Index i : perm) parts.push_back(slice_batch(t, i, 1));
    return concat_batch<double>(parts);
  };
  const auto b = run(permute(protos), permute(refs));
  const Index px = 64 * 64;
  for (Index i = 0; i < 3; ++i) {
    for (Index p = 0; p < px; ++p) {
      ASSERT_NEAR(b[i * px + p], a[perm[static_cast<std::size_t>(i)] * px + p], 1e-12);
    }
  }
}

TEST(Generator, ParameterCountIsPinned) {
  Rng rng(5);
  const GeneratorConfig cfg;
  Generator<float> g(cfg, rng);
  EXPECT_EQ(g.parameters().trainable_count(), expected_generator_parameters(cfg));
  EXPECT_EQ(g.parameters().trainable_count(), 96'439'892);
  Rng rng2(5);
  Generator<float> narrow(narrow_generator(), rng2);
  EXPECT_EQ(narrow.parameters().trainable_count(), expected_generator_parameters(narrow_generator()));
}

TEST(Generator, ConfigValidation) {
  GeneratorConfig cfg;
  cfg.widths.back() = 256;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = GeneratorConfig{};
  cfg.residual_layers = {3, 4};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = GeneratorConfig{};
  cfg.widths.pop_back();
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Generator, AlternativeSkipMapBuilds) {
  GeneratorConfig cfg = narrow_generator();
  cfg.shortcut_layers = {5, 4, 3};
  cfg.residual_layers = {2};
  Rng rng(6);
  Generator<float> g(cfg, rng);
  Graph<float> graph;
  Context<float> ctx{graph};
  const auto out = g(ctx, graph.input(random_images<float>(1, rng)), graph.input(random_images<float>(1, rng)));
  EXPECT_EQ(out.image.shape(), (Shape{1, 64, 64, 1}));
  EXPECT_EQ(g.parameters().trainable_count(), expected_generator_parameters(cfg));
}

TEST(ResidualChain, ZeroBranchesAreExactIdentity) {
  Rng rng(7);
  Generator<double> g(narrow_generator(), rng);
  for (auto& p : g.parameters()) {
    if (p.name.find("chain") != std::string::npos && p.name.find(".conv") != std::string::npos) p.value.fill(0.0);
  }
  for (Index b : {1, 3}) {
    Graph<double> graph;
    Context<double> ctx{graph, b == 1 ? Mode::eval : Mode::train};
    Tensor<double> x({b, 8, 8, 32});
    for (auto& v : x.values()) v = uniform(rng, -2, 2);
    EXPECT_EQ(g.content_chain(3)(ctx, graph.input(x)).value(), x);
    Tensor<double> code({b, 1, 1, 512});
    for (auto& v : code.values()) v = uniform(rng, -2, 2);
    EXPECT_EQ(g.style_chain()(ctx, graph.input(code)).value(), code);
  }
}

TEST(ResidualChain, PreservesShape) {
  Rng rng(8);
  ParameterSet<float> ps;
  for (Index m : {1, 2, 5}) {
    ResidualChain<float> chain(ps, "c" + std::to_string(m), 4, m, 3, rng);
    Graph<float> graph;
    Context<float> ctx{graph};
    EXPECT_EQ(chain(ctx, graph.input(Tensor<float>({2, 6, 6, 4}, 0.5f))).shape(), (Shape{2, 6, 6, 4}));
  }
}

TEST(Heads, LogitCountsAndUniformWithZeroWeights) {
  GeneratorConfig cfg = narrow_generator();
  cfg.chars = 16;
  cfg.styles = 3;
  Rng rng(9);
  Generator<double> g(cfg, rng);
  g.parameters().at("head_p.w").value.fill(0);
  g.parameters().at("head_r.w").value.fill(0);
  Graph<double> graph;
  Context<double> ctx{graph};
  const auto acts = g.encode_content(ctx, graph.input(random_images<double>(2, rng)));
  const auto lp = g.classify_content(ctx, acts.code());
  EXPECT_EQ(lp.shape(), (Shape{2, 16}));
  EXPECT_NEAR(mean_all(softmax_nll(lp, {3, 7})).item(), std::log(16.0), 1e-12);
  const auto lr = g.classify_style(ctx, acts.code());
  EXPECT_EQ(lr.shape(), (Shape{2, 3}));
}

TEST(Heads, GradientReachesEncoderConvolutions) {
  Rng rng(10);
  Generator<double> g(narrow_generator(), rng);
  Graph<double> graph;
  Context<double> ctx{graph, Mode::train};
  const auto acts = g.encode_content(ctx, graph.input(random_images<double>(4, rng)));
  const auto loss = mean_all(softmax_nll(g.classify_content(ctx, acts.code()), {0, 1, 2, 3}));
  const auto grads = graph.backward(loss);
  for (const char* name : {"enc_p.conv1.w", "enc_p.conv6.w", "head_p.w"}) {
    const auto& gr = grads.of(g.parameters().at(name));
    double norm = 0;
    for (double v : gr.values()) norm += v * v;
    EXPECT_GT(norm, 0) << name;
  }
  EXPECT_FALSE(grads.contains(g.parameters().at("enc_r.conv1.w")));
}

TEST(BatchNormStats, FrozenStatsModeLeavesRunningMomentsAlone) {
  Rng rng(11);
  Generator<float> g(narrow_generator(), rng);
  const auto before = g.parameters().at("enc_p.bn2.running_mean").value;
  {
    Graph<float> graph;
    Context<float> ctx{graph, Mode::train, /*update_stats=*/false};
    g.encode_content(ctx, graph.input(random_images<float>(2, rng)));
  }
  EXPECT_EQ(g.parameters().at("enc_p.bn2.running_mean").value, before);
  {
    Graph<float> graph;
    Context<float> ctx{graph, Mode::train};
    g.encode_content(ctx, graph.input(random_images<float>(2, rng)));
  }
  EXPECT_FALSE(g.parameters().at("enc_p.bn2.running_mean").value == before);
}

// ---------------------------------------------------------------------------
// Critic
// ---------------------------------------------------------------------------

TEST(Critic, ConcatenatesTripleAndScores) {
  Rng rng(12);
  CriticConfig cfg;
  cfg.widths = {8, 16, 32, 64};
  Critic<float> d(cfg, rng);
  Graph<float> graph;
  Context<float> ctx{graph};
  const auto x = graph.input(random_images<float>(2, rng));
  const auto out = d(ctx, x, x, x);
  EXPECT_EQ(out.score.shape(), (Shape{2, 1}));
  EXPECT_EQ(out.style_logits.shape(), (Shape{2, 3}));
  EXPECT_EQ(d.parameters().at("critic.conv1.w").value.dim(2), 3);
  EXPECT_FALSE(d.parameters().contains("critic.ln1.gamma"));
  EXPECT_TRUE(d.parameters().contains("critic.ln2.gamma"));
}

TEST(Critic, ZeroWeightsGiveZeroScoreAndUniformStyle) {
  Rng rng(13);
  CriticConfig cfg;
  cfg.widths = {8, 16, 32, 64};
  cfg.styles = 5;
  Critic<double> d(cfg, rng);
  for (auto& p : d.parameters()) {
    if (p.name.find(".w") != std::string::npos) p.value.fill(0);
  }
  Graph<double> graph;
  Context<double> ctx{graph};
  const auto x = graph.input(random_images<double>(2, rng));
  const auto out = d(ctx, x, x, x);
  for (double v : out.score.value().values()) EXPECT_EQ(v, 0.0);
  EXPECT_NEAR(mean_all(softmax_nll(out.style_logits, {0, 4})).item(), std::log(5.0), 1e-12);
}

TEST(Critic, HeadsHaveDisjointGradients) {
  Rng rng(14);
  CriticConfig cfg;
  cfg.widths = {4, 8};
  cfg.image_size = 8;
  Critic<double> d(cfg, rng);
  Tensor<double> x({2, 8, 8, 3});
  for (auto& v : x.values()) v = uniform(rng, -1, 1);
  {
    Graph<double> graph;
    Context<double> ctx{graph};
    const auto grads = graph.backward(sum_all(d.forward(ctx, graph.input(x)).score));
    EXPECT_EQ(norm(grads, *d.style_head().weight), 0.0);
    EXPECT_EQ(norm(grads, *d.style_head().bias), 0.0);
    EXPECT_GT(norm(grads, *d.score_head().weight), 0.0);
  }
  {
    Graph<double> graph;
    Context<double> ctx{graph};
    const auto grads = graph.backward(mean_all(softmax_nll(d.forward(ctx, graph.input(x)).style_logits, {0, 1})));
    EXPECT_EQ(norm(grads, *d.score_head().weight), 0.0);
    EXPECT_EQ(norm(grads, *d.score_head().bias), 0.0);
    EXPECT_GT(norm(grads, *d.style_head().weight), 0.0);
  }
}

TEST(Critic, ScorePathIsUnbounded) {
  Rng rng(15);
  CriticConfig cfg;
  cfg.widths = {4, 8};
  cfg.image_size = 8;
  Critic<double> d(cfg, rng);
  d.score_head().bias->value.fill(1e6);
  Graph<double> graph;
  Context<double> ctx{graph};
  const auto out = d.forward(ctx, graph.input(Tensor<double>({1, 8, 8, 3}, 0.3)));
  EXPECT_GT(out.score.item(), 1e5);
}

TEST(Critic, ShapeMismatchIsError) {
  Rng rng(16);
  CriticConfig cfg;
  cfg.widths = {4, 8};
  cfg.image_size = 8;
  Critic<double> d(cfg, rng);
  Graph<double> graph;
  Context<double> ctx{graph};
  EXPECT_THROW(d.forward(ctx, graph.input(Tensor<double>({1, 8, 8, 2}))), ShapeError);
}

// ---------------------------------------------------------------------------
// Feature network
// ---------------------------------------------------------------------------

TEST(FeatureNet, StackSizesStrictlyDecrease) {
  Rng rng(17);
  FeatureNet<float> phi(FeatureNetConfig{}, rng);
  Graph<float> graph;
  Context<float> ctx{graph};
  const auto stack = phi.features(ctx, graph.input(random_images<float>(2, rng)));
  const Index sizes[] = {64, 32, 16, 8, 4};
  const Index widths[] = {16, 32, 64, 128, 128};
  for (std::size_t s = 0; s < 5; ++s) {
    EXPECT_EQ(stack[s].shape(), (Shape{2, sizes[s], sizes[s], widths[s]}));
  }
}

TEST(FeatureNet, FrozenGivesInputGradientButNoParameterGradient) {
  Rng rng(18);
  FeatureNet<double> phi(FeatureNetConfig{}, rng);
  phi.freeze();
  Graph<double> graph;
  Context<double> ctx{graph};
  const auto x = graph.variable(random_images<double>(1, rng));
  const auto stack = phi.features(ctx, x);
  Var<double> total = sum_all(square(stack[0]));
  for (std::size_t s = 1; s < 5; ++s) total = add(total, sum_all(square(stack[s])));
  const auto grads = graph.backward(total);
  double norm = 0;
  for (double v : grads.of(x).values()) norm += v * v;
  EXPECT_GT(norm, 0);
  EXPECT_TRUE(grads.parameters().empty());
}

TEST(FeatureNet, PureFunctionOfInput) {
  Rng rng(19);
  FeatureNet<float> phi(FeatureNetConfig{}, rng);
  phi.freeze();
  const auto x = random_images<float>(2, rng);
  Graph<float> g1, g2;
  Context<float> c1{g1}, c2{g2};
  const auto a = phi.features(c1, g1.input(x));
  const auto b = phi.features(c2, g2.input(x));
  for (std::size_t s = 0; s < 5; ++s) EXPECT_EQ(a[s].value(), b[s].value());
}

TEST(FeatureNet, TrainsToAccuracyFloorWithinTwentyEpochs) {
  const auto corpus = synth_corpus(3, 16, 7);
  Rng rng(20);
  FeatureNet<float> phi(FeatureNetConfig{}, rng);
  const auto report = train_feature_network(phi, corpus, rng);
  EXPECT_LE(report.epochs, 20);
  EXPECT_GE(report.accuracy, 0.90);
  EXPECT_TRUE(phi.frozen());
  EXPECT_GE(feature_accuracy(phi, corpus), 0.90);
}

TEST(FeatureNet, NeedsTwoStyles) {
  const auto corpus = synth_corpus(1, 4, 7);
  Rng rng(21);
  FeatureNetConfig cfg;
  cfg.styles = 1;
  FeatureNet<float> phi(cfg, rng);
  EXPECT_THROW(train_feature_network(phi, corpus, rng), DataError);
}
