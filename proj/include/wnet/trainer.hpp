// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "wnet/checkpoint.hpp"

namespace wnet {

/// Keeps large transient tensors on the heap instead of fresh mappings.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

/// Marks every parameter of a set non-trainable for the scope's lifetime.
template <class T>
class FrozenScope {
 public:
  explicit FrozenScope(ParameterSet<T>& params) {
    for (auto& p : params) {
      saved_.emplace_back(&p, p.trainable);
      p.trainable = false;
    }
  }
  ~FrozenScope() {
    for (auto& [p, flag] : saved_) p->trainable = flag;
  }
  FrozenScope(const FrozenScope&) = delete;
  FrozenScope& operator=(const FrozenScope&) = delete;

 private:
  std::vector<std::pair<Parameter<T>*, bool>> saved_;
};

namespace detail {

template <class T>
Var<T> weighted_sum(const std::vector<std::pair<double, Var<T>>>& terms) {
  Var<T> total;
  for (const auto& [w, v] : terms) {
    if (w == 0.0) continue;
    const Var<T> t = scale(v, static_cast<T>(w));
    total = total.defined() ? add(total, t) : t;
  }
  return total;
}

inline void require_finite(double v, const char* term, Index iteration) {
  if (!std::isfinite(v)) {
    throw TrainingError("non-finite loss term '" + std::string(term) + "' at iteration " + std::to_string(iteration));
  }
}

inline std::vector<int> zero_based(const std::vector<int>& ids) {
  std::vector<int> out(ids.size());
  std::transform(ids.begin(), ids.end(), out.begin(), [](int v) { return v - 1; });
  return out;
}

inline void copy_moments(const TensorSection& section, std::map<std::string, AdamMoments<float>>& moments,
                         bool first, const std::string& label) {
  if (section.size() != moments.size()) throw CheckpointError(label + ": moment count mismatch");
  for (const auto& [name, t] : section) {
    auto it = moments.find(name);
    if (it == moments.end()) throw CheckpointError(label + ": unknown moment '" + name + "'");
    const Tensor<float>& dst = first ? it->second.m : it->second.v;
    if (dst.shape() != t.shape()) throw CheckpointError(label + ": shape mismatch for '" + name + "'");
  }
  for (const auto& [name, t] : section) {
    auto& mom = moments.at(name);
    (first ? mom.m : mom.v) = t;
  }
}

inline TensorSection moment_section(const std::map<std::string, AdamMoments<float>>& moments, bool first) {
  TensorSection out;
  for (const auto& [name, mom] : moments) out.emplace_back(name, first ? mom.m : mom.v);
  return out;
}

}  // namespace detail

/// Owns G (with heads), D, the frozen φ, both optimizers and the random
/// streams; runs alternating critic and generator updates.
class Trainer {
 public:
  using T = float;

  /// Fresh run: initializes every network from the seed and trains φ.
  Trainer(const TrainConfig& cfg, const CorpusIndex& corpus)
      : Trainer(resolve(cfg, corpus), corpus, derive_rng(cfg.seed, kInitGenerator), derive_rng(cfg.seed, kInitCritic),
                derive_rng(cfg.seed, kInitPhi)) {
    Rng phi_rng = derive_rng(config_.seed, kTrainPhi);
    phi_report_ = train_feature_network(*phi_, *corpus_, phi_rng, config_.phi_train);
    sample_rng_ = derive_rng(config_.seed, kSampleStream);
    noise_rng_ = derive_rng(config_.seed, kNoiseStream);
  }

  /// Resumes from a checkpoint; the corpus must be the one it was trained on.
  Trainer(const Checkpoint& ck, const CorpusIndex& corpus)
      : Trainer(resolve(ck.config, corpus), corpus, Rng{}, Rng{}, Rng{}) {
    restore_parameters(ck.section("generator"), generator_->parameters(), "generator");
    restore_parameters(ck.section("critic"), critic_->parameters(), "critic");
    restore_parameters(ck.section("phi"), phi_->parameters(), "phi");
    detail::copy_moments(ck.section("adam_g.m"), g_opt_->moments(), true, "adam_g");
    detail::copy_moments(ck.section("adam_g.v"), g_opt_->moments(), false, "adam_g");
    detail::copy_moments(ck.section("adam_d.m"), d_opt_->moments(), true, "adam_d");
    detail::copy_moments(ck.section("adam_d.v"), d_opt_->moments(), false, "adam_d");
    g_opt_->set_steps(ck.generator_steps);
    d_opt_->set_steps(ck.critic_steps);
    phi_->freeze();
    epoch_ = ck.epoch;
    iteration_ = ck.iteration;
    sample_rng_ = load_rng(ck.sample_rng);
    noise_rng_ = load_rng(ck.noise_rng);
  }

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainConfig& config() const noexcept { return config_; }
  const CorpusIndex& corpus() const noexcept { return *corpus_; }
  Generator<T>& generator() noexcept { return *generator_; }
  Critic<T>& critic() noexcept { return *critic_; }
  FeatureNet<T>& phi() noexcept { return *phi_; }
  const Generator<T>& generator() const noexcept { return *generator_; }
  const Critic<T>& critic() const noexcept { return *critic_; }
  const FeatureNet<T>& phi() const noexcept { return *phi_; }
  const std::optional<FeatureTrainReport>& phi_report() const noexcept { return phi_report_; }

  /// Completed epochs.
  Index epoch() const noexcept { return epoch_; }
  /// Completed iterations over all epochs.
  Index iteration() const noexcept { return iteration_; }
  Index iterations_per_epoch() const noexcept { return config_.iterations_per_epoch; }
  double learning_rate() const { return lr_schedule(config_.lr, config_.lr_decay, epoch_); }

  Batch<T> next_batch() {
    std::vector<Triplet> triplets;
    for (Index b = 0; b < config_.batch; ++b) triplets.push_back(sample_triplet(*corpus_, sample_rng_));
    return make_batch<T>(triplets);
  }

  /// One critic update; fills adv_d, adv_gp and dac_critic.
  LossBreakdown critic_step(const Batch<T>& batch, double lr) {
    const auto& w = config_.weights;
    const auto labels = detail::zero_based(batch.style_ids);
    Graph<T> g;
    Tensor<T> fake;
    {
      NoGradGuard<T> guard(g);
      Context<T> gen_ctx{g, Mode::train, false, &noise_rng_};
      fake = (*generator_)(gen_ctx, g.input(batch.prototype), g.input(batch.reference)).image.value();
    }
    Context<T> ctx{g, Mode::train, true, &noise_rng_};
    const Var<T> p = g.input(batch.prototype);
    const Var<T> r = g.input(batch.reference);
    const auto real_out = (*critic_)(ctx, p, g.input(batch.target), r);
    const auto fake_out = (*critic_)(ctx, p, g.input(fake), r);
    const Var<T> mixed = g.variable(interpolate(batch.target, fake, noise_rng_));
    const auto mixed_out = (*critic_)(ctx, p, mixed, r);
    const auto adv = adv_losses(real_out.score, fake_out.score);
    const Var<T> gp = gradient_penalty(g, mixed_out.score, mixed, config_.gp_squared);
    const Var<T> dac = dac_loss(real_out.style_logits, fake_out.style_logits, labels);

    LossBreakdown b;
    b.adv_d = adv.adv_d.item();
    b.adv_gp = gp.item();
    b.dac_critic = dac.item();
    detail::require_finite(b.adv_d, "adv_d", iteration_);
    detail::require_finite(b.adv_gp, "adv_gp", iteration_);
    detail::require_finite(b.dac_critic, "dac_critic", iteration_);
    // The critic ascends the real-minus-fake gap.
    const Var<T> descent = detail::weighted_sum<T>({{-w.alpha, adv.adv_d}, {w.alpha_gp, gp}, {w.beta_d, dac}});
    d_opt_->step(g.backward(descent), lr);
    return b;
  }

  /// One generator update; fills the generator-side terms.
  LossBreakdown generator_step(const Batch<T>& batch, double lr) {
    const auto& w = config_.weights;
    const auto style_labels = detail::zero_based(batch.style_ids);
    const auto char_labels = detail::zero_based(batch.char_ids);
    Graph<T> g;
    Context<T> ctx{g, Mode::train, true, &noise_rng_};
    Context<T> frozen_stats{g, Mode::train, false, &noise_rng_};
    const Var<T> p = g.input(batch.prototype);
    const Var<T> r = g.input(batch.reference);
    const Var<T> target = g.input(batch.target);
    const auto out = (*generator_)(ctx, p, r);
    const Var<T> content_code = out.content.code();
    const Var<T> style_code = out.style.code();

    const Var<T> enc_p = enc_cls_loss(generator_->classify_content(ctx, content_code), char_labels);
    const Var<T> enc_r = enc_cls_loss(generator_->classify_style(ctx, style_code), style_labels);
    const Var<T> const_p = const_loss(content_code, generator_->encode_content(frozen_stats, out.image).code());
    const Var<T> const_r = const_loss(style_code, generator_->encode_style(frozen_stats, out.image).code());
    const Var<T> l1 = l1_loss(target, out.image);
    const Var<T> phi = phi_loss(phi_->features(ctx, target), phi_->features(ctx, out.image));

    FrozenScope<T> freeze(critic_->parameters());
    const auto fake_out = (*critic_)(ctx, p, out.image, r);
    const auto real_out = (*critic_)(ctx, p, target, r);
    const Var<T> adv_g = adv_losses(real_out.score, fake_out.score).adv_g;
    const Var<T> dac = dac_loss(real_out.style_logits, fake_out.style_logits, style_labels);

    LossBreakdown b;
    b.adv_g = adv_g.item();
    b.dac = dac.item();
    b.l1 = l1.item();
    b.phi = phi.item();
    b.const_p = const_p.item();
    b.const_r = const_r.item();
    b.enc_p_cls = enc_p.item();
    b.enc_r_cls = enc_r.item();
    for (const auto& [name, v] : std::vector<std::pair<const char*, double>>{
             {"adv_g", b.adv_g}, {"dac", b.dac}, {"l1", b.l1}, {"phi", b.phi}, {"const_p", b.const_p},
             {"const_r", b.const_r}, {"enc_p_cls", b.enc_p_cls}, {"enc_r_cls", b.enc_r_cls}}) {
      detail::require_finite(v, name, iteration_);
    }
    const Var<T> objective = detail::weighted_sum<T>({{-w.alpha, adv_g},
                                                      {w.beta_d, dac},
                                                      {w.beta_p, enc_p},
                                                      {w.beta_r, enc_r},
                                                      {w.lambda_l1, l1},
                                                      {w.lambda_phi, phi},
                                                      {w.psi_p, const_p},
                                                      {w.psi_r, const_r}});
    g_opt_->step(g.backward(objective), lr);
    return b;
  }

  /// d-steps critic updates then one generator update on the same batch.
  LossBreakdown train_iteration(const Batch<T>& batch) {
    const double lr = learning_rate();
    LossBreakdown d;
    for (Index k = 0; k < config_.d_steps; ++k) d = critic_step(batch, lr);
    LossBreakdown b = generator_step(batch, lr);
    b.adv_d = d.adv_d;
    b.adv_gp = d.adv_gp;
    b.dac_critic = d.dac_critic;
    b = assemble_objectives(b, config_.weights);
    detail::require_finite(b.loss_g, "loss_g", iteration_);
    detail::require_finite(b.loss_d, "loss_d", iteration_);
    return b;
  }

  /// Samples a batch, trains on it and advances the counters.
  LossBreakdown step() {
    const LossBreakdown b = train_iteration(next_batch());
    ++iteration_;
    if (iteration_ % config_.iterations_per_epoch == 0) ++epoch_;
    return b;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.config = config_;
    ck.epoch = epoch_;
    ck.iteration = iteration_;
    ck.generator_steps = g_opt_->steps();
    ck.critic_steps = d_opt_->steps();
    ck.sample_rng = save_rng(sample_rng_);
    ck.noise_rng = save_rng(noise_rng_);
    ck.tensors["generator"] = snapshot_parameters(generator_->parameters());
    ck.tensors["critic"] = snapshot_parameters(critic_->parameters());
    ck.tensors["phi"] = snapshot_parameters(phi_->parameters());
    ck.tensors["adam_g.m"] = detail::moment_section(g_opt_->moments(), true);
    ck.tensors["adam_g.v"] = detail::moment_section(g_opt_->moments(), false);
    ck.tensors["adam_d.m"] = detail::moment_section(d_opt_->moments(), true);
    ck.tensors["adam_d.v"] = detail::moment_section(d_opt_->moments(), false);
    return ck;
  }

 private:
  static constexpr std::uint64_t kInitGenerator = 0x4701;
  static constexpr std::uint64_t kInitCritic = 0x4702;
  static constexpr std::uint64_t kInitPhi = 0x4703;
  static constexpr std::uint64_t kTrainPhi = 0x4704;
  static constexpr std::uint64_t kSampleStream = 0x4705;
  static constexpr std::uint64_t kNoiseStream = 0x4706;

  static TrainConfig resolve(const TrainConfig& cfg, const CorpusIndex& corpus) {
    TrainConfig out = fit_to_corpus(cfg, corpus);
    if (out.iterations_per_epoch == 0) out.iterations_per_epoch = std::max<Index>(1, corpus.triplet_count() / out.batch);
    return out;
  }

  Trainer(const TrainConfig& cfg, const CorpusIndex& corpus, Rng g_rng, Rng d_rng, Rng phi_rng)
      : config_(cfg), corpus_(&corpus) {
    config_.validate();
    if (config_.iterations_per_epoch < 1) throw ConfigError("iterations per epoch must be resolved");
    if (corpus.styles().size() < 2) throw DataError("training needs at least two styles");
    generator_ = std::make_unique<Generator<T>>(config_.generator, g_rng);
    critic_ = std::make_unique<Critic<T>>(config_.critic, d_rng);
    phi_ = std::make_unique<FeatureNet<T>>(config_.phi, phi_rng);
    g_opt_ = std::make_unique<Adam<T>>(generator_->parameters(), config_.adam);
    d_opt_ = std::make_unique<Adam<T>>(critic_->parameters(), config_.adam);
  }

  TrainConfig config_;
  const CorpusIndex* corpus_;
  std::unique_ptr<Generator<T>> generator_;
  std::unique_ptr<Critic<T>> critic_;
  std::unique_ptr<FeatureNet<T>> phi_;
  std::unique_ptr<Adam<T>> g_opt_, d_opt_;
  std::optional<FeatureTrainReport> phi_report_;
  Rng sample_rng_, noise_rng_;
  Index epoch_ = 0;
  Index iteration_ = 0;
};

/// One metrics-log line.
struct MetricsRecord {
  Index iteration = 0;
  Index epoch = 0;
  double lr = 0;
  double wall_time = 0;
  LossBreakdown losses;

  std::string to_json() const {
    nlohmann::ordered_json j;
    j["iteration"] = iteration;
    j["epoch"] = epoch;
    j["lr"] = lr;
    j["wall_time"] = wall_time;
    for (const auto& [name, v] : losses.fields()) j[name] = v;
    return j.dump();
  }
};

struct LoopOptions {
  /// Directory for per-epoch checkpoints; empty disables writing.
  std::filesystem::path checkpoint_dir;
  /// Line-delimited JSON metrics sink.
  std::ostream* metrics = nullptr;
  /// Called after every iteration.
  std::function<void(const MetricsRecord&)> on_step;
  /// Keep only the newest N epoch checkpoints (0 keeps all).
  Index keep_checkpoints = 0;
};

inline std::string checkpoint_file_name(Index epoch) {
  std::ostringstream os;
  os << "epoch-" << std::setw(4) << std::setfill('0') << epoch << ".wnet";
  return os.str();
}

/// Runs the remaining epochs of `trainer`, checkpointing at each epoch
/// boundary (including the starting state when it sits on one).
inline Checkpoint train_loop(Trainer& trainer, const LoopOptions& opts = {}) {
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::filesystem::path> written;
  auto save = [&](const Checkpoint& ck) {
    if (opts.checkpoint_dir.empty()) return;
    std::filesystem::create_directories(opts.checkpoint_dir);
    const auto path = opts.checkpoint_dir / checkpoint_file_name(ck.epoch);
    save_checkpoint(ck, path);
    written.push_back(path);
    if (opts.keep_checkpoints > 0) {
      while (static_cast<Index>(written.size()) > opts.keep_checkpoints) {
        std::filesystem::remove(written.front());
        written.erase(written.begin());
      }
    }
  };
  const Index ipe = trainer.iterations_per_epoch();
  if (trainer.iteration() % ipe == 0) save(trainer.checkpoint());
  const Index total = trainer.config().epochs * ipe;
  while (trainer.iteration() < total) {
    MetricsRecord rec;
    rec.epoch = trainer.epoch();
    rec.lr = trainer.learning_rate();
    rec.losses = trainer.step();
    rec.iteration = trainer.iteration();
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (opts.metrics) *opts.metrics << rec.to_json() << '\n' << std::flush;
    if (opts.on_step) opts.on_step(rec);
    if (trainer.iteration() % ipe == 0) save(trainer.checkpoint());
  }
  return trainer.checkpoint();
}

}  // namespace wnet
