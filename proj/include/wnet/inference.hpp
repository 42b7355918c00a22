// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <memory>

#include "wnet/trainer.hpp"

namespace wnet {

/// Read-only generator and feature network restored from a checkpoint.
class InferenceModel {
 public:
  explicit InferenceModel(const Checkpoint& ck) : config_(ck.config), epoch_(ck.epoch) {
    Rng unused;
    generator_ = std::make_unique<Generator<float>>(config_.generator, unused);
    phi_ = std::make_unique<FeatureNet<float>>(config_.phi, unused);
    restore_parameters(ck.section("generator"), generator_->parameters(), "generator");
    restore_parameters(ck.section("phi"), phi_->parameters(), "phi");
    phi_->freeze();
  }

  static InferenceModel load(const std::filesystem::path& path) { return InferenceModel(load_checkpoint(path)); }

  const TrainConfig& config() const noexcept { return config_; }
  Index epoch() const noexcept { return epoch_; }
  const Generator<float>& generator() const noexcept { return *generator_; }
  const FeatureNet<float>& phi() const noexcept { return *phi_; }

 private:
  TrainConfig config_;
  Index epoch_ = 0;
  std::unique_ptr<Generator<float>> generator_;
  std::unique_ptr<FeatureNet<float>> phi_;
};

inline constexpr Index kInferenceChunk = 32;

namespace detail {

inline std::vector<Tensor<float>> unstack_glyphs(const Tensor<float>& batch) {
  constexpr Index px = kGlyphSize * kGlyphSize;
  std::vector<Tensor<float>> out;
  for (Index n = 0; n < batch.dim(0); ++n) {
    Tensor<float> g({kGlyphSize, kGlyphSize});
    std::copy(batch.data() + n * px, batch.data() + (n + 1) * px, g.data());
    out.push_back(std::move(g));
  }
  return out;
}

inline void check_glyph(const Tensor<float>& g, const char* what) {
  if (g.shape() != Shape{kGlyphSize, kGlyphSize}) {
    throw ShapeError(std::string(what) + " must be 64x64, got " + to_string(g.shape()));
  }
}

}  // namespace detail

/// Eval-mode G over aligned (prototype, reference) pairs.
inline std::vector<Tensor<float>> generate_pairs(const Generator<float>& gen,
                                                 const std::vector<const Tensor<float>*>& prototypes,
                                                 const std::vector<const Tensor<float>*>& references) {
  if (prototypes.size() != references.size()) throw ShapeError("prototype and reference counts differ");
  std::vector<Tensor<float>> out;
  for (std::size_t b = 0; b < prototypes.size(); b += kInferenceChunk) {
    const std::size_t e = std::min(prototypes.size(), b + kInferenceChunk);
    const std::vector<const Tensor<float>*> p(prototypes.begin() + static_cast<std::ptrdiff_t>(b),
                                              prototypes.begin() + static_cast<std::ptrdiff_t>(e));
    const std::vector<const Tensor<float>*> r(references.begin() + static_cast<std::ptrdiff_t>(b),
                                              references.begin() + static_cast<std::ptrdiff_t>(e));
    Graph<float> g;
    NoGradGuard<float> guard(g);
    Context<float> ctx{g};
    const auto img = gen(ctx, g.input(stack_glyphs<float>(p)), g.input(stack_glyphs<float>(r))).image.value();
    for (auto& t : detail::unstack_glyphs(img)) out.push_back(std::move(t));
  }
  return out;
}

/// Eval-mode G with one style reference encoded once and broadcast across
/// every prototype.
inline std::vector<Tensor<float>> generate_with_reference(const Generator<float>& gen, const Tensor<float>& reference,
                                                          const std::vector<const Tensor<float>*>& prototypes) {
  detail::check_glyph(reference, "style reference");
  Graph<float> g;
  NoGradGuard<float> guard(g);
  Context<float> ctx{g};
  const auto style = gen.encode_style(ctx, g.input(stack_glyphs<float>({&reference})));
  std::vector<Tensor<float>> out;
  for (std::size_t b = 0; b < prototypes.size(); b += kInferenceChunk) {
    const std::size_t e = std::min(prototypes.size(), b + kInferenceChunk);
    const std::vector<const Tensor<float>*> p(prototypes.begin() + static_cast<std::ptrdiff_t>(b),
                                              prototypes.begin() + static_cast<std::ptrdiff_t>(e));
    const auto content = gen.encode_content(ctx, g.input(stack_glyphs<float>(p)));
    EncoderActivations<float> shared;
    for (std::size_t l = 0; l < shared.layers.size(); ++l) {
      Shape s = style.layers[l].shape();
      s[0] = static_cast<Index>(e - b);
      shared.layers[l] = broadcast_to(style.layers[l], s);
    }
    for (auto& t : detail::unstack_glyphs(gen.decode(ctx, content, shared).value())) out.push_back(std::move(t));
  }
  return out;
}

/// One style glyph plus target characters. Raw prototypes override (or
/// extend beyond) the corpus prototypes.
struct GenerationRequest {
  Tensor<float> style;
  std::vector<int> char_ids;
  std::map<int, Tensor<float>> raw_prototypes;
};

/// 64×64 glyphs in `char_ids` order. Throws DataError for a character with
/// no prototype.
inline std::vector<Tensor<float>> one_shot_generate(const InferenceModel& model, const CorpusIndex* corpus,
                                                    const GenerationRequest& request) {
  if (request.char_ids.empty()) throw DataError("no characters requested");
  std::vector<const Tensor<float>*> protos;
  for (int q : request.char_ids) {
    if (auto it = request.raw_prototypes.find(q); it != request.raw_prototypes.end()) {
      detail::check_glyph(it->second, "prototype");
      protos.push_back(&it->second);
    } else if (const GlyphRecord* r = corpus ? corpus->prototype(q) : nullptr) {
      protos.push_back(&r->image);
    } else {
      throw DataError("no prototype for character " + std::to_string(q));
    }
  }
  return generate_with_reference(model.generator(), request.style, protos);
}

inline double mean_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mean_abs_diff: shapes differ");
  double s = 0;
  for (Index i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  return s / static_cast<double>(a.size());
}

struct PairResult {
  int style_id = 0;
  int char_id = 0;
  int reference_char_id = 0;
  /// Generated vs ground truth.
  double l1 = 0;
  /// Prototype vs ground truth.
  double baseline_l1 = 0;
  /// φ argmax style id (1-based).
  int predicted_style = 0;
};

struct EvalReport {
  std::string protocol;
  std::uint64_t seed = 0;
  std::vector<PairResult> pairs;
  double mean_l1 = 0;
  double mean_baseline_l1 = 0;
  double style_match = 0;

  std::string to_json() const {
    nlohmann::ordered_json j;
    j["protocol"] = protocol;
    j["seed"] = seed;
    j["pairs"] = static_cast<Index>(pairs.size());
    j["mean_l1"] = mean_l1;
    j["mean_baseline_l1"] = mean_baseline_l1;
    j["style_match"] = style_match;
    auto& rows = j["per_pair"] = nlohmann::ordered_json::array();
    for (const auto& p : pairs) {
      rows.push_back({{"style_id", p.style_id},
                      {"char_id", p.char_id},
                      {"reference_char_id", p.reference_char_id},
                      {"l1", p.l1},
                      {"baseline_l1", p.baseline_l1},
                      {"predicted_style", p.predicted_style}});
    }
    return j.dump(2);
  }
};

namespace detail {

inline void score_pairs(const InferenceModel& model, const std::vector<Tensor<float>>& generated,
                        const std::vector<const Tensor<float>*>& truths, const std::vector<const Tensor<float>*>& protos,
                        EvalReport& report) {
  std::vector<const Tensor<float>*> gen_ptrs;
  for (const auto& g : generated) gen_ptrs.push_back(&g);
  std::vector<int> predicted;
  for (std::size_t b = 0; b < gen_ptrs.size(); b += kInferenceChunk) {
    const std::size_t e = std::min(gen_ptrs.size(), b + kInferenceChunk);
    const auto part = model.phi().predict(stack_glyphs<float>(
        {gen_ptrs.begin() + static_cast<std::ptrdiff_t>(b), gen_ptrs.begin() + static_cast<std::ptrdiff_t>(e)}));
    predicted.insert(predicted.end(), part.begin(), part.end());
  }
  double l1 = 0, base = 0, match = 0;
  for (std::size_t i = 0; i < report.pairs.size(); ++i) {
    auto& p = report.pairs[i];
    p.l1 = mean_abs_diff(generated[i], *truths[i]);
    p.baseline_l1 = mean_abs_diff(*protos[i], *truths[i]);
    p.predicted_style = predicted[i] + 1;
    l1 += p.l1;
    base += p.baseline_l1;
    match += p.predicted_style == p.style_id;
  }
  const double n = static_cast<double>(std::max<std::size_t>(report.pairs.size(), 1));
  report.mean_l1 = l1 / n;
  report.mean_baseline_l1 = base / n;
  report.style_match = match / n;
}

}  // namespace detail

/// Reference equals the ground-truth target (p = q) for every non-prototype
/// glyph of `corpus` that has a prototype.
inline EvalReport eval_reasonableness(const InferenceModel& model, const CorpusIndex& corpus) {
  EvalReport report;
  report.protocol = "reasonableness";
  std::vector<const Tensor<float>*> protos, refs;
  for (const auto& [key, r] : corpus) {
    if (r.style_id == kPrototypeStyle) continue;
    const GlyphRecord* proto = corpus.prototype(r.char_id);
    if (!proto) continue;
    report.pairs.push_back(PairResult{r.style_id, r.char_id, r.char_id});
    protos.push_back(&proto->image);
    refs.push_back(&r.image);
  }
  if (report.pairs.empty()) throw DataError("no evaluable (style, char) pairs");
  detail::score_pairs(model, generate_pairs(model.generator(), protos, refs), refs, protos, report);
  return report;
}

/// Per style a random reference character p; targets are every other
/// character q ≠ p with a prototype and a ground truth.
inline EvalReport eval_effectiveness(const InferenceModel& model, const CorpusIndex& corpus, std::uint64_t seed) {
  EvalReport report;
  report.protocol = "effectiveness";
  report.seed = seed;
  std::vector<Tensor<float>> generated;
  std::vector<const Tensor<float>*> protos, truths;
  for (int s : corpus.styles()) {
    const auto& chars = corpus.chars_of(s);
    if (chars.size() < 2) continue;
    Rng rng = derive_rng(seed, static_cast<std::uint64_t>(s));
    const int p = chars[uniform_index(rng, chars.size())];
    const Tensor<float>& reference = corpus.at(s, p).image;
    std::vector<const Tensor<float>*> style_protos;
    for (int q : chars) {
      const GlyphRecord* proto = corpus.prototype(q);
      if (q == p || !proto) continue;
      report.pairs.push_back(PairResult{s, q, p});
      style_protos.push_back(&proto->image);
      truths.push_back(&corpus.at(s, q).image);
    }
    for (auto& g : generate_with_reference(model.generator(), reference, style_protos)) generated.push_back(std::move(g));
    protos.insert(protos.end(), style_protos.begin(), style_protos.end());
  }
  if (report.pairs.empty()) throw DataError("no evaluable (style, char) pairs");
  detail::score_pairs(model, generated, truths, protos, report);
  return report;
}

inline constexpr int kGridSeparator = 2;

/// Row-major contact sheet of 64×64 glyphs with 2-px mid-gray separators;
/// `columns` = 0 puts every glyph in one row.
inline GrayImage compose_grid(const std::vector<Tensor<float>>& images, std::size_t columns = 0) {
  if (images.empty()) throw DataError("export_grid of an empty image list");
  const std::size_t cols = columns == 0 ? images.size() : std::min(columns, images.size());
  const std::size_t rows = (images.size() + cols - 1) / cols;
  const int cell = static_cast<int>(kGlyphSize);
  const int width = static_cast<int>(cols) * cell + (static_cast<int>(cols) - 1) * kGridSeparator;
  const int height = static_cast<int>(rows) * cell + (static_cast<int>(rows) - 1) * kGridSeparator;
  GrayImage sheet(width, height);
  std::fill(sheet.pixels.begin(), sheet.pixels.end(), 0.5f);
  for (std::size_t i = 0; i < images.size(); ++i) {
    detail::check_glyph(images[i], "grid image");
    const GrayImage tile = paper_from_glyph(images[i]);
    const int x0 = static_cast<int>(i % cols) * (cell + kGridSeparator);
    const int y0 = static_cast<int>(i / cols) * (cell + kGridSeparator);
    for (int y = 0; y < cell; ++y) {
      for (int x = 0; x < cell; ++x) sheet.at(x0 + x, y0 + y) = tile.at(x, y);
    }
  }
  return sheet;
}

inline void export_grid(const std::vector<Tensor<float>>& images, const std::filesystem::path& path,
                        std::size_t columns = 0) {
  write_png(path, compose_grid(images, columns));
}

}  // namespace wnet
