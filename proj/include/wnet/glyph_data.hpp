// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "wnet/image_io.hpp"
#include "wnet/random.hpp"
#include "wnet/tensor.hpp"

namespace wnet {

inline constexpr int kGlyphSize = 64;
inline constexpr int kPrototypeStyle = 0;
inline constexpr float kBinarizeThreshold = 0.5f;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One glyph: 64x64, every pixel -1 (background) or +1 (ink).
struct GlyphRecord {
  int style_id = 0;
  int char_id = 0;
  Tensor<float> image;
};

/// Ink intensity in [0,1] -> {-1,+1}; strictly greater than the threshold is ink.
inline Tensor<float> binarize(const GrayImage& ink, float threshold = kBinarizeThreshold) {
  Tensor<float> out({ink.height, ink.width});
  for (std::size_t i = 0; i < ink.pixels.size(); ++i) {
    const float v = ink.pixels[i];
    if (!(v >= 0.f && v <= 1.f)) throw DataError("binarize expects values in [0,1]");
    out[static_cast<Index>(i)] = v > threshold ? 1.f : -1.f;
  }
  return out;
}

/// PNG convention: dark ink on light paper.
inline GrayImage ink_from_paper(const GrayImage& paper) {
  GrayImage ink = paper;
  for (auto& v : ink.pixels) v = 1.f - v;
  return ink;
}

inline GrayImage paper_from_glyph(const Tensor<float>& glyph) {
  const int h = static_cast<int>(glyph.dim(0)), w = static_cast<int>(glyph.dim(1));
  GrayImage img(w, h);
  for (Index i = 0; i < glyph.size(); ++i) img.pixels[static_cast<std::size_t>(i)] = (1.f - glyph[i]) * 0.5f;
  return img;
}

/// Any-size paper-convention raster -> 64x64 binarized glyph.
inline Tensor<float> glyph_from_paper(const GrayImage& paper) {
  return binarize(resize_bilinear(ink_from_paper(paper), kGlyphSize, kGlyphSize));
}

/// Immutable set of glyphs keyed by (style, char).
class CorpusIndex {
 public:
  CorpusIndex() = default;

  /// Validates that ids are in range, unique, and that every character has
  /// a prototype (style 0) record.
  static CorpusIndex build(std::vector<GlyphRecord> records) {
    CorpusIndex index;
    for (auto& r : records) {
      if (r.style_id < 0 || r.char_id < 1) {
        throw DataError("invalid ids (style " + std::to_string(r.style_id) + ", char " +
                        std::to_string(r.char_id) + ")");
      }
      if (r.image.shape() != Shape{kGlyphSize, kGlyphSize}) throw DataError("glyph image must be 64x64");
      const auto key = std::make_pair(r.style_id, r.char_id);
      if (index.records_.count(key)) {
        throw DataError("duplicate record (style " + std::to_string(r.style_id) + ", char " +
                        std::to_string(r.char_id) + ")");
      }
      index.style_count_ = std::max(index.style_count_, r.style_id);
      index.char_count_ = std::max(index.char_count_, r.char_id);
      index.by_style_[r.style_id].push_back(r.char_id);
      index.records_.emplace(key, std::move(r));
    }
    for (auto& [style, chars] : index.by_style_) std::sort(chars.begin(), chars.end());
    for (const auto& [key, r] : index.records_) {
      if (!index.records_.count({kPrototypeStyle, key.second})) {
        throw DataError("missing prototype (style 0) record for char " + std::to_string(key.second));
      }
    }
    return index;
  }

  /// I: largest non-prototype style id.
  int style_count() const noexcept { return style_count_; }
  /// J: largest character id.
  int char_count() const noexcept { return char_count_; }
  std::size_t size() const noexcept { return records_.size(); }

  const GlyphRecord* find(int style, int ch) const {
    auto it = records_.find({style, ch});
    return it == records_.end() ? nullptr : &it->second;
  }
  const GlyphRecord& at(int style, int ch) const {
    if (const auto* r = find(style, ch)) return *r;
    throw DataError("no record for (style " + std::to_string(style) + ", char " + std::to_string(ch) + ")");
  }
  const GlyphRecord* prototype(int ch) const { return find(kPrototypeStyle, ch); }

  /// Style ids >= 1 present in the corpus, ascending.
  std::vector<int> styles() const {
    std::vector<int> out;
    for (const auto& [s, chars] : by_style_) {
      if (s != kPrototypeStyle) out.push_back(s);
    }
    return out;
  }
  const std::vector<int>& chars_of(int style) const {
    static const std::vector<int> none;
    auto it = by_style_.find(style);
    return it == by_style_.end() ? none : it->second;
  }
  /// Characters that have a prototype, ascending.
  const std::vector<int>& prototype_chars() const { return chars_of(kPrototypeStyle); }

  /// Number of distinct (style>=1, target j, reference k != j) triplets.
  Index triplet_count() const {
    Index n = 0;
    for (int s : styles()) {
      const Index c = static_cast<Index>(chars_of(s).size());
      n += c * (c - 1);
    }
    return n;
  }

  auto begin() const { return records_.begin(); }
  auto end() const { return records_.end(); }

 private:
  std::map<std::pair<int, int>, GlyphRecord> records_;
  std::map<int, std::vector<int>> by_style_;
  int style_count_ = 0;
  int char_count_ = 0;
};

// ---------------------------------------------------------------------------
// Manifest + PNG corpus on disk
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string path;
  int style_id = 0;
  int char_id = 0;
};

/// One record per line: `relative-path, style-id, char-id`. '#' starts a
/// comment; blank lines are skipped.
inline std::vector<ManifestEntry> parse_manifest(std::istream& in) {
  std::vector<ManifestEntry> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream fields(line);
    ManifestEntry e;
    if (!(fields >> e.path)) continue;
    std::string extra;
    if (!(fields >> e.style_id >> e.char_id) || (fields >> extra)) {
      throw DataError("malformed manifest line " + std::to_string(line_no) + ": expected path, style-id, char-id");
    }
    out.push_back(std::move(e));
  }
  return out;
}

inline CorpusIndex load_corpus(const std::filesystem::path& root, std::istream& manifest) {
  std::vector<GlyphRecord> records;
  for (const auto& e : parse_manifest(manifest)) {
    const auto path = root / e.path;
    GrayImage paper;
    try {
      paper = read_png(path);
    } catch (const ImageError& err) {
      throw DataError("unreadable image " + path.string() + ": " + err.what());
    }
    records.push_back(GlyphRecord{e.style_id, e.char_id, glyph_from_paper(paper)});
  }
  return CorpusIndex::build(std::move(records));
}

inline constexpr const char* kManifestName = "manifest.txt";

inline CorpusIndex load_corpus(const std::filesystem::path& root) {
  std::ifstream in(root / kManifestName);
  if (!in) throw DataError("cannot open manifest " + (root / kManifestName).string());
  return load_corpus(root, in);
}

inline std::string glyph_file_name(int style, int ch) {
  return "glyphs/s" + std::to_string(style) + "_c" + std::to_string(ch) + ".png";
}

/// Writes every record as a PNG plus a manifest under `root`.
inline void write_corpus(const CorpusIndex& index, const std::filesystem::path& root) {
  std::filesystem::create_directories(root / "glyphs");
  std::ofstream manifest(root / kManifestName);
  if (!manifest) throw DataError("cannot write manifest under " + root.string());
  manifest << "# path, style-id, char-id\n";
  for (const auto& [key, r] : index) {
    const std::string rel = glyph_file_name(r.style_id, r.char_id);
    write_png(root / rel, paper_from_glyph(r.image));
    manifest << rel << ", " << r.style_id << ", " << r.char_id << "\n";
  }
}

// ---------------------------------------------------------------------------
// Procedural corpus
// ---------------------------------------------------------------------------

struct Point {
  double x = 0, y = 0;
};
using Polyline = std::vector<Point>;
using Skeleton = std::vector<Polyline>;

/// Rendering parameters applied uniformly to every character of a style.
struct StyleTransform {
  double thickness = 4.0;
  double shear = 0.0;
  double jitter = 0.0;
};

inline constexpr double kSkeletonBoxMin = 8.0;
inline constexpr double kSkeletonBoxMax = 56.0;
inline constexpr double kMinThickness = 1.0;
inline constexpr double kMaxThickness = 4.0;
inline constexpr double kMaxShear = 0.25;
inline constexpr double kMaxJitter = 1.5;

/// 3-7 polylines of 2-4 vertices inside the 48x48 interior box.
inline Skeleton make_skeleton(std::uint64_t seed, int ch) {
  Rng rng = derive_rng(seed, 0x5000'0000ull + static_cast<std::uint64_t>(ch));
  Skeleton sk(3 + uniform_index(rng, 5));
  for (auto& line : sk) {
    line.resize(2 + uniform_index(rng, 3));
    for (auto& p : line) {
      p.x = uniform(rng, kSkeletonBoxMin, kSkeletonBoxMax);
      p.y = uniform(rng, kSkeletonBoxMin, kSkeletonBoxMax);
    }
  }
  return sk;
}

/// Hash of polyline count and per-polyline vertex counts.
inline std::uint64_t topology_hash(const Skeleton& sk) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ull;
  };
  mix(sk.size());
  for (const auto& line : sk) mix(line.size());
  return h;
}

/// Style 0 is the neutral bold prototype. Styles 1..n draw thickness and
/// shear from stratified sub-ranges so that no two styles coincide.
inline std::vector<StyleTransform> make_style_transforms(int styles, std::uint64_t seed) {
  std::vector<StyleTransform> out(static_cast<std::size_t>(styles) + 1);
  out[0] = StyleTransform{kMaxThickness, 0.0, 0.0};
  Rng rng = derive_rng(seed, 0x6000'0000ull);
  std::vector<int> thick_bins(static_cast<std::size_t>(styles)), shear_bins(static_cast<std::size_t>(styles));
  std::iota(thick_bins.begin(), thick_bins.end(), 0);
  std::iota(shear_bins.begin(), shear_bins.end(), 0);
  for (int i = styles - 1; i > 0; --i) {
    std::swap(thick_bins[static_cast<std::size_t>(i)], thick_bins[uniform_index(rng, static_cast<std::uint64_t>(i) + 1)]);
    std::swap(shear_bins[static_cast<std::size_t>(i)], shear_bins[uniform_index(rng, static_cast<std::uint64_t>(i) + 1)]);
  }
  for (int s = 1; s <= styles; ++s) {
    const auto k = static_cast<std::size_t>(s - 1);
    StyleTransform& t = out[static_cast<std::size_t>(s)];
    t.thickness = kMinThickness + (kMaxThickness - kMinThickness) * (thick_bins[k] + uniform01(rng)) / styles;
    t.shear = -kMaxShear + 2 * kMaxShear * (shear_bins[k] + uniform01(rng)) / styles;
    t.jitter = uniform(rng, 0.0, kMaxJitter);
  }
  return out;
}

namespace detail {
inline double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}
}  // namespace detail

/// Ink-coverage raster of a skeleton under a style transform.
inline GrayImage render_glyph(const Skeleton& sk, const StyleTransform& style, Rng& jitter_rng) {
  constexpr double center = kGlyphSize / 2.0;
  Skeleton placed = sk;
  for (auto& line : placed) {
    for (auto& p : line) {
      if (style.jitter > 0) {
        p.x += style.jitter * normal(jitter_rng);
        p.y += style.jitter * normal(jitter_rng);
      }
      p.x += style.shear * (center - p.y);
    }
  }
  GrayImage ink(kGlyphSize, kGlyphSize);
  const double half = style.thickness / 2.0;
  for (int y = 0; y < kGlyphSize; ++y) {
    for (int x = 0; x < kGlyphSize; ++x) {
      const Point p{x + 0.5, y + 0.5};
      double d = 1e9;
      for (const auto& line : placed) {
        for (std::size_t i = 0; i + 1 < line.size(); ++i) d = std::min(d, detail::segment_distance(p, line[i], line[i + 1]));
      }
      ink.at(x, y) = static_cast<float>(std::clamp(half + 0.5 - d, 0.0, 1.0));
    }
  }
  return ink;
}

/// Deterministic corpus: style ids 0..styles, char ids 1..chars.
inline CorpusIndex synth_corpus(int styles, int chars, std::uint64_t seed) {
  if (styles < 1) throw DataError("synth_corpus needs at least one style");
  if (chars < 2) throw DataError("synth_corpus needs at least two characters");
  const auto transforms = make_style_transforms(styles, seed);
  std::vector<GlyphRecord> records;
  for (int ch = 1; ch <= chars; ++ch) {
    const Skeleton sk = make_skeleton(seed, ch);
    for (int s = 0; s <= styles; ++s) {
      Rng jitter = derive_rng(seed, (0x7000'0000ull + static_cast<std::uint64_t>(s)) << 20 | static_cast<std::uint64_t>(ch));
      records.push_back(
          GlyphRecord{s, ch, binarize(render_glyph(sk, transforms[static_cast<std::size_t>(s)], jitter))});
    }
  }
  return CorpusIndex::build(std::move(records));
}

// ---------------------------------------------------------------------------
// Triplets and batches
// ---------------------------------------------------------------------------

/// (prototype x_j^0, reference x_k^i, target x_j^i) with k != j.
struct Triplet {
  const GlyphRecord* prototype = nullptr;
  const GlyphRecord* reference = nullptr;
  const GlyphRecord* target = nullptr;
};

/// Uniform style among those with >= 2 characters, uniform target j, uniform k != j.
inline Triplet sample_triplet(const CorpusIndex& index, Rng& rng) {
  std::vector<int> eligible;
  for (int s : index.styles()) {
    if (index.chars_of(s).size() >= 2) eligible.push_back(s);
  }
  if (eligible.empty()) throw DataError("no style has two or more characters to sample from");
  const int style = eligible[uniform_index(rng, eligible.size())];
  const auto& chars = index.chars_of(style);
  const std::size_t j = uniform_index(rng, chars.size());
  std::size_t k = uniform_index(rng, chars.size() - 1);
  if (k >= j) ++k;
  return Triplet{index.prototype(chars[j]), &index.at(style, chars[k]), &index.at(style, chars[j])};
}

/// Three aligned (B,64,64,1) tensors plus per-sample labels.
template <class T>
struct Batch {
  Tensor<T> prototype, reference, target;
  std::vector<int> style_ids, char_ids, reference_char_ids;

  Index size() const { return static_cast<Index>(style_ids.size()); }
};

template <class T>
Tensor<T> stack_glyphs(const std::vector<const Tensor<float>*>& glyphs) {
  const Index b = static_cast<Index>(glyphs.size());
  constexpr Index px = kGlyphSize * kGlyphSize;
  Tensor<T> out({b, kGlyphSize, kGlyphSize, 1});
  for (Index i = 0; i < b; ++i) {
    const auto& g = *glyphs[static_cast<std::size_t>(i)];
    if (g.size() != px) throw ShapeError("glyph must be 64x64");
    std::transform(g.data(), g.data() + px, out.data() + i * px, [](float v) { return static_cast<T>(v); });
  }
  return out;
}

template <class T>
Batch<T> make_batch(const std::vector<Triplet>& triplets) {
  if (triplets.empty()) throw DataError("make_batch of empty triplet list");
  std::vector<const Tensor<float>*> p, r, t;
  Batch<T> batch;
  for (const auto& tr : triplets) {
    p.push_back(&tr.prototype->image);
    r.push_back(&tr.reference->image);
    t.push_back(&tr.target->image);
    batch.style_ids.push_back(tr.target->style_id);
    batch.char_ids.push_back(tr.target->char_id);
    batch.reference_char_ids.push_back(tr.reference->char_id);
  }
  batch.prototype = stack_glyphs<T>(p);
  batch.reference = stack_glyphs<T>(r);
  batch.target = stack_glyphs<T>(t);
  return batch;
}

}  // namespace wnet
