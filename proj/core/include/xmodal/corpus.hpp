#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xmodal/image.hpp"

namespace xmodal {

class Vocabulary;

enum class Language { EN, DE, RU, FR, KO };
enum class Variant { original, back_translation_de, back_translation_ru, translation };

inline constexpr std::array<Language, 5> kAllLanguages = {Language::EN, Language::DE, Language::RU,
                                                          Language::FR, Language::KO};

std::string_view to_string(Language language);
std::string_view to_string(Variant variant);
Language parse_language(std::string_view text);
Variant parse_variant(std::string_view text);

// Which recipe components take part in the composed text.
class FieldMask {
 public:
  static constexpr unsigned kTitle = 1u;
  static constexpr unsigned kIngredients = 2u;
  static constexpr unsigned kInstructions = 4u;

  constexpr FieldMask() = default;
  constexpr explicit FieldMask(unsigned bits) : bits_(bits & 7u) {}
  static constexpr FieldMask all() { return FieldMask(7u); }
  // Comma-separated subset of {title, ingredients, instructions}, or "all".
  static FieldMask parse(std::string_view text);

  constexpr bool has(unsigned field) const { return (bits_ & field) != 0; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr unsigned bits() const { return bits_; }
  std::string to_string() const;
  friend constexpr bool operator==(FieldMask, FieldMask) = default;

 private:
  unsigned bits_ = 7u;
};

struct RecipeDocument {
  std::string id;
  std::string title;
  std::vector<std::string> ingredients;
  std::vector<std::string> instructions;
  Language language = Language::EN;
  Variant variant = Variant::original;
  int class_label = 0;
  std::vector<std::string> image_ids;
  friend bool operator==(const RecipeDocument&, const RecipeDocument&) = default;
};

enum class ImageMode { feature, pixels };

struct ImageRecord {
  std::string id;
  std::vector<float> feature;
  // Pixel mode: decoded image plus the corpus-relative PNG path.
  Image pixels;
  std::string pixels_path;
  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct PairedSample {
  std::string id;
  int class_label = 0;
  std::vector<RecipeDocument> recipe_group;
  std::vector<ImageRecord> images;

  const RecipeDocument& original() const;
  const RecipeDocument* find(Language language, Variant variant) const;
  friend bool operator==(const PairedSample&, const PairedSample&) = default;
};

struct SplitManifest {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
  friend bool operator==(const SplitManifest&, const SplitManifest&) = default;
};

std::string recipe_document_id(std::string_view sample_id, Language language, Variant variant);

// Checks every per-sample invariant and the corpus-level ones (unique ids,
// a single image mode, constant feature dimension). Throws DataError.
void validate_corpus(const std::vector<PairedSample>& samples);
ImageMode corpus_image_mode(const std::vector<PairedSample>& samples);

// JSONL corpus. Pixel paths resolve relative to the corpus file's directory.
std::vector<PairedSample> load_corpus(const std::filesystem::path& path);
// Writes JSONL; pixel-mode images are written as PNG under images/ next to it.
void save_corpus(const std::vector<PairedSample>& samples, const std::filesystem::path& path);

SplitManifest load_split(const std::filesystem::path& path);
void save_split(const SplitManifest& split, const std::filesystem::path& path);

// Title, then ingredient lines, then instruction lines of the selected
// components, joined by single spaces. Empty lines contribute nothing.
std::string compose_recipe_text(const RecipeDocument& doc, FieldMask mask);

struct ToyCorpusOptions {
  std::uint64_t seed = 1;
  std::size_t n_samples = 512;
  std::size_t n_classes = 8;
  std::size_t feature_dim = 64;
  ImageMode image_mode = ImageMode::feature;
  // Pixel mode geometry: square side and the number of colour cells per side.
  std::size_t image_size = 32;
  std::size_t grid = 4;
};

// Per-class centroid radius and per-instance offset scale of the toy
// generator; within-class spread stays below the centroid separation.
inline constexpr double kToyCentroidRadius = 2.2;
inline constexpr double kToyInstanceScale = 0.5;
inline constexpr std::size_t kToyInstanceWords = 3;
inline constexpr std::size_t kToyFillerConcepts = 4;

// Deterministic synthetic corpus: class signal in title and ingredients,
// instance signal (shared with the image latent) in ingredients only, five
// languages built from disjoint per-language substitution tables.
std::vector<PairedSample> generate_toy_corpus(const ToyCorpusOptions& options,
                                              const Vocabulary& vocab);

// Special tokens, a handful of continuation pieces, and n_words word tokens
// in five script blocks (Latin, Latin, Cyrillic, Latin, Hangul).
Vocabulary make_toy_vocabulary(std::size_t n_words);

// Stratified by class; every class contributes at least one sample to each
// split. Fractions must be positive and sum to one.
SplitManifest split_corpus(const std::vector<PairedSample>& samples,
                           const std::array<double, 3>& fractions, std::uint64_t seed);

// Samples whose id appears in ids, in the order of ids.
std::vector<PairedSample> select_samples(const std::vector<PairedSample>& samples,
                                         const std::vector<std::string>& ids);

}  // namespace xmodal
