#include "xmodal/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "xmodal/errors.hpp"
#include "xmodal/tokenizer.hpp"

namespace xmodal {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::string_view to_string(Language language) {
  switch (language) {
    case Language::EN: return "EN";
    case Language::DE: return "DE";
    case Language::RU: return "RU";
    case Language::FR: return "FR";
    case Language::KO: return "KO";
  }
  return "?";
}

std::string_view to_string(Variant variant) {
  switch (variant) {
    case Variant::original: return "original";
    case Variant::back_translation_de: return "back_translation_de";
    case Variant::back_translation_ru: return "back_translation_ru";
    case Variant::translation: return "translation";
  }
  return "?";
}

Language parse_language(std::string_view text) {
  for (Language l : kAllLanguages) {
    if (to_string(l) == text) return l;
  }
  throw DataError("unknown language '" + std::string(text) + "'");
}

Variant parse_variant(std::string_view text) {
  for (Variant v : {Variant::original, Variant::back_translation_de, Variant::back_translation_ru,
                    Variant::translation}) {
    if (to_string(v) == text) return v;
  }
  throw DataError("unknown variant '" + std::string(text) + "'");
}

FieldMask FieldMask::parse(std::string_view text) {
  if (text == "all") return all();
  unsigned bits = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    std::string_view part = text.substr(pos, comma - pos);
    while (!part.empty() && part.front() == ' ') part.remove_prefix(1);
    while (!part.empty() && part.back() == ' ') part.remove_suffix(1);
    if (part == "title") {
      bits |= kTitle;
    } else if (part == "ingredients") {
      bits |= kIngredients;
    } else if (part == "instructions") {
      bits |= kInstructions;
    } else if (!part.empty()) {
      throw ConfigError("unknown recipe component '" + std::string(part) + "'");
    }
    pos = comma + 1;
  }
  if (bits == 0) throw ConfigError("recipe component mask must not be empty");
  return FieldMask(bits);
}

std::string FieldMask::to_string() const {
  std::string out;
  const auto add = [&](const char* name) {
    if (!out.empty()) out += ',';
    out += name;
  };
  if (has(kTitle)) add("title");
  if (has(kIngredients)) add("ingredients");
  if (has(kInstructions)) add("instructions");
  return out;
}

const RecipeDocument& PairedSample::original() const {
  for (const auto& doc : recipe_group) {
    if (doc.variant == Variant::original) return doc;
  }
  throw DataError("sample " + id + " has no original recipe");
}

const RecipeDocument* PairedSample::find(Language language, Variant variant) const {
  for (const auto& doc : recipe_group) {
    if (doc.language == language && doc.variant == variant) return &doc;
  }
  return nullptr;
}

std::string recipe_document_id(std::string_view sample_id, Language language, Variant variant) {
  std::string id(sample_id);
  id += '#';
  id += to_string(language);
  id += '-';
  id += to_string(variant);
  return id;
}

// ---------------------------------------------------------------------------
// Validation

namespace {

void validate_sample(const PairedSample& s) {
  const std::string where = "sample '" + s.id + "': ";
  if (s.id.empty()) throw DataError("sample id must be non-empty");
  if (s.class_label < 0) throw DataError(where + "class_label must be >= 0");
  if (s.recipe_group.empty()) throw DataError(where + "no recipes");
  if (s.images.empty()) throw DataError(where + "no images");
  std::size_t originals = 0;
  std::set<std::pair<Language, Variant>> seen;
  for (const auto& doc : s.recipe_group) {
    if (doc.variant == Variant::original) ++originals;
    const bool en_variant = doc.variant != Variant::translation;
    if (en_variant != (doc.language == Language::EN)) {
      throw DataError(where + "variant/language inconsistency (" +
                      std::string(to_string(doc.variant)) + " in " +
                      std::string(to_string(doc.language)) + ")");
    }
    if (!seen.emplace(doc.language, doc.variant).second) {
      throw DataError(where + "duplicate recipe variant " + std::string(to_string(doc.language)) +
                      "/" + std::string(to_string(doc.variant)));
    }
    if (doc.title.empty() && doc.ingredients.empty() && doc.instructions.empty()) {
      throw DataError(where + "recipe with no title, ingredients or instructions");
    }
    if (doc.class_label != s.class_label) throw DataError(where + "recipe class label mismatch");
    if (!doc.id.starts_with(s.id)) throw DataError(where + "recipe id does not share sample prefix");
  }
  if (originals != 1) throw DataError(where + "exactly one original recipe required");
  for (const auto& img : s.images) {
    if (img.id.empty()) throw DataError(where + "image id must be non-empty");
    const bool has_feature = !img.feature.empty();
    const bool has_pixels = !img.pixels.empty();
    if (has_feature == has_pixels) {
      throw DataError(where + "image '" + img.id + "' needs exactly one of feature/pixels");
    }
    for (float v : img.feature) {
      if (!std::isfinite(v)) throw DataError(where + "non-finite image feature");
    }
  }
}

}  // namespace

ImageMode corpus_image_mode(const std::vector<PairedSample>& samples) {
  if (samples.empty() || samples.front().images.empty()) return ImageMode::feature;
  return samples.front().images.front().pixels.empty() ? ImageMode::feature : ImageMode::pixels;
}

void validate_corpus(const std::vector<PairedSample>& samples) {
  std::set<std::string> ids;
  std::set<std::string> image_ids;
  const ImageMode mode = corpus_image_mode(samples);
  std::size_t feature_dim = 0;
  for (const auto& s : samples) {
    validate_sample(s);
    if (!ids.insert(s.id).second) throw DataError("duplicate sample id '" + s.id + "'");
    for (const auto& img : s.images) {
      if (!image_ids.insert(img.id).second) {
        throw DataError("duplicate image id '" + img.id + "'");
      }
      const ImageMode m = img.pixels.empty() ? ImageMode::feature : ImageMode::pixels;
      if (m != mode) throw DataError("mixed feature/pixel image modes in corpus");
      if (m == ImageMode::feature) {
        if (feature_dim == 0) feature_dim = img.feature.size();
        if (img.feature.size() != feature_dim) {
          throw DataError("image '" + img.id + "' feature dimension " +
                          std::to_string(img.feature.size()) + " differs from " +
                          std::to_string(feature_dim));
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// JSONL I/O

namespace {

std::vector<std::string> string_list(const json& j, const char* key, const std::string& where) {
  std::vector<std::string> out;
  if (!j.contains(key)) return out;
  if (!j.at(key).is_array()) throw DataError(where + "'" + key + "' must be an array");
  for (const auto& v : j.at(key)) {
    if (!v.is_string()) throw DataError(where + "'" + key + "' entries must be strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw DataError(where + "unknown key '" + key + "'");
    }
  }
}

PairedSample parse_sample(const json& j, const std::filesystem::path& base,
                          const std::string& where) {
  if (!j.is_object()) throw DataError(where + "expected a JSON object");
  reject_unknown_keys(j, {"id", "class_label", "recipes", "images"}, where);
  PairedSample s;
  try {
    s.id = j.at("id").get<std::string>();
    s.class_label = j.at("class_label").get<int>();
  } catch (const json::exception& e) {
    throw DataError(where + "bad id/class_label: " + e.what());
  }
  if (!j.contains("recipes") || !j.at("recipes").is_array()) {
    throw DataError(where + "'recipes' must be an array");
  }
  for (const auto& r : j.at("recipes")) {
    if (!r.is_object()) throw DataError(where + "recipe entries must be objects");
    reject_unknown_keys(r, {"language", "variant", "title", "ingredients", "instructions"}, where);
    RecipeDocument doc;
    try {
      doc.language = parse_language(r.at("language").get<std::string>());
      doc.variant = parse_variant(r.at("variant").get<std::string>());
      doc.title = r.value("title", std::string());
    } catch (const json::exception& e) {
      throw DataError(where + "bad recipe entry: " + e.what());
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    }
    doc.ingredients = string_list(r, "ingredients", where);
    doc.instructions = string_list(r, "instructions", where);
    doc.class_label = s.class_label;
    doc.id = recipe_document_id(s.id, doc.language, doc.variant);
    s.recipe_group.push_back(std::move(doc));
  }
  if (!j.contains("images") || !j.at("images").is_array()) {
    throw DataError(where + "'images' must be an array");
  }
  for (const auto& im : j.at("images")) {
    if (!im.is_object()) throw DataError(where + "image entries must be objects");
    reject_unknown_keys(im, {"id", "feature", "pixels_path"}, where);
    ImageRecord rec;
    try {
      rec.id = im.at("id").get<std::string>();
    } catch (const json::exception& e) {
      throw DataError(where + "bad image id: " + e.what());
    }
    const bool has_feature = im.contains("feature");
    const bool has_pixels = im.contains("pixels_path");
    if (has_feature == has_pixels) {
      throw DataError(where + "image '" + rec.id + "' needs exactly one of feature/pixels_path");
    }
    if (has_feature) {
      try {
        rec.feature = im.at("feature").get<std::vector<float>>();
      } catch (const json::exception& e) {
        throw DataError(where + "bad feature: " + e.what());
      }
      if (rec.feature.empty()) throw DataError(where + "empty feature vector");
    } else {
      rec.pixels_path = im.at("pixels_path").get<std::string>();
      rec.pixels = load_png(base / rec.pixels_path);
    }
    s.images.push_back(std::move(rec));
  }
  for (auto& doc : s.recipe_group) {
    for (const auto& im : s.images) doc.image_ids.push_back(im.id);
  }
  try {
    validate_sample(s);
  } catch (const DataError& e) {
    throw DataError(where + e.what());
  }
  return s;
}

ordered_json sample_to_json(const PairedSample& s) {
  ordered_json j;
  j["id"] = s.id;
  j["class_label"] = s.class_label;
  ordered_json recipes = ordered_json::array();
  for (const auto& doc : s.recipe_group) {
    ordered_json r;
    r["language"] = std::string(to_string(doc.language));
    r["variant"] = std::string(to_string(doc.variant));
    r["title"] = doc.title;
    r["ingredients"] = doc.ingredients;
    r["instructions"] = doc.instructions;
    recipes.push_back(std::move(r));
  }
  j["recipes"] = std::move(recipes);
  ordered_json images = ordered_json::array();
  for (const auto& img : s.images) {
    ordered_json im;
    im["id"] = img.id;
    if (img.pixels.empty()) {
      im["feature"] = img.feature;
    } else {
      im["pixels_path"] = img.pixels_path.empty() ? "images/" + img.id + ".png" : img.pixels_path;
    }
    images.push_back(std::move(im));
  }
  j["images"] = std::move(images);
  return j;
}

}  // namespace

std::vector<PairedSample> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus " + path.string());
  const auto base = path.parent_path();
  std::vector<PairedSample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = path.filename().string() + ":" + std::to_string(line_no) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where + "malformed JSON line: " + e.what());
    }
    samples.push_back(parse_sample(j, base, where));
  }
  std::sort(samples.begin(), samples.end(),
            [](const PairedSample& a, const PairedSample& b) { return a.id < b.id; });
  validate_corpus(samples);
  return samples;
}

void save_corpus(const std::vector<PairedSample>& samples, const std::filesystem::path& path) {
  validate_corpus(samples);
  const auto base = path.parent_path();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write corpus " + path.string());
  bool made_dir = false;
  for (const auto& s : samples) {
    const ordered_json j = sample_to_json(s);
    for (std::size_t i = 0; i < s.images.size(); ++i) {
      const auto& img = s.images[i];
      if (img.pixels.empty()) continue;
      const auto rel = j["images"][i]["pixels_path"].get<std::string>();
      const auto target = base / rel;
      if (!made_dir) {
        std::filesystem::create_directories(target.parent_path());
        made_dir = true;
      }
      save_png(img.pixels, target);
    }
    out << j.dump() << '\n';
  }
}

SplitManifest load_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open split manifest " + path.string());
  json j;
  try {
    j = json::parse(in);
    SplitManifest m;
    m.train = j.at("train").get<std::vector<std::string>>();
    m.validation = j.at("validation").get<std::vector<std::string>>();
    m.test = j.at("test").get<std::vector<std::string>>();
    return m;
  } catch (const json::exception& e) {
    throw DataError("malformed split manifest " + path.string() + ": " + e.what());
  }
}

void save_split(const SplitManifest& split, const std::filesystem::path& path) {
  ordered_json j;
  j["train"] = split.train;
  j["validation"] = split.validation;
  j["test"] = split.test;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write split manifest " + path.string());
  out << j.dump(2) << '\n';
}

std::string compose_recipe_text(const RecipeDocument& doc, FieldMask mask) {
  std::string out;
  const auto append = [&](const std::string& line) {
    if (line.empty()) return;
    if (!out.empty()) out += ' ';
    out += line;
  };
  if (mask.has(FieldMask::kTitle)) append(doc.title);
  if (mask.has(FieldMask::kIngredients)) {
    for (const auto& l : doc.ingredients) append(l);
  }
  if (mask.has(FieldMask::kInstructions)) {
    for (const auto& l : doc.instructions) append(l);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Toy vocabulary and corpus

namespace {

std::string utf8(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return out;
}

std::string latin_word(std::size_t k, const char* suffix) {
  static constexpr std::string_view consonants = "bdfgklmnprstvz";
  static constexpr std::string_view vowels = "aeiou";
  const std::size_t n = consonants.size() * vowels.size();
  const auto syllable = [&](std::size_t s) {
    return std::string{consonants[s / vowels.size()], vowels[s % vowels.size()]};
  };
  const std::size_t a = k % n;
  const std::size_t b = (k / n + 7 * a) % n;
  return syllable(a) + syllable(b) + suffix;
}

std::string cyrillic_word(std::size_t k) {
  static constexpr char32_t consonants[] = {U'б', U'в', U'г', U'д', U'з', U'к', U'л',
                                            U'м', U'н', U'п', U'р', U'с', U'т'};
  static constexpr char32_t vowels[] = {U'а', U'е', U'и', U'о', U'у'};
  constexpr std::size_t nc = std::size(consonants), nv = std::size(vowels), n = nc * nv;
  const std::size_t a = k % n;
  const std::size_t b = (k / n + 7 * a) % n;
  return utf8(consonants[a / nv]) + utf8(vowels[a % nv]) + utf8(consonants[b / nv]) +
         utf8(vowels[b % nv]);
}

std::string hangul_word(std::size_t k) {
  const char32_t first = static_cast<char32_t>(0xAC00 + (k % 399) * 28);
  const char32_t second = static_cast<char32_t>(0xB098 + (k / 399) * 28);
  return utf8(first) + utf8(second);
}

struct ToyLatent {
  std::size_t class_label;
  std::vector<std::size_t> instances;
  std::vector<std::vector<double>> image_latents;
};

std::vector<std::vector<double>> orthonormal_directions(std::size_t count, std::size_t dim,
                                                        std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> dirs;
  while (dirs.size() < count) {
    std::vector<double> v(dim);
    for (auto& x : v) x = normal(rng);
    for (const auto& d : dirs) {
      const double dot = std::inner_product(v.begin(), v.end(), d.begin(), 0.0);
      for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * d[i];
    }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm < 1e-6) continue;
    for (auto& x : v) x /= norm;
    dirs.push_back(std::move(v));
  }
  return dirs;
}

double quantize(double v, double step) { return std::round(v / step) * step; }

}  // namespace

Vocabulary make_toy_vocabulary(std::size_t n_words) {
  std::vector<std::string> tokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  const std::size_t per_lang = n_words / 5;
  for (std::size_t l = 0; l < 5; ++l) {
    const std::size_t count = l == 4 ? n_words - 4 * per_lang : per_lang;
    for (std::size_t k = 0; k < count; ++k) {
      switch (l) {
        case 0: tokens.push_back(latin_word(k, "")); break;
        case 1: tokens.push_back(latin_word(k, "n")); break;
        case 2: tokens.push_back(cyrillic_word(k)); break;
        case 3: tokens.push_back(latin_word(k, "x")); break;
        default: tokens.push_back(hangul_word(k)); break;
      }
    }
  }
  for (const char* piece : {"##s", "##en", "##ed", "##ing", "##x"}) tokens.emplace_back(piece);
  return Vocabulary::from_tokens(std::move(tokens));
}

std::vector<PairedSample> generate_toy_corpus(const ToyCorpusOptions& o, const Vocabulary& vocab) {
  if (o.n_classes < 2) throw DataError("toy corpus needs at least 2 classes");
  if (o.n_samples < 2 * o.n_classes) {
    throw DataError("toy corpus needs at least 2 samples per class");
  }
  const auto words = vocab.word_tokens();
  if (words.size() < 50) {
    throw DataError("toy corpus needs a vocabulary with at least 50 word tokens");
  }
  const std::size_t per_lang = words.size() / 5;
  if (per_lang < o.n_classes + kToyFillerConcepts + kToyInstanceWords + 1) {
    throw DataError("vocabulary too small to allocate disjoint per-class and per-language words");
  }
  const std::size_t n_instance = per_lang - o.n_classes - kToyFillerConcepts;
  const auto word_for = [&](std::size_t lang, std::size_t c) {
    return words[lang * per_lang + c];
  };
  const auto class_concept = [](std::size_t c) { return c; };
  const auto filler_concept = [&](std::size_t f) { return o.n_classes + f; };
  const auto instance_concept = [&](std::size_t i) {
    return o.n_classes + kToyFillerConcepts + i;
  };

  const bool pixels = o.image_mode == ImageMode::pixels;
  std::size_t latent_dim = o.feature_dim;
  const std::size_t half = (o.grid + 1) / 2;
  if (pixels) {
    if (o.grid == 0 || o.image_size % o.grid != 0) {
      throw DataError("toy image size must be a multiple of the grid size");
    }
    latent_dim = 3 * o.grid * half;
  }
  if (latent_dim < o.n_classes) {
    throw DataError("toy feature dimension must be at least the number of classes");
  }

  std::mt19937_64 rng(o.seed);
  auto centroids = orthonormal_directions(o.n_classes, latent_dim, rng);
  for (auto& c : centroids)
    for (auto& x : c) x *= kToyCentroidRadius;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> instance_vecs(n_instance, std::vector<double>(latent_dim));
  for (auto& v : instance_vecs) {
    double norm = 0;
    for (auto& x : v) {
      x = normal(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : v) x *= kToyInstanceScale / norm;
  }
  std::uniform_real_distribution<double> noise(-0.02, 0.02);
  std::uniform_int_distribution<std::size_t> pick_filler(0, kToyFillerConcepts - 1);

  std::vector<PairedSample> samples;
  samples.reserve(o.n_samples);
  std::vector<ToyLatent> latents;
  const int id_width = static_cast<int>(std::to_string(o.n_samples - 1).size());
  for (std::size_t i = 0; i < o.n_samples; ++i) {
    ToyLatent lat;
    lat.class_label = i % o.n_classes;
    std::vector<std::size_t> pool(n_instance);
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t k = 0; k < kToyInstanceWords; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, n_instance - 1);
      std::swap(pool[k], pool[pick(rng)]);
      lat.instances.push_back(pool[k]);
    }
    const std::size_t n_images = (i % 4 == 0) ? 2 : 1;
    for (std::size_t m = 0; m < n_images; ++m) {
      std::vector<double> v = centroids[lat.class_label];
      for (std::size_t inst : lat.instances)
        for (std::size_t d = 0; d < latent_dim; ++d) v[d] += instance_vecs[inst][d];
      for (auto& x : v) x = quantize(x + noise(rng), 1.0 / 1024.0);
      lat.image_latents.push_back(std::move(v));
    }

    // Concept-level recipe: title, ingredient lines, instruction lines.
    struct ConceptRecipe {
      std::vector<std::size_t> title;
      std::vector<std::size_t> ingredients;
      std::vector<std::vector<std::size_t>> instructions;
    };
    const auto draw_recipe = [&]() {
      ConceptRecipe r;
      r.title = {filler_concept(pick_filler(rng)), class_concept(lat.class_label)};
      r.ingredients.push_back(class_concept(lat.class_label));
      for (std::size_t inst : lat.instances) r.ingredients.push_back(instance_concept(inst));
      std::shuffle(r.ingredients.begin(), r.ingredients.end(), rng);
      for (int line = 0; line < 2; ++line) {
        std::vector<std::size_t> words_in_line;
        for (int w = 0; w < 3; ++w) words_in_line.push_back(filler_concept(pick_filler(rng)));
        r.instructions.push_back(std::move(words_in_line));
      }
      return r;
    };
    const auto render = [&](const ConceptRecipe& r, std::size_t lang) {
      RecipeDocument doc;
      for (std::size_t k = 0; k < r.title.size(); ++k) {
        if (k) doc.title += ' ';
        doc.title += word_for(lang, r.title[k]);
      }
      for (std::size_t c : r.ingredients) doc.ingredients.push_back(word_for(lang, c));
      for (const auto& line : r.instructions) {
        std::string text;
        for (std::size_t k = 0; k < line.size(); ++k) {
          if (k) text += ' ';
          text += word_for(lang, line[k]);
        }
        doc.instructions.push_back(std::move(text));
      }
      return doc;
    };

    std::ostringstream sid;
    sid << "toy-" << std::setw(id_width) << std::setfill('0') << i;
    PairedSample s;
    s.id = sid.str();
    s.class_label = static_cast<int>(lat.class_label);

    const ConceptRecipe base = draw_recipe();
    const ConceptRecipe bt_de = draw_recipe();
    const ConceptRecipe bt_ru = draw_recipe();
    const auto add = [&](RecipeDocument doc, Language language, Variant variant) {
      doc.language = language;
      doc.variant = variant;
      doc.class_label = s.class_label;
      doc.id = recipe_document_id(s.id, language, variant);
      s.recipe_group.push_back(std::move(doc));
    };
    add(render(base, 0), Language::EN, Variant::original);
    add(render(bt_de, 0), Language::EN, Variant::back_translation_de);
    add(render(bt_ru, 0), Language::EN, Variant::back_translation_ru);
    add(render(base, 1), Language::DE, Variant::translation);
    add(render(base, 2), Language::RU, Variant::translation);
    add(render(base, 3), Language::FR, Variant::translation);
    add(render(base, 4), Language::KO, Variant::translation);

    for (std::size_t m = 0; m < lat.image_latents.size(); ++m) {
      ImageRecord rec;
      rec.id = s.id + "-img" + std::to_string(m);
      if (!pixels) {
        rec.feature.assign(lat.image_latents[m].begin(), lat.image_latents[m].end());
      }
      s.images.push_back(std::move(rec));
    }
    for (auto& doc : s.recipe_group)
      for (const auto& im : s.images) doc.image_ids.push_back(im.id);
    samples.push_back(std::move(s));
    latents.push_back(std::move(lat));
  }

  if (pixels) {
    double max_abs = 0;
    for (const auto& lat : latents)
      for (const auto& v : lat.image_latents)
        for (double x : v) max_abs = std::max(max_abs, std::abs(x));
    const double scale = 0.4 / std::max(max_abs, 1e-9);
    const std::size_t cell = o.image_size / o.grid;
    std::uniform_real_distribution<double> pixel_noise(-2.0 / 255.0, 2.0 / 255.0);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      for (std::size_t m = 0; m < samples[i].images.size(); ++m) {
        const auto& v = latents[i].image_latents[m];
        Image img(o.image_size, o.image_size);
        for (std::size_t y = 0; y < o.image_size; ++y) {
          for (std::size_t x = 0; x < o.image_size; ++x) {
            const std::size_t r = y / cell;
            const std::size_t c = std::min(x / cell, o.grid - 1 - x / cell);
            for (std::size_t ch = 0; ch < 3; ++ch) {
              const double value = 0.5 + scale * v[(ch * o.grid + r) * half + c] + pixel_noise(rng);
              img.at(y, x, ch) =
                  static_cast<float>(std::round(std::clamp(value, 0.0, 1.0) * 255.0) / 255.0);
            }
          }
        }
        auto& rec = samples[i].images[m];
        rec.pixels = std::move(img);
        rec.pixels_path = "images/" + rec.id + ".png";
      }
    }
  }
  validate_corpus(samples);
  return samples;
}

SplitManifest split_corpus(const std::vector<PairedSample>& samples,
                           const std::array<double, 3>& fractions, std::uint64_t seed) {
  double total = 0;
  for (double f : fractions) {
    if (!(f > 0)) throw ConfigError("split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");

  std::map<int, std::vector<std::string>> by_class;
  for (const auto& s : samples) by_class[s.class_label].push_back(s.id);

  std::mt19937_64 rng(seed);
  SplitManifest m;
  std::array<std::vector<std::string>*, 3> out = {&m.train, &m.validation, &m.test};
  for (auto& [label, ids] : by_class) {
    const std::size_t n = ids.size();
    if (n < 3) {
      throw DataError("class " + std::to_string(label) + " has " + std::to_string(n) +
                      " samples, fewer than the 3 splits");
    }
    std::sort(ids.begin(), ids.end());
    std::shuffle(ids.begin(), ids.end(), rng);
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> remainders{};
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      const double exact = fractions[k] * static_cast<double>(n);
      counts[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
      remainders[k] = exact - static_cast<double>(counts[k]);
      assigned += counts[k];
    }
    while (assigned < n) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < 3; ++k)
        if (remainders[k] > remainders[best] + 1e-12) best = k;
      ++counts[best];
      remainders[best] = -1;
      ++assigned;
    }
    for (std::size_t k = 0; k < 3; ++k) {
      while (counts[k] == 0) {
        const std::size_t donor = static_cast<std::size_t>(
            std::max_element(counts.begin(), counts.end()) - counts.begin());
        --counts[donor];
        ++counts[k];
      }
    }
    std::size_t pos = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t c = 0; c < counts[k]; ++c) out[k]->push_back(ids[pos++]);
    }
  }
  for (auto* list : out) std::sort(list->begin(), list->end());
  return m;
}

std::vector<PairedSample> select_samples(const std::vector<PairedSample>& samples,
                                         const std::vector<std::string>& ids) {
  std::map<std::string_view, const PairedSample*> index;
  for (const auto& s : samples) index.emplace(s.id, &s);
  std::vector<PairedSample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = index.find(id);
    if (it == index.end()) throw DataError("split references unknown sample '" + id + "'");
    out.push_back(*it->second);
  }
  return out;
}

}  // namespace xmodal
