#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "support.hpp"
#include "xmodal/corpus.hpp"
#include "xmodal/errors.hpp"
#include "xmodal/tokenizer.hpp"

using namespace xmodal;

namespace {

const char* kMinimalLine =
    R"({"id":"r1","class_label":0,"recipes":[{"language":"EN","variant":"original",)"
    R"("title":"Pasta","ingredients":["salt"],"instructions":["boil"]}],)"
    R"("images":[{"id":"r1-img0","feature":[0.5,1.5]}]})";

RecipeDocument pasta() {
  RecipeDocument d;
  d.title = "Pasta";
  d.ingredients = {"salt"};
  d.instructions = {"boil"};
  return d;
}

// String assembly written independently of the library's join.
std::string assemble(const RecipeDocument& d, bool title, bool ingredients, bool instructions) {
  std::vector<std::string> parts;
  if (title && !d.title.empty()) parts.push_back(d.title);
  if (ingredients)
    for (const auto& s : d.ingredients)
      if (!s.empty()) parts.push_back(s);
  if (instructions)
    for (const auto& s : d.instructions)
      if (!s.empty()) parts.push_back(s);
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? " " : "") + parts[i];
  return out;
}

PairedSample plain_sample(const std::string& id, int label) {
  PairedSample s;
  s.id = id;
  s.class_label = label;
  RecipeDocument d = pasta();
  d.id = recipe_document_id(id, Language::EN, Variant::original);
  d.class_label = label;
  d.image_ids = {id + "-img0"};
  s.recipe_group = {d};
  ImageRecord img;
  img.id = id + "-img0";
  img.feature = {1.0f, 2.0f};
  s.images = {img};
  return s;
}

void check_partition(const SplitManifest& m, const std::vector<PairedSample>& samples) {
  std::set<std::string> all;
  for (const auto* list : {&m.train, &m.validation, &m.test}) {
    CHECK_FALSE(list->empty());
    for (const auto& id : *list) CHECK(all.insert(id).second);
  }
  CHECK(all.size() == samples.size());
  for (const auto& s : samples) CHECK(all.count(s.id) == 1);
}

}  // namespace

TEST_CASE("load_corpus reads empty and minimal files") {
  testing::TempDir dir("corpus");
  std::ofstream(dir / "empty.jsonl").close();
  CHECK(load_corpus(dir / "empty.jsonl").empty());

  std::ofstream(dir / "one.jsonl") << kMinimalLine << "\n";
  const auto one = load_corpus(dir / "one.jsonl");
  REQUIRE(one.size() == 1);
  CHECK(one[0].original().title == "Pasta");
  CHECK(one[0].images[0].feature == std::vector<float>{0.5f, 1.5f});
}

TEST_CASE("load_corpus rejects malformed records") {
  testing::TempDir dir("corpus-bad");
  const auto bad = [&](const std::string& line) {
    std::ofstream(dir / "bad.jsonl") << line << "\n";
    return dir / "bad.jsonl";
  };
  std::string inconsistent = kMinimalLine;
  inconsistent.replace(inconsistent.find("\"original\""), 10, "\"translation\"");
  try {
    load_corpus(bad(inconsistent));
    FAIL("expected a DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("variant/language inconsistency") != std::string::npos);
  }
  CHECK_THROWS_AS(load_corpus(bad("{not json")), DataError);
  CHECK_THROWS_AS(load_corpus(bad(R"({"id":"x","class_label":0,"recipes":[],"images":[]})")),
                  DataError);
  std::string unknown = kMinimalLine;
  unknown.insert(1, R"("colour":"red",)");
  CHECK_THROWS_AS(load_corpus(bad(unknown)), DataError);
  CHECK_THROWS_AS(load_corpus(dir / "absent.jsonl"), DataError);
}

TEST_CASE("compose_recipe_text concatenates the selected components") {
  const auto d = pasta();
  CHECK(compose_recipe_text(d, FieldMask(FieldMask::kTitle)) == "Pasta");
  CHECK(compose_recipe_text(d, FieldMask::all()) == "Pasta salt boil");
  CHECK(compose_recipe_text(d, FieldMask::parse("ingredients,instructions")) == "salt boil");

  RecipeDocument longer;
  longer.title = "Stew";
  longer.ingredients = {"beef", "", "two carrots"};
  longer.instructions = {"brown the beef", "simmer"};
  for (unsigned bits = 1; bits < 8; ++bits) {
    const FieldMask m(bits);
    CHECK(compose_recipe_text(longer, m) ==
          assemble(longer, m.has(FieldMask::kTitle), m.has(FieldMask::kIngredients),
                   m.has(FieldMask::kInstructions)));
  }
  CHECK_THROWS_AS(FieldMask::parse("title,spices"), ConfigError);
  CHECK(FieldMask::parse("all") == FieldMask::all());
  CHECK(FieldMask::parse("title,ingredients").to_string() == "title,ingredients");
}

TEST_CASE("toy corpus: class balance, determinism, preconditions") {
  const auto vocab = make_toy_vocabulary(190);
  ToyCorpusOptions o;
  o.seed = 1;
  o.n_samples = 8;
  o.n_classes = 2;
  const auto a = generate_toy_corpus(o, vocab);
  REQUIRE(a.size() == 8);
  std::map<int, int> counts;
  for (const auto& s : a) ++counts[s.class_label];
  CHECK(counts == std::map<int, int>{{0, 4}, {1, 4}});
  CHECK(a == generate_toy_corpus(o, vocab));
  validate_corpus(a);

  testing::TempDir dir("toy");
  save_corpus(a, dir / "a.jsonl");
  save_corpus(generate_toy_corpus(o, vocab), dir / "b.jsonl");
  CHECK(testing::read_file(dir / "a.jsonl") == testing::read_file(dir / "b.jsonl"));
  CHECK(load_corpus(dir / "a.jsonl") == a);

  o.n_classes = 1;
  CHECK_THROWS_AS(generate_toy_corpus(o, vocab), DataError);
  o.n_classes = 2;
  CHECK_THROWS_AS(generate_toy_corpus(o, make_toy_vocabulary(20)), DataError);
}

TEST_CASE("toy corpus: five languages by word substitution") {
  const auto vocab = make_toy_vocabulary(190);
  ToyCorpusOptions o;
  o.n_samples = 16;
  o.n_classes = 4;
  const auto corpus = generate_toy_corpus(o, vocab);
  for (const auto& s : corpus) {
    const auto& en = s.original();
    for (Language lang : {Language::DE, Language::RU, Language::FR, Language::KO}) {
      const auto* t = s.find(lang, Variant::translation);
      REQUIRE(t != nullptr);
      CHECK(t->ingredients.size() == en.ingredients.size());
      CHECK(t->instructions.size() == en.instructions.size());
      // Same word positions as the original, different surface words.
      CHECK(t->title != en.title);
    }
    CHECK(s.find(Language::EN, Variant::back_translation_de) != nullptr);
    CHECK(s.find(Language::EN, Variant::back_translation_ru) != nullptr);
    // Every word of every variant is in the vocabulary.
    for (const auto& doc : s.recipe_group) {
      const auto t = tokenize(compose_recipe_text(doc, FieldMask::all()), vocab);
      for (auto id : t.ids) CHECK(id != vocab.unk_id());
    }
  }
}

TEST_CASE("toy corpus: within-class spread is below the class separation") {
  const auto vocab = make_toy_vocabulary(190);
  ToyCorpusOptions o;
  o.n_samples = 64;
  o.n_classes = 8;
  const auto corpus = generate_toy_corpus(o, vocab);
  const auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
  };
  std::map<int, std::vector<std::vector<double>>> by_class;
  for (const auto& s : corpus)
    for (const auto& img : s.images)
      by_class[s.class_label].emplace_back(img.feature.begin(), img.feature.end());
  std::map<int, std::vector<double>> means;
  for (auto& [c, feats] : by_class) {
    std::vector<double> m(feats[0].size());
    for (const auto& f : feats)
      for (std::size_t i = 0; i < m.size(); ++i) m[i] += f[i] / static_cast<double>(feats.size());
    means[c] = m;
  }
  double max_within = 0, min_between = 1e300;
  for (auto& [c, feats] : by_class)
    for (std::size_t i = 0; i < feats.size(); ++i)
      for (std::size_t j = i + 1; j < feats.size(); ++j)
        max_within = std::max(max_within, dist(feats[i], feats[j]));
  for (auto& [a, ma] : means)
    for (auto& [b, mb] : means)
      if (a < b) min_between = std::min(min_between, dist(ma, mb));
  CHECK(max_within < min_between);
}

TEST_CASE("toy corpus in pixel mode round-trips through PNG") {
  const auto vocab = make_toy_vocabulary(190);
  ToyCorpusOptions o;
  o.n_samples = 8;
  o.n_classes = 2;
  o.image_mode = ImageMode::pixels;
  const auto corpus = generate_toy_corpus(o, vocab);
  CHECK(corpus_image_mode(corpus) == ImageMode::pixels);
  testing::TempDir dir("pix");
  save_corpus(corpus, dir / "c.jsonl");
  const auto loaded = load_corpus(dir / "c.jsonl");
  REQUIRE(loaded.size() == corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    CHECK(loaded[i].images[0].pixels.height == 32);
    CHECK(loaded[i].images[0].pixels == corpus[i].images[0].pixels);
  }
}

TEST_CASE("split_corpus sizes, determinism and stratification") {
  std::vector<PairedSample> ten;
  for (int i = 0; i < 10; ++i) ten.push_back(plain_sample("s" + std::to_string(i), 0));
  const auto m = split_corpus(ten, {0.8, 0.1, 0.1}, 4);
  CHECK(m.train.size() == 8);
  CHECK(m.validation.size() == 1);
  CHECK(m.test.size() == 1);
  check_partition(m, ten);
  CHECK(m == split_corpus(ten, {0.8, 0.1, 0.1}, 4));

  CHECK_THROWS_AS(split_corpus(ten, {0.8, 0.1, 0.2}, 4), ConfigError);
  CHECK_THROWS_AS(split_corpus(ten, {1.0, 0.0, 0.0}, 4), ConfigError);
  std::vector<PairedSample> two = {plain_sample("a", 0), plain_sample("b", 0)};
  CHECK_THROWS_AS(split_corpus(two, {0.4, 0.3, 0.3}, 1), DataError);

  const auto vocab = make_toy_vocabulary(190);
  ToyCorpusOptions o;
  const auto corpus = generate_toy_corpus(o, vocab);
  const auto toy = split_corpus(corpus, {0.7, 0.05, 0.25}, 1);
  check_partition(toy, corpus);
  CHECK(toy.test.size() == 128);
  std::map<std::string, int> label;
  for (const auto& s : corpus) label[s.id] = s.class_label;
  for (const auto* list : {&toy.train, &toy.validation, &toy.test}) {
    std::set<int> classes;
    for (const auto& id : *list) classes.insert(label[id]);
    CHECK(classes.size() == 8);
  }
}

TEST_CASE("split_corpus is valid for every input order of small classes") {
  for (std::size_t n = 3; n <= 5; ++n) {
    std::vector<PairedSample> samples;
    for (std::size_t i = 0; i < n; ++i) samples.push_back(plain_sample("p" + std::to_string(i), 0));
    const auto reference = split_corpus(samples, {0.6, 0.2, 0.2}, 9);
    if (n == 3) {
      CHECK(reference.train.size() == 1);
      CHECK(reference.validation.size() == 1);
      CHECK(reference.test.size() == 1);
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    do {
      std::vector<PairedSample> shuffled;
      for (auto k : perm) shuffled.push_back(samples[k]);
      const auto m = split_corpus(shuffled, {0.6, 0.2, 0.2}, 9);
      check_partition(m, samples);
      CHECK(m == reference);
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
}

TEST_CASE("split manifest round-trips and selects in order") {
  SplitManifest m{{"a", "b"}, {"c"}, {"d"}};
  testing::TempDir dir("split");
  save_split(m, dir / "split.json");
  CHECK(load_split(dir / "split.json") == m);
  std::vector<PairedSample> samples = {plain_sample("d", 0), plain_sample("a", 0),
                                       plain_sample("b", 0)};
  const auto picked = select_samples(samples, {"b", "a"});
  REQUIRE(picked.size() == 2);
  CHECK(picked[0].id == "b");
  CHECK(picked[1].id == "a");
}
