#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "support.hpp"
#include "xmodal/corpus.hpp"
#include "xmodal/encoders.hpp"
#include "xmodal/errors.hpp"
#include "xmodal/tokenizer.hpp"

using namespace xmodal;

namespace {

EncoderDims small_dims(std::size_t vocab_size = 60) {
  EncoderDims d;
  d.vocab_size = vocab_size;
  d.d_tok = 16;
  d.d_share = 16;
  d.layers = 2;
  d.heads = 2;
  d.max_len = 16;
  d.feature_dim = 8;
  return d;
}

TokenSequence sequence(std::vector<std::size_t> ids) {
  TokenSequence s;
  s.ids = std::move(ids);
  for (std::size_t i = 1; i < s.ids.size(); ++i) {
    s.word_spans.push_back({i, i + 1});
    s.words.push_back("w" + std::to_string(i));
  }
  return s;
}

AttentionMap constant_map(std::size_t len, std::size_t layers, std::size_t heads,
                          const std::function<double(std::size_t, std::size_t)>& entry) {
  AttentionMap m;
  m.length = len;
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<Tensor<double>> hs;
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor<double> a({len, len});
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = 0; j < len; ++j) a(i, j) = entry(i, j);
      hs.push_back(a);
    }
    m.layers.push_back(hs);
  }
  return m;
}

}  // namespace

TEST_CASE("cosine similarity closed forms and degenerate inputs") {
  const std::vector<double> x{1, 0}, y{0, 1}, d{1, 1};
  CHECK(cosine_similarity(std::span<const double>(x), std::span<const double>(x)) == 1.0);
  CHECK(cosine_similarity(std::span<const double>(x), std::span<const double>(y)) == 0.0);
  CHECK(cosine_similarity(std::span<const double>(d), std::span<const double>(x)) ==
        doctest::Approx(0.70710678).epsilon(1e-6));
  const std::vector<float> zero{0, 0}, one{1, 0};
  bool degenerate = false;
  CHECK(cosine_similarity(std::span<const float>(zero), std::span<const float>(one), &degenerate) == 0.0);
  CHECK(degenerate);
}

TEST_CASE("recipe encoder: CLS-only input and permutation invariance without positions") {
  auto dims = small_dims();
  const auto model = RetrievalModel<float>::create(dims, 3);
  const auto v = embed_recipe(model, sequence({2}));
  CHECK(v.size() == 16);
  for (float x : v) CHECK(std::isfinite(x));

  dims.use_positions = false;
  const auto np = RetrievalModel<double>::create(dims, 3);
  const auto forward = [&](const TokenSequence& s) {
    Tape<double> t;
    return t.value(recipe_forward(t, np, s).embedding).storage();
  };
  const auto a = forward(sequence({2, 10, 11, 12, 30}));
  const auto b = forward(sequence({2, 30, 12, 10, 11}));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));

  CHECK_THROWS_AS(embed_recipe(model, sequence({2, 999})), std::out_of_range);
  CHECK_THROWS_AS(embed_recipe(model, TokenSequence{}), std::invalid_argument);
  std::vector<std::size_t> too_long(17, 5);
  CHECK_THROWS_AS(embed_recipe(model, sequence(too_long)), std::invalid_argument);
}

TEST_CASE("zero attention logits give uniform attention rows") {
  auto model = RetrievalModel<float>::create(small_dims(), 4);
  for (std::size_t l = 0; l < 2; ++l) {
    model.params.at("layer" + std::to_string(l) + ".q.w").fill(0.0f);
    model.params.at("layer" + std::to_string(l) + ".q.b").fill(0.0f);
  }
  AttentionMap att;
  embed_recipe(model, sequence({2, 7, 8, 9, 10}), &att);
  REQUIRE(att.layers.size() == 2);
  for (const auto& layer : att.layers)
    for (const auto& a : layer)
      for (double p : a.values()) CHECK(p == doctest::Approx(1.0 / 5.0).epsilon(1e-6));
}

TEST_CASE("attention probabilities are row-stochastic") {
  const auto model = RetrievalModel<float>::create(small_dims(), 5);
  AttentionMap att;
  embed_recipe(model, sequence({2, 7, 8, 9, 10, 40}), &att);
  for (const auto& layer : att.layers)
    for (const auto& a : layer)
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0;
        for (double p : a.row_span(i)) s += p;
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
      }
}

TEST_CASE("image encoder: zero in, zero out; linear mode is homogeneous") {
  auto dims = small_dims();
  auto model = RetrievalModel<float>::create(dims, 6);
  for (const char* b : {"image_fc.b", "shared.b"}) model.params.at(b).fill(0.0f);
  const auto zero = embed_image_features(model, Tensor<float>({1, 8}));
  for (float x : zero) CHECK(x == 0.0f);

  dims.linear_heads = true;
  auto linear = RetrievalModel<float>::create(dims, 6);
  for (const char* b : {"image_fc.b", "shared.b"}) linear.params.at(b).fill(0.0f);
  Tensor<float> x({1, 8});
  std::mt19937_64 rng(1);
  std::normal_distribution<float> normal;
  for (auto& e : x.values()) e = normal(rng);
  Tensor<float> x2 = x;
  for (auto& e : x2.values()) e *= 2;
  const auto v1 = embed_image_features(linear, x);
  const auto v2 = embed_image_features(linear, x2);
  for (std::size_t i = 0; i < v1.size(); ++i) CHECK(v2[i] == doctest::Approx(2 * v1[i]).epsilon(1e-5));
  CHECK_THROWS_AS(embed_image_features(model, Tensor<float>({1, 5})), std::invalid_argument);
}

TEST_CASE("image encoder output is finite and non-zero for random inputs") {
  std::mt19937_64 rng(9);
  std::normal_distribution<float> normal;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto model = RetrievalModel<float>::create(small_dims(), seed);
    Tensor<float> x({1, 8});
    for (auto& e : x.values()) e = normal(rng);
    const auto v = embed_image_features(model, x);
    double norm = 0;
    for (float e : v) {
      CHECK(std::isfinite(e));
      norm += e * e;
    }
    CHECK(norm > 0);
  }
}

TEST_CASE("encoder gradients match finite differences") {
  auto model = RetrievalModel<double>::create(small_dims(), 8);
  const auto seq = sequence({2, 9, 14, 9, 33, 51});
  std::mt19937_64 rng(2);
  const auto w = testing::random_vector(rng, 16);
  const auto feature = testing::random_vector(rng, 8);
  const auto probe = [&](Tape<double>& t) {
    Var v2 = recipe_forward(t, model, seq, false).embedding;
    Var v1 = image_forward(t, model, t.constant(Tensor<double>({1, 8}, feature)));
    Var weights = t.constant(Tensor<double>({1, 16}, w));
    return t.add(t.sum(t.mul(v2, weights)), t.cosine(v1, v2));
  };
  const auto r = testing::check_gradients(model.params, probe);
  INFO("worst tensor " << r.worst_name);
  CHECK(r.worst < 1e-5);
}

TEST_CASE("pixel backbone pools cells and centers colours") {
  auto dims = small_dims();
  dims.image_mode = ImageMode::pixels;
  dims.load_size = 8;
  dims.crop_size = 8;
  dims.grid = 2;
  const auto model = RetrievalModel<float>::create(dims, 1);
  Image img(8, 8, 0.0f);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) img.at(y, x, 0) = 1.0f;
  const auto f = pixels_to_features(model, img);
  REQUIRE(f.size() == 12);
  CHECK(f[0] == doctest::Approx(1.0));   // red, top-left cell
  CHECK(f[1] == doctest::Approx(-1.0));  // red, top-right cell
  CHECK(f[4] == doctest::Approx(-1.0));  // green, top-left cell
  const Image resized = eval_transform(img, 10, 8);
  CHECK(resized.height == 8);
}

TEST_CASE("attention rollout fixtures") {
  const std::vector<WordSpan> two_words{{1, 2}, {2, 4}};
  const auto identity = constant_map(4, 2, 2, [](auto i, auto j) { return i == j ? 1.0 : 0.0; });
  const auto w = attention_rollout(identity, two_words);
  REQUIRE(w.size() == 2);
  CHECK(w[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  const auto single = attention_rollout(constant_map(2, 1, 1, [](auto, auto) { return 0.5; }),
                                        {{1, 2}});
  CHECK(single == std::vector<double>{1.0});

  const std::vector<WordSpan> spans{{1, 2}, {2, 5}, {5, 7}};
  const auto uniform = attention_rollout(constant_map(7, 3, 2, [](auto, auto) { return 1.0 / 7; }),
                                         spans);
  CHECK(uniform[0] == doctest::Approx(1.0 / 6));
  CHECK(uniform[1] == doctest::Approx(3.0 / 6));
  CHECK(uniform[2] == doctest::Approx(2.0 / 6));

  CHECK_THROWS_AS(attention_rollout(identity, {{2, 4}}), std::invalid_argument);
}

TEST_CASE("retrieval checkpoint round trip restores model and vocabulary") {
  const auto vocab = make_toy_vocabulary(50);
  auto dims = small_dims(vocab.size());
  const auto model = RetrievalModel<float>::create(dims, 12);
  testing::TempDir dir("retr-ckpt");
  nlohmann::ordered_json cfg = {{"seed", 12}};
  save_retrieval_checkpoint(model, vocab, cfg, 3, dir / "m.bin");
  const auto back = load_retrieval_checkpoint(dir / "m.bin");
  CHECK(back.model.dims == dims);
  CHECK(back.model.params == model.params);
  CHECK(back.vocab.tokens() == vocab.tokens());
  CHECK(back.epoch == 3);
  CHECK(back.config["seed"] == 12);
}
