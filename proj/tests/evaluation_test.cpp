#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "support.hpp"
#include "xmodal/corpus.hpp"
#include "xmodal/errors.hpp"
#include "xmodal/evaluation.hpp"

using namespace xmodal;

namespace {

Tensor<double> to_tensor(const std::vector<std::vector<double>>& s) {
  Tensor<double> t({s.size(), s.size()});
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) t(i, j) = s[i][j];
  return t;
}

std::vector<std::vector<double>> gaussian_rows(std::size_t n, std::size_t d, double mean,
                                               double sd, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(mean, sd);
  std::vector<std::vector<double>> rows(n, std::vector<double>(d));
  for (auto& r : rows)
    for (auto& x : r) x = normal(rng);
  return rows;
}

}  // namespace

TEST_CASE("rank of the true pair") {
  Tensor<double> id({4, 4});
  for (std::size_t i = 0; i < 4; ++i) id(i, i) = 1.0;
  for (std::size_t i = 0; i < 4; ++i) CHECK(rank_of_true_pair(id, i) == 1);

  Tensor<double> row({5, 5}, 0.0);
  row(0, 0) = 0.5;
  row(0, 1) = 0.9;
  row(0, 2) = 0.6;
  row(0, 4) = 0.7;
  CHECK(rank_of_true_pair(row, 0) == 4);

  Tensor<double> flat({3, 3}, 0.25);
  CHECK(rank_of_true_pair(flat, 2) == 1);
}

TEST_CASE("direction metrics equal the sort-based oracle") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 50;
    std::vector<std::vector<double>> s(n, std::vector<double>(n));
    for (auto& r : s)
      for (auto& x : r) x = u(rng);
    // Inject exact ties with the diagonal now and then.
    if (trial % 3 == 0) s[1][2] = s[1][1];
    const auto got = direction_metrics(to_tensor(s));
    const auto want = testing::brute_metrics(s);
    CHECK(got.medR == want.medR);
    CHECK(got.r1 == want.r1);
    CHECK(got.r5 == want.r5);
    CHECK(got.r10 == want.r10);
    CHECK(got.r1 <= got.r5);
    CHECK(got.r5 <= got.r10);
  }
}

TEST_CASE("median of an even count is the mean of the middle ranks") {
  // Ranks 1 and 2.
  Tensor<double> s({2, 2});
  s(0, 0) = 1;
  s(0, 1) = 0;
  s(1, 0) = 0;
  s(1, 1) = -1;
  CHECK(direction_metrics(s).medR == 1.5);
}

TEST_CASE("retrieval report: perfect alignment and pool errors") {
  const std::size_t n = 12;
  Embeddings a(n, std::vector<float>(n, 0.0f));
  for (std::size_t i = 0; i < n; ++i) a[i][i] = 1.0f;
  const auto r = retrieval_report(a, a, n, 3, 0);
  CHECK(r.i2r.medR == 1.0);
  CHECK(r.i2r.r1 == 1.0);
  CHECK(r.r2i.r1 == 1.0);
  CHECK_THROWS_AS(retrieval_report(a, a, n + 1, 1, 0), ConfigError);
  CHECK_THROWS_AS(retrieval_report(a, a, 0, 1, 0), ConfigError);
}

TEST_CASE("retrieval report equals an oracle recomputation over the same pools") {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> normal;
  const std::size_t n = 80, d = 6;
  Embeddings im(n, std::vector<float>(d)), rc(n, std::vector<float>(d));
  for (auto* set : {&im, &rc})
    for (auto& v : *set)
      for (auto& x : v) x = normal(rng);
  const auto report = retrieval_report(im, rc, 50, 4, 17, 2);
  const auto pools = evaluation_pools(n, 50, 4, 17);
  REQUIRE(report.subsets.size() == 4);
  double mean_medr = 0;
  for (std::size_t k = 0; k < pools.size(); ++k) {
    CHECK(std::set<std::size_t>(pools[k].begin(), pools[k].end()).size() == 50);
    std::vector<std::vector<double>> s(50, std::vector<double>(50)), st = s;
    for (std::size_t i = 0; i < 50; ++i)
      for (std::size_t j = 0; j < 50; ++j) {
        const auto& q = im[pools[k][i]];
        const auto& c = rc[pools[k][j]];
        s[i][j] = testing::brute_cosine({q.begin(), q.end()}, {c.begin(), c.end()});
      }
    for (std::size_t i = 0; i < 50; ++i)
      for (std::size_t j = 0; j < 50; ++j) st[i][j] = s[j][i];
    const auto i2r = testing::brute_metrics(s);
    const auto r2i = testing::brute_metrics(st);
    CHECK(report.subsets[k].i2r.medR == i2r.medR);
    CHECK(report.subsets[k].i2r.r10 == i2r.r10);
    CHECK(report.subsets[k].r2i.r5 == r2i.r5);
    mean_medr += i2r.medR / 4;
  }
  CHECK(report.i2r.medR == doctest::Approx(mean_medr).epsilon(1e-12));
  // Worker count does not change the result.
  const auto serial = retrieval_report(im, rc, 50, 4, 17, 1);
  CHECK(serial.i2r == report.i2r);
  CHECK(serial.r2i == report.r2i);
}

TEST_CASE("FID: identity, symmetry and one-dimensional closed forms") {
  const auto a = gaussian_rows(200, 4, 0.0, 1.0, 1);
  const auto b = gaussian_rows(200, 4, 0.5, 2.0, 2);
  CHECK(std::abs(fid(a, a)) <= 1e-8);
  CHECK(std::abs(fid(a, b) - fid(b, a)) <= 1e-8);
  CHECK(fid(a, b) > 0);

  std::vector<std::vector<double>> zeros(10, {0.0}), ones(10, {1.0});
  CHECK(fid(zeros, ones) == doctest::Approx(1.0).epsilon(1e-6));

  GaussianStats s1{{0.0}, Tensor<double>({1, 1}, 1.0), 100};
  GaussianStats s2{{0.0}, Tensor<double>({1, 1}, 4.0), 100};
  CHECK(fid_from_stats(s1, s2) == doctest::Approx(1.0).epsilon(1e-6));
  GaussianStats s3{{3.0}, Tensor<double>({1, 1}, 1.0), 100};
  CHECK(fid_from_stats(s1, s3) == doctest::Approx(9.0).epsilon(1e-6));

  CHECK_THROWS_AS(fid({{1.0}}, ones), NumericalError);
}

TEST_CASE("gaussian_stats uses the unbiased covariance") {
  const std::vector<std::vector<double>> x = {{1, 2}, {3, 2}, {5, 8}};
  const auto s = gaussian_stats(x);
  CHECK(s.mean[0] == doctest::Approx(3.0));
  CHECK(s.mean[1] == doctest::Approx(4.0));
  CHECK(s.covariance(0, 0) == doctest::Approx(4.0));
  CHECK(s.covariance(1, 1) == doctest::Approx(12.0));
  CHECK(s.covariance(0, 1) == doctest::Approx(6.0));
}

TEST_CASE("embedding sets honour language, mask and missing variants") {
  const auto vocab = make_toy_vocabulary(190);
  ToyCorpusOptions o;
  o.n_samples = 16;
  o.n_classes = 4;
  auto corpus = generate_toy_corpus(o, vocab);
  // Drop the Korean translation of the first sample.
  auto& group = corpus[0].recipe_group;
  std::erase_if(group, [](const RecipeDocument& d) { return d.language == Language::KO; });

  EncoderDims dims;
  dims.vocab_size = vocab.size();
  dims.d_tok = 16;
  dims.d_share = 16;
  dims.feature_dim = 64;
  const auto model = RetrievalModel<float>::create(dims, 1);

  EmbedOptions opts;
  const auto en = embed_samples(model, vocab, corpus, opts);
  CHECK(en.ids.size() == 16);
  CHECK(en.image_hidden[0].size() == 16);
  opts.language = Language::KO;
  const auto ko = embed_samples(model, vocab, corpus, opts);
  CHECK(ko.ids.size() == 15);
  CHECK(ko.skipped == std::vector<std::string>{corpus[0].id});
  CHECK(ko.images[0] == en.images[1]);
  CHECK(ko.recipes[0] != en.recipes[1]);

  const auto report = multilingual_eval(model, vocab, corpus, Language::DE, 16, 1, 0);
  CHECK(report.pool_size == 16);
  CHECK_THROWS_AS(ablation_eval(model, vocab, corpus, {FieldMask(0u), false}, 16, 1, 0),
                  ConfigError);
  const auto title = ablation_eval(model, vocab, corpus, {FieldMask(FieldMask::kTitle), false}, 16, 1, 0);
  CHECK(title.i2r.medR >= 1.0);

  testing::TempDir dir("tsv");
  write_embeddings_tsv(en, dir / "e.tsv");
  const auto lines = testing::read_lines(dir / "e.tsv");
  CHECK(lines.size() == 32);
  CHECK(lines[0].rfind(corpus[0].id + "\timage\t", 0) == 0);
}

TEST_CASE("report JSON carries both directions") {
  Embeddings a = {{1, 0}, {0, 1}};
  const auto j = report_to_json(retrieval_report(a, a, 2, 1, 0));
  CHECK(j["image_to_recipe"]["medR"] == 1.0);
  CHECK(j["recipe_to_image"]["R@1"] == 1.0);
}
