#include <benchmark/benchmark.h>

#include <random>

#include "xmodal/corpus.hpp"
#include "xmodal/encoders.hpp"
#include "xmodal/evaluation.hpp"
#include "xmodal/tokenizer.hpp"
#include "xmodal/training.hpp"

using namespace xmodal;

namespace {

const Vocabulary& toy_vocab() {
  static const Vocabulary vocab = make_toy_vocabulary(190);
  return vocab;
}

std::string toy_recipe_text() {
  ToyCorpusOptions o;
  o.n_samples = 8;
  o.n_classes = 2;
  const auto corpus = generate_toy_corpus(o, toy_vocab());
  return compose_recipe_text(corpus[0].original(), FieldMask::all());
}

EncoderDims dims(std::size_t d) {
  EncoderDims e;
  e.vocab_size = toy_vocab().size();
  e.d_tok = d;
  e.d_share = d;
  e.layers = 2;
  e.heads = 2;
  e.feature_dim = 64;
  return e;
}

Embeddings random_embeddings(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal;
  Embeddings e(n, std::vector<float>(d));
  for (auto& v : e)
    for (auto& x : v) x = normal(rng);
  return e;
}

}  // namespace

static void BM_EncodeRecipe(benchmark::State& state) {
  const auto text = toy_recipe_text();
  for (auto _ : state) benchmark::DoNotOptimize(encode_recipe(text, toy_vocab(), 512));
}
BENCHMARK(BM_EncodeRecipe);

static void BM_RecipeForward(benchmark::State& state) {
  const auto model = RetrievalModel<float>::create(dims(state.range(0)), 1);
  const auto seq = encode_recipe(toy_recipe_text(), toy_vocab(), 512);
  for (auto _ : state) benchmark::DoNotOptimize(embed_recipe(model, seq));
  state.counters["tokens"] = static_cast<double>(seq.ids.size());
}
BENCHMARK(BM_RecipeForward)->Arg(32)->Arg(64)->Unit(benchmark::kMicrosecond);

static void BM_BatchLoss(benchmark::State& state) {
  const auto model = RetrievalModel<float>::create(dims(64), 1);
  ToyCorpusOptions o;
  o.n_samples = static_cast<std::size_t>(state.range(0));
  o.n_classes = 2;
  const auto corpus = generate_toy_corpus(o, toy_vocab());
  std::vector<BatchItem<float>> batch;
  for (const auto& s : corpus) {
    BatchItem<float> item;
    item.recipe = encode_recipe(compose_recipe_text(s.original(), FieldMask::all()), toy_vocab(), 512);
    item.image = Tensor<float>({1, 64}, s.images.front().feature);
    batch.push_back(std::move(item));
  }
  for (auto _ : state) benchmark::DoNotOptimize(batch_loss(model, batch, 0.3).loss);
}
BENCHMARK(BM_BatchLoss)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_RetrievalReport(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_embeddings(n, 64, 1), b = random_embeddings(n, 64, 2);
  for (auto _ : state) benchmark::DoNotOptimize(retrieval_report(a, b, n, 1, 0));
}
BENCHMARK(BM_RetrievalReport)->Arg(128)->Arg(1000)->Unit(benchmark::kMillisecond);

static void BM_Fid(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  std::vector<std::vector<double>> a(512, std::vector<double>(d)), b = a;
  for (auto* set : {&a, &b})
    for (auto& v : *set)
      for (auto& x : v) x = normal(rng);
  for (auto _ : state) benchmark::DoNotOptimize(fid(a, b));
}
BENCHMARK(BM_Fid)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
