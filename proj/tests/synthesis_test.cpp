#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "support.hpp"
#include "xmodal/corpus.hpp"
#include "xmodal/errors.hpp"
#include "xmodal/synthesis.hpp"

using namespace xmodal;

namespace {

SynthesisDims small_synth(std::size_t d_share = 8) {
  SynthesisDims d;
  d.d_share = d_share;
  d.d_ca = 4;
  d.d_z = 3;
  d.image_size = 8;
  d.base_channels = 4;
  d.n_classes = 3;
  return d;
}

EncoderDims pixel_dims(std::size_t vocab_size) {
  EncoderDims d;
  d.vocab_size = vocab_size;
  d.d_tok = 8;
  d.d_share = 8;
  d.layers = 1;
  d.heads = 2;
  d.max_len = 64;
  d.image_mode = ImageMode::pixels;
  d.load_size = 16;
  d.crop_size = 16;
  d.grid = 4;
  return d;
}

Tensor<double> row(std::initializer_list<double> v) { return Tensor<double>::row(std::vector<double>(v)); }

double scalar_of(const std::function<Var(Tape<double>&)>& f) {
  Tape<double> t;
  return t.scalar(f(t));
}

}  // namespace

TEST_CASE("KL fixtures and error on non-positive sigma") {
  const std::vector<double> zero4(4, 0.0), one4(4, 1.0);
  CHECK(kl_loss(zero4, one4) == 0.0);
  CHECK(kl_loss(one4, one4) == doctest::Approx(2.0).epsilon(1e-12));
  const std::vector<double> mu{0.0}, sigma{std::exp(0.5)};
  CHECK(std::abs(kl_loss(mu, sigma) - 0.3591) <= 1e-4);
  CHECK(kl_loss(mu, sigma) == doctest::Approx(0.5 * (std::numbers::e - 2)).epsilon(1e-12));
  const std::vector<double> bad{0.0};
  CHECK_THROWS_AS(kl_loss(mu, bad), std::invalid_argument);

  // The tape version agrees and is non-negative with its minimum at mu=0, logvar=0.
  std::mt19937_64 rng(4);
  for (int i = 0; i < 50; ++i) {
    const auto m = testing::random_vector(rng, 3);
    const auto lv = testing::random_vector(rng, 3);
    std::vector<double> s(3);
    for (std::size_t k = 0; k < 3; ++k) s[k] = std::exp(0.5 * lv[k]);
    const double tape_value = scalar_of([&](Tape<double>& t) {
      return kl_term(t, t.constant(Tensor<double>({1, 3}, m)), t.constant(Tensor<double>({1, 3}, lv)));
    });
    CHECK(tape_value == doctest::Approx(kl_loss(m, s)).epsilon(1e-10));
    CHECK(tape_value > 0);
  }
}

TEST_CASE("KL gradient matches finite differences") {
  ParameterSet<double> p;
  std::mt19937_64 rng(2);
  p.add("mu", Tensor<double>({1, 4}, testing::random_vector(rng, 4)));
  p.add("logvar", Tensor<double>({1, 4}, testing::random_vector(rng, 4)));
  const auto r = testing::check_gradients(p, [&](Tape<double>& t) {
    return kl_term(t, t.param(p, "mu"), t.param(p, "logvar"));
  });
  CHECK(r.worst < 1e-4);
}

TEST_CASE("retrieval supervision fixtures and invariants") {
  const std::vector<double> a{1, 0}, c{0, 0, 1}, v{0.5, std::sqrt(0.75)};
  CHECK(retrieval_supervision_loss(a, a, a) == 0.0);
  const std::vector<double> e0{1, 0, 0}, e1{0, 1, 0};
  CHECK(retrieval_supervision_loss(c, e0, e1) == doctest::Approx(2.0));
  CHECK(retrieval_supervision_loss(a, a, v) == doctest::Approx(0.5).epsilon(1e-12));

  std::mt19937_64 rng(8);
  for (int i = 0; i < 100; ++i) {
    auto f = testing::random_vector(rng, 5), v1 = testing::random_vector(rng, 5),
         v2 = testing::random_vector(rng, 5);
    const double l = retrieval_supervision_loss(f, v1, v2);
    CHECK(l >= 0.0);
    CHECK(l <= 4.0);
    for (auto& x : f) x *= 3.5;
    for (auto& x : v2) x *= 0.25;
    CHECK(retrieval_supervision_loss(f, v1, v2) == doctest::Approx(l).epsilon(1e-12));
  }
  const double tape_value = scalar_of([&](Tape<double>& t) {
    return retrieval_supervision_term(t, t.constant(row({1, 0})), t.constant(row({1, 0})),
                                      t.constant(row({0.5, std::sqrt(0.75)})));
  });
  CHECK(tape_value == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("discriminator objective fixtures") {
  const auto eval = [](double real, double fake, double lambda_c, std::size_t classes) {
    return scalar_of([&](Tape<double>& t) {
      Var logits = t.constant(Tensor<double>({1, classes}, 0.0));
      return discriminator_objective(t, t.constant(row({real})), t.constant(row({fake})), logits,
                                     logits, 0, lambda_c);
    });
  };
  CHECK(eval(0.5, 0.5, 0.0, 4) == doctest::Approx(2 * std::log(2.0)).epsilon(1e-12));
  CHECK(eval(0.5, 0.5, 1.0, 4) ==
        doctest::Approx(2 * std::log(2.0) + 2 * std::log(4.0)).epsilon(1e-12));
  const double saturated = eval(1.0, 0.0, 0.0, 4);
  CHECK(saturated == doctest::Approx(2 * std::log(1 / (1 - kProbabilityClamp))).epsilon(1e-6));
  CHECK(saturated < 1e-6);
  // Beyond the clamp the loss stays finite.
  CHECK(std::isfinite(eval(0.0, 1.0, 0.0, 4)));
}

TEST_CASE("generator objective fixtures") {
  Tape<double> t;
  Var half = t.constant(row({0.5}));
  Var logits = t.constant(Tensor<double>({1, 3}, 0.0));
  Var mu = t.constant(row({0.4, -0.2}));
  Var logvar = t.constant(row({0.3, 0.1}));
  Var f = t.constant(row({1, 2}));
  const LossWeights none{0.0, 0.0, 0.0};
  const auto terms = generator_objective(t, half, logits, 1, mu, logvar, f, f, f, none, false);
  CHECK(t.scalar(terms.total) == doctest::Approx(std::log(0.5)).epsilon(1e-12));
  CHECK(t.scalar(terms.retrieval) == doctest::Approx(0.0).epsilon(1e-12));
  const auto ns = generator_objective(t, half, logits, 1, mu, logvar, f, f, f, none, true);
  CHECK(t.scalar(ns.total) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  const LossWeights w{1.0, 2.0, 32.0};
  const auto full = generator_objective(t, half, logits, 1, mu, logvar, f, f, f, w, false);
  const std::vector<double> m{0.4, -0.2}, s{std::exp(0.15), std::exp(0.05)};
  CHECK(t.scalar(full.total) ==
        doctest::Approx(std::log(0.5) + std::log(3.0) + 2 * kl_loss(m, s)).epsilon(1e-10));
}

TEST_CASE("conditioning augmentation") {
  auto model = SynthesisModel<double>::create(small_synth(), 3);
  std::mt19937_64 rng(1);
  const auto v2 = testing::random_vector(rng, 8);
  {
    Tape<double> t;
    const auto out = ca_forward(t, model, t.constant(Tensor<double>({1, 8}, v2)),
                                Tensor<double>({1, 4}, 0.0));
    CHECK(t.value(out.t).storage() == t.value(out.mu).storage());
  }
  for (const char* name : {"ca.mu.w", "ca.mu.b", "ca.logvar.w", "ca.logvar.b"})
    model.generator.at(name).fill(0.0);
  {
    Tape<double> t;
    const std::vector<double> noise{0.3, -1.2, 2.0, 0.0};
    const auto out = ca_forward(t, model, t.constant(Tensor<double>({1, 8}, v2)),
                                Tensor<double>({1, 4}, noise));
    CHECK(t.value(out.t).storage() == noise);
  }
  // Moment check: the spread of t over noise draws follows sigma(v2).
  auto fresh = SynthesisModel<double>::create(small_synth(), 5);
  std::vector<double> sigma;
  std::vector<std::vector<double>> samples;
  std::normal_distribution<double> normal;
  for (int i = 0; i < 10000; ++i) {
    Tape<double> t;
    std::vector<double> noise(4);
    for (auto& x : noise) x = normal(rng);
    const auto out = ca_forward(t, fresh, t.constant(Tensor<double>({1, 8}, v2)),
                                Tensor<double>({1, 4}, noise));
    if (sigma.empty())
      for (double lv : t.value(out.logvar).values()) sigma.push_back(std::exp(0.5 * lv));
    samples.push_back(t.value(out.t).storage());
  }
  for (std::size_t k = 0; k < 4; ++k) {
    double mean = 0, sq = 0;
    for (const auto& s : samples) mean += s[k] / samples.size();
    for (const auto& s : samples) sq += (s[k] - mean) * (s[k] - mean) / (samples.size() - 1);
    CHECK(std::abs(std::sqrt(sq) / sigma[k] - 1.0) <= 0.03);
  }
}

TEST_CASE("generator and discriminator gradients match finite differences") {
  const auto vocab = make_toy_vocabulary(40);
  const auto retrieval = RetrievalModel<double>::create(pixel_dims(vocab.size()), 4);
  auto model = SynthesisModel<double>::create(small_synth(), 6);
  testing::jitter(model.generator, 0.05, 11);
  testing::jitter(model.discriminator, 0.05, 12);
  std::mt19937_64 rng(3);
  const auto v1 = testing::random_vector(rng, 8);
  const auto v2 = testing::random_vector(rng, 8);
  const Tensor<double> z({1, 3}, testing::random_vector(rng, 3));
  const Tensor<double> noise({1, 4}, testing::random_vector(rng, 4));
  const LossWeights weights{1.0, 1.0, 32.0};

  const auto g = testing::check_gradients(
      model.generator,
      [&](Tape<double>& t) {
        return generator_loss(t, model, retrieval, t.constant(Tensor<double>({1, 8}, v1)),
                              t.constant(Tensor<double>({1, 8}, v2)), z, noise, 2, weights, false)
            .total;
      },
      1e-5, 12);
  INFO("generator worst " << g.worst_name);
  CHECK(g.worst < 1e-3);

  std::uniform_real_distribution<double> u(0, 1);
  Tensor<double> real({3, 8, 8}), fake({3, 8, 8});
  for (auto& x : real.values()) x = u(rng);
  for (auto& x : fake.values()) x = u(rng);
  const auto d = testing::check_gradients(
      model.discriminator,
      [&](Tape<double>& t) {
        return discriminator_loss(t, model, t.constant(real), t.constant(fake), 1, weights);
      },
      1e-5, 12);
  INFO("discriminator worst " << d.worst_name);
  CHECK(d.worst < 1e-3);

  Tape<double> t;
  CHECK_THROWS_AS(discriminator_loss(t, model, t.constant(real), t.constant(fake), 3, weights),
                  std::invalid_argument);
}

TEST_CASE("generated images have the configured shape and range") {
  const auto model = SynthesisModel<float>::create(small_synth(), 1);
  Tape<float> t;
  const auto out = generate(t, model, t.constant(Tensor<float>({1, 8}, 0.5f)),
                            Tensor<float>({1, 3}, 0.1f), Tensor<float>({1, 4}));
  const auto& img = t.value(out.image);
  CHECK(img.shape() == Shape{3, 8, 8});
  for (float x : img.values()) {
    CHECK(x > 0.0f);
    CHECK(x < 1.0f);
  }
  CHECK_THROWS_AS(SynthesisModel<float>::create({8, 4, 3, 10, 4, 3}, 1), ConfigError);
}

TEST_CASE("synthesis checkpoint round trip") {
  const auto model = SynthesisModel<float>::create(small_synth(), 9);
  testing::TempDir dir("synth-ckpt");
  save_synthesis_checkpoint(model, {{"seed", 9}}, 4, dir / "g.bin");
  const auto back = load_synthesis_checkpoint(dir / "g.bin");
  CHECK(back.dims == model.dims);
  CHECK(back.generator == model.generator);
  CHECK(back.discriminator == model.discriminator);
}

TEST_CASE("GAN training and evaluation on a small pixel corpus") {
  const auto vocab = make_toy_vocabulary(190);
  ToyCorpusOptions o;
  o.n_samples = 24;
  o.n_classes = 3;
  o.image_mode = ImageMode::pixels;
  o.image_size = 16;
  const auto corpus = generate_toy_corpus(o, vocab);
  const auto retrieval = RetrievalModel<float>::create(pixel_dims(vocab.size()), 2);
  const auto frozen = retrieval.params;

  RunConfig config;
  config.deterministic = true;
  config.gan.epochs = 0;
  config.gan.batch_size = 8;
  config.gan.image_size = 8;
  config.gan.base_channels = 4;
  config.image.load_size = 16;
  config.image.crop_size = 16;

  testing::TempDir zero("gan-zero");
  const auto run0 = train_gan(corpus, retrieval, vocab, config, zero.path());
  CHECK(run0.log.empty());
  CHECK(std::filesystem::exists(zero / "checkpoint-0.bin"));
  CHECK_FALSE(std::filesystem::exists(zero / "checkpoint-1.bin"));

  config.gan.epochs = 2;
  testing::TempDir a("gan-a"), b("gan-b");
  const auto run = train_gan(corpus, retrieval, vocab, config, a.path());
  train_gan(corpus, retrieval, vocab, config, b.path());
  CHECK(run.log.size() == 2);
  CHECK(retrieval.params == frozen);
  CHECK(testing::read_file(a / "metrics.jsonl") == testing::read_file(b / "metrics.jsonl"));
  CHECK(testing::read_file(a / "final.bin") == testing::read_file(b / "final.bin"));
  const auto header = nlohmann::json::parse(testing::read_lines(a / "metrics.jsonl")[0]);
  CHECK(header["kind"] == "synthesis");

  // Oracle generator: the real images themselves.
  SynthesisEvalOptions opts;
  opts.n_subsets = 2;
  opts.oracle = true;
  const auto oracle = synthesis_eval(nullptr, retrieval, vocab, corpus, opts);
  CHECK(oracle.fid == doctest::Approx(0.0).epsilon(1e-6));
  const auto embedded = embed_samples(retrieval, vocab, corpus, EmbedOptions{});
  const auto real = retrieval_report(embedded.images, embedded.recipes, corpus.size(), 2, 0);
  CHECK(oracle.retrieval.i2r == real.i2r);
  CHECK(oracle.retrieval.r2i == real.r2i);

  opts.oracle = false;
  testing::TempDir dump("gan-dump");
  opts.dump_dir = dump.path();
  opts.z_seed = 5;
  const auto synth = synthesis_eval(&run.model, retrieval, vocab, corpus, opts);
  CHECK(synth.fid >= 0.0);
  CHECK(std::filesystem::exists(dump / (corpus[0].id + "_5.png")));
  CHECK(testing::read_lines(dump / "index.jsonl").size() == corpus.size());
  const auto again = synthesis_eval(&run.model, retrieval, vocab, corpus, opts);
  CHECK(again.fid == synth.fid);
  CHECK(again.retrieval.i2r == synth.retrieval.i2r);

  CHECK_THROWS_AS(synthesis_eval(nullptr, retrieval, vocab, corpus, SynthesisEvalOptions{}),
                  ConfigError);
}

TEST_CASE("an untrained generator ranks near chance") {
  const auto vocab = make_toy_vocabulary(190);
  ToyCorpusOptions o;
  o.n_samples = 64;
  o.n_classes = 8;
  o.image_mode = ImageMode::pixels;
  o.image_size = 16;
  const auto corpus = generate_toy_corpus(o, vocab);
  const auto retrieval = RetrievalModel<float>::create(pixel_dims(vocab.size()), 2);
  auto dims = small_synth();
  dims.n_classes = 8;
  const auto generator = SynthesisModel<float>::create(dims, 3);
  SynthesisEvalOptions opts;
  opts.n_subsets = 10;
  opts.pool_size = 40;
  const auto r = synthesis_eval(&generator, retrieval, vocab, corpus, opts);
  CHECK(r.retrieval.i2r.medR >= 0.8 * 20);
  CHECK(r.retrieval.i2r.medR <= 1.2 * 20);
}
