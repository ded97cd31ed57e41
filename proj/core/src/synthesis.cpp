#include "xmodal/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <spdlog/spdlog.h>

#include "xmodal/checkpoint.hpp"
#include "xmodal/errors.hpp"
#include "xmodal/optim.hpp"
#include "xmodal/parallel.hpp"
#include "xmodal/training.hpp"

namespace xmodal {

using ordered_json = nlohmann::ordered_json;

ordered_json synthesis_dims_to_json(const SynthesisDims& d) {
  ordered_json j;
  j["d_share"] = d.d_share;
  j["d_ca"] = d.d_ca;
  j["d_z"] = d.d_z;
  j["image_size"] = d.image_size;
  j["base_channels"] = d.base_channels;
  j["n_classes"] = d.n_classes;
  return j;
}

SynthesisDims synthesis_dims_from_json(const ordered_json& j) {
  try {
    SynthesisDims d;
    d.d_share = j.at("d_share").get<std::size_t>();
    d.d_ca = j.at("d_ca").get<std::size_t>();
    d.d_z = j.at("d_z").get<std::size_t>();
    d.image_size = j.at("image_size").get<std::size_t>();
    d.base_channels = j.at("base_channels").get<std::size_t>();
    d.n_classes = j.at("n_classes").get<std::size_t>();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed synthesis dimensions: ") + e.what());
  }
}

template <typename T>
SynthesisModel<T> SynthesisModel<T>::create(const SynthesisDims& d, std::uint64_t seed) {
  if (d.image_size < 4 || d.image_size % 4 != 0) {
    throw ConfigError("generated image size must be a positive multiple of 4");
  }
  if (d.base_channels < 2 || d.base_channels % 2 != 0) {
    throw ConfigError("base_channels must be even and at least 2");
  }
  if (d.n_classes < 1) throw ConfigError("synthesis needs at least one class");
  std::mt19937_64 rng(seed);
  SynthesisModel<T> m;
  m.dims = d;
  const auto uniform = [&](Shape shape, double fan_in) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> u(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
    for (auto& x : t.values()) x = static_cast<T>(u(rng));
    return t;
  };
  const auto linear = [&](ParameterSet<T>& p, const std::string& name, std::size_t in,
                          std::size_t out) {
    p.add(name + ".w", uniform({in, out}, static_cast<double>(in)));
    p.add(name + ".b", Tensor<T>({1, out}));
  };
  const auto conv = [&](ParameterSet<T>& p, const std::string& name, std::size_t in,
                        std::size_t out) {
    p.add(name + ".w", uniform({out, in, 3, 3}, static_cast<double>(in * 9)));
    p.add(name + ".b", Tensor<T>({out}));
  };
  const std::size_t c = d.base_channels;
  const std::size_t q = d.image_size / 4;
  linear(m.generator, "ca.mu", d.d_share, d.d_ca);
  linear(m.generator, "ca.logvar", d.d_share, d.d_ca);
  linear(m.generator, "g.fc", d.d_ca + d.d_z, c * q * q);
  conv(m.generator, "g.conv1", c, c / 2);
  conv(m.generator, "g.conv2", c / 2, 3);
  conv(m.discriminator, "d.conv1", 3, c / 2);
  conv(m.discriminator, "d.conv2", c / 2, c);
  linear(m.discriminator, "d.real", c * q * q, 1);
  linear(m.discriminator, "d.class", c * q * q, d.n_classes);
  return m;
}

namespace {

template <typename T>
Var dense(Tape<T>& tape, const ParameterSet<T>& p, const std::string& name, Var x) {
  return tape.add_bias(tape.matmul(x, tape.param(p, name + ".w")), tape.param(p, name + ".b"));
}

template <typename T>
Var conv(Tape<T>& tape, const ParameterSet<T>& p, const std::string& name, Var x,
         std::size_t stride) {
  return tape.conv2d(x, tape.param(p, name + ".w"), tape.param(p, name + ".b"), stride, 1);
}

template <typename T>
Var as_row(Tape<T>& tape, Var v) {
  const auto& value = tape.value(v);
  if (value.rank() == 2 && value.rows() == 1) return v;
  return tape.reshape(v, {1, value.size()});
}

}  // namespace

template <typename T>
CAOutput ca_forward(Tape<T>& tape, const SynthesisModel<T>& m, Var v2, const Tensor<T>& noise) {
  if (noise.size() != m.dims.d_ca) {
    throw std::invalid_argument("CA noise must have d_ca = " + std::to_string(m.dims.d_ca) +
                                " elements");
  }
  Var x = as_row(tape, v2);
  CAOutput out;
  out.mu = dense(tape, m.generator, "ca.mu", x);
  out.logvar = dense(tape, m.generator, "ca.logvar", x);
  Var sigma = tape.exp(tape.affine(out.logvar, T(0.5), T{0}));
  Var eps = tape.constant(Tensor<T>({1, m.dims.d_ca}, noise.storage()));
  out.t = tape.add(out.mu, tape.mul(sigma, eps));
  return out;
}

template <typename T>
Var decode_image(Tape<T>& tape, const SynthesisModel<T>& m, Var t, Var z) {
  const std::size_t c = m.dims.base_channels;
  const std::size_t q = m.dims.image_size / 4;
  const Var parts[] = {as_row(tape, t), as_row(tape, z)};
  Var h = tape.relu(dense(tape, m.generator, "g.fc", tape.concat_cols(parts)));
  h = tape.reshape(h, {c, q, q});
  h = tape.relu(conv(tape, m.generator, "g.conv1", tape.upsample_nearest(h, 2), 1));
  return tape.sigmoid(conv(tape, m.generator, "g.conv2", tape.upsample_nearest(h, 2), 1));
}

template <typename T>
GeneratorOutput generate(Tape<T>& tape, const SynthesisModel<T>& m, Var v2, const Tensor<T>& z,
                         const Tensor<T>& noise) {
  if (z.size() != m.dims.d_z) {
    throw std::invalid_argument("z must have d_z = " + std::to_string(m.dims.d_z) + " elements");
  }
  GeneratorOutput out;
  out.ca = ca_forward(tape, m, v2, noise);
  out.image =
      decode_image(tape, m, out.ca.t, tape.constant(Tensor<T>({1, m.dims.d_z}, z.storage())));
  return out;
}

template <typename T>
DiscriminatorOutput discriminate(Tape<T>& tape, const SynthesisModel<T>& m, Var image) {
  const auto& shape = tape.value(image).shape();
  const std::size_t s = m.dims.image_size;
  if (shape != Shape{3, s, s}) {
    throw std::invalid_argument("discriminator expects [3," + std::to_string(s) + "," +
                                std::to_string(s) + "], got " + shape_string(shape));
  }
  Var h = tape.leaky_relu(conv(tape, m.discriminator, "d.conv1", image, 2), T(0.2));
  h = tape.leaky_relu(conv(tape, m.discriminator, "d.conv2", h, 2), T(0.2));
  Var flat = as_row(tape, h);
  return {tape.sigmoid(dense(tape, m.discriminator, "d.real", flat)),
          dense(tape, m.discriminator, "d.class", flat)};
}

double kl_loss(std::span<const double> mu, std::span<const double> sigma) {
  if (mu.size() != sigma.size()) throw std::invalid_argument("kl_loss: length mismatch");
  double total = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(sigma[i] > 0)) throw std::invalid_argument("kl_loss: sigma must be positive");
    const double s2 = sigma[i] * sigma[i];
    total += mu[i] * mu[i] + s2 - std::log(s2) - 1.0;
  }
  return 0.5 * total;
}

template <typename T>
Var kl_term(Tape<T>& tape, Var mu, Var logvar) {
  Var inner = tape.sub(tape.add(tape.mul(mu, mu), tape.exp(logvar)), logvar);
  return tape.affine(tape.sum(tape.affine(inner, T{1}, T{-1})), T(0.5), T{0});
}

double retrieval_supervision_loss(std::span<const double> f1_fake, std::span<const double> v1,
                                  std::span<const double> v2) {
  return (1.0 - cosine_similarity(f1_fake, v2)) + (1.0 - cosine_similarity(f1_fake, v1));
}

template <typename T>
Var retrieval_supervision_term(Tape<T>& tape, Var f1_fake, Var v1, Var v2) {
  Var both = tape.add(tape.cosine(f1_fake, v2), tape.cosine(f1_fake, v1));
  return tape.affine(both, T{-1}, T{2});
}

template <typename T>
Var discriminator_objective(Tape<T>& tape, Var dr_real, Var dr_fake, Var logits_real,
                            Var logits_fake, std::size_t label, double lambda_c) {
  const T lo = T(kProbabilityClamp), hi = T(1.0 - kProbabilityClamp);
  Var real_term = tape.log(tape.clamp(dr_real, lo, hi));
  Var fake_term = tape.log(tape.affine(tape.clamp(dr_fake, lo, hi), T{-1}, T{1}));
  Var adversarial = tape.affine(tape.sum(tape.add(real_term, fake_term)), T{-1}, T{0});
  Var ce = tape.add(tape.cross_entropy(logits_real, label), tape.cross_entropy(logits_fake, label));
  return tape.add(adversarial, tape.affine(ce, static_cast<T>(lambda_c), T{0}));
}

template <typename T>
GeneratorTerms generator_objective(Tape<T>& tape, Var dr_fake, Var logits_fake,
                                   std::size_t label, Var mu, Var logvar, Var f1_fake, Var v1,
                                   Var v2, const LossWeights& w, bool non_saturating) {
  const T lo = T(kProbabilityClamp), hi = T(1.0 - kProbabilityClamp);
  GeneratorTerms out;
  Var p = tape.clamp(dr_fake, lo, hi);
  out.adversarial = non_saturating ? tape.affine(tape.sum(tape.log(p)), T{-1}, T{0})
                                   : tape.sum(tape.log(tape.affine(p, T{-1}, T{1})));
  out.classification = tape.cross_entropy(logits_fake, label);
  out.kl = kl_term(tape, mu, logvar);
  out.retrieval = retrieval_supervision_term(tape, f1_fake, v1, v2);
  Var total = out.adversarial;
  total = tape.add(total, tape.affine(out.classification, static_cast<T>(w.lambda_c), T{0}));
  total = tape.add(total, tape.affine(out.kl, static_cast<T>(w.lambda_ca), T{0}));
  total = tape.add(total, tape.affine(out.retrieval, static_cast<T>(w.lambda_ret), T{0}));
  out.total = total;
  return out;
}

template <typename T>
Var encode_generated(Tape<T>& tape, const RetrievalModel<T>& retrieval, Var image) {
  if (retrieval.dims.image_mode != ImageMode::pixels) {
    throw ConfigError("synthesis needs a retrieval model trained on pixel images");
  }
  const auto& shape = tape.value(image).shape();
  if (shape.size() != 3 || shape[0] != 3 || shape[1] != shape[2] || shape[1] == 0 ||
      retrieval.dims.crop_size % shape[1] != 0) {
    throw ConfigError("generated image " + shape_string(shape) +
                      " cannot be upsampled to the encoder input size " +
                      std::to_string(retrieval.dims.crop_size));
  }
  const std::size_t factor = retrieval.dims.crop_size / shape[1];
  Var x = factor == 1 ? image : tape.upsample_nearest(image, factor);
  return image_input_forward(tape, retrieval, x);
}

template <typename T>
Var discriminator_loss(Tape<T>& tape, const SynthesisModel<T>& m, Var real, Var fake,
                       std::size_t label, const LossWeights& weights) {
  if (label >= m.dims.n_classes) {
    throw std::invalid_argument("class label " + std::to_string(label) + " outside " +
                                std::to_string(m.dims.n_classes) + " classes");
  }
  const auto dr = discriminate(tape, m, real);
  const auto df = discriminate(tape, m, fake);
  return discriminator_objective(tape, dr.real_probability, df.real_probability, dr.class_logits,
                                 df.class_logits, label, weights.lambda_c);
}

template <typename T>
GeneratorTerms generator_loss(Tape<T>& tape, const SynthesisModel<T>& m,
                              const RetrievalModel<T>& retrieval, Var v1, Var v2,
                              const Tensor<T>& z, const Tensor<T>& noise, std::size_t label,
                              const LossWeights& weights, bool non_saturating) {
  if (label >= m.dims.n_classes) {
    throw std::invalid_argument("class label " + std::to_string(label) + " outside " +
                                std::to_string(m.dims.n_classes) + " classes");
  }
  const auto g = generate(tape, m, v2, z, noise);
  const auto d = discriminate(tape, m, g.image);
  Var f1 = encode_generated(tape, retrieval, g.image);
  return generator_objective(tape, d.real_probability, d.class_logits, label, g.ca.mu,
                             g.ca.logvar, f1, v1, v2, weights, non_saturating);
}

void save_synthesis_checkpoint(const SynthesisModel<float>& model, const ordered_json& config,
                               std::size_t epoch, const std::filesystem::path& path) {
  Checkpoint ck;
  ck.meta["kind"] = "synthesis";
  ck.meta["epoch"] = epoch;
  ck.meta["dims"] = synthesis_dims_to_json(model.dims);
  ck.meta["config"] = config;
  for (const auto* set : {&model.generator, &model.discriminator}) {
    for (std::size_t i = 0; i < set->size(); ++i) ck.params.add(set->name(i), set->value(i));
  }
  save_checkpoint(ck, path);
}

SynthesisModel<float> load_synthesis_checkpoint(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", std::string()) != "synthesis") {
    throw DataError(path.string() + " is not a synthesis checkpoint");
  }
  auto model = SynthesisModel<float>::create(synthesis_dims_from_json(ck.meta.at("dims")), 0);
  for (auto* set : {&model.generator, &model.discriminator}) {
    for (std::size_t i = 0; i < set->size(); ++i) {
      if (!ck.params.contains(set->name(i)) ||
          ck.params.at(set->name(i)).shape() != set->value(i).shape()) {
        throw DataError("checkpoint " + path.string() + " lacks a matching tensor '" +
                        set->name(i) + "'");
      }
      set->value(i) = ck.params.at(set->name(i));
    }
  }
  if (ck.params.size() != model.generator.size() + model.discriminator.size()) {
    throw DataError("checkpoint " + path.string() + " has unexpected tensors");
  }
  return model;
}

// ---------------------------------------------------------------------------
// Training

ordered_json gan_record_to_json(const GanEpochRecord& r) {
  ordered_json j;
  j["epoch"] = r.epoch;
  j["d_loss"] = r.d_loss;
  j["g_loss"] = r.g_loss;
  j["l_ret"] = r.retrieval_loss;
  j["kl"] = r.kl;
  j["lr"] = r.lr;
  return j;
}

namespace {

struct GanSample {
  Tensor<float> real;  // [3, S, S]
  Tensor<float> v1;
  Tensor<float> v2;
  std::size_t label = 0;
};

Tensor<float> image_to_tensor(const Image& image, std::size_t size) {
  const Image sized = image.height == size && image.width == size
                          ? image
                          : resize_bilinear(image, size, size);
  return Tensor<float>({3, size, size}, to_planar(sized));
}

std::vector<float> normal_vector(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(normal(rng));
  return v;
}

std::mt19937_64 item_rng(std::uint64_t seed, std::size_t epoch, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(index),
                    0x6761u};
  return std::mt19937_64(seq);
}

}  // namespace

GanRun train_gan(const std::vector<PairedSample>& train, const RetrievalModel<float>& retrieval,
                 const Vocabulary& vocab, const RunConfig& config,
                 const std::filesystem::path& out_dir) {
  validate_config(config);
  if (train.empty()) throw DataError("GAN training needs at least one sample");
  validate_corpus(train);
  if (corpus_image_mode(train) != ImageMode::pixels) {
    throw DataError("GAN training needs a pixel-mode corpus");
  }
  if (retrieval.dims.image_mode != ImageMode::pixels) {
    throw ConfigError("GAN training needs a retrieval checkpoint trained on pixel images");
  }
  const auto& gc = config.gan;
  if (retrieval.dims.crop_size % gc.image_size != 0) {
    throw ConfigError("gan.image_size must divide the retrieval crop size");
  }
  int max_label = 0;
  for (const auto& s : train) max_label = std::max(max_label, s.class_label);

  SynthesisDims dims;
  dims.d_share = retrieval.dims.d_share;
  dims.d_ca = gc.d_ca;
  dims.d_z = gc.d_z;
  dims.image_size = gc.image_size;
  dims.base_channels = gc.base_channels;
  dims.n_classes = static_cast<std::size_t>(max_label) + 1;
  const LossWeights weights{gc.lambda_c, gc.lambda_ca, gc.lambda_ret};
  const std::size_t workers = config.effective_workers();
  const auto config_json = config_to_json(config);

  // Frozen retrieval embeddings: v1 of the first image, v2 of the EN original.
  std::vector<GanSample> data(train.size());
  parallel_for(train.size(), workers, [&](std::size_t i) {
    const auto& s = train[i];
    const auto& img = s.images.front();
    data[i].real = image_to_tensor(img.pixels, gc.image_size);
    const auto v1 = embed_image(retrieval, img);
    const auto v2 = embed_recipe(
        retrieval,
        encode_recipe(compose_recipe_text(s.original(), FieldMask::all()), vocab,
                      retrieval.dims.max_len));
    data[i].v1 = Tensor<float>({1, v1.size()}, v1);
    data[i].v2 = Tensor<float>({1, v2.size()}, v2);
    data[i].label = static_cast<std::size_t>(s.class_label);
  });

  std::filesystem::create_directories(out_dir);
  GanRun run{SynthesisModel<float>::create(dims, config.seed), {}, {}};
  auto& model = run.model;
  Adam<float> adam_g(model.generator, gc.beta1, gc.beta2, gc.adam_eps);
  Adam<float> adam_d(model.discriminator, gc.beta1, gc.beta2, gc.adam_eps);
  const LrSchedule schedule{gc.lr_initial, gc.lr_after, gc.lr_switch_epoch};
  save_synthesis_checkpoint(model, config_json, 0, out_dir / "checkpoint-0.bin");

  std::ofstream log(out_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!log) throw DataError("cannot write GAN metrics log in " + out_dir.string());
  {
    ordered_json header;
    header["format_version"] = kFormatVersion;
    header["kind"] = "synthesis";
    header["config"] = config_json;
    log << header.dump() << '\n';
  }

  std::mt19937_64 shuffle_rng(config.seed ^ 0x5ca1ab1eULL);
  std::vector<std::size_t> order(train.size());
  const std::size_t batch_size = std::min(gc.batch_size, train.size());
  for (std::size_t epoch = 0; epoch < gc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double lr = schedule.at(epoch);
    GanEpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t count = std::min(batch_size, order.size() - start);
      std::vector<std::vector<float>> z(count), eps(count);
      for (std::size_t k = 0; k < count; ++k) {
        auto rng = item_rng(config.seed, epoch, order[start + k]);
        z[k] = normal_vector(rng, dims.d_z);
        eps[k] = normal_vector(rng, dims.d_ca);
      }

      // Discriminator step: the generator is a constant here.
      std::vector<GradientSet<float>> d_grads(count, GradientSet<float>(model.discriminator));
      std::vector<double> d_losses(count);
      parallel_for(count, workers, [&](std::size_t k) {
        const auto& s = data[order[start + k]];
        Tape<float> tape;
        tape.track(model.discriminator, d_grads[k]);
        const auto g = generate(tape, model, tape.constant(s.v2),
                                Tensor<float>({1, dims.d_z}, z[k]),
                                Tensor<float>({1, dims.d_ca}, eps[k]));
        Var fake = tape.constant(tape.value(g.image));
        Var loss = discriminator_loss(tape, model, tape.constant(s.real), fake, s.label, weights);
        d_losses[k] = tape.scalar(loss);
        tape.backward(loss);
      });
      GradientSet<float> d_total = std::move(d_grads[0]);
      for (std::size_t k = 1; k < count; ++k) d_total.add(d_grads[k]);
      d_total.scale(1.0f / static_cast<float>(count));

      const double d_loss = std::accumulate(d_losses.begin(), d_losses.end(), 0.0);
      if (!std::isfinite(d_loss) || !d_total.all_finite()) {
        throw NumericalError("non-finite discriminator loss at epoch " +
                             std::to_string(epoch + 1) + " batch starting at " +
                             std::to_string(start));
      }
      adam_d.step(model.discriminator, d_total, lr);

      // Generator step: discriminator and retrieval encoder are constants.
      std::vector<GradientSet<float>> g_grads(count, GradientSet<float>(model.generator));
      std::vector<double> g_losses(count), ret_losses(count), kls(count);
      parallel_for(count, workers, [&](std::size_t k) {
        const auto& s = data[order[start + k]];
        Tape<float> tape;
        tape.track(model.generator, g_grads[k]);
        const auto terms = generator_loss(tape, model, retrieval, tape.constant(s.v1),
                                          tape.constant(s.v2), Tensor<float>({1, dims.d_z}, z[k]),
                                          Tensor<float>({1, dims.d_ca}, eps[k]), s.label, weights,
                                          gc.non_saturating);
        g_losses[k] = tape.scalar(terms.total);
        ret_losses[k] = tape.scalar(terms.retrieval);
        kls[k] = tape.scalar(terms.kl);
        tape.backward(terms.total);
      });
      GradientSet<float> g_total = std::move(g_grads[0]);
      for (std::size_t k = 1; k < count; ++k) g_total.add(g_grads[k]);
      g_total.scale(1.0f / static_cast<float>(count));
      const double g_loss = std::accumulate(g_losses.begin(), g_losses.end(), 0.0);
      if (!std::isfinite(g_loss) || !g_total.all_finite()) {
        throw NumericalError("non-finite generator loss at epoch " + std::to_string(epoch + 1) +
                             " batch starting at " + std::to_string(start));
      }
      adam_g.step(model.generator, g_total, lr);

      rec.d_loss += d_loss;
      rec.g_loss += g_loss;
      rec.retrieval_loss += std::accumulate(ret_losses.begin(), ret_losses.end(), 0.0);
      rec.kl += std::accumulate(kls.begin(), kls.end(), 0.0);
      seen += count;
    }
    const double n = static_cast<double>(std::max<std::size_t>(seen, 1));
    rec.d_loss /= n;
    rec.g_loss /= n;
    rec.retrieval_loss /= n;
    rec.kl /= n;
    log << gan_record_to_json(rec).dump() << '\n';
    log.flush();
    spdlog::info("gan epoch {}: D {:.4f} G {:.4f} L_ret {:.4f} KL {:.4f}", rec.epoch, rec.d_loss,
                 rec.g_loss, rec.retrieval_loss, rec.kl);
    run.log.push_back(rec);
    save_synthesis_checkpoint(model, config_json, epoch + 1,
                              out_dir / ("checkpoint-" + std::to_string(epoch + 1) + ".bin"));
  }
  run.final_checkpoint = out_dir / "final.bin";
  save_synthesis_checkpoint(model, config_json, gc.epochs, run.final_checkpoint);
  return run;
}

// ---------------------------------------------------------------------------
// Evaluation

SynthesisReport synthesis_eval(const SynthesisModel<float>* generator,
                               const RetrievalModel<float>& retrieval, const Vocabulary& vocab,
                               const std::vector<PairedSample>& samples,
                               const SynthesisEvalOptions& options) {
  if (!options.oracle && generator == nullptr) {
    throw ConfigError("synthesis evaluation needs a generator or the oracle flag");
  }
  if (samples.size() < 2) throw DataError("synthesis evaluation needs at least 2 samples");
  const std::size_t n = samples.size();
  const std::size_t workers = options.workers;
  std::vector<std::vector<float>> synthetic(n), recipes(n);
  std::vector<std::vector<double>> real_hidden(n), fake_hidden(n);
  std::vector<Image> dumps(n);
  parallel_for(n, workers, [&](std::size_t i) {
    const auto& s = samples[i];
    const auto& img = s.images.front();
    const auto v2 = embed_recipe(
        retrieval, encode_recipe(compose_recipe_text(s.original(), FieldMask::all()), vocab,
                                 retrieval.dims.max_len));
    recipes[i] = v2;
    const Tensor<float> real_features = image_features(retrieval, img);
    const auto rh = image_hidden_features(retrieval, real_features);
    real_hidden[i].assign(rh.begin(), rh.end());

    Tape<float> tape;
    Var fake;
    if (options.oracle) {
      const Image view =
          eval_transform(img.pixels, retrieval.dims.load_size, retrieval.dims.crop_size);
      fake = tape.constant(Tensor<float>({3, view.height, view.width}, to_planar(view)));
    } else {
      const std::vector<float> cond =
          options.source == SynthesisSource::recipe ? v2 : embed_image(retrieval, img);
      std::seed_seq seq{static_cast<std::uint32_t>(options.z_seed),
                        static_cast<std::uint32_t>(options.z_seed >> 32),
                        static_cast<std::uint32_t>(i)};
      std::mt19937_64 rng(seq);
      const auto z = normal_vector(rng, generator->dims.d_z);
      const auto g = generate(tape, *generator, tape.constant(Tensor<float>({1, cond.size()}, cond)),
                              Tensor<float>({1, z.size()}, z),
                              Tensor<float>({1, generator->dims.d_ca}));
      fake = g.image;
    }
    const auto& fv = tape.value(fake);
    dumps[i] = from_planar(fv.storage(), fv.dim(1), fv.dim(2));
    const std::size_t factor = retrieval.dims.crop_size / fv.dim(1);
    Var up = factor == 1 ? fake : tape.upsample_nearest(fake, factor);
    Var features = pixel_backbone(tape, retrieval, up);
    synthetic[i] = tape.value(image_forward(tape, retrieval, features)).storage();
    const auto fh = tape.value(image_hidden(tape, retrieval, features)).storage();
    fake_hidden[i].assign(fh.begin(), fh.end());
  });

  SynthesisReport report;
  report.n_samples = n;
  const std::size_t pool = options.pool_size == 0 ? n : options.pool_size;
  report.retrieval =
      retrieval_report(synthetic, recipes, pool, options.n_subsets, options.seed, workers);
  report.fid = fid(real_hidden, fake_hidden);

  if (options.dump_dir) {
    const auto& dir = *options.dump_dir;
    std::filesystem::create_directories(dir);
    std::ofstream index(dir / "index.jsonl", std::ios::binary | std::ios::trunc);
    if (!index) throw DataError("cannot write " + (dir / "index.jsonl").string());
    for (std::size_t i = 0; i < n; ++i) {
      const std::string name = samples[i].id + "_" + std::to_string(options.z_seed) + ".png";
      save_png(dumps[i], dir / name);
      ordered_json entry;
      entry["sample_id"] = samples[i].id;
      entry["z_seed"] = options.z_seed;
      entry["source"] = options.oracle ? "oracle"
                        : options.source == SynthesisSource::recipe ? "recipe"
                                                                    : "image";
      entry["path"] = name;
      index << entry.dump() << '\n';
    }
  }
  return report;
}

template struct SynthesisModel<float>;
template struct SynthesisModel<double>;

#define XMODAL_INSTANTIATE(T)                                                                     \
  template CAOutput ca_forward(Tape<T>&, const SynthesisModel<T>&, Var, const Tensor<T>&);        \
  template Var decode_image(Tape<T>&, const SynthesisModel<T>&, Var, Var);                        \
  template GeneratorOutput generate(Tape<T>&, const SynthesisModel<T>&, Var, const Tensor<T>&,    \
                                    const Tensor<T>&);                                            \
  template DiscriminatorOutput discriminate(Tape<T>&, const SynthesisModel<T>&, Var);             \
  template Var kl_term(Tape<T>&, Var, Var);                                                       \
  template Var retrieval_supervision_term(Tape<T>&, Var, Var, Var);                               \
  template Var discriminator_objective(Tape<T>&, Var, Var, Var, Var, std::size_t, double);        \
  template GeneratorTerms generator_objective(Tape<T>&, Var, Var, std::size_t, Var, Var, Var,     \
                                              Var, Var, const LossWeights&, bool);                \
  template Var encode_generated(Tape<T>&, const RetrievalModel<T>&, Var);                         \
  template Var discriminator_loss(Tape<T>&, const SynthesisModel<T>&, Var, Var, std::size_t,      \
                                  const LossWeights&);                                            \
  template GeneratorTerms generator_loss(Tape<T>&, const SynthesisModel<T>&,                      \
                                         const RetrievalModel<T>&, Var, Var, const Tensor<T>&,    \
                                         const Tensor<T>&, std::size_t, const LossWeights&, bool);
XMODAL_INSTANTIATE(float)
XMODAL_INSTANTIATE(double)
#undef XMODAL_INSTANTIATE

}  // namespace xmodal
