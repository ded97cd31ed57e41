#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmodal/autograd.hpp"
#include "xmodal/config.hpp"
#include "xmodal/corpus.hpp"
#include "xmodal/encoders.hpp"
#include "xmodal/evaluation.hpp"

namespace xmodal {

struct LossWeights {
  double lambda_c = 1.0;
  double lambda_ca = 1.0;
  double lambda_ret = 32.0;
};

struct SynthesisDims {
  std::size_t d_share = 32;
  std::size_t d_ca = 16;
  std::size_t d_z = 16;
  std::size_t image_size = 32;
  std::size_t base_channels = 16;
  std::size_t n_classes = 8;
  friend bool operator==(const SynthesisDims&, const SynthesisDims&) = default;
};

nlohmann::ordered_json synthesis_dims_to_json(const SynthesisDims& dims);
SynthesisDims synthesis_dims_from_json(const nlohmann::ordered_json& j);

// Generator parameters (conditioning augmentation "ca.*" plus decoder "g.*")
// and discriminator parameters ("d.*") live in separate sets so each side can
// be frozen while the other trains.
template <typename T>
struct SynthesisModel {
  SynthesisDims dims;
  ParameterSet<T> generator;
  ParameterSet<T> discriminator;

  static SynthesisModel create(const SynthesisDims& dims, std::uint64_t seed);

  template <typename U>
  SynthesisModel<U> cast() const {
    return SynthesisModel<U>{dims, generator.template cast<U>(),
                             discriminator.template cast<U>()};
  }
};

struct CAOutput {
  Var t;
  Var mu;
  Var logvar;
};

// t = mu(v2) + exp(0.5 * logvar(v2)) * noise.
template <typename T>
CAOutput ca_forward(Tape<T>& tape, const SynthesisModel<T>& model, Var v2,
                    const Tensor<T>& noise);

// G0(t, z): a [3, S, S] image in (0, 1).
template <typename T>
Var decode_image(Tape<T>& tape, const SynthesisModel<T>& model, Var t, Var z);

struct GeneratorOutput {
  Var image;
  CAOutput ca;
};

template <typename T>
GeneratorOutput generate(Tape<T>& tape, const SynthesisModel<T>& model, Var v2,
                         const Tensor<T>& z, const Tensor<T>& noise);

struct DiscriminatorOutput {
  Var real_probability;
  Var class_logits;
};

template <typename T>
DiscriminatorOutput discriminate(Tape<T>& tape, const SynthesisModel<T>& model, Var image);

// Closed-form KL of N(mu, diag(sigma^2)) from N(0, I). Throws
// std::invalid_argument for a non-positive sigma.
double kl_loss(std::span<const double> mu, std::span<const double> sigma);
// 0.5 * sum(mu^2 + exp(logvar) - logvar - 1).
template <typename T>
Var kl_term(Tape<T>& tape, Var mu, Var logvar);

// (1 - cos(f1_fake, v2)) + (1 - cos(f1_fake, v1)).
double retrieval_supervision_loss(std::span<const double> f1_fake, std::span<const double> v1,
                                  std::span<const double> v2);
template <typename T>
Var retrieval_supervision_term(Tape<T>& tape, Var f1_fake, Var v1, Var v2);

inline constexpr double kProbabilityClamp = 1e-7;

// -[log D_r(real) + log(1 - D_r(fake))] + lambda_c [CE(real) + CE(fake)],
// probabilities clamped to [1e-7, 1 - 1e-7].
template <typename T>
Var discriminator_objective(Tape<T>& tape, Var dr_real, Var dr_fake, Var logits_real,
                            Var logits_fake, std::size_t label, double lambda_c);

struct GeneratorTerms {
  Var total;
  Var adversarial;
  Var classification;
  Var kl;
  Var retrieval;
};

// log(1 - D_r(fake)) (or -log D_r(fake) when non_saturating) + lambda_c CE
// + lambda_ca KL + lambda_ret L_ret.
template <typename T>
GeneratorTerms generator_objective(Tape<T>& tape, Var dr_fake, Var logits_fake,
                                   std::size_t label, Var mu, Var logvar, Var f1_fake, Var v1,
                                   Var v2, const LossWeights& weights, bool non_saturating);

// F1 of a generated [3, S, S] image: nearest upsampling to the encoder's crop
// size, then the pixel backbone and image head.
template <typename T>
Var encode_generated(Tape<T>& tape, const RetrievalModel<T>& retrieval, Var image);

// Full losses through the networks. Real and fake images are [3, S, S].
template <typename T>
Var discriminator_loss(Tape<T>& tape, const SynthesisModel<T>& model, Var real, Var fake,
                       std::size_t label, const LossWeights& weights);

template <typename T>
GeneratorTerms generator_loss(Tape<T>& tape, const SynthesisModel<T>& model,
                              const RetrievalModel<T>& retrieval, Var v1, Var v2,
                              const Tensor<T>& z, const Tensor<T>& noise, std::size_t label,
                              const LossWeights& weights, bool non_saturating);

void save_synthesis_checkpoint(const SynthesisModel<float>& model,
                               const nlohmann::ordered_json& config, std::size_t epoch,
                               const std::filesystem::path& path);
SynthesisModel<float> load_synthesis_checkpoint(const std::filesystem::path& path);

struct GanEpochRecord {
  std::size_t epoch = 0;
  double d_loss = 0;
  double g_loss = 0;
  double retrieval_loss = 0;
  double kl = 0;
  double lr = 0;
};

struct GanRun {
  SynthesisModel<float> model;
  std::vector<GanEpochRecord> log;
  std::filesystem::path final_checkpoint;
};

// Alternating discriminator/generator updates against a frozen retrieval
// model. Writes metrics.jsonl, checkpoint-<epoch>.bin and final.bin.
GanRun train_gan(const std::vector<PairedSample>& train, const RetrievalModel<float>& retrieval,
                 const Vocabulary& vocab, const RunConfig& config,
                 const std::filesystem::path& out_dir);

nlohmann::ordered_json gan_record_to_json(const GanEpochRecord& record);

enum class SynthesisSource { recipe, image };

struct SynthesisEvalOptions {
  SynthesisSource source = SynthesisSource::recipe;
  std::size_t pool_size = 0;  // 0: every sample
  std::size_t n_subsets = 10;
  std::uint64_t seed = 0;
  std::uint64_t z_seed = 0;
  std::size_t workers = 1;
  // Replace the generator by the paired real image (evaluation-transformed).
  bool oracle = false;
  std::optional<std::filesystem::path> dump_dir;
};

struct SynthesisReport {
  RetrievalReport retrieval;
  double fid = 0;
  std::size_t n_samples = 0;
};

// One generated image per sample (CA noise at its mean, z from z_seed),
// embedded by F1 and ranked against real recipe embeddings; FID between the
// real and synthetic first-head-layer features.
SynthesisReport synthesis_eval(const SynthesisModel<float>* generator,
                               const RetrievalModel<float>& retrieval, const Vocabulary& vocab,
                               const std::vector<PairedSample>& samples,
                               const SynthesisEvalOptions& options);

}  // namespace xmodal
