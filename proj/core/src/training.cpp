#include "xmodal/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <spdlog/spdlog.h>

#include "xmodal/errors.hpp"
#include "xmodal/optim.hpp"
#include "xmodal/parallel.hpp"

namespace xmodal {

using ordered_json = nlohmann::ordered_json;

double triplet_loss(double cos_ap, double cos_an, double margin) {
  return std::max(cos_an - cos_ap + margin, 0.0);
}

double triplet_loss(std::span<const float> anchor, std::span<const float> positive,
                    std::span<const float> negative, double margin) {
  return triplet_loss(cosine_similarity(anchor, positive), cosine_similarity(anchor, negative),
                      margin);
}

namespace {

template <typename T>
struct CosineTable {
  std::vector<double> norm1, norm2;
  Tensor<double> s;  // s(i, j) = cos(v1_i, v2_j)
};

template <typename T>
CosineTable<T> cosine_table(const std::vector<std::vector<T>>& v1s,
                            const std::vector<std::vector<T>>& v2s) {
  const std::size_t b = v1s.size();
  CosineTable<T> t;
  t.norm1.resize(b);
  t.norm2.resize(b);
  t.s = Tensor<double>({b, b});
  for (std::size_t i = 0; i < b; ++i) {
    double n1 = 0, n2 = 0;
    for (T x : v1s[i]) n1 += static_cast<double>(x) * x;
    for (T x : v2s[i]) n2 += static_cast<double>(x) * x;
    t.norm1[i] = std::sqrt(n1);
    t.norm2[i] = std::sqrt(n2);
  }
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j)
      t.s(i, j) = cosine_similarity(std::span<const T>(v1s[i]), std::span<const T>(v2s[j]));
  return t;
}

template <typename T>
MiningReport mine_from_table(const Tensor<double>& s) {
  const std::size_t b = s.rows();
  MiningReport r;
  r.candidate_count = 2 * (b - 1);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best_img = b, best_rec = b;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      if (best_img == b || s(i, j) > s(i, best_img)) best_img = j;
      if (best_rec == b || s(j, i) > s(best_rec, i)) best_rec = j;
    }
    r.image_negative.push_back(best_img);
    r.image_negative_similarity.push_back(s(i, best_img));
    r.recipe_negative.push_back(best_rec);
    r.recipe_negative_similarity.push_back(s(best_rec, i));
  }
  return r;
}

// Adds scale * d cos(u, v) / du to g.
template <typename T>
void add_cosine_grad(std::vector<T>& g, const std::vector<T>& u, double nu,
                     const std::vector<T>& v, double nv, double cos, double scale) {
  if (nu < 1e-12 || nv < 1e-12) return;
  for (std::size_t k = 0; k < g.size(); ++k) {
    g[k] += static_cast<T>(scale * (v[k] / (nu * nv) - cos * u[k] / (nu * nu)));
  }
}

}  // namespace

template <typename T>
MiningReport mine_hard_negatives(const std::vector<std::vector<T>>& v1s,
                                 const std::vector<std::vector<T>>& v2s) {
  if (v1s.size() != v2s.size()) throw std::invalid_argument("mining: unpaired embeddings");
  if (v1s.size() < 2) throw std::invalid_argument("mining needs a batch of at least 2");
  return mine_from_table<T>(cosine_table(v1s, v2s).s);
}

template <typename T>
TripletObjective<T> triplet_objective(const std::vector<std::vector<T>>& v1s,
                                      const std::vector<std::vector<T>>& v2s, double margin) {
  if (v1s.size() != v2s.size()) throw std::invalid_argument("triplet: unpaired embeddings");
  const std::size_t b = v1s.size();
  if (b < 2) throw std::invalid_argument("triplet objective needs a batch of at least 2");
  const auto table = cosine_table(v1s, v2s);
  const auto& s = table.s;
  TripletObjective<T> out;
  out.mining = mine_from_table<T>(s);
  out.grad_v1.assign(b, std::vector<T>(v1s.front().size(), T{0}));
  out.grad_v2.assign(b, std::vector<T>(v2s.front().size(), T{0}));
  // NaN similarities would fail every hinge comparison and read as a zero
  // loss; surface them as a non-finite loss instead.
  for (double x : s.values()) {
    if (!std::isfinite(x)) {
      out.loss = std::numeric_limits<T>::quiet_NaN();
      return out;
    }
  }
  const double w = 1.0 / static_cast<double>(2 * b);
  double total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    // Image anchor i: positive recipe i, negative recipe n.
    const std::size_t n = out.mining.image_negative[i];
    const double h = s(i, n) - s(i, i) + margin;
    if (h > 0) {
      total += h;
      ++out.active_hinges;
      add_cosine_grad(out.grad_v1[i], v1s[i], table.norm1[i], v2s[n], table.norm2[n], s(i, n), w);
      add_cosine_grad(out.grad_v2[n], v2s[n], table.norm2[n], v1s[i], table.norm1[i], s(i, n), w);
      add_cosine_grad(out.grad_v1[i], v1s[i], table.norm1[i], v2s[i], table.norm2[i], s(i, i), -w);
      add_cosine_grad(out.grad_v2[i], v2s[i], table.norm2[i], v1s[i], table.norm1[i], s(i, i), -w);
    }
  }
  for (std::size_t i = 0; i < b; ++i) {
    // Recipe anchor i: positive image i, negative image n.
    const std::size_t n = out.mining.recipe_negative[i];
    const double h = s(n, i) - s(i, i) + margin;
    if (h > 0) {
      total += h;
      ++out.active_hinges;
      add_cosine_grad(out.grad_v2[i], v2s[i], table.norm2[i], v1s[n], table.norm1[n], s(n, i), w);
      add_cosine_grad(out.grad_v1[n], v1s[n], table.norm1[n], v2s[i], table.norm2[i], s(n, i), w);
      add_cosine_grad(out.grad_v2[i], v2s[i], table.norm2[i], v1s[i], table.norm1[i], s(i, i), -w);
      add_cosine_grad(out.grad_v1[i], v1s[i], table.norm1[i], v2s[i], table.norm2[i], s(i, i), -w);
    }
  }
  out.loss = static_cast<T>(total * w);
  return out;
}

template <typename T>
Var image_input_forward(Tape<T>& tape, const RetrievalModel<T>& model, Var input) {
  if (tape.value(input).rank() == 3) input = pixel_backbone(tape, model, input);
  return image_forward(tape, model, input);
}

template <typename T>
BatchResult<T> batch_loss(const RetrievalModel<T>& model, const std::vector<BatchItem<T>>& batch,
                          double margin, std::size_t workers) {
  const std::size_t b = batch.size();
  if (b < 2) throw std::invalid_argument("batch_loss needs at least 2 pairs");
  std::vector<Tape<T>> tapes(b);
  std::vector<GradientSet<T>> grads(b, GradientSet<T>(model.params));
  std::vector<Var> img(b), rec(b);
  BatchResult<T> out;
  out.v1s.resize(b);
  out.v2s.resize(b);
  parallel_for(b, workers, [&](std::size_t i) {
    auto& tape = tapes[i];
    tape.track(model.params, grads[i]);
    rec[i] = recipe_forward(tape, model, batch[i].recipe, false).embedding;
    img[i] = image_input_forward(tape, model, tape.constant(batch[i].image));
    out.v1s[i] = tape.value(img[i]).storage();
    out.v2s[i] = tape.value(rec[i]).storage();
  });
  auto objective = triplet_objective(out.v1s, out.v2s, margin);
  out.loss = objective.loss;
  out.mining = std::move(objective.mining);
  parallel_for(b, workers, [&](std::size_t i) {
    auto& tape = tapes[i];
    const auto& g1 = objective.grad_v1[i];
    const auto& g2 = objective.grad_v2[i];
    const bool any = std::any_of(g1.begin(), g1.end(), [](T x) { return x != T{0}; }) ||
                     std::any_of(g2.begin(), g2.end(), [](T x) { return x != T{0}; });
    if (!any) return;
    Var c1 = tape.constant(Tensor<T>(tape.value(img[i]).shape(), g1));
    Var c2 = tape.constant(Tensor<T>(tape.value(rec[i]).shape(), g2));
    Var probe = tape.add(tape.sum(tape.mul(img[i], c1)), tape.sum(tape.mul(rec[i], c2)));
    tape.backward(probe);
  });
  out.grads = std::move(grads[0]);
  for (std::size_t i = 1; i < b; ++i) out.grads.add(grads[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

AugmentationPolicy AugmentationPolicy::from_config(const RunConfig& c) {
  AugmentationPolicy p;
  p.back_translation = c.retrieval.language_augmentation && c.retrieval.back_translation;
  p.languages = c.retrieval.language_augmentation;
  p.image = c.retrieval.image_augmentation;
  p.load_size = c.image.load_size;
  p.crop_size = c.image.crop_size;
  p.rotation_degrees = c.image.rotation_degrees;
  p.flip_probability = c.image.flip_probability;
  p.pad_probability = c.image.pad_probability;
  return p;
}

const RecipeDocument& select_language_variant(const PairedSample& sample,
                                              const AugmentationPolicy& policy,
                                              std::mt19937_64& rng) {
  const RecipeDocument& original = sample.original();
  const auto pick = [&](Language language, Variant variant) -> const RecipeDocument& {
    if (const auto* doc = sample.find(language, variant)) return *doc;
    spdlog::debug("sample {} lacks {}/{}; using the original", sample.id, to_string(language),
                  to_string(variant));
    return original;
  };
  const RecipeDocument* choice = &original;
  if (policy.back_translation) {
    std::uniform_int_distribution<int> stage1(0, 2);
    switch (stage1(rng)) {
      case 1: choice = &pick(Language::EN, Variant::back_translation_de); break;
      case 2: choice = &pick(Language::EN, Variant::back_translation_ru); break;
      default: break;
    }
  }
  if (policy.languages) {
    static constexpr Language kTargets[] = {Language::KO, Language::DE, Language::RU,
                                            Language::FR};
    std::uniform_int_distribution<int> stage2(0, 4);
    const int k = stage2(rng);
    if (k > 0) choice = &pick(kTargets[k - 1], Variant::translation);
  }
  return *choice;
}

Image augment_image(const Image& image, const AugmentationPolicy& policy, std::mt19937_64& rng) {
  if (policy.load_size < policy.crop_size) {
    throw ConfigError("image load size " + std::to_string(policy.load_size) +
                      " is smaller than the crop size " + std::to_string(policy.crop_size));
  }
  if (image.empty()) throw DataError("cannot augment an empty image");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Image x = image;
  if (unit(rng) < policy.pad_probability) {
    std::uniform_int_distribution<int> mode(0, 2);
    x = pad_to_square(x, static_cast<PadMode>(mode(rng)));
  }
  if (x.height != policy.load_size || x.width != policy.load_size) {
    x = resize_bilinear(x, policy.load_size, policy.load_size);
  }
  if (policy.rotation_degrees > 0) {
    std::uniform_real_distribution<double> angle(-policy.rotation_degrees,
                                                 policy.rotation_degrees);
    x = rotate(x, angle(rng));
  }
  const std::size_t slack = policy.load_size - policy.crop_size;
  std::size_t top = slack / 2, left = slack / 2;
  if (policy.random_crop) {
    std::uniform_int_distribution<std::size_t> offset(0, slack);
    top = offset(rng);
    left = offset(rng);
  }
  x = crop(x, top, left, policy.crop_size, policy.crop_size);
  if (unit(rng) < policy.flip_probability) x = flip_horizontal(x);
  clamp_unit(x);
  return x;
}

// ---------------------------------------------------------------------------
// Training loop

ordered_json epoch_record_to_json(const EpochRecord& r) {
  ordered_json j;
  j["epoch"] = r.epoch;
  j["train_loss"] = r.train_loss;
  j["lr"] = r.lr;
  j["val_medR_i2r"] = r.validation.i2r.medR;
  j["val_R1_i2r"] = r.validation.i2r.r1;
  j["val_R5_i2r"] = r.validation.i2r.r5;
  j["val_R10_i2r"] = r.validation.i2r.r10;
  j["val_medR_r2i"] = r.validation.r2i.medR;
  j["val_R1_r2i"] = r.validation.r2i.r1;
  j["val_R5_r2i"] = r.validation.r2i.r5;
  j["val_R10_r2i"] = r.validation.r2i.r10;
  return j;
}

namespace {

std::mt19937_64 sample_rng(std::uint64_t seed, std::size_t epoch, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(index)};
  return std::mt19937_64(seq);
}

BatchItem<float> make_training_item(const PairedSample& sample, const RetrievalModel<float>& model,
                                    const Vocabulary& vocab, const AugmentationPolicy& policy,
                                    FieldMask mask, std::mt19937_64& rng) {
  BatchItem<float> item;
  const RecipeDocument& doc = select_language_variant(sample, policy, rng);
  item.recipe = encode_recipe(compose_recipe_text(doc, mask), vocab, model.dims.max_len);
  std::uniform_int_distribution<std::size_t> which(0, sample.images.size() - 1);
  const ImageRecord& record = sample.images[which(rng)];
  if (model.dims.image_mode == ImageMode::feature) {
    item.image = Tensor<float>({1, record.feature.size()}, record.feature);
  } else {
    const Image view = policy.image ? augment_image(record.pixels, policy, rng)
                                    : eval_transform(record.pixels, model.dims.load_size,
                                                     model.dims.crop_size);
    item.image = Tensor<float>({3, view.height, view.width}, to_planar(view));
  }
  return item;
}

}  // namespace

RetrievalRun train_retrieval(const std::vector<PairedSample>& train,
                             const std::vector<PairedSample>& validation, const Vocabulary& vocab,
                             const RunConfig& config, const std::filesystem::path& out_dir) {
  validate_config(config);
  if (train.size() < 2) throw DataError("training needs at least 2 samples");
  validate_corpus(train);
  const ImageMode mode = corpus_image_mode(train);
  const std::size_t feature_dim =
      mode == ImageMode::feature ? train.front().images.front().feature.size() : 0;
  const auto dims = make_encoder_dims(config, vocab.size(), mode, feature_dim);
  const auto config_json = config_to_json(config);
  const std::size_t workers = config.effective_workers();
  const auto& rc = config.retrieval;
  const FieldMask mask = FieldMask::parse(rc.train_mask);
  const AugmentationPolicy policy = AugmentationPolicy::from_config(config);
  const LrSchedule schedule{rc.lr_initial, rc.lr_after, rc.lr_switch_epoch};

  std::filesystem::create_directories(out_dir);
  RetrievalRun run{RetrievalModel<float>::create(dims, config.seed), {}, {}};
  auto& model = run.model;
  Adam<float> adam(model.params, rc.beta1, rc.beta2, rc.adam_eps);
  save_retrieval_checkpoint(model, vocab, config_json, 0, out_dir / "checkpoint-0.bin");

  std::ofstream log(out_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!log) throw DataError("cannot write metrics log in " + out_dir.string());
  {
    ordered_json header;
    header["format_version"] = kFormatVersion;
    header["kind"] = "retrieval";
    header["config"] = config_json;
    log << header.dump() << '\n';
  }

  std::mt19937_64 shuffle_rng(config.seed);
  std::vector<std::size_t> order(train.size());
  const std::size_t batch_size = std::min(rc.batch_size, train.size());
  for (std::size_t epoch = 0; epoch < rc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double lr = schedule.at(epoch);
    double loss_sum = 0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t count = std::min(batch_size, order.size() - start);
      if (count < 2) break;
      std::vector<BatchItem<float>> batch(count);
      parallel_for(count, workers, [&](std::size_t k) {
        const std::size_t idx = order[start + k];
        auto rng = sample_rng(config.seed, epoch, idx);
        batch[k] = make_training_item(train[idx], model, vocab, policy, mask, rng);
      });
      auto result = batch_loss(model, batch, rc.margin, workers);
      if (!std::isfinite(result.loss) || !result.grads.all_finite()) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch + 1) + " batch " +
                             std::to_string(n_batches));
      }
      adam.step(model.params, result.grads, lr);
      loss_sum += result.loss;
      ++n_batches;
    }

    EpochRecord record;
    record.epoch = epoch + 1;
    record.lr = lr;
    record.train_loss = n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0;
    if (!validation.empty()) {
      EmbedOptions opts;
      opts.workers = workers;
      const auto set = embed_samples(model, vocab, validation, opts);
      const std::size_t pool =
          rc.val_pool_size == 0 ? set.ids.size() : std::min(rc.val_pool_size, set.ids.size());
      record.validation = retrieval_report(set.images, set.recipes, pool, rc.val_subsets,
                                           config.eval.seed, workers);
    }
    log << epoch_record_to_json(record).dump() << '\n';
    log.flush();
    spdlog::info("epoch {}: loss {:.4f} val medR {:.2f}/{:.2f} R@1 {:.3f}/{:.3f}", record.epoch,
                 record.train_loss, record.validation.i2r.medR, record.validation.r2i.medR,
                 record.validation.i2r.r1, record.validation.r2i.r1);
    run.log.push_back(record);
    save_retrieval_checkpoint(model, vocab, config_json, epoch + 1,
                              out_dir / ("checkpoint-" + std::to_string(epoch + 1) + ".bin"));
  }
  run.final_checkpoint = out_dir / "final.bin";
  save_retrieval_checkpoint(model, vocab, config_json, rc.epochs, run.final_checkpoint);
  return run;
}

#define XMODAL_INSTANTIATE(T)                                                                    \
  template MiningReport mine_hard_negatives(const std::vector<std::vector<T>>&,                  \
                                            const std::vector<std::vector<T>>&);                 \
  template TripletObjective<T> triplet_objective(const std::vector<std::vector<T>>&,             \
                                                 const std::vector<std::vector<T>>&, double);    \
  template Var image_input_forward(Tape<T>&, const RetrievalModel<T>&, Var);                     \
  template BatchResult<T> batch_loss(const RetrievalModel<T>&, const std::vector<BatchItem<T>>&, \
                                     double, std::size_t);
XMODAL_INSTANTIATE(float)
XMODAL_INSTANTIATE(double)
#undef XMODAL_INSTANTIATE

}  // namespace xmodal
