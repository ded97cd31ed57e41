#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "xmodal/autograd.hpp"
#include "xmodal/config.hpp"
#include "xmodal/corpus.hpp"
#include "xmodal/encoders.hpp"
#include "xmodal/evaluation.hpp"

namespace xmodal {

// max(cos_an - cos_ap + margin, 0).
double triplet_loss(double cos_ap, double cos_an, double margin);
double triplet_loss(std::span<const float> anchor, std::span<const float> positive,
                    std::span<const float> negative, double margin);

// Hardest in-batch negatives for both anchor directions. Index i of the image
// lists refers to image anchor v1s[i], whose negative is a recipe; index i of
// the recipe lists refers to recipe anchor v2s[i], whose negative is an image.
struct MiningReport {
  std::vector<std::size_t> image_negative;
  std::vector<double> image_negative_similarity;
  std::vector<std::size_t> recipe_negative;
  std::vector<double> recipe_negative_similarity;
  // Candidate negatives each positive pair is compared against over both
  // directions: 2 * (B - 1).
  std::size_t candidate_count = 0;
};

template <typename T>
MiningReport mine_hard_negatives(const std::vector<std::vector<T>>& v1s,
                                 const std::vector<std::vector<T>>& v2s);

// Mean over the 2B anchors of the hinge against the mined negative, with its
// gradient with respect to every embedding. A non-finite similarity gives a
// NaN loss (and zero gradients) so callers can abort.
template <typename T>
struct TripletObjective {
  T loss{0};
  std::vector<std::vector<T>> grad_v1;
  std::vector<std::vector<T>> grad_v2;
  MiningReport mining;
  std::size_t active_hinges = 0;
};

template <typename T>
TripletObjective<T> triplet_objective(const std::vector<std::vector<T>>& v1s,
                                      const std::vector<std::vector<T>>& v2s, double margin);

// One positive pair: a [CLS]-prefixed recipe and the image backbone input,
// either features [1, D] or planar pixels [3, S, S].
template <typename T>
struct BatchItem {
  TokenSequence recipe;
  Tensor<T> image;
};

template <typename T>
struct BatchResult {
  T loss{0};
  GradientSet<T> grads;
  MiningReport mining;
  std::vector<std::vector<T>> v1s;
  std::vector<std::vector<T>> v2s;
};

// Forward every pair, mine, and back-propagate the batch objective into one
// gradient set. Per-pair gradients are summed in batch order, so the result
// does not depend on the worker count.
template <typename T>
BatchResult<T> batch_loss(const RetrievalModel<T>& model, const std::vector<BatchItem<T>>& batch,
                          double margin, std::size_t workers = 1);

// v1 for a backbone input of either kind.
template <typename T>
Var image_input_forward(Tape<T>& tape, const RetrievalModel<T>& model, Var input);

struct AugmentationPolicy {
  // Stage 1: EN original vs the two back-translations.
  bool back_translation = true;
  // Stage 2: stage-1 result vs KO, DE, RU, FR.
  bool languages = true;
  bool image = true;
  std::size_t load_size = 36;
  std::size_t crop_size = 32;
  double rotation_degrees = 10.0;
  double flip_probability = 0.5;
  double pad_probability = 0.5;
  bool random_crop = true;

  static AugmentationPolicy from_config(const RunConfig& config);
};

// Missing variants fall back to the original.
const RecipeDocument& select_language_variant(const PairedSample& sample,
                                              const AugmentationPolicy& policy,
                                              std::mt19937_64& rng);

// Pad-to-square (random pad mode) or resize, to load_size; rotation in
// +-rotation_degrees; crop to crop_size; horizontal flip; clamp to [0,1].
Image augment_image(const Image& image, const AugmentationPolicy& policy, std::mt19937_64& rng);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double lr = 0;
  RetrievalReport validation;
};

struct RetrievalRun {
  RetrievalModel<float> model;
  std::vector<EpochRecord> log;
  std::filesystem::path final_checkpoint;
};

// Writes metrics.jsonl, checkpoint-<epoch>.bin (0 = initial) and final.bin
// under out_dir. Throws NumericalError naming the batch on a non-finite loss.
RetrievalRun train_retrieval(const std::vector<PairedSample>& train,
                             const std::vector<PairedSample>& validation, const Vocabulary& vocab,
                             const RunConfig& config, const std::filesystem::path& out_dir);

nlohmann::ordered_json epoch_record_to_json(const EpochRecord& record);

}  // namespace xmodal
