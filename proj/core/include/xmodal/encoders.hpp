#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmodal/autograd.hpp"
#include "xmodal/checkpoint.hpp"
#include "xmodal/config.hpp"
#include "xmodal/corpus.hpp"
#include "xmodal/tokenizer.hpp"

namespace xmodal {

// Everything needed to rebuild the retrieval model's parameter layout.
struct EncoderDims {
  std::size_t vocab_size = 0;
  std::size_t d_tok = 32;
  std::size_t d_share = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn_multiplier = 4;
  std::size_t max_len = kDefaultMaxLen;
  double embedding_init = 0.05;
  bool normalize_embeddings = false;

  ImageMode image_mode = ImageMode::feature;
  // Feature mode: backbone feature length. Pixel mode: derived as 3*grid*grid.
  std::size_t feature_dim = 64;
  std::size_t load_size = 36;
  std::size_t crop_size = 32;
  std::size_t grid = 4;

  // Test switches: no tanh in the heads; no positional embeddings.
  bool linear_heads = false;
  bool use_positions = true;

  std::size_t image_input_dim() const {
    return image_mode == ImageMode::pixels ? 3 * grid * grid : feature_dim;
  }
  friend bool operator==(const EncoderDims&, const EncoderDims&) = default;
};

EncoderDims make_encoder_dims(const RunConfig& config, std::size_t vocab_size,
                              ImageMode image_mode, std::size_t feature_dim);
nlohmann::ordered_json dims_to_json(const EncoderDims& dims);
EncoderDims dims_from_json(const nlohmann::ordered_json& j);

// Recipe transformer, image head, and the projection both of them share.
template <typename T>
struct RetrievalModel {
  EncoderDims dims;
  ParameterSet<T> params;

  static RetrievalModel create(const EncoderDims& dims, std::uint64_t seed);

  template <typename U>
  RetrievalModel<U> cast() const {
    return RetrievalModel<U>{dims, params.template cast<U>()};
  }
};

// Per-layer, per-head T x T attention probabilities of one forward pass.
struct AttentionMap {
  std::size_t length = 0;
  std::vector<std::vector<Tensor<double>>> layers;
};

template <typename T>
struct RecipeEncoding {
  Var embedding;
  AttentionMap attention;
};

// v2 for a [CLS]-prefixed sequence. Throws std::out_of_range for ids outside
// the vocabulary and std::invalid_argument for empty or over-long sequences.
template <typename T>
RecipeEncoding<T> recipe_forward(Tape<T>& tape, const RetrievalModel<T>& model,
                                 const TokenSequence& seq, bool keep_attention = true);

// Pixel backbone: cell-averaged colours of a [3, crop, crop] image, mapped
// from [0, 1] to [-1, 1] and flattened to [1, 3*grid*grid] channel-major.
template <typename T>
Var pixel_backbone(Tape<T>& tape, const RetrievalModel<T>& model, Var chw);

// First image-head layer; also the feature extractor used for FID.
template <typename T>
Var image_hidden(Tape<T>& tape, const RetrievalModel<T>& model, Var features);

// v1 from backbone features [1, image_input_dim].
template <typename T>
Var image_forward(Tape<T>& tape, const RetrievalModel<T>& model, Var features);

// Deterministic evaluation transform: resize to load_size, center crop.
Image eval_transform(const Image& image, std::size_t load_size, std::size_t crop_size);
// Backbone input for one record: the feature vector, or the pooled
// evaluation-transformed pixels.
template <typename T>
Tensor<T> image_features(const RetrievalModel<T>& model, const ImageRecord& record);
template <typename T>
Tensor<T> pixels_to_features(const RetrievalModel<T>& model, const Image& crop);

// Tape-free conveniences for evaluation.
std::vector<float> embed_recipe(const RetrievalModel<float>& model, const TokenSequence& seq,
                                AttentionMap* attention = nullptr);
std::vector<float> embed_image_features(const RetrievalModel<float>& model,
                                        const Tensor<float>& features);
std::vector<float> embed_image(const RetrievalModel<float>& model, const ImageRecord& record);
std::vector<float> image_hidden_features(const RetrievalModel<float>& model,
                                         const Tensor<float>& features);

// u.v / (|u||v|); 0 with *degenerate set when either norm is below 1e-12.
double cosine_similarity(std::span<const float> u, std::span<const float> v,
                         bool* degenerate = nullptr);
double cosine_similarity(std::span<const double> u, std::span<const double> v,
                         bool* degenerate = nullptr);

// Per-word attribution of the [CLS] output: head-averaged attention mixed
// with the identity (0.5/0.5), rolled out over layers, [CLS] row with its own
// column dropped, then summed per word span. Sums to one.
std::vector<double> attention_rollout(const AttentionMap& attention,
                                      const std::vector<WordSpan>& spans);

// A retrieval checkpoint is self-contained: dimensions, vocabulary, the
// resolved run config, and the parameters.
struct RetrievalCheckpoint {
  RetrievalModel<float> model;
  Vocabulary vocab;
  nlohmann::ordered_json config;
  std::size_t epoch = 0;
};

void save_retrieval_checkpoint(const RetrievalModel<float>& model, const Vocabulary& vocab,
                               const nlohmann::ordered_json& config, std::size_t epoch,
                               const std::filesystem::path& path);
RetrievalCheckpoint load_retrieval_checkpoint(const std::filesystem::path& path);

}  // namespace xmodal
