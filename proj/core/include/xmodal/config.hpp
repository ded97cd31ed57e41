#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

namespace xmodal {

inline constexpr std::string_view kFormatVersion = "xmodal-1";

struct ModelConfig {
  std::size_t d_tok = 32;
  std::size_t d_share = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn_multiplier = 4;
  std::size_t max_len = 512;
  double dropout = 0.0;
  double embedding_init = 0.05;
  // Cosine similarity already normalizes; this switch L2-normalizes the
  // embeddings explicitly before the loss and before evaluation.
  bool normalize_embeddings = false;
};

struct ImageConfig {
  // Pixel path geometry. Training: pad-or-resize to load_size, rotate, crop
  // to crop_size, flip. Evaluation: resize to load_size, center crop.
  std::size_t load_size = 36;
  std::size_t crop_size = 32;
  // Cells per side of the pooled pixel backbone.
  std::size_t grid = 4;
  double rotation_degrees = 10.0;
  double flip_probability = 0.5;
  double pad_probability = 0.5;
};

struct RetrievalTrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 320;
  double margin = 0.3;
  double lr_initial = 1e-4;
  double lr_after = 1e-5;
  std::size_t lr_switch_epoch = 40;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool language_augmentation = true;
  bool back_translation = true;
  bool image_augmentation = true;
  // Recipe components seen during training ("all" or a comma list).
  std::string train_mask = "all";
  // Validation pool; 0 means the whole validation split.
  std::size_t val_pool_size = 0;
  std::size_t val_subsets = 10;
};

struct GanConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 32;
  std::size_t d_ca = 16;
  std::size_t d_z = 16;
  std::size_t image_size = 32;
  std::size_t base_channels = 16;
  double lr_initial = 1e-4;
  double lr_after = 1e-5;
  std::size_t lr_switch_epoch = 30;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda_c = 1.0;
  double lambda_ca = 1.0;
  double lambda_ret = 32.0;
  bool non_saturating = false;
};

struct EvalConfig {
  std::size_t pool_size = 1000;
  std::size_t n_subsets = 10;
  std::uint64_t seed = 0;
};

struct DataConfig {
  // Empty paths resolve next to the corpus file (vocab.txt, split.json).
  std::string vocab;
  std::string split;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  bool deterministic = false;
  ModelConfig model;
  ImageConfig image;
  RetrievalTrainConfig retrieval;
  GanConfig gan;
  EvalConfig eval;
  DataConfig data;

  // Workers actually used: one in deterministic mode.
  std::size_t effective_workers() const { return deterministic ? 1 : (workers == 0 ? 1 : workers); }
};

// Applies the JSON object on top of defaults. Unknown keys and ill-typed
// values raise ConfigError naming the offending key.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
// Fully resolved config, every field present.
nlohmann::ordered_json config_to_json(const RunConfig& config);
// Checks cross-field constraints (divisibility, positivity, ordering).
void validate_config(const RunConfig& config);

}  // namespace xmodal
