#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmodal/corpus.hpp"
#include "xmodal/encoders.hpp"
#include "xmodal/tensor.hpp"

namespace xmodal {

using Embeddings = std::vector<std::vector<float>>;

struct DirectionMetrics {
  double medR = 0;
  double r1 = 0;
  double r5 = 0;
  double r10 = 0;
  friend bool operator==(const DirectionMetrics&, const DirectionMetrics&) = default;
};

struct SubsetMetrics {
  DirectionMetrics i2r;
  DirectionMetrics r2i;
  friend bool operator==(const SubsetMetrics&, const SubsetMetrics&) = default;
};

// Both directions averaged over the subsets, plus the per-subset numbers.
struct RetrievalReport {
  std::size_t pool_size = 0;
  std::size_t n_subsets = 0;
  DirectionMetrics i2r;
  DirectionMetrics r2i;
  std::vector<SubsetMetrics> subsets;
};

// 1 + number of j != i with S(i,j) > S(i,i). S is square.
std::size_t rank_of_true_pair(const Tensor<double>& similarity, std::size_t i);
// medR (median of ranks; mean of the middle two for even counts) and R@K
// for every row of a square similarity matrix.
DirectionMetrics direction_metrics(const Tensor<double>& similarity);

// S(i,j) = cos(queries[i], candidates[j]).
Tensor<double> similarity_matrix(const Embeddings& queries, const Embeddings& candidates);

// n_subsets pools of pool_size distinct indices drawn from [0, n).
std::vector<std::vector<std::size_t>> evaluation_pools(std::size_t n, std::size_t pool_size,
                                                       std::size_t n_subsets, std::uint64_t seed);

// images[i] pairs with recipes[i]. Throws ConfigError if pool_size > n.
RetrievalReport retrieval_report(const Embeddings& images, const Embeddings& recipes,
                                 std::size_t pool_size, std::size_t n_subsets,
                                 std::uint64_t seed, std::size_t workers = 1);

struct GaussianStats {
  std::vector<double> mean;
  Tensor<double> covariance;
  std::size_t count = 0;
};

// Mean and unbiased covariance. Throws NumericalError for fewer than 2 rows.
GaussianStats gaussian_stats(const std::vector<std::vector<double>>& features);
// Fréchet distance between two Gaussians. A rank-deficient covariance gets
// 1e-6 * I added before the square root.
double fid_from_stats(const GaussianStats& a, const GaussianStats& b);
double fid(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);

struct EmbedOptions {
  // Unset: the EN original. Otherwise EN original or the translation.
  std::optional<Language> language;
  FieldMask mask = FieldMask::all();
  std::size_t workers = 1;
};

struct EmbeddingSet {
  std::vector<std::string> ids;
  Embeddings images;
  Embeddings recipes;
  // FID features (first image-head layer) of the same images.
  std::vector<std::vector<double>> image_hidden;
  std::vector<std::string> skipped;
};

// One image (the first listed) and one recipe per sample.
EmbeddingSet embed_samples(const RetrievalModel<float>& model, const Vocabulary& vocab,
                           const std::vector<PairedSample>& samples, const EmbedOptions& options);

struct AblationConfig {
  FieldMask mask = FieldMask::all();
  bool trained_on_partial = false;
};

RetrievalReport ablation_eval(const RetrievalModel<float>& model, const Vocabulary& vocab,
                              const std::vector<PairedSample>& samples,
                              const AblationConfig& ablation, std::size_t pool_size,
                              std::size_t n_subsets, std::uint64_t seed, std::size_t workers = 1);

// Samples without the requested language are skipped (and logged); an empty
// remainder is a DataError.
RetrievalReport multilingual_eval(const RetrievalModel<float>& model, const Vocabulary& vocab,
                                  const std::vector<PairedSample>& samples, Language language,
                                  std::size_t pool_size, std::size_t n_subsets,
                                  std::uint64_t seed, std::size_t workers = 1);

nlohmann::ordered_json metrics_to_json(const DirectionMetrics& m);
nlohmann::ordered_json report_to_json(const RetrievalReport& report);

// "id<TAB>modality<TAB>space-separated floats", images then recipes.
void write_embeddings_tsv(const EmbeddingSet& set, const std::filesystem::path& path);

}  // namespace xmodal
