#include "xmodal/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>

#include <Eigen/Dense>
#include <spdlog/spdlog.h>

#include "xmodal/errors.hpp"
#include "xmodal/parallel.hpp"

namespace xmodal {

using ordered_json = nlohmann::ordered_json;

std::size_t rank_of_true_pair(const Tensor<double>& s, std::size_t i) {
  const double self = s(i, i);
  std::size_t better = 0;
  for (std::size_t j = 0; j < s.cols(); ++j) {
    if (j != i && s(i, j) > self) ++better;
  }
  return better + 1;
}

DirectionMetrics direction_metrics(const Tensor<double>& s) {
  const std::size_t n = s.rows();
  if (n == 0 || s.cols() != n) throw std::invalid_argument("similarity matrix must be square");
  std::vector<double> ranks(n);
  DirectionMetrics m;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = rank_of_true_pair(s, i);
    ranks[i] = static_cast<double>(r);
    m.r1 += r <= 1;
    m.r5 += r <= 5;
    m.r10 += r <= 10;
  }
  m.r1 /= static_cast<double>(n);
  m.r5 /= static_cast<double>(n);
  m.r10 /= static_cast<double>(n);
  std::sort(ranks.begin(), ranks.end());
  m.medR = n % 2 ? ranks[n / 2] : 0.5 * (ranks[n / 2 - 1] + ranks[n / 2]);
  return m;
}

Tensor<double> similarity_matrix(const Embeddings& queries, const Embeddings& candidates) {
  Tensor<double> s({queries.size(), candidates.size()});
  for (std::size_t i = 0; i < queries.size(); ++i)
    for (std::size_t j = 0; j < candidates.size(); ++j)
      s(i, j) = cosine_similarity(queries[i], candidates[j]);
  return s;
}

std::vector<std::vector<std::size_t>> evaluation_pools(std::size_t n, std::size_t pool_size,
                                                       std::size_t n_subsets,
                                                       std::uint64_t seed) {
  if (pool_size == 0 || pool_size > n) {
    throw ConfigError("evaluation pool of " + std::to_string(pool_size) +
                      " does not fit a test set of " + std::to_string(n));
  }
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> pools;
  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < n_subsets; ++k) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> pool(order.begin(), order.begin() + static_cast<long>(pool_size));
    std::sort(pool.begin(), pool.end());
    pools.push_back(std::move(pool));
  }
  return pools;
}

RetrievalReport retrieval_report(const Embeddings& images, const Embeddings& recipes,
                                 std::size_t pool_size, std::size_t n_subsets,
                                 std::uint64_t seed, std::size_t workers) {
  if (images.size() != recipes.size()) {
    throw std::invalid_argument("retrieval_report: image and recipe lists differ in length");
  }
  if (n_subsets == 0) throw ConfigError("n_subsets must be at least 1");
  const auto pools = evaluation_pools(images.size(), pool_size, n_subsets, seed);
  RetrievalReport report;
  report.pool_size = pool_size;
  report.n_subsets = n_subsets;
  report.subsets.resize(n_subsets);
  parallel_for(n_subsets, workers, [&](std::size_t k) {
    const auto& pool = pools[k];
    Embeddings qi, qr;
    for (std::size_t idx : pool) {
      qi.push_back(images[idx]);
      qr.push_back(recipes[idx]);
    }
    const Tensor<double> s = similarity_matrix(qi, qr);
    Tensor<double> st({pool.size(), pool.size()});
    for (std::size_t i = 0; i < pool.size(); ++i)
      for (std::size_t j = 0; j < pool.size(); ++j) st(i, j) = s(j, i);
    report.subsets[k] = {direction_metrics(s), direction_metrics(st)};
  });
  const auto accumulate = [&](DirectionMetrics& dst, const DirectionMetrics& src) {
    dst.medR += src.medR / static_cast<double>(n_subsets);
    dst.r1 += src.r1 / static_cast<double>(n_subsets);
    dst.r5 += src.r5 / static_cast<double>(n_subsets);
    dst.r10 += src.r10 / static_cast<double>(n_subsets);
  };
  for (const auto& sub : report.subsets) {
    accumulate(report.i2r, sub.i2r);
    accumulate(report.r2i, sub.r2i);
  }
  return report;
}

// ---------------------------------------------------------------------------
// FID

GaussianStats gaussian_stats(const std::vector<std::vector<double>>& features) {
  if (features.size() < 2) {
    throw NumericalError("FID needs at least 2 samples per set, got " +
                         std::to_string(features.size()));
  }
  const std::size_t n = features.size();
  const std::size_t d = features.front().size();
  GaussianStats st;
  st.count = n;
  st.mean.assign(d, 0.0);
  for (const auto& f : features) {
    if (f.size() != d) throw std::invalid_argument("FID feature dimensions differ");
    for (std::size_t k = 0; k < d; ++k) st.mean[k] += f[k];
  }
  for (auto& m : st.mean) m /= static_cast<double>(n);
  st.covariance = Tensor<double>({d, d});
  for (const auto& f : features)
    for (std::size_t a = 0; a < d; ++a) {
      const double da = f[a] - st.mean[a];
      for (std::size_t b = 0; b < d; ++b) st.covariance(a, b) += da * (f[b] - st.mean[b]);
    }
  for (auto& c : st.covariance.values()) c /= static_cast<double>(n - 1);
  return st;
}

namespace {

Eigen::MatrixXd to_eigen(const Tensor<double>& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t(i, j);
  return 0.5 * (m + m.transpose());
}

constexpr double kCovarianceEpsilon = 1e-6;

Eigen::MatrixXd regularized(const Eigen::MatrixXd& cov) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() > 1e-12 * scale) return cov;
  return cov + kCovarianceEpsilon * Eigen::MatrixXd::Identity(cov.rows(), cov.cols());
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid_from_stats(const GaussianStats& a, const GaussianStats& b) {
  const std::size_t d = a.mean.size();
  if (b.mean.size() != d) throw std::invalid_argument("FID feature dimensions differ");
  double mean_term = 0;
  for (std::size_t k = 0; k < d; ++k) mean_term += (a.mean[k] - b.mean[k]) * (a.mean[k] - b.mean[k]);
  const Eigen::MatrixXd ca = regularized(to_eigen(a.covariance));
  const Eigen::MatrixXd cb = regularized(to_eigen(b.covariance));
  const Eigen::MatrixXd ra = psd_sqrt(ca);
  Eigen::MatrixXd inner = ra * cb * ra;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  double trace_sqrt = 0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    const double ev = es.eigenvalues()[i];
    if (ev < -1e-8) {
      spdlog::warn("FID: clamping eigenvalue {} of the covariance product to 0", ev);
    }
    trace_sqrt += std::sqrt(std::max(ev, 0.0));
  }
  return mean_term + ca.trace() + cb.trace() - 2.0 * trace_sqrt;
}

double fid(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  return fid_from_stats(gaussian_stats(a), gaussian_stats(b));
}

// ---------------------------------------------------------------------------
// Embedding extraction and evaluation protocols

EmbeddingSet embed_samples(const RetrievalModel<float>& model, const Vocabulary& vocab,
                           const std::vector<PairedSample>& samples, const EmbedOptions& options) {
  std::vector<const PairedSample*> kept;
  std::vector<const RecipeDocument*> docs;
  EmbeddingSet set;
  for (const auto& s : samples) {
    const RecipeDocument* doc = nullptr;
    if (!options.language || *options.language == Language::EN) {
      doc = &s.original();
    } else {
      doc = s.find(*options.language, Variant::translation);
    }
    if (!doc) {
      spdlog::debug("sample {} has no {} variant; skipped", s.id, to_string(*options.language));
      set.skipped.push_back(s.id);
      continue;
    }
    kept.push_back(&s);
    docs.push_back(doc);
  }
  if (!set.skipped.empty()) {
    spdlog::warn("{} of {} samples lack the requested language variant and were skipped",
                 set.skipped.size(), samples.size());
  }
  const std::size_t n = kept.size();
  set.ids.resize(n);
  set.images.resize(n);
  set.recipes.resize(n);
  set.image_hidden.resize(n);
  std::size_t empty_texts = 0;
  std::vector<char> empty(n, 0);
  parallel_for(n, options.workers, [&](std::size_t i) {
    set.ids[i] = kept[i]->id;
    const std::string text = compose_recipe_text(*docs[i], options.mask);
    empty[i] = text.empty();
    set.recipes[i] = embed_recipe(model, encode_recipe(text, vocab, model.dims.max_len));
    const Tensor<float> features = image_features(model, kept[i]->images.front());
    set.images[i] = embed_image_features(model, features);
    const auto hidden = image_hidden_features(model, features);
    set.image_hidden[i].assign(hidden.begin(), hidden.end());
  });
  for (char e : empty) empty_texts += e;
  if (n > 0 && empty_texts == n) {
    spdlog::warn("mask '{}' leaves every recipe empty; encoding [CLS] only",
                 options.mask.to_string());
  }
  return set;
}

RetrievalReport ablation_eval(const RetrievalModel<float>& model, const Vocabulary& vocab,
                              const std::vector<PairedSample>& samples,
                              const AblationConfig& ablation, std::size_t pool_size,
                              std::size_t n_subsets, std::uint64_t seed, std::size_t workers) {
  if (ablation.mask.empty()) throw ConfigError("ablation mask must not be empty");
  EmbedOptions opts;
  opts.mask = ablation.mask;
  opts.workers = workers;
  const auto set = embed_samples(model, vocab, samples, opts);
  return retrieval_report(set.images, set.recipes, pool_size, n_subsets, seed, workers);
}

RetrievalReport multilingual_eval(const RetrievalModel<float>& model, const Vocabulary& vocab,
                                  const std::vector<PairedSample>& samples, Language language,
                                  std::size_t pool_size, std::size_t n_subsets,
                                  std::uint64_t seed, std::size_t workers) {
  EmbedOptions opts;
  opts.language = language;
  opts.workers = workers;
  const auto set = embed_samples(model, vocab, samples, opts);
  if (set.ids.empty()) {
    throw DataError("no test sample has a " + std::string(to_string(language)) + " variant");
  }
  return retrieval_report(set.images, set.recipes, pool_size, n_subsets, seed, workers);
}

ordered_json metrics_to_json(const DirectionMetrics& m) {
  ordered_json j;
  j["medR"] = m.medR;
  j["R@1"] = m.r1;
  j["R@5"] = m.r5;
  j["R@10"] = m.r10;
  return j;
}

ordered_json report_to_json(const RetrievalReport& r) {
  ordered_json j;
  j["pool_size"] = r.pool_size;
  j["n_subsets"] = r.n_subsets;
  j["image_to_recipe"] = metrics_to_json(r.i2r);
  j["recipe_to_image"] = metrics_to_json(r.r2i);
  ordered_json subsets = ordered_json::array();
  for (const auto& s : r.subsets) {
    ordered_json e;
    e["image_to_recipe"] = metrics_to_json(s.i2r);
    e["recipe_to_image"] = metrics_to_json(s.r2i);
    subsets.push_back(std::move(e));
  }
  j["subsets"] = std::move(subsets);
  return j;
}

void write_embeddings_tsv(const EmbeddingSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write embeddings to " + path.string());
  out << std::setprecision(9);
  const auto write = [&](const Embeddings& rows, const char* modality) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out << set.ids[i] << '\t' << modality << '\t';
      for (std::size_t k = 0; k < rows[i].size(); ++k) {
        if (k) out << ' ';
        out << rows[i][k];
      }
      out << '\n';
    }
  };
  write(set.images, "image");
  write(set.recipes, "recipe");
}

}  // namespace xmodal
