#include "xmodal/encoders.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "xmodal/errors.hpp"

namespace xmodal {

using ordered_json = nlohmann::ordered_json;

EncoderDims make_encoder_dims(const RunConfig& config, std::size_t vocab_size,
                              ImageMode image_mode, std::size_t feature_dim) {
  EncoderDims d;
  d.vocab_size = vocab_size;
  d.d_tok = config.model.d_tok;
  d.d_share = config.model.d_share;
  d.layers = config.model.layers;
  d.heads = config.model.heads;
  d.ffn_multiplier = config.model.ffn_multiplier;
  d.max_len = config.model.max_len;
  d.embedding_init = config.model.embedding_init;
  d.normalize_embeddings = config.model.normalize_embeddings;
  d.image_mode = image_mode;
  d.feature_dim = feature_dim;
  d.load_size = config.image.load_size;
  d.crop_size = config.image.crop_size;
  d.grid = config.image.grid;
  return d;
}

ordered_json dims_to_json(const EncoderDims& d) {
  ordered_json j;
  j["vocab_size"] = d.vocab_size;
  j["d_tok"] = d.d_tok;
  j["d_share"] = d.d_share;
  j["layers"] = d.layers;
  j["heads"] = d.heads;
  j["ffn_multiplier"] = d.ffn_multiplier;
  j["max_len"] = d.max_len;
  j["embedding_init"] = d.embedding_init;
  j["normalize_embeddings"] = d.normalize_embeddings;
  j["image_mode"] = d.image_mode == ImageMode::pixels ? "pixels" : "feature";
  j["feature_dim"] = d.feature_dim;
  j["load_size"] = d.load_size;
  j["crop_size"] = d.crop_size;
  j["grid"] = d.grid;
  j["linear_heads"] = d.linear_heads;
  j["use_positions"] = d.use_positions;
  return j;
}

EncoderDims dims_from_json(const ordered_json& j) {
  try {
    EncoderDims d;
    d.vocab_size = j.at("vocab_size").get<std::size_t>();
    d.d_tok = j.at("d_tok").get<std::size_t>();
    d.d_share = j.at("d_share").get<std::size_t>();
    d.layers = j.at("layers").get<std::size_t>();
    d.heads = j.at("heads").get<std::size_t>();
    d.ffn_multiplier = j.at("ffn_multiplier").get<std::size_t>();
    d.max_len = j.at("max_len").get<std::size_t>();
    d.embedding_init = j.at("embedding_init").get<double>();
    d.normalize_embeddings = j.at("normalize_embeddings").get<bool>();
    d.image_mode = j.at("image_mode").get<std::string>() == "pixels" ? ImageMode::pixels
                                                                      : ImageMode::feature;
    d.feature_dim = j.at("feature_dim").get<std::size_t>();
    d.load_size = j.at("load_size").get<std::size_t>();
    d.crop_size = j.at("crop_size").get<std::size_t>();
    d.grid = j.at("grid").get<std::size_t>();
    d.linear_heads = j.at("linear_heads").get<bool>();
    d.use_positions = j.at("use_positions").get<bool>();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed encoder dimensions: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Initialization

template <typename T>
RetrievalModel<T> RetrievalModel<T>::create(const EncoderDims& d, std::uint64_t seed) {
  if (d.heads == 0 || d.d_tok % d.heads != 0) {
    throw ConfigError("d_tok must be divisible by the number of heads");
  }
  if (d.vocab_size == 0) throw ConfigError("vocabulary must not be empty");
  std::mt19937_64 rng(seed);
  RetrievalModel<T> m;
  m.dims = d;
  auto& p = m.params;
  const auto uniform = [&](Shape shape, double bound) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& x : t.values()) x = static_cast<T>(u(rng));
    return t;
  };
  const auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    p.add(name + ".w", uniform({in, out}, 1.0 / std::sqrt(static_cast<double>(in))));
    p.add(name + ".b", Tensor<T>({1, out}));
  };
  const auto norm = [&](const std::string& name, std::size_t n) {
    p.add(name + ".g", Tensor<T>({1, n}, T{1}));
    p.add(name + ".b", Tensor<T>({1, n}));
  };
  p.add("tok_emb", uniform({d.vocab_size, d.d_tok}, d.embedding_init));
  p.add("pos_emb", uniform({d.max_len, d.d_tok}, d.embedding_init));
  for (std::size_t l = 0; l < d.layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    linear(prefix + "q", d.d_tok, d.d_tok);
    linear(prefix + "k", d.d_tok, d.d_tok);
    linear(prefix + "v", d.d_tok, d.d_tok);
    linear(prefix + "o", d.d_tok, d.d_tok);
    norm(prefix + "ln1", d.d_tok);
    linear(prefix + "ffn1", d.d_tok, d.ffn_multiplier * d.d_tok);
    linear(prefix + "ffn2", d.ffn_multiplier * d.d_tok, d.d_tok);
    norm(prefix + "ln2", d.d_tok);
  }
  linear("recipe_fc1", d.d_tok, d.d_share);
  linear("recipe_fc2", d.d_share, d.d_share);
  linear("image_fc", d.image_input_dim(), d.d_share);
  linear("shared", d.d_share, d.d_share);
  return m;
}

// ---------------------------------------------------------------------------
// Forward passes

namespace {

template <typename T>
Var dense(Tape<T>& tape, const ParameterSet<T>& p, const std::string& name, Var x) {
  return tape.add_bias(tape.matmul(x, tape.param(p, name + ".w")), tape.param(p, name + ".b"));
}

template <typename T>
Var head_activation(Tape<T>& tape, const EncoderDims& d, Var x) {
  return d.linear_heads ? x : tape.tanh(x);
}

template <typename T>
Var finish_embedding(Tape<T>& tape, const RetrievalModel<T>& m, Var hidden) {
  Var v = dense(tape, m.params, "shared", hidden);
  return m.dims.normalize_embeddings ? tape.l2_normalize(v) : v;
}

}  // namespace

template <typename T>
RecipeEncoding<T> recipe_forward(Tape<T>& tape, const RetrievalModel<T>& m,
                                 const TokenSequence& seq, bool keep_attention) {
  const auto& d = m.dims;
  const auto& p = m.params;
  const std::size_t len = seq.ids.size();
  if (len == 0) throw std::invalid_argument("recipe_forward: empty token sequence");
  if (len > d.max_len) {
    throw std::invalid_argument("recipe_forward: sequence length " + std::to_string(len) +
                                " exceeds max_len " + std::to_string(d.max_len));
  }
  for (std::size_t id : seq.ids) {
    if (id >= d.vocab_size) {
      throw std::out_of_range("recipe_forward: token id " + std::to_string(id) +
                              " outside vocabulary of " + std::to_string(d.vocab_size));
    }
  }
  RecipeEncoding<T> out;
  out.attention.length = len;

  Var x = tape.gather_rows(tape.param(p, "tok_emb"), seq.ids);
  if (d.use_positions) {
    x = tape.add(x, tape.slice_rows(tape.param(p, "pos_emb"), 0, len));
  }
  const std::size_t dh = d.d_tok / d.heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (std::size_t l = 0; l < d.layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    Var q = dense(tape, p, prefix + "q", x);
    Var k = dense(tape, p, prefix + "k", x);
    Var v = dense(tape, p, prefix + "v", x);
    std::vector<Var> heads;
    std::vector<Tensor<double>> probs;
    for (std::size_t h = 0; h < d.heads; ++h) {
      Var qh = tape.slice_cols(q, h * dh, dh);
      Var kh = tape.slice_cols(k, h * dh, dh);
      Var vh = tape.slice_cols(v, h * dh, dh);
      Var a = tape.softmax_rows(tape.affine(tape.matmul_nt(qh, kh), scale, T{0}));
      if (keep_attention) probs.push_back(tape.value(a).template cast<double>());
      heads.push_back(tape.matmul(a, vh));
    }
    if (keep_attention) out.attention.layers.push_back(std::move(probs));
    Var attn = dense(tape, p, prefix + "o", tape.concat_cols(heads));
    x = tape.layer_norm_rows(tape.add(x, attn), tape.param(p, prefix + "ln1.g"),
                             tape.param(p, prefix + "ln1.b"), T(1e-5));
    Var ff = dense(tape, p, prefix + "ffn2", tape.gelu(dense(tape, p, prefix + "ffn1", x)));
    x = tape.layer_norm_rows(tape.add(x, ff), tape.param(p, prefix + "ln2.g"),
                             tape.param(p, prefix + "ln2.b"), T(1e-5));
  }
  Var cls = tape.slice_rows(x, 0, 1);
  Var h1 = head_activation(tape, d, dense(tape, p, "recipe_fc1", cls));
  Var h2 = head_activation(tape, d, dense(tape, p, "recipe_fc2", h1));
  out.embedding = finish_embedding(tape, m, h2);
  return out;
}

template <typename T>
Var pixel_backbone(Tape<T>& tape, const RetrievalModel<T>& m, Var chw) {
  const auto& d = m.dims;
  const auto& shape = tape.value(chw).shape();
  if (shape.size() != 3 || shape[0] != 3 || shape[1] != d.crop_size || shape[2] != d.crop_size) {
    throw std::invalid_argument("pixel_backbone: expected [3," + std::to_string(d.crop_size) +
                                "," + std::to_string(d.crop_size) + "], got " +
                                shape_string(shape));
  }
  // Colours are centered to [-1, 1] so the mean grey does not dominate.
  Var pooled = tape.affine(tape.avg_pool(chw, d.crop_size / d.grid), T{2}, T{-1});
  return tape.reshape(pooled, {1, 3 * d.grid * d.grid});
}

template <typename T>
Var image_hidden(Tape<T>& tape, const RetrievalModel<T>& m, Var features) {
  const auto& f = tape.value(features);
  if (f.size() != m.dims.image_input_dim()) {
    throw std::invalid_argument("image feature dimension " + std::to_string(f.size()) +
                                " does not match encoder input " +
                                std::to_string(m.dims.image_input_dim()));
  }
  Var x = f.rank() == 2 && f.rows() == 1 ? features : tape.reshape(features, {1, f.size()});
  return head_activation(tape, m.dims, dense(tape, m.params, "image_fc", x));
}

template <typename T>
Var image_forward(Tape<T>& tape, const RetrievalModel<T>& m, Var features) {
  return finish_embedding(tape, m, image_hidden(tape, m, features));
}

Image eval_transform(const Image& image, std::size_t load_size, std::size_t crop_size) {
  Image resized = image.height == load_size && image.width == load_size
                      ? image
                      : resize_bilinear(image, load_size, load_size);
  return center_crop(resized, crop_size);
}

template <typename T>
Tensor<T> pixels_to_features(const RetrievalModel<T>& m, const Image& crop) {
  Tape<T> tape;
  const auto planar = to_planar(crop);
  Var x = tape.constant(Tensor<T>({3, crop.height, crop.width},
                                  std::vector<T>(planar.begin(), planar.end())));
  return tape.value(pixel_backbone(tape, m, x));
}

template <typename T>
Tensor<T> image_features(const RetrievalModel<T>& m, const ImageRecord& record) {
  if (m.dims.image_mode == ImageMode::feature) {
    if (record.feature.empty()) throw DataError("image '" + record.id + "' has no feature vector");
    return Tensor<T>({1, record.feature.size()},
                     std::vector<T>(record.feature.begin(), record.feature.end()));
  }
  if (record.pixels.empty()) throw DataError("image '" + record.id + "' has no pixels");
  return pixels_to_features(m, eval_transform(record.pixels, m.dims.load_size, m.dims.crop_size));
}

std::vector<float> embed_recipe(const RetrievalModel<float>& model, const TokenSequence& seq,
                                AttentionMap* attention) {
  Tape<float> tape;
  auto enc = recipe_forward(tape, model, seq, attention != nullptr);
  if (attention) *attention = std::move(enc.attention);
  return tape.value(enc.embedding).storage();
}

std::vector<float> embed_image_features(const RetrievalModel<float>& model,
                                        const Tensor<float>& features) {
  Tape<float> tape;
  return tape.value(image_forward(tape, model, tape.constant(features))).storage();
}

std::vector<float> embed_image(const RetrievalModel<float>& model, const ImageRecord& record) {
  return embed_image_features(model, image_features(model, record));
}

std::vector<float> image_hidden_features(const RetrievalModel<float>& model,
                                         const Tensor<float>& features) {
  Tape<float> tape;
  return tape.value(image_hidden(tape, model, tape.constant(features))).storage();
}

// ---------------------------------------------------------------------------
// Similarity and attribution

namespace {

template <typename T>
double cosine_impl(std::span<const T> u, std::span<const T> v, bool* degenerate) {
  if (u.size() != v.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
  double dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += static_cast<double>(u[i]) * v[i];
    nu += static_cast<double>(u[i]) * u[i];
    nv += static_cast<double>(v[i]) * v[i];
  }
  nu = std::sqrt(nu);
  nv = std::sqrt(nv);
  const bool bad = nu < 1e-12 || nv < 1e-12;
  if (degenerate) *degenerate = bad;
  if (bad) return 0.0;
  return std::clamp(dot / (nu * nv), -1.0, 1.0);
}

}  // namespace

double cosine_similarity(std::span<const float> u, std::span<const float> v, bool* degenerate) {
  return cosine_impl(u, v, degenerate);
}

double cosine_similarity(std::span<const double> u, std::span<const double> v,
                         bool* degenerate) {
  return cosine_impl(u, v, degenerate);
}

std::vector<double> attention_rollout(const AttentionMap& attention,
                                      const std::vector<WordSpan>& spans) {
  const std::size_t n = attention.length;
  if (n == 0) throw std::invalid_argument("attention_rollout: empty attention map");
  std::size_t expected_start = 1;
  for (const auto& s : spans) {
    if (s.start != expected_start || s.end <= s.start || s.end > n) {
      throw std::invalid_argument("attention_rollout: word spans do not match sequence of length " +
                                  std::to_string(n));
    }
    expected_start = s.end;
  }
  if (spans.empty()) return {};

  // rollout = mixed_L * ... * mixed_1, accumulated left to right.
  std::vector<double> rollout(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) rollout[i * n + i] = 1.0;
  std::vector<double> mixed(n * n), next(n * n);
  for (const auto& heads : attention.layers) {
    if (heads.empty()) throw std::invalid_argument("attention_rollout: layer without heads");
    std::fill(mixed.begin(), mixed.end(), 0.0);
    for (const auto& a : heads) {
      if (a.size() != n * n) throw std::invalid_argument("attention_rollout: map size mismatch");
      for (std::size_t k = 0; k < n * n; ++k) mixed[k] += a[k] / static_cast<double>(heads.size());
    }
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0;
      for (std::size_t j = 0; j < n; ++j) {
        double& e = mixed[i * n + j];
        e = 0.5 * e + (i == j ? 0.5 : 0.0);
        row += e;
      }
      for (std::size_t j = 0; j < n; ++j) mixed[i * n + j] /= row;
    }
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k) {
        const double a = mixed[i * n + k];
        if (a == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) next[i * n + j] += a * rollout[k * n + j];
      }
    rollout.swap(next);
  }

  std::vector<double> piece(n, 0.0);
  double mass = 0;
  for (std::size_t j = 1; j < n; ++j) {
    piece[j] = rollout[j];
    mass += piece[j];
  }
  if (mass <= 1e-12) {
    // Everything stayed on [CLS]: spread evenly over the pieces.
    for (std::size_t j = 1; j < n; ++j) piece[j] = 1.0 / static_cast<double>(n - 1);
  } else {
    for (std::size_t j = 1; j < n; ++j) piece[j] /= mass;
  }
  std::vector<double> words;
  words.reserve(spans.size());
  double covered = 0;
  for (const auto& s : spans) {
    double w = 0;
    for (std::size_t j = s.start; j < s.end; ++j) w += piece[j];
    words.push_back(w);
    covered += w;
  }
  // Spans normally cover every piece; renormalize if a caller passed a prefix.
  if (covered > 0) {
    for (auto& w : words) w /= covered;
  }
  return words;
}

void save_retrieval_checkpoint(const RetrievalModel<float>& model, const Vocabulary& vocab,
                               const ordered_json& config, std::size_t epoch,
                               const std::filesystem::path& path) {
  Checkpoint ck;
  ck.meta["kind"] = "retrieval";
  ck.meta["epoch"] = epoch;
  ck.meta["dims"] = dims_to_json(model.dims);
  ck.meta["config"] = config;
  ck.meta["vocab"] = vocab.tokens();
  ck.params = model.params;
  save_checkpoint(ck, path);
}

RetrievalCheckpoint load_retrieval_checkpoint(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", std::string()) != "retrieval") {
    throw DataError(path.string() + " is not a retrieval checkpoint");
  }
  RetrievalCheckpoint out{
      RetrievalModel<float>{dims_from_json(ck.meta.at("dims")), std::move(ck.params)},
      Vocabulary::from_tokens(ck.meta.at("vocab").get<std::vector<std::string>>()),
      ck.meta.value("config", ordered_json::object()), ck.meta.value("epoch", std::size_t{0})};
  const auto expected = RetrievalModel<float>::create(out.model.dims, 0);
  if (expected.params.size() != out.model.params.size()) {
    throw DataError("checkpoint " + path.string() + " parameter count does not match its dimensions");
  }
  for (std::size_t i = 0; i < expected.params.size(); ++i) {
    if (expected.params.name(i) != out.model.params.name(i) ||
        expected.params.value(i).shape() != out.model.params.value(i).shape()) {
      throw DataError("checkpoint " + path.string() + " tensor '" + out.model.params.name(i) +
                      "' does not match its dimensions");
    }
  }
  return out;
}

template struct RetrievalModel<float>;
template struct RetrievalModel<double>;

#define XMODAL_INSTANTIATE(T)                                                                   \
  template RecipeEncoding<T> recipe_forward(Tape<T>&, const RetrievalModel<T>&,                 \
                                            const TokenSequence&, bool);                        \
  template Var pixel_backbone(Tape<T>&, const RetrievalModel<T>&, Var);                         \
  template Var image_hidden(Tape<T>&, const RetrievalModel<T>&, Var);                           \
  template Var image_forward(Tape<T>&, const RetrievalModel<T>&, Var);                          \
  template Tensor<T> pixels_to_features(const RetrievalModel<T>&, const Image&);                \
  template Tensor<T> image_features(const RetrievalModel<T>&, const ImageRecord&);
XMODAL_INSTANTIATE(float)
XMODAL_INSTANTIATE(double)
#undef XMODAL_INSTANTIATE

}  // namespace xmodal
