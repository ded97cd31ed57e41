#include "xmodal/config.hpp"

#include <fstream>
#include <set>

#include "xmodal/corpus.hpp"
#include "xmodal/errors.hpp"

namespace xmodal {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

// Walks every config field once; the same table drives parsing and echoing.
template <typename Visitor>
void visit_section(ModelConfig& c, Visitor&& v) {
  v("d_tok", c.d_tok);
  v("d_share", c.d_share);
  v("layers", c.layers);
  v("heads", c.heads);
  v("ffn_multiplier", c.ffn_multiplier);
  v("max_len", c.max_len);
  v("dropout", c.dropout);
  v("embedding_init", c.embedding_init);
  v("normalize_embeddings", c.normalize_embeddings);
}

template <typename Visitor>
void visit_section(ImageConfig& c, Visitor&& v) {
  v("load_size", c.load_size);
  v("crop_size", c.crop_size);
  v("grid", c.grid);
  v("rotation_degrees", c.rotation_degrees);
  v("flip_probability", c.flip_probability);
  v("pad_probability", c.pad_probability);
}

template <typename Visitor>
void visit_section(RetrievalTrainConfig& c, Visitor&& v) {
  v("epochs", c.epochs);
  v("batch_size", c.batch_size);
  v("margin", c.margin);
  v("lr_initial", c.lr_initial);
  v("lr_after", c.lr_after);
  v("lr_switch_epoch", c.lr_switch_epoch);
  v("beta1", c.beta1);
  v("beta2", c.beta2);
  v("adam_eps", c.adam_eps);
  v("language_augmentation", c.language_augmentation);
  v("back_translation", c.back_translation);
  v("image_augmentation", c.image_augmentation);
  v("train_mask", c.train_mask);
  v("val_pool_size", c.val_pool_size);
  v("val_subsets", c.val_subsets);
}

template <typename Visitor>
void visit_section(GanConfig& c, Visitor&& v) {
  v("epochs", c.epochs);
  v("batch_size", c.batch_size);
  v("d_ca", c.d_ca);
  v("d_z", c.d_z);
  v("image_size", c.image_size);
  v("base_channels", c.base_channels);
  v("lr_initial", c.lr_initial);
  v("lr_after", c.lr_after);
  v("lr_switch_epoch", c.lr_switch_epoch);
  v("beta1", c.beta1);
  v("beta2", c.beta2);
  v("adam_eps", c.adam_eps);
  v("lambda_c", c.lambda_c);
  v("lambda_ca", c.lambda_ca);
  v("lambda_ret", c.lambda_ret);
  v("non_saturating", c.non_saturating);
}

template <typename Visitor>
void visit_section(EvalConfig& c, Visitor&& v) {
  v("pool_size", c.pool_size);
  v("n_subsets", c.n_subsets);
  v("seed", c.seed);
}

template <typename Visitor>
void visit_section(DataConfig& c, Visitor&& v) {
  v("vocab", c.vocab);
  v("split", c.split);
}

template <typename Field>
void read_field(const json& j, const std::string& key, Field& out) {
  try {
    if constexpr (std::is_same_v<Field, bool>) {
      if (!j.is_boolean()) throw ConfigError("expected a boolean");
      out = j.get<bool>();
    } else if constexpr (std::is_same_v<Field, std::string>) {
      if (!j.is_string()) throw ConfigError("expected a string");
      out = j.get<std::string>();
    } else if constexpr (std::is_integral_v<Field>) {
      if (!j.is_number_integer() || (j.is_number_integer() && !j.is_number_unsigned() &&
                                     j.get<std::int64_t>() < 0)) {
        throw ConfigError("expected a non-negative integer");
      }
      out = j.get<Field>();
    } else {
      if (!j.is_number()) throw ConfigError("expected a number");
      out = j.get<Field>();
    }
  } catch (const ConfigError& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

template <typename Section>
void read_section(const json& j, const std::string& name, Section& section) {
  if (!j.is_object()) throw ConfigError("config section '" + name + "' must be an object");
  std::set<std::string> known;
  visit_section(section, [&](const char* key, auto& field) {
    known.insert(key);
    if (j.contains(key)) read_field(j.at(key), name + "." + key, field);
  });
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + name + "." + key + "'");
  }
}

template <typename Section>
ordered_json write_section(const Section& section) {
  ordered_json out = ordered_json::object();
  visit_section(const_cast<Section&>(section), [&](const char* key, auto& field) { out[key] = field; });
  return out;
}

}  // namespace

RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "seed") {
      read_field(value, key, c.seed);
    } else if (key == "workers") {
      read_field(value, key, c.workers);
    } else if (key == "deterministic") {
      read_field(value, key, c.deterministic);
    } else if (key == "model") {
      read_section(value, key, c.model);
    } else if (key == "image") {
      read_section(value, key, c.image);
    } else if (key == "retrieval") {
      read_section(value, key, c.retrieval);
    } else if (key == "gan") {
      read_section(value, key, c.gan);
    } else if (key == "eval") {
      read_section(value, key, c.eval);
    } else if (key == "data") {
      read_section(value, key, c.data);
    } else if (key == "format_version") {
      if (value != kFormatVersion) {
        throw ConfigError("config format_version '" + value.dump() + "' is not supported");
      }
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  validate_config(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

ordered_json config_to_json(const RunConfig& c) {
  ordered_json j;
  j["format_version"] = kFormatVersion;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["deterministic"] = c.deterministic;
  j["model"] = write_section(c.model);
  j["image"] = write_section(c.image);
  j["retrieval"] = write_section(c.retrieval);
  j["gan"] = write_section(c.gan);
  j["eval"] = write_section(c.eval);
  j["data"] = write_section(c.data);
  return j;
}

void validate_config(const RunConfig& c) {
  const auto require = [](bool ok, const std::string& message) {
    if (!ok) throw ConfigError(message);
  };
  const auto& m = c.model;
  require(m.d_tok > 0 && m.d_share > 0, "model.d_tok and model.d_share must be positive");
  require(m.heads > 0 && m.d_tok % m.heads == 0, "model.d_tok must be divisible by model.heads");
  require(m.layers > 0, "model.layers must be positive");
  require(m.ffn_multiplier > 0, "model.ffn_multiplier must be positive");
  require(m.max_len >= 1, "model.max_len must be at least 1");
  require(m.dropout == 0.0, "model.dropout: only 0 is supported");
  require(m.embedding_init > 0, "model.embedding_init must be positive");

  const auto& im = c.image;
  require(im.crop_size > 0 && im.load_size >= im.crop_size,
          "image.load_size must be >= image.crop_size > 0");
  require(im.grid > 0 && im.crop_size % im.grid == 0,
          "image.crop_size must be a multiple of image.grid");
  require(im.rotation_degrees >= 0, "image.rotation_degrees must be >= 0");
  require(im.flip_probability >= 0 && im.flip_probability <= 1,
          "image.flip_probability must lie in [0,1]");
  require(im.pad_probability >= 0 && im.pad_probability <= 1,
          "image.pad_probability must lie in [0,1]");

  const auto& r = c.retrieval;
  require(r.batch_size >= 2, "retrieval.batch_size must be at least 2");
  require(r.margin >= 0, "retrieval.margin must be >= 0");
  require(r.lr_initial > 0 && r.lr_after > 0 && r.lr_after <= r.lr_initial,
          "retrieval learning rates must be positive and non-increasing");
  require(r.beta1 >= 0 && r.beta1 < 1 && r.beta2 >= 0 && r.beta2 < 1,
          "retrieval Adam betas must lie in [0,1)");
  require(r.adam_eps > 0, "retrieval.adam_eps must be positive");
  require(r.val_subsets >= 1, "retrieval.val_subsets must be at least 1");
  try {
    FieldMask::parse(r.train_mask);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("retrieval.train_mask: ") + e.what());
  }

  const auto& g = c.gan;
  require(g.batch_size >= 1, "gan.batch_size must be at least 1");
  require(g.d_ca > 0 && g.d_z > 0, "gan.d_ca and gan.d_z must be positive");
  require(g.image_size >= 4 && g.image_size % 4 == 0, "gan.image_size must be a multiple of 4");
  require(g.base_channels >= 2 && g.base_channels % 2 == 0,
          "gan.base_channels must be even and at least 2");
  require(g.lr_initial > 0 && g.lr_after > 0 && g.lr_after <= g.lr_initial,
          "gan learning rates must be positive and non-increasing");
  require(g.beta1 >= 0 && g.beta1 < 1 && g.beta2 >= 0 && g.beta2 < 1,
          "gan Adam betas must lie in [0,1)");
  require(g.adam_eps > 0, "gan.adam_eps must be positive");
  require(g.lambda_c >= 0 && g.lambda_ca >= 0 && g.lambda_ret >= 0,
          "gan loss weights must be >= 0");

  require(c.eval.pool_size >= 1 && c.eval.n_subsets >= 1,
          "eval.pool_size and eval.n_subsets must be at least 1");
}

}  // namespace xmodal
