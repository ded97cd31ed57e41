#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "xmodal/config.hpp"
#include "xmodal/corpus.hpp"
#include "xmodal/encoders.hpp"
#include "xmodal/errors.hpp"
#include "xmodal/evaluation.hpp"
#include "xmodal/synthesis.hpp"
#include "xmodal/tokenizer.hpp"
#include "xmodal/training.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kNumerical = 4 };

struct Common {
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::optional<std::size_t> workers;
  std::string log_level = "info";

  void attach(CLI::App* cmd) {
    cmd->add_option("--seed", seed, "Random seed");
    cmd->add_flag("--deterministic", deterministic, "Single-threaded, reproducible execution");
    cmd->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--log-level", log_level, "trace|debug|info|warn|error|off");
  }

  std::size_t worker_count() const { return deterministic ? 1 : workers.value_or(1); }

  void apply(xmodal::RunConfig& config) const {
    if (seed) config.seed = *seed;
    if (workers) config.workers = *workers;
    if (deterministic) config.deterministic = true;
  }
};

void write_json(const ordered_json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw xmodal::DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw xmodal::DataError("failed writing " + path.string());
}

xmodal::RunConfig config_from_ordered(const ordered_json& j) {
  return xmodal::config_from_json(nlohmann::json::parse(j.dump()));
}

fs::path sibling_or(const std::string& configured, const fs::path& corpus, const char* name) {
  return configured.empty() ? corpus.parent_path() / name : fs::path(configured);
}

std::vector<xmodal::PairedSample> load_split_samples(const std::vector<xmodal::PairedSample>& all,
                                                     const xmodal::SplitManifest& split,
                                                     const std::string& which) {
  if (which == "train") return xmodal::select_samples(all, split.train);
  if (which == "validation" || which == "val") return xmodal::select_samples(all, split.validation);
  if (which == "test") return xmodal::select_samples(all, split.test);
  if (which == "all") return all;
  throw xmodal::ConfigError("unknown split '" + which + "' (train|validation|test|all)");
}

// "1k", "10k", "N" (every sample) or a positive integer; 0 stands for N.
std::size_t parse_pool(const std::string& text) {
  if (text == "N" || text == "n" || text == "all") return 0;
  if (text == "1k") return 1000;
  if (text == "10k") return 10000;
  std::size_t pos = 0;
  unsigned long long value = 0;
  try {
    value = std::stoull(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != text.size() || value == 0) {
    throw xmodal::ConfigError("bad --pool '" + text + "' (1k|10k|N|positive integer)");
  }
  return static_cast<std::size_t>(value);
}

std::array<double, 3> parse_fractions(const std::string& text) {
  std::array<double, 3> f{};
  std::stringstream ss(text);
  std::string part;
  std::size_t k = 0;
  while (std::getline(ss, part, ',')) {
    if (k == 3) break;
    try {
      f[k++] = std::stod(part);
    } catch (const std::exception&) {
      throw xmodal::ConfigError("bad --split-fractions '" + text + "'");
    }
  }
  if (k != 3 || std::getline(ss, part, ',')) {
    throw xmodal::ConfigError("--split-fractions needs three comma-separated values");
  }
  return f;
}

ordered_json envelope(const char* kind, const ordered_json& config) {
  ordered_json j;
  j["format_version"] = xmodal::kFormatVersion;
  j["kind"] = kind;
  j["config"] = config;
  return j;
}

// ---------------------------------------------------------------------------

struct GenToy {
  Common common;
  fs::path out;
  std::size_t samples = 512;
  std::size_t classes = 8;
  std::size_t feature_dim = 64;
  std::size_t vocab_size = 200;
  bool pixels = false;
  std::size_t image_size = 32;
  std::size_t grid = 4;
  std::string fractions = "0.7,0.05,0.25";

  void attach(CLI::App& app) {
    auto* cmd = app.add_subcommand("gen-toy", "Generate a synthetic multilingual toy corpus");
    common.attach(cmd);
    cmd->add_option("--out", out, "Output directory")->required();
    cmd->add_option("--samples", samples, "Number of paired samples");
    cmd->add_option("--classes", classes, "Number of classes");
    cmd->add_option("--feature-dim", feature_dim, "Image feature length (feature mode)");
    cmd->add_option("--vocab-size", vocab_size, "Total vocabulary size");
    cmd->add_flag("--pixels", pixels, "Emit PNG images instead of feature vectors");
    cmd->add_option("--image-size", image_size, "PNG side length (pixel mode)");
    cmd->add_option("--grid", grid, "Colour cells per side (pixel mode)");
    cmd->add_option("--split-fractions", fractions, "train,validation,test fractions");
    cmd->callback([this] { run(); });
  }

  void run() {
    const std::size_t overhead = xmodal::make_toy_vocabulary(0).size();
    if (vocab_size <= overhead) {
      throw xmodal::ConfigError("--vocab-size must exceed " + std::to_string(overhead));
    }
    const auto vocab = xmodal::make_toy_vocabulary(vocab_size - overhead);
    xmodal::ToyCorpusOptions opts;
    opts.seed = common.seed.value_or(1);
    opts.n_samples = samples;
    opts.n_classes = classes;
    opts.feature_dim = feature_dim;
    opts.image_mode = pixels ? xmodal::ImageMode::pixels : xmodal::ImageMode::feature;
    opts.image_size = image_size;
    opts.grid = grid;
    const auto corpus = xmodal::generate_toy_corpus(opts, vocab);
    const auto split = xmodal::split_corpus(corpus, parse_fractions(fractions), opts.seed);

    fs::create_directories(out);
    xmodal::save_corpus(corpus, out / "corpus.jsonl");
    xmodal::save_split(split, out / "split.json");
    vocab.save(out / "vocab.txt");

    ordered_json cfg;
    cfg["seed"] = opts.seed;
    cfg["samples"] = samples;
    cfg["classes"] = classes;
    cfg["feature_dim"] = feature_dim;
    cfg["vocab_size"] = vocab.size();
    cfg["image_mode"] = pixels ? "pixels" : "feature";
    cfg["image_size"] = image_size;
    cfg["grid"] = grid;
    cfg["split_fractions"] = parse_fractions(fractions);
    auto manifest = envelope("toy-corpus", cfg);
    manifest["files"] = {{"corpus", "corpus.jsonl"}, {"split", "split.json"},
                         {"vocab", "vocab.txt"}};
    manifest["split_sizes"] = {{"train", split.train.size()},
                               {"validation", split.validation.size()},
                               {"test", split.test.size()}};
    write_json(manifest, out / "manifest.json");
    spdlog::info("wrote {} samples ({} train / {} validation / {} test) to {}", corpus.size(),
                 split.train.size(), split.validation.size(), split.test.size(), out.string());
  }
};

struct TrainRetrieval {
  Common common;
  fs::path config_path, corpus, out;

  void attach(CLI::App& app) {
    auto* cmd = app.add_subcommand("train-retrieval", "Train the joint embedding");
    common.attach(cmd);
    cmd->add_option("--config", config_path, "JSON run config (defaults when omitted)");
    cmd->add_option("--corpus", corpus, "Corpus JSONL")->required();
    cmd->add_option("--out", out, "Output directory")->required();
    cmd->callback([this] { run(); });
  }

  void run() {
    auto config = config_path.empty() ? xmodal::RunConfig{} : xmodal::load_config(config_path);
    common.apply(config);
    xmodal::validate_config(config);
    const auto vocab = xmodal::Vocabulary::load(sibling_or(config.data.vocab, corpus, "vocab.txt"));
    const auto all = xmodal::load_corpus(corpus);
    const auto split = xmodal::load_split(sibling_or(config.data.split, corpus, "split.json"));
    const auto train = xmodal::select_samples(all, split.train);
    const auto validation = xmodal::select_samples(all, split.validation);
    const auto result = xmodal::train_retrieval(train, validation, vocab, config, out);
    spdlog::info("final checkpoint {}", result.final_checkpoint.string());
  }
};

struct EvalRetrieval {
  Common common;
  fs::path checkpoint, corpus, out, embeddings;
  std::string pool = "N";
  std::string language;
  std::string mask = "all";
  std::string split = "test";
  std::optional<std::size_t> subsets;

  void attach(CLI::App& app) {
    auto* cmd = app.add_subcommand("eval-retrieval", "Retrieval metrics of a checkpoint");
    common.attach(cmd);
    cmd->add_option("--checkpoint", checkpoint, "Retrieval checkpoint")->required();
    cmd->add_option("--corpus", corpus, "Corpus JSONL")->required();
    cmd->add_option("--pool", pool, "1k|10k|N|integer");
    cmd->add_option("--language", language, "EN|DE|RU|FR|KO (EN original when omitted)");
    cmd->add_option("--ablate-mask", mask, "Recipe components kept, e.g. title,ingredients");
    cmd->add_option("--split", split, "train|validation|test|all");
    cmd->add_option("--subsets", subsets, "Number of evaluation pools");
    cmd->add_option("--out", out, "Report JSON")->required();
    cmd->add_option("--embeddings", embeddings, "Also write embeddings as TSV");
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto ck = xmodal::load_retrieval_checkpoint(checkpoint);
    const auto config = config_from_ordered(ck.config);
    const auto all = xmodal::load_corpus(corpus);
    const auto manifest = xmodal::load_split(sibling_or(config.data.split, corpus, "split.json"));
    const auto samples = load_split_samples(all, manifest, split);

    xmodal::EmbedOptions opts;
    if (!language.empty()) opts.language = xmodal::parse_language(language);
    opts.mask = xmodal::FieldMask::parse(mask);
    opts.workers = common.worker_count();
    const auto set = xmodal::embed_samples(ck.model, ck.vocab, samples, opts);
    if (set.ids.empty()) throw xmodal::DataError("no sample left to evaluate");
    const std::size_t requested = parse_pool(pool);
    const std::size_t pool_size = requested == 0 ? set.ids.size() : requested;
    const std::uint64_t seed = common.seed.value_or(config.eval.seed);
    const std::size_t n_subsets = subsets.value_or(config.eval.n_subsets);
    const auto report = xmodal::retrieval_report(set.images, set.recipes, pool_size, n_subsets,
                                                 seed, opts.workers);

    auto j = envelope("retrieval-report", ck.config);
    j["evaluation"] = {{"checkpoint", checkpoint.string()},
                       {"checkpoint_epoch", ck.epoch},
                       {"corpus", corpus.string()},
                       {"split", split},
                       {"pool", pool},
                       {"pool_size", pool_size},
                       {"n_subsets", n_subsets},
                       {"seed", seed},
                       {"language", language.empty() ? "EN" : language},
                       {"mask", opts.mask.to_string()},
                       {"evaluated", set.ids.size()},
                       {"skipped", set.skipped.size()}};
    j["report"] = xmodal::report_to_json(report);
    write_json(j, out);
    if (!embeddings.empty()) xmodal::write_embeddings_tsv(set, embeddings);
    spdlog::info("image->recipe medR {:.2f} R@1 {:.3f} | recipe->image medR {:.2f} R@1 {:.3f}",
                 report.i2r.medR, report.i2r.r1, report.r2i.medR, report.r2i.r1);
  }
};

struct TrainGan {
  Common common;
  fs::path config_path, corpus, retrieval, out;

  void attach(CLI::App& app) {
    auto* cmd = app.add_subcommand("train-gan", "Train the conditional image generator");
    common.attach(cmd);
    cmd->add_option("--config", config_path, "JSON run config (defaults when omitted)");
    cmd->add_option("--corpus", corpus, "Pixel-mode corpus JSONL")->required();
    cmd->add_option("--retrieval-checkpoint", retrieval, "Frozen retrieval model")->required();
    cmd->add_option("--out", out, "Output directory")->required();
    cmd->callback([this] { run(); });
  }

  void run() {
    auto config = config_path.empty() ? xmodal::RunConfig{} : xmodal::load_config(config_path);
    common.apply(config);
    xmodal::validate_config(config);
    const auto ck = xmodal::load_retrieval_checkpoint(retrieval);
    const auto all = xmodal::load_corpus(corpus);
    const auto split = xmodal::load_split(sibling_or(config.data.split, corpus, "split.json"));
    const auto train = xmodal::select_samples(all, split.train);
    const auto result = xmodal::train_gan(train, ck.model, ck.vocab, config, out);
    spdlog::info("final checkpoint {}", result.final_checkpoint.string());
  }
};

struct EvalSynthesis {
  Common common;
  fs::path generator, retrieval, corpus, out, dump_dir;
  std::string source = "recipe";
  std::string pool = "N";
  std::string split = "test";
  std::optional<std::size_t> subsets;
  std::uint64_t z_seed = 0;
  bool oracle = false;

  void attach(CLI::App& app) {
    auto* cmd = app.add_subcommand("eval-synthesis", "Retrieval and FID of generated images");
    common.attach(cmd);
    cmd->add_option("--source", source, "recipe|image conditioning embedding")
        ->check(CLI::IsMember({"recipe", "image"}));
    cmd->add_option("--generator", generator, "Synthesis checkpoint");
    cmd->add_flag("--oracle-generator", oracle, "Use the paired real image instead");
    cmd->add_option("--retrieval-checkpoint", retrieval, "Retrieval model")->required();
    cmd->add_option("--corpus", corpus, "Pixel-mode corpus JSONL")->required();
    cmd->add_option("--pool", pool, "1k|10k|N|integer");
    cmd->add_option("--split", split, "train|validation|test|all");
    cmd->add_option("--subsets", subsets, "Number of evaluation pools");
    cmd->add_option("--z-seed", z_seed, "Seed of the generator noise");
    cmd->add_option("--dump-dir", dump_dir, "Write generated PNGs and an index here");
    cmd->add_option("--out", out, "Report JSON")->required();
    cmd->callback([this] { run(); });
  }

  void run() {
    if (!oracle && generator.empty()) {
      throw xmodal::ConfigError("--generator is required unless --oracle-generator is given");
    }
    const auto ck = xmodal::load_retrieval_checkpoint(retrieval);
    const auto config = config_from_ordered(ck.config);
    std::optional<xmodal::SynthesisModel<float>> gen;
    if (!oracle) gen = xmodal::load_synthesis_checkpoint(generator);
    const auto all = xmodal::load_corpus(corpus);
    const auto manifest = xmodal::load_split(sibling_or(config.data.split, corpus, "split.json"));
    const auto samples = load_split_samples(all, manifest, split);

    xmodal::SynthesisEvalOptions opts;
    opts.source = source == "image" ? xmodal::SynthesisSource::image
                                    : xmodal::SynthesisSource::recipe;
    opts.pool_size = parse_pool(pool);
    opts.n_subsets = subsets.value_or(config.eval.n_subsets);
    opts.seed = common.seed.value_or(config.eval.seed);
    opts.z_seed = z_seed;
    opts.workers = common.worker_count();
    opts.oracle = oracle;
    if (!dump_dir.empty()) opts.dump_dir = dump_dir;
    const auto report = xmodal::synthesis_eval(gen ? &*gen : nullptr, ck.model, ck.vocab, samples,
                                               opts);

    auto j = envelope("synthesis-report", ck.config);
    j["evaluation"] = {{"generator", oracle ? "oracle" : generator.string()},
                       {"retrieval_checkpoint", retrieval.string()},
                       {"corpus", corpus.string()},
                       {"split", split},
                       {"source", source},
                       {"pool", pool},
                       {"n_subsets", opts.n_subsets},
                       {"seed", opts.seed},
                       {"z_seed", z_seed},
                       {"samples", report.n_samples}};
    j["report"] = xmodal::report_to_json(report.retrieval);
    j["fid"] = report.fid;
    write_json(j, out);
    spdlog::info("synthetic image->recipe medR {:.2f} R@1 {:.3f}, FID {:.4f}",
                 report.retrieval.i2r.medR, report.retrieval.i2r.r1, report.fid);
  }
};

struct Tokenize {
  Common common;
  fs::path vocab;
  std::string text;
  std::size_t max_len = xmodal::kDefaultMaxLen;

  void attach(CLI::App& app) {
    auto* cmd = app.add_subcommand("tokenize", "Print the WordPiece encoding of a text");
    common.attach(cmd);
    cmd->add_option("--vocab", vocab, "Vocabulary file")->required();
    cmd->add_option("--text", text, "Input text")->required();
    cmd->add_option("--max-len", max_len, "Maximum sequence length");
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto v = xmodal::Vocabulary::load(vocab);
    const auto seq = xmodal::encode_recipe(text, v, max_len);
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
      std::cout << (i ? " " : "") << v.token(seq.ids[i]);
    }
    std::cout << '\n';
    for (std::size_t w = 0; w < seq.word_spans.size(); ++w) {
      std::cout << seq.words[w] << '\t' << seq.word_spans[w].start << '\t'
                << seq.word_spans[w].end << '\n';
    }
  }
};

struct Attn {
  Common common;
  fs::path checkpoint;
  std::string text;

  void attach(CLI::App& app) {
    auto* cmd = app.add_subcommand("attn", "Per-word attention rollout of the recipe encoder");
    common.attach(cmd);
    cmd->add_option("--checkpoint", checkpoint, "Retrieval checkpoint")->required();
    cmd->add_option("--text", text, "Recipe text")->required();
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto ck = xmodal::load_retrieval_checkpoint(checkpoint);
    const auto seq = xmodal::encode_recipe(text, ck.vocab, ck.model.dims.max_len);
    xmodal::AttentionMap attention;
    xmodal::embed_recipe(ck.model, seq, &attention);
    if (seq.word_spans.empty()) return;
    const auto weights = xmodal::attention_rollout(attention, seq.word_spans);
    std::cout << std::fixed << std::setprecision(6);
    for (std::size_t w = 0; w < weights.size(); ++w) {
      std::cout << seq.words[w] << '\t' << weights[w] << '\n';
    }
  }
};

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_color_mt("xmodal");
  spdlog::set_default_logger(logger);

  CLI::App app{"Cross-modal recipe/image embedding and synthesis"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(xmodal::kFormatVersion));

  GenToy gen_toy;
  TrainRetrieval train_retrieval;
  EvalRetrieval eval_retrieval;
  TrainGan train_gan;
  EvalSynthesis eval_synthesis;
  Tokenize tokenize;
  Attn attn;
  gen_toy.attach(app);
  train_retrieval.attach(app);
  eval_retrieval.attach(app);
  train_gan.attach(app);
  eval_synthesis.attach(app);
  tokenize.attach(app);
  attn.attach(app);

  // Log level must be in place before the callbacks run.
  app.parse_complete_callback([&] {
    for (const Common* c : {&gen_toy.common, &train_retrieval.common, &eval_retrieval.common,
                            &train_gan.common, &eval_synthesis.common, &tokenize.common,
                            &attn.common}) {
      if (c->log_level != "info") spdlog::set_level(spdlog::level::from_str(c->log_level));
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  } catch (const xmodal::ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kConfig;
  } catch (const xmodal::DataError& e) {
    spdlog::error("data error: {}", e.what());
    return kData;
  } catch (const xmodal::NumericalError& e) {
    spdlog::error("numerical error: {}", e.what());
    return kNumerical;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kInternal;
  }
  return kOk;
}
