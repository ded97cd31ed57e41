#include "xmodal/tokenizer.hpp"

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include <fstream>

#include "xmodal/errors.hpp"

namespace xmodal {

namespace {

bool is_bracketed(const std::string& tok) {
  return tok.size() >= 2 && tok.front() == '[' && tok.back() == ']';
}

std::string nfc(std::string_view text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* norm = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) return std::string(text);
  const auto src = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  if (norm->isNormalized(src, status) && U_SUCCESS(status)) return std::string(text);
  status = U_ZERO_ERROR;
  icu::UnicodeString dst = norm->normalize(src, status);
  if (U_FAILURE(status)) return std::string(text);
  std::string out;
  dst.toUTF8String(out);
  return out;
}

struct CodePoint {
  UChar32 value;
  std::size_t begin;
  std::size_t end;
};

std::vector<CodePoint> code_points(std::string_view s) {
  std::vector<CodePoint> out;
  const auto* p = reinterpret_cast<const uint8_t*>(s.data());
  const auto len = static_cast<int32_t>(s.size());
  int32_t i = 0;
  while (i < len) {
    const int32_t begin = i;
    UChar32 c;
    U8_NEXT(p, i, len, c);
    out.push_back({c, static_cast<std::size_t>(begin), static_cast<std::size_t>(i)});
  }
  return out;
}

bool is_space(UChar32 c) {
  if (c < 0) return false;
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || u_isUWhiteSpace(c);
}

bool is_punct(UChar32 c) {
  if (c < 0) return false;
  if (c < 128) return std::ispunct(static_cast<int>(c)) != 0;
  return u_ispunct(c);
}

}  // namespace

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens,
                                   std::string continuation_prefix) {
  Vocabulary v;
  v.prefix_ = std::move(continuation_prefix);
  v.index_.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].empty()) {
      throw DataError("vocabulary: empty token at line " + std::to_string(i + 1));
    }
    if (!v.index_.emplace(tokens[i], i).second) {
      throw DataError("vocabulary: duplicate token '" + tokens[i] + "' at line " +
                      std::to_string(i + 1));
    }
  }
  v.tokens_ = std::move(tokens);
  const auto require = [&](std::string_view name) {
    auto it = v.index_.find(std::string(name));
    if (it == v.index_.end()) {
      throw DataError("vocabulary: missing special token " + std::string(name));
    }
    return it->second;
  };
  v.cls_ = require(kClsToken);
  v.unk_ = require(kUnkToken);
  v.pad_ = require(kPadToken);
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

std::optional<std::size_t> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

bool Vocabulary::is_special(std::size_t id) const {
  return is_bracketed(tokens_.at(id));
}

bool Vocabulary::is_continuation(std::size_t id) const {
  const auto& t = tokens_.at(id);
  return !prefix_.empty() && t.size() > prefix_.size() && t.starts_with(prefix_);
}

std::vector<std::string> Vocabulary::word_tokens() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!is_special(i) && !is_continuation(i)) out.push_back(tokens_[i]);
  }
  return out;
}

std::vector<std::string> pre_tokenize(std::string_view text) {
  const std::string normalized = nfc(text);
  const auto cps = code_points(normalized);
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < cps.size()) {
    if (is_space(cps[i].value)) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < cps.size() && !is_space(cps[j].value)) ++j;
    // chunk is cps[i, j)
    std::size_t lo = i, hi = j;
    std::vector<std::string> trailing;
    while (lo < hi && is_punct(cps[lo].value)) {
      words.emplace_back(normalized.substr(cps[lo].begin, cps[lo].end - cps[lo].begin));
      ++lo;
    }
    while (hi > lo && is_punct(cps[hi - 1].value)) {
      --hi;
      trailing.emplace_back(normalized.substr(cps[hi].begin, cps[hi].end - cps[hi].begin));
    }
    if (lo < hi) {
      words.emplace_back(normalized.substr(cps[lo].begin, cps[hi - 1].end - cps[lo].begin));
    }
    words.insert(words.end(), trailing.rbegin(), trailing.rend());
    i = j;
  }
  return words;
}

std::vector<std::size_t> wordpiece(std::string_view word, const Vocabulary& vocab) {
  const auto cps = code_points(word);
  if (cps.empty()) return {};
  if (cps.size() > kMaxCharsPerWord) return {vocab.unk_id()};
  std::vector<std::size_t> pieces;
  std::size_t start = 0;
  std::string candidate;
  while (start < cps.size()) {
    std::optional<std::size_t> match;
    std::size_t end = cps.size();
    for (; end > start; --end) {
      const std::size_t b = cps[start].begin;
      const std::size_t e = cps[end - 1].end;
      candidate.clear();
      if (start > 0) candidate = vocab.continuation_prefix();
      candidate.append(word.substr(b, e - b));
      match = vocab.find(candidate);
      if (match) break;
    }
    if (!match) return {vocab.unk_id()};
    pieces.push_back(*match);
    start = end;
  }
  return pieces;
}

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenSequence seq;
  for (auto& word : pre_tokenize(text)) {
    const auto pieces = wordpiece(word, vocab);
    const std::size_t start = seq.ids.size();
    seq.ids.insert(seq.ids.end(), pieces.begin(), pieces.end());
    seq.word_spans.push_back({start, seq.ids.size()});
    seq.words.push_back(std::move(word));
  }
  return seq;
}

TokenSequence encode_recipe(std::string_view text, const Vocabulary& vocab,
                            std::size_t max_len) {
  if (max_len == 0) throw ConfigError("max_len must be at least 1 to hold [CLS]");
  const TokenSequence raw = tokenize(text, vocab);
  TokenSequence seq;
  seq.ids.push_back(vocab.cls_id());
  for (std::size_t w = 0; w < raw.word_spans.size(); ++w) {
    const WordSpan span = raw.word_spans[w];
    if (seq.ids.size() + span.size() > max_len) break;
    const std::size_t start = seq.ids.size();
    seq.ids.insert(seq.ids.end(), raw.ids.begin() + static_cast<std::ptrdiff_t>(span.start),
                   raw.ids.begin() + static_cast<std::ptrdiff_t>(span.end));
    seq.word_spans.push_back({start, seq.ids.size()});
    seq.words.push_back(raw.words[w]);
  }
  return seq;
}

}  // namespace xmodal
