#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace xmodal {

inline constexpr std::string_view kClsToken = "[CLS]";
inline constexpr std::string_view kUnkToken = "[UNK]";
inline constexpr std::string_view kPadToken = "[PAD]";

// WordPiece vocabulary in the BERT text format: one token per line, id equal
// to the zero-based line index. Immutable once built.
class Vocabulary {
 public:
  static Vocabulary load(const std::filesystem::path& path);
  static Vocabulary from_tokens(std::vector<std::string> tokens,
                                std::string continuation_prefix = "##");

  void save(const std::filesystem::path& path) const;

  std::optional<std::size_t> find(std::string_view token) const;
  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& continuation_prefix() const { return prefix_; }

  std::size_t cls_id() const { return cls_; }
  std::size_t unk_id() const { return unk_; }
  std::size_t pad_id() const { return pad_; }

  bool is_special(std::size_t id) const;
  bool is_continuation(std::size_t id) const;
  // Word-initial, non-special tokens in id order.
  std::vector<std::string> word_tokens() const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
  std::string prefix_ = "##";
  std::size_t cls_ = 0, unk_ = 0, pad_ = 0;
};

// Half-open piece-index range [start, end) covering one source word.
struct WordSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - start; }
  friend bool operator==(const WordSpan&, const WordSpan&) = default;
};

struct TokenSequence {
  std::vector<std::size_t> ids;
  std::vector<WordSpan> word_spans;
  // Source word for each span, as produced by pre-tokenization.
  std::vector<std::string> words;

  std::size_t length() const { return ids.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

inline constexpr std::size_t kDefaultMaxLen = 512;
inline constexpr std::size_t kMaxCharsPerWord = 100;

// NFC-normalizes, splits on whitespace, and splits leading/trailing
// punctuation characters off each chunk as words of their own.
std::vector<std::string> pre_tokenize(std::string_view text);

// Greedy longest-match-first WordPiece segmentation of one word. A word with
// an unmatchable remainder (or longer than kMaxCharsPerWord code points)
// becomes a single [UNK].
std::vector<std::size_t> wordpiece(std::string_view word, const Vocabulary& vocab);

// Pieces for the whole text without [CLS]; spans index into ids from 0.
TokenSequence tokenize(std::string_view text, const Vocabulary& vocab);

// [CLS] followed by whole words while the total length stays <= max_len.
// Spans index into ids, so the first word starts at 1.
TokenSequence encode_recipe(std::string_view text, const Vocabulary& vocab,
                            std::size_t max_len = kDefaultMaxLen);

}  // namespace xmodal
