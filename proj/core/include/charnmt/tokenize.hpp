#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "charnmt/abi.hpp"

namespace charnmt::inline CHARNMT_ABI {

enum class VocabKind { kCharacter, kBpe };

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr std::size_t kNumSpecials = 4;

// Prefixed to every word before BPE segmentation (U+2581).
inline constexpr std::string_view kWordMarker = "\xE2\x96\x81";

// Splits UTF-8 text into code points, each as its own byte string.
// Invalid bytes are passed through one at a time.
std::vector<std::string> utf8_chars(std::string_view text);
std::size_t utf8_length(std::string_view text);

// Bidirectional token <-> id map. Specials occupy ids 0..3.
class Vocabulary {
 public:
  static const std::array<std::string, kNumSpecials>& specials();

  Vocabulary() : Vocabulary(VocabKind::kCharacter, {}) {}
  // `tokens` excludes the specials; duplicates are rejected.
  Vocabulary(VocabKind kind, std::vector<std::string> tokens);

  VocabKind kind() const noexcept { return kind_; }
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(int id) const;
  std::optional<int> find(std::string_view token) const;
  int id_or_unk(std::string_view token) const;
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  // Longest token length in code points (specials excluded).
  std::size_t max_token_chars() const noexcept { return max_chars_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.kind_ == b.kind_ && a.tokens_ == b.tokens_;
  }

 private:
  VocabKind kind_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::size_t max_chars_ = 0;
};

struct Merge {
  std::string left;
  std::string right;
  std::size_t rank = 0;
};
using MergeList = std::vector<Merge>;

// The `cap` most frequent characters over all lines; ties go to the lower
// code point.
Vocabulary build_char_vocab(std::span<const std::string> lines, std::size_t cap);

struct BpeModel {
  Vocabulary vocab;
  MergeList merges;
};

// Whitespace-split words, each prefixed with kWordMarker, with counts.
std::vector<std::pair<std::string, long long>> word_counts(
    std::span<const std::string> lines);

// Greedy pair merging until `target_vocab_size` non-special tokens exist.
// Each step merges the most frequent adjacent pair whose concatenation is not
// yet a token; count ties break on the lexicographically smaller
// (left, right) pair. Stops early if no pair remains.
BpeModel learn_bpe(std::span<const std::string> lines, std::size_t target_vocab_size);

// Character kind: one id per code point. BPE kind: per word, greedy longest
// vocabulary match from the left after prefixing the word marker.
// Unknown characters become kUnkId.
std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab);
std::string detokenize(std::span<const int> ids, const Vocabulary& vocab);

// Applies merges in rank order to each word (reference segmentation).
std::vector<std::string> apply_merges(std::string_view word, const MergeList& merges);

// total fragments / total characters (1.0 for character tokenisation).
double compression_rate(std::span<const std::size_t> char_lengths,
                        std::span<const std::size_t> fragment_lengths);

void write_vocabulary(std::ostream& os, const Vocabulary& vocab);
// Kind is BPE when any token carries the word marker, unless given.
Vocabulary read_vocabulary(std::istream& is, std::optional<VocabKind> kind = {});
void write_merges(std::ostream& os, const MergeList& merges);
MergeList read_merges(std::istream& is);

// One sentence per line; trailing CR stripped.
std::vector<std::string> read_lines(std::istream& is);

}  // namespace charnmt
