#include "charnmt/tokenize.hpp"

#include <algorithm>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <unordered_set>

#include "charnmt/error.hpp"

namespace charnmt::inline CHARNMT_ABI {

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const auto b = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (b >= 0xF0 && b < 0xF8)
      len = 4;
    else if (b >= 0xE0)
      len = b < 0xF0 ? 3 : 1;
    else if (b >= 0xC0)
      len = 2;
    if (i + len > text.size()) len = 1;
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(text[i + k]) & 0xC0) != 0x80) {
        len = 1;
        break;
      }
    }
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

std::size_t utf8_length(std::string_view text) { return utf8_chars(text).size(); }

namespace {

std::uint32_t code_point(std::string_view ch) {
  const auto b0 = static_cast<unsigned char>(ch[0]);
  if (ch.size() == 1) return b0;
  std::uint32_t cp = ch.size() == 2 ? (b0 & 0x1F) : ch.size() == 3 ? (b0 & 0x0F) : (b0 & 0x07);
  for (std::size_t k = 1; k < ch.size(); ++k)
    cp = (cp << 6) | (static_cast<unsigned char>(ch[k]) & 0x3F);
  return cp;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (c == ' ' || c == '\t') {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

}  // namespace

const std::array<std::string, kNumSpecials>& Vocabulary::specials() {
  static const std::array<std::string, kNumSpecials> s = {"<pad>", "<s>", "</s>", "<unk>"};
  return s;
}

Vocabulary::Vocabulary(VocabKind kind, std::vector<std::string> tokens) : kind_(kind) {
  tokens_.assign(specials().begin(), specials().end());
  for (auto& t : tokens) {
    if (t.empty()) throw DataError("vocabulary: empty token");
    tokens_.push_back(std::move(t));
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw DataError("vocabulary: duplicate token '" + tokens_[i] + "'");
    if (i >= kNumSpecials) max_chars_ = std::max(max_chars_, utf8_length(tokens_[i]));
  }
}

const std::string& Vocabulary::token(int id) const {
  CHARNMT_REQUIRE(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(),
                  "vocabulary: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id_or_unk(std::string_view token) const {
  auto id = find(token);
  // a special token's spelling appearing as text is not the special itself
  if (!id || static_cast<std::size_t>(*id) < kNumSpecials) return kUnkId;
  return *id;
}

Vocabulary build_char_vocab(std::span<const std::string> lines, std::size_t cap) {
  if (cap < 1) throw ContractViolation("build_char_vocab: cap must be >= 1");
  std::map<std::string, long long> counts;
  for (const auto& line : lines)
    for (auto& ch : utf8_chars(line))
      if (ch != "\n" && ch != "\r") ++counts[ch];
  if (counts.empty()) throw DataError("build_char_vocab: corpus is empty");
  std::vector<std::pair<std::string, long long>> items(counts.begin(), counts.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return code_point(a.first) < code_point(b.first);
  });
  if (items.size() > cap) items.resize(cap);
  std::vector<std::string> tokens;
  tokens.reserve(items.size());
  for (auto& [ch, n] : items) tokens.push_back(ch);
  return Vocabulary(VocabKind::kCharacter, std::move(tokens));
}

std::vector<std::pair<std::string, long long>> word_counts(
    std::span<const std::string> lines) {
  std::map<std::string, long long> counts;
  for (const auto& line : lines)
    for (auto& w : split_words(line)) ++counts[std::string(kWordMarker) + w];
  return {counts.begin(), counts.end()};
}

namespace {

using PairKey = std::uint64_t;
PairKey pair_key(int a, int b) {
  return (static_cast<PairKey>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}
int pair_left(PairKey k) { return static_cast<int>(k >> 32); }
int pair_right(PairKey k) { return static_cast<int>(k & 0xFFFFFFFFu); }

struct BpeState {
  std::vector<std::string> symbols;
  std::unordered_map<std::string, int> symbol_ids;
  std::vector<std::vector<int>> words;
  std::vector<long long> freq;
  std::unordered_map<PairKey, long long> counts;
  std::unordered_map<PairKey, std::unordered_set<std::size_t>> where;

  int intern(const std::string& s) {
    auto [it, inserted] = symbol_ids.emplace(s, static_cast<int>(symbols.size()));
    if (inserted) symbols.push_back(s);
    return it->second;
  }

  void count_word(std::size_t w, long long sign) {
    const auto& syms = words[w];
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      const PairKey k = pair_key(syms[i], syms[i + 1]);
      long long& c = counts[k];
      c += sign * freq[w];
      if (sign > 0) where[k].insert(w);
      if (c == 0) counts.erase(k);
    }
  }
};

}  // namespace

BpeModel learn_bpe(std::span<const std::string> lines, std::size_t target_vocab_size) {
  const auto wc = word_counts(lines);
  if (wc.empty()) throw DataError("learn_bpe: corpus has no words");

  BpeState st;
  std::map<std::string, long long> char_freq;
  for (const auto& [w, n] : wc) {
    std::vector<int> syms;
    for (auto& ch : utf8_chars(w)) {
      char_freq[ch] += n;
      syms.push_back(st.intern(ch));
    }
    st.words.push_back(std::move(syms));
    st.freq.push_back(n);
  }
  if (target_vocab_size < char_freq.size())
    throw ContractViolation("learn_bpe: target vocabulary size " +
                            std::to_string(target_vocab_size) + " is below the " +
                            std::to_string(char_freq.size()) + " distinct characters");

  std::vector<std::pair<std::string, long long>> chars(char_freq.begin(), char_freq.end());
  std::stable_sort(chars.begin(), chars.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return code_point(a.first) < code_point(b.first);
  });
  std::vector<std::string> tokens;
  // specials count as existing tokens so no merge can spell one
  std::unordered_set<std::string> known(Vocabulary::specials().begin(),
                                        Vocabulary::specials().end());
  for (auto& [ch, n] : chars) {
    tokens.push_back(ch);
    known.insert(ch);
  }

  for (std::size_t w = 0; w < st.words.size(); ++w) st.count_word(w, +1);

  MergeList merges;
  while (tokens.size() < target_vocab_size) {
    PairKey best = 0;
    long long best_count = 0;
    bool found = false;
    for (const auto& [k, c] : st.counts) {
      if (c <= 0) continue;
      const std::string& l = st.symbols[static_cast<std::size_t>(pair_left(k))];
      const std::string& r = st.symbols[static_cast<std::size_t>(pair_right(k))];
      if (known.count(l + r)) continue;
      bool better = !found || c > best_count;
      if (found && c == best_count) {
        const std::string& bl = st.symbols[static_cast<std::size_t>(pair_left(best))];
        const std::string& br = st.symbols[static_cast<std::size_t>(pair_right(best))];
        better = std::tie(l, r) < std::tie(bl, br);
      }
      if (better) {
        best = k;
        best_count = c;
        found = true;
      }
    }
    if (!found) break;

    const int a = pair_left(best), b = pair_right(best);
    const std::string merged = st.symbols[static_cast<std::size_t>(a)] +
                               st.symbols[static_cast<std::size_t>(b)];
    const int m = st.intern(merged);
    merges.push_back({st.symbols[static_cast<std::size_t>(a)],
                      st.symbols[static_cast<std::size_t>(b)], merges.size()});
    tokens.push_back(merged);
    known.insert(merged);

    const auto affected = st.where[best];
    std::vector<std::size_t> order(affected.begin(), affected.end());
    std::sort(order.begin(), order.end());
    for (std::size_t w : order) {
      auto& syms = st.words[w];
      bool has = false;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i)
        if (syms[i] == a && syms[i + 1] == b) has = true;
      if (!has) continue;
      st.count_word(w, -1);
      std::vector<int> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == a && syms[i + 1] == b) {
          next.push_back(m);
          i += 2;
        } else {
          next.push_back(syms[i]);
          ++i;
        }
      }
      syms = std::move(next);
      st.count_word(w, +1);
    }
  }
  return {Vocabulary(VocabKind::kBpe, std::move(tokens)), std::move(merges)};
}

std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab) {
  std::vector<int> ids;
  if (vocab.kind() == VocabKind::kCharacter) {
    for (auto& ch : utf8_chars(text)) ids.push_back(vocab.id_or_unk(ch));
    return ids;
  }
  const std::size_t max_len = std::max<std::size_t>(vocab.max_token_chars(), 1);
  for (auto& word : split_words(text)) {
    auto chars = utf8_chars(std::string(kWordMarker) + word);
    std::size_t i = 0;
    while (i < chars.size()) {
      std::size_t take = std::min(max_len, chars.size() - i);
      int id = kUnkId;
      for (; take >= 1; --take) {
        std::string piece;
        for (std::size_t k = i; k < i + take; ++k) piece += chars[k];
        auto found = vocab.find(piece);
        if (found && static_cast<std::size_t>(*found) >= kNumSpecials) {
          id = *found;
          break;
        }
      }
      ids.push_back(id);
      i += take == 0 ? 1 : take;
    }
  }
  return ids;
}

std::string detokenize(std::span<const int> ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == kPadId || id == kBosId || id == kEosId) continue;
    out += vocab.token(id);
  }
  if (vocab.kind() == VocabKind::kCharacter) return out;
  std::string text;
  std::size_t pos = 0;
  while (pos < out.size()) {
    if (out.compare(pos, kWordMarker.size(), kWordMarker) == 0) {
      if (!text.empty()) text.push_back(' ');
      pos += kWordMarker.size();
    } else {
      text.push_back(out[pos++]);
    }
  }
  return text;
}

std::vector<std::string> apply_merges(std::string_view word, const MergeList& merges) {
  auto syms = utf8_chars(std::string(kWordMarker) + std::string(word));
  for (const auto& m : merges) {
    std::vector<std::string> next;
    for (std::size_t i = 0; i < syms.size();) {
      if (i + 1 < syms.size() && syms[i] == m.left && syms[i + 1] == m.right) {
        next.push_back(m.left + m.right);
        i += 2;
      } else {
        next.push_back(syms[i++]);
      }
    }
    syms = std::move(next);
  }
  return syms;
}

double compression_rate(std::span<const std::size_t> char_lengths,
                        std::span<const std::size_t> fragment_lengths) {
  if (char_lengths.size() != fragment_lengths.size())
    throw ContractViolation("compression_rate: sentence counts differ");
  double chars = 0, frags = 0;
  for (std::size_t i = 0; i < char_lengths.size(); ++i) {
    if (char_lengths[i] == 0 || fragment_lengths[i] == 0)
      throw DataError("compression_rate: zero-length sentence at index " + std::to_string(i));
    chars += static_cast<double>(char_lengths[i]);
    frags += static_cast<double>(fragment_lengths[i]);
  }
  if (chars == 0) throw DataError("compression_rate: no sentences");
  return frags / chars;
}

void write_vocabulary(std::ostream& os, const Vocabulary& vocab) {
  for (const auto& t : vocab.tokens()) os << t << '\n';
}

Vocabulary read_vocabulary(std::istream& is, std::optional<VocabKind> kind) {
  auto lines = read_lines(is);
  if (lines.size() < kNumSpecials) throw DataError("vocabulary file: missing specials");
  for (std::size_t i = 0; i < kNumSpecials; ++i)
    if (lines[i] != Vocabulary::specials()[i])
      throw DataError("vocabulary file: line " + std::to_string(i + 1) + " must be " +
                      Vocabulary::specials()[i]);
  std::vector<std::string> tokens(lines.begin() + kNumSpecials, lines.end());
  if (!kind) {
    kind = VocabKind::kCharacter;
    for (const auto& t : tokens)
      if (t.find(kWordMarker) != std::string::npos) kind = VocabKind::kBpe;
  }
  return Vocabulary(*kind, std::move(tokens));
}

void write_merges(std::ostream& os, const MergeList& merges) {
  for (const auto& m : merges) os << m.left << '\t' << m.right << '\n';
}

MergeList read_merges(std::istream& is) {
  MergeList merges;
  auto lines = read_lines(is);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto tab = lines[i].find('\t');
    if (tab == std::string::npos || lines[i].find('\t', tab + 1) != std::string::npos)
      throw DataError("merge file: line " + std::to_string(i + 1) +
                      " is not 'left<TAB>right'");
    merges.push_back({lines[i].substr(0, tab), lines[i].substr(tab + 1), i});
  }
  return merges;
}

std::vector<std::string> read_lines(std::istream& is) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

}  // namespace charnmt
