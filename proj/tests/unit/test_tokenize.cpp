#include <doctest.h>

#include <sstream>

#include "charnmt/error.hpp"
#include "charnmt/random.hpp"
#include "charnmt/tokenize.hpp"
#include "oracles.hpp"

using namespace charnmt;

namespace {

const std::string M = std::string(kWordMarker);

std::vector<std::string> repeat(const std::string& word, int n) {
  return std::vector<std::string>(static_cast<std::size_t>(n), word);
}

std::vector<std::string> concat(std::initializer_list<std::vector<std::string>> parts) {
  std::vector<std::string> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

}  // namespace

TEST_SUITE("tokenize") {

TEST_CASE("char vocabulary keeps the most frequent characters after the specials") {
  const std::vector<std::string> corpus{"aab"};
  const Vocabulary v = build_char_vocab(corpus, 2);
  REQUIRE(v.size() == 6);
  CHECK(v.token(0) == "<pad>");
  CHECK(v.token(4) == "a");
  CHECK(v.token(5) == "b");
  CHECK(build_char_vocab(corpus, 1).size() == 5);
}

TEST_CASE("char vocabulary ties go to the lower code point") {
  const std::vector<std::string> corpus{"zyxzyx"};
  const Vocabulary v = build_char_vocab(corpus, 2);
  CHECK(v.token(4) == "x");
  CHECK(v.token(5) == "y");
}

TEST_CASE("char vocabulary cap 496 gives at most 500 ids") {
  std::string line;
  for (char32_t cp = 0x100; cp < 0x100 + 700; ++cp) {
    // two-byte UTF-8 encoding
    line += static_cast<char>(0xC0 | (cp >> 6));
    line += static_cast<char>(0x80 | (cp & 0x3F));
  }
  const std::vector<std::string> corpus{line};
  const Vocabulary v = build_char_vocab(corpus, 496);
  CHECK(v.size() == 500);
}

TEST_CASE("utf8 splitting counts code points") {
  CHECK(utf8_length("h\xC3\xA9llo") == 5);
  CHECK(utf8_chars("\xE2\x96\x81x").size() == 2);
}

TEST_CASE("first merge on abab/ab is (a, b)") {
  const std::vector<std::string> corpus{"abab", "ab"};
  // initial symbols: marker, a, b
  const BpeModel m = learn_bpe(corpus, 4);
  REQUIRE(m.merges.size() == 1);
  CHECK(m.merges[0].left == "a");
  CHECK(m.merges[0].right == "b");
  const auto oracle = oracle::brute_force_bpe(corpus, 4);
  REQUIRE(oracle.size() == 1);
  CHECK(oracle[0].left == "a");
}

TEST_CASE("target size equal to the distinct characters learns no merges") {
  const std::vector<std::string> corpus{"abc cab"};
  CHECK(learn_bpe(corpus, 4).merges.empty());  // marker, a, b, c
  CHECK_THROWS_AS(learn_bpe(corpus, 3), ContractViolation);
}

TEST_CASE("classic corpus: first merge is (e, s) with count 9, ties broken lexicographically") {
  const auto corpus = concat({repeat("low", 5), repeat("lower", 2), repeat("newest", 6),
                              repeat("widest", 3)});
  const auto wc = word_counts(corpus);
  CHECK(wc.size() == 4);
  const BpeModel base = learn_bpe(corpus, 1000000);
  // (e, s) and (s, t) both occur 9 times; (e, s) sorts first.
  CHECK(base.merges.at(0).left == "e");
  CHECK(base.merges.at(0).right == "s");
  const auto oracle = oracle::brute_force_bpe(corpus, 1000000);
  REQUIRE(oracle.size() == base.merges.size());
  for (std::size_t i = 0; i < oracle.size(); ++i) {
    CHECK(oracle[i].left == base.merges[i].left);
    CHECK(oracle[i].right == base.merges[i].right);
  }
}

TEST_CASE("learned merges match the brute-force oracle on a random corpus") {
  Rng rng(21);
  std::vector<std::string> corpus;
  for (int i = 0; i < 40; ++i) {
    std::string line;
    const int words = 1 + static_cast<int>(rng() % 4);
    for (int w = 0; w < words; ++w) {
      if (w) line += ' ';
      const int len = 1 + static_cast<int>(rng() % 6);
      for (int k = 0; k < len; ++k) line += static_cast<char>('a' + rng() % 4);
    }
    corpus.push_back(line);
  }
  const BpeModel m = learn_bpe(corpus, 40);
  const auto oracle = oracle::brute_force_bpe(corpus, 40);
  REQUIRE(oracle.size() == m.merges.size());
  for (std::size_t i = 0; i < oracle.size(); ++i) {
    CHECK(oracle[i].left == m.merges[i].left);
    CHECK(oracle[i].right == m.merges[i].right);
    CHECK(m.merges[i].rank == i);
  }
}

TEST_CASE("longest match from the left") {
  const Vocabulary v(VocabKind::kBpe, {M, "a", "b", "c", "ab", "bc", M + "ab"});
  const auto ids = tokenize("abc", v);
  REQUIRE(ids.size() == 2);
  CHECK(v.token(ids[0]) == M + "ab");
  CHECK(v.token(ids[1]) == "c");

  const Vocabulary plain(VocabKind::kBpe, {M, "a", "b", "c", "ab", "bc"});
  const auto p = tokenize("abc", plain);
  REQUIRE(p.size() == 3);
  CHECK(plain.token(p[0]) == M);
  CHECK(plain.token(p[1]) == "ab");
  CHECK(plain.token(p[2]) == "c");
  CHECK(detokenize(p, plain) == "abc");
}

TEST_CASE("character round trip and unknown characters") {
  const std::vector<std::string> corpus{"hello world"};
  const Vocabulary v = build_char_vocab(corpus, 496);
  const std::string s = "low hello";
  CHECK(detokenize(tokenize(s, v), v) == s);
  const auto ids = tokenize("hezo", v);
  REQUIRE(ids.size() == 4);
  CHECK(ids[2] == kUnkId);
  CHECK(ids[0] == *v.find("h"));
  CHECK(ids[3] == *v.find("o"));
}

TEST_CASE("special spellings in text are not specials") {
  const Vocabulary v = build_char_vocab(std::vector<std::string>{"<eos>"}, 496);
  for (int id : tokenize("<eos>", v)) CHECK(id >= static_cast<int>(kNumSpecials));
}

TEST_CASE("BPE unknown character backs off to UNK for that position") {
  const auto corpus = concat({repeat("abab", 3)});
  const BpeModel m = learn_bpe(corpus, 6);
  const auto ids = tokenize("abzab", m.vocab);
  int unk = 0;
  for (int id : ids) unk += id == kUnkId;
  CHECK(unk == 1);
}

TEST_CASE("BPE segmentation agrees with applying merges in rank order") {
  const auto corpus = concat({repeat("lower", 3), repeat("lowest", 4), repeat("newer", 2)});
  const BpeModel m = learn_bpe(corpus, 16);
  for (const std::string w : {"lower", "lowest", "newer"}) {
    const auto ref = apply_merges(w, m.merges);
    const auto ids = tokenize(w, m.vocab);
    std::vector<std::string> got;
    for (int id : ids) got.push_back(m.vocab.token(id));
    CHECK(got == ref);
  }
}

TEST_CASE("compression rate arithmetic") {
  const std::size_t c[] = {20};
  const std::size_t f[] = {4};
  CHECK(compression_rate(c, f) == doctest::Approx(0.20));
  const std::size_t same[] = {20};
  CHECK(compression_rate(c, same) == 1.0);
}

TEST_CASE("compression rate over a hand-tokenised corpus") {
  // "the cat" -> [▁the, ▁c, at] ; "a hat" -> [▁a, ▁h, at]
  const Vocabulary v(VocabKind::kBpe, {M, "t", "h", "e", "c", "a", M + "the", M + "c", "at",
                                       M + "a", M + "h"});
  const std::vector<std::string> lines{"the cat", "a hat"};
  std::vector<std::size_t> chars, frags;
  for (const auto& l : lines) {
    chars.push_back(utf8_length(l));
    frags.push_back(tokenize(l, v).size());
  }
  CHECK(frags[0] == 3);
  CHECK(frags[1] == 3);
  CHECK(compression_rate(chars, frags) == doctest::Approx(6.0 / 12.0));
}

TEST_CASE("vocabulary and merge files round trip") {
  const BpeModel m = learn_bpe(std::vector<std::string>{"abab ab ba", "bab"}, 8);
  std::stringstream vs, ms;
  write_vocabulary(vs, m.vocab);
  write_merges(ms, m.merges);
  const Vocabulary v = read_vocabulary(vs);
  CHECK(v == m.vocab);
  const MergeList back = read_merges(ms);
  REQUIRE(back.size() == m.merges.size());
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i].left == m.merges[i].left);

  std::stringstream bad("<pad>\n<s>\n");
  CHECK_THROWS_AS(read_vocabulary(bad), DataError);
  std::stringstream dup("<pad>\n<s>\n</s>\n<unk>\na\na\n");
  CHECK_THROWS_AS(read_vocabulary(dup), std::exception);
}

}  // TEST_SUITE
