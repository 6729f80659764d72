#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "charnmt/abi.hpp"

namespace charnmt::inline CHARNMT_ABI {

struct BleuReport {
  double bleu = 0;                     // 0..100
  std::array<double, 4> precisions{};  // modified n-gram precisions, n = 1..4
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  double brevity_penalty = 0;
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;
};

// Corpus BLEU-4 over whitespace-separated tokens, case-sensitive, one
// reference per sentence, unsmoothed: any zero precision gives 0.
BleuReport corpus_bleu(std::span<const std::string> hypotheses,
                       std::span<const std::string> references);

std::vector<std::string> split_whitespace(const std::string& line);

}  // namespace charnmt
