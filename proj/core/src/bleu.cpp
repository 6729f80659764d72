#include "charnmt/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "charnmt/error.hpp"

namespace charnmt::inline CHARNMT_ABI {

std::vector<std::string> split_whitespace(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts count_ngrams(const std::vector<std::string>& words, std::size_t n) {
  NgramCounts counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i)
    ++counts[std::vector<std::string>(words.begin() + static_cast<std::ptrdiff_t>(i),
                                      words.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

}  // namespace

BleuReport corpus_bleu(std::span<const std::string> hypotheses,
                       std::span<const std::string> references) {
  if (hypotheses.size() != references.size())
    throw DataError("bleu: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                    std::to_string(references.size()) + " references");
  BleuReport r;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto hyp = split_whitespace(hypotheses[s]);
    const auto ref = split_whitespace(references[s]);
    r.hypothesis_length += hyp.size();
    r.reference_length += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const NgramCounts h = count_ngrams(hyp, n), g = count_ngrams(ref, n);
      for (const auto& [gram, c] : h) {
        auto it = g.find(gram);
        if (it != g.end()) r.matches[n - 1] += std::min(c, it->second);
      }
      r.totals[n - 1] += hyp.size() >= n ? hyp.size() - n + 1 : 0;
    }
  }
  double log_sum = 0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    r.precisions[n] = r.totals[n] ? static_cast<double>(r.matches[n]) / r.totals[n] : 0.0;
    if (r.matches[n] == 0) zero = true;
    else log_sum += std::log(r.precisions[n]);
  }
  const double c = static_cast<double>(r.hypothesis_length);
  const double ref = static_cast<double>(r.reference_length);
  r.brevity_penalty = c == 0 ? 0.0 : (c > ref ? 1.0 : std::exp(1.0 - ref / c));
  r.bleu = zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum / 4.0);
  return r;
}

}  // namespace charnmt
