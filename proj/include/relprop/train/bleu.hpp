#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "relprop/data/corpus.hpp"
#include "relprop/data/vocab.hpp"
#include "relprop/errors.hpp"

namespace relprop {

inline constexpr int kBleuOrder = 4;
/// Pseudo-count given to a zero unigram match so disjoint pairs stay above 0.
inline constexpr double kUnigramFloor = 0.1;

/// Drops a trailing eos so it never counts as a matched token.
inline TokenIds strip_eos(const TokenIds& s) {
  TokenIds out = s;
  if (!out.empty() && out.back() == kEos) {
    out.pop_back();
  }
  return out;
}

/// Clipped n-gram matches and hypothesis n-gram count.
inline std::pair<std::size_t, std::size_t> ngram_matches(const TokenIds& hyp, const TokenIds& ref, std::size_t n) {
  if (hyp.size() < n) {
    return {0, 0};
  }
  std::map<std::vector<int>, std::size_t> ref_counts;
  for (std::size_t i = 0; i + n <= ref.size(); ++i) {
    ++ref_counts[std::vector<int>(ref.begin() + static_cast<std::ptrdiff_t>(i),
                                  ref.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  std::map<std::vector<int>, std::size_t> hyp_counts;
  for (std::size_t i = 0; i + n <= hyp.size(); ++i) {
    ++hyp_counts[std::vector<int>(hyp.begin() + static_cast<std::ptrdiff_t>(i),
                                  hyp.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  std::size_t matched = 0;
  for (const auto& [gram, c] : hyp_counts) {
    auto it = ref_counts.find(gram);
    if (it != ref_counts.end()) {
      matched += std::min(c, it->second);
    }
  }
  return {matched, hyp.size() - n + 1};
}

/// Sentence BLEU-4: add-one smoothed precisions for n >= 2, brevity penalty
/// exp(1 - r/c) when the hypothesis is shorter. A trailing eos on either
/// side is ignored.
inline double smoothed_sentence_bleu(const TokenIds& hyp_in, const TokenIds& ref_in) {
  const TokenIds hyp = strip_eos(hyp_in);
  const TokenIds ref = strip_eos(ref_in);
  if (hyp.empty()) {
    return ref.empty() ? 1.0 : 0.0;
  }
  double log_sum = 0.0;
  for (int n = 1; n <= kBleuOrder; ++n) {
    const auto [m, c] = ngram_matches(hyp, ref, static_cast<std::size_t>(n));
    double p = 0.0;
    if (n == 1) {
      p = (m > 0 ? static_cast<double>(m) : kUnigramFloor) / static_cast<double>(c);
    } else {
      p = (static_cast<double>(m) + 1.0) / (static_cast<double>(c) + 1.0);
    }
    log_sum += std::log(p);
  }
  const double h = static_cast<double>(hyp.size());
  const double r = static_cast<double>(ref.size());
  const double bp = h >= r ? 1.0 : std::exp(1.0 - r / h);
  return std::min(1.0, bp * std::exp(log_sum / kBleuOrder));
}

}  // namespace relprop
