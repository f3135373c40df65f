#pragma once

#include <string>

#include "relprop/data/corpus.hpp"
#include "relprop/data/vocab.hpp"
#include "relprop/errors.hpp"
#include "relprop/numerics/rng.hpp"

namespace relprop {

enum class DropoutSide : std::uint8_t { None, Source, Target };

inline DropoutSide parse_dropout_side(const std::string& s) {
  if (s == "none") {
    return DropoutSide::None;
  }
  if (s == "source") {
    return DropoutSide::Source;
  }
  if (s == "target") {
    return DropoutSide::Target;
  }
  throw ConfigError("unknown word dropout side '" + s + "'; expected one of: none, source, target");
}

inline const char* dropout_side_name(DropoutSide s) {
  switch (s) {
    case DropoutSide::Source:
      return "source";
    case DropoutSide::Target:
      return "target";
    default:
      return "none";
  }
}

/// Replaces each non-reserved token on one side with a uniform random
/// non-reserved token with probability `rate`. On the target side only the
/// decoder inputs change; loss labels stay gold. Returns the number of
/// replacement draws (a draw may reproduce the original token).
inline std::size_t apply_word_dropout(Batch& batch, DropoutSide side, double rate, int vocab_size, SeededRng& rng) {
  if (rate < 0.0 || rate > 1.0) {
    throw ConfigError("word dropout rate must lie in [0, 1], got " + std::to_string(rate));
  }
  if (side == DropoutSide::None || rate == 0.0) {
    return 0;
  }
  if (vocab_size <= kFirstContent) {
    throw ConfigError("word dropout needs a vocabulary with content tokens");
  }
  auto& ids = side == DropoutSide::Source ? batch.src : batch.tgt_in;
  const std::size_t len = side == DropoutSide::Source ? batch.src_len : batch.tgt_len;
  const auto& lengths = side == DropoutSide::Source ? batch.src_lengths : batch.tgt_lengths;
  std::size_t replaced = 0;
  for (std::size_t b = 0; b < batch.size; ++b) {
    for (std::size_t i = 0; i < lengths[b]; ++i) {
      int& tok = ids[b * len + i];
      if (is_reserved(tok)) {
        continue;
      }
      if (rng.bernoulli(rate)) {
        tok = static_cast<int>(rng.between(kFirstContent, vocab_size - 1));
        ++replaced;
      }
    }
  }
  return replaced;
}

}  // namespace relprop
