#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "relprop/data/corpus.hpp"
#include "relprop/data/vocab.hpp"
#include "relprop/errors.hpp"
#include "relprop/model/transformer.hpp"
#include "relprop/numerics/rng.hpp"

namespace relprop {

/// Encoder outputs for a padded set of sources, computed once per decode.
template <typename T>
struct EncodedSources {
  BasicTensor<T> memory;  // rows [source][len]
  SequenceBatch shape;
};

template <typename T>
EncodedSources<T> encode_sources(const BasicParameters<T>& params, const ModelConfig& config,
                                 const std::vector<TokenIds>& sources) {
  SequenceBatch s;
  s.batch = sources.size();
  for (const auto& src : sources) {
    s.len = std::max(s.len, src.size());
  }
  s.ids.assign(s.batch * s.len, kPad);
  for (std::size_t b = 0; b < s.batch; ++b) {
    std::copy(sources[b].begin(), sources[b].end(), s.ids.begin() + static_cast<std::ptrdiff_t>(b * s.len));
    s.lengths.push_back(sources[b].size());
  }
  Tape<T> tape;
  TransformerGraph<T> graph(config, params, tape);
  NodeId memory = graph.encode(s);
  return {tape.value(memory), std::move(s)};
}

/// Log-probabilities of the next token for each prefix; all prefixes share
/// one length and `row_source[r]` picks the source they condition on.
template <typename T>
std::vector<std::vector<double>> next_token_log_probs(const BasicParameters<T>& params, const ModelConfig& config,
                                                      const EncodedSources<T>& enc,
                                                      const std::vector<std::size_t>& row_source,
                                                      const std::vector<TokenIds>& prefixes) {
  const std::size_t rows = prefixes.size();
  const std::size_t src_len = enc.shape.len;
  const std::size_t d = enc.memory.cols();
  const std::size_t len = prefixes.front().size();

  BasicTensor<T> memory({rows * src_len, d});
  SequenceBatch src_shape{rows, src_len, {}, {}};
  SequenceBatch dec{rows, len, {}, std::vector<std::size_t>(rows, len)};
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t s = row_source[r];
    src_shape.lengths.push_back(enc.shape.lengths[s]);
    for (std::size_t i = 0; i < src_len; ++i) {
      auto from = enc.memory.row(s * src_len + i);
      std::copy(from.begin(), from.end(), memory.row(r * src_len + i).begin());
    }
    if (prefixes[r].size() != len) {
      throw ContractError("next_token_log_probs needs equal-length prefixes");
    }
    dec.ids.insert(dec.ids.end(), prefixes[r].begin(), prefixes[r].end());
  }

  Tape<T> tape;
  TransformerGraph<T> graph(config, params, tape);
  NodeId mem = tape.input(std::move(memory), "memory");
  const BasicTensor<T>& logits = tape.value(graph.decode(mem, src_shape, dec));

  std::vector<std::vector<double>> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = logits.row(r * len + len - 1);
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : row) {
      mx = std::max(mx, static_cast<double>(v));
    }
    double denom = 0.0;
    for (T v : row) {
      denom += std::exp(static_cast<double>(v) - mx);
    }
    const double log_denom = std::log(denom) + mx;
    out[r].reserve(row.size());
    for (T v : row) {
      out[r].push_back(static_cast<double>(v) - log_denom);
    }
  }
  return out;
}

/// Lowest id among maximal entries.
inline int argmax_lowest(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) {
      best = i;
    }
  }
  return static_cast<int>(best);
}

inline std::size_t decode_limit(const ModelConfig& config, int max_steps) {
  if (max_steps < 1) {
    throw ContractError("max_steps must be at least 1, got " + std::to_string(max_steps));
  }
  return static_cast<std::size_t>(std::min(max_steps, config.max_len));
}

/// Output tokens without bos; ends with eos unless max_steps ran out.
template <typename T>
TokenIds greedy_decode(const BasicParameters<T>& params, const ModelConfig& config, const TokenIds& src,
                       int max_steps) {
  const std::size_t limit = decode_limit(config, max_steps);
  auto enc = encode_sources(params, config, {src});
  TokenIds prefix{kBos};
  TokenIds out;
  while (out.size() < limit) {
    const int next = argmax_lowest(next_token_log_probs(params, config, enc, {0}, {prefix})[0]);
    out.push_back(next);
    prefix.push_back(next);
    if (next == kEos) {
      break;
    }
  }
  return out;
}

struct Hypothesis {
  TokenIds tokens;  // without bos
  double log_prob = 0.0;

  double score() const { return tokens.empty() ? 0.0 : log_prob / static_cast<double>(tokens.size()); }
};

/// Length-normalized beam search. Each step ranks every extension by total
/// log-probability; an eos extension finishes only when it ranks inside the
/// beam, and the best `beam` non-eos extensions stay alive.
template <typename T>
Hypothesis beam_search(const BasicParameters<T>& params, const ModelConfig& config, const TokenIds& src, int beam,
                       int max_steps) {
  if (beam < 1) {
    throw ContractError("beam must be at least 1, got " + std::to_string(beam));
  }
  const std::size_t limit = decode_limit(config, max_steps);
  const auto width = static_cast<std::size_t>(beam);
  auto enc = encode_sources(params, config, {src});

  struct Candidate {
    std::size_t parent;
    int token;
    double step_lp;
    double total;
  };

  std::vector<Hypothesis> alive{Hypothesis{}};
  std::vector<Hypothesis> finished;
  for (std::size_t step = 0; step < limit && !alive.empty() && finished.size() < width; ++step) {
    std::vector<TokenIds> prefixes;
    for (const auto& h : alive) {
      TokenIds p{kBos};
      p.insert(p.end(), h.tokens.begin(), h.tokens.end());
      prefixes.push_back(std::move(p));
    }
    const auto lp = next_token_log_probs(params, config, enc, std::vector<std::size_t>(alive.size(), 0), prefixes);

    std::vector<Candidate> cands;
    for (std::size_t h = 0; h < alive.size(); ++h) {
      for (std::size_t v = 0; v < lp[h].size(); ++v) {
        cands.push_back({h, static_cast<int>(v), lp[h][v], alive[h].log_prob + lp[h][v]});
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.total != b.total) {
        return a.total > b.total;
      }
      if (a.parent != b.parent) {
        return a.parent < b.parent;
      }
      if (a.step_lp != b.step_lp) {
        return a.step_lp > b.step_lp;
      }
      return a.token < b.token;
    });

    std::vector<Hypothesis> next;
    for (std::size_t rank = 0; rank < cands.size() && next.size() < width; ++rank) {
      const Candidate& c = cands[rank];
      Hypothesis h = alive[c.parent];
      h.tokens.push_back(c.token);
      h.log_prob = c.total;
      if (c.token == kEos) {
        if (rank < width) {
          finished.push_back(std::move(h));
        }
      } else {
        next.push_back(std::move(h));
      }
    }
    alive = std::move(next);
  }
  if (finished.size() < width) {
    finished.insert(finished.end(), alive.begin(), alive.end());
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i) {
    if (finished[i].score() > finished[best].score()) {
      best = i;
    }
  }
  return finished[best];
}

template <typename T>
TokenIds beam_decode(const BasicParameters<T>& params, const ModelConfig& config, const TokenIds& src, int beam,
                     int max_steps) {
  return beam_search(params, config, src, beam, max_steps).tokens;
}

/// Sum of log p(tokens[i] | src, bos + tokens[:i]).
template <typename T>
double sequence_log_prob(const BasicParameters<T>& params, const ModelConfig& config, const TokenIds& src,
                         const TokenIds& tokens) {
  TokenIds prefix{kBos};
  prefix.insert(prefix.end(), tokens.begin(), tokens.end() - 1);
  const BasicTensor<T> logits = forward(params, config, src, prefix);
  double total = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto row = logits.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : row) {
      mx = std::max(mx, static_cast<double>(v));
    }
    double denom = 0.0;
    for (T v : row) {
      denom += std::exp(static_cast<double>(v) - mx);
    }
    total += static_cast<double>(row[static_cast<std::size_t>(tokens[i])]) - mx - std::log(denom);
  }
  return total;
}

/// Ancestral samples at temperature 1: `per_source` draws for each source,
/// each stopping at eos or after max_steps tokens. Result [source][draw].
template <typename T>
std::vector<std::vector<TokenIds>> sample_translations(const BasicParameters<T>& params, const ModelConfig& config,
                                                       const std::vector<TokenIds>& sources, std::size_t per_source,
                                                       int max_steps, SeededRng& rng) {
  const std::size_t limit = decode_limit(config, max_steps);
  auto enc = encode_sources(params, config, sources);
  std::vector<std::vector<TokenIds>> out(sources.size(), std::vector<TokenIds>(per_source));
  struct Row {
    std::size_t source;
    std::size_t draw;
  };
  std::vector<Row> active;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    for (std::size_t k = 0; k < per_source; ++k) {
      active.push_back({s, k});
    }
  }
  std::vector<double> probs;
  for (std::size_t step = 0; step < limit && !active.empty(); ++step) {
    std::vector<std::size_t> row_source;
    std::vector<TokenIds> prefixes;
    for (const Row& r : active) {
      row_source.push_back(r.source);
      TokenIds p{kBos};
      const auto& so_far = out[r.source][r.draw];
      p.insert(p.end(), so_far.begin(), so_far.end());
      prefixes.push_back(std::move(p));
    }
    const auto lp = next_token_log_probs(params, config, enc, row_source, prefixes);
    std::vector<Row> still;
    for (std::size_t i = 0; i < active.size(); ++i) {
      probs.resize(lp[i].size());
      std::transform(lp[i].begin(), lp[i].end(), probs.begin(), [](double v) { return std::exp(v); });
      const int token = static_cast<int>(rng.categorical(probs));
      out[active[i].source][active[i].draw].push_back(token);
      if (token != kEos) {
        still.push_back(active[i]);
      }
    }
    active = std::move(still);
  }
  return out;
}

}  // namespace relprop
