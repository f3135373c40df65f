#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "relprop/data/vocab.hpp"
#include "relprop/errors.hpp"
#include "relprop/numerics/rng.hpp"

namespace relprop {

using TokenIds = std::vector<int>;

struct SentencePair {
  TokenIds source;
  TokenIds target;  // always ends with eos

  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

struct Corpus {
  std::vector<SentencePair> pairs;

  std::size_t size() const { return pairs.size(); }

  /// Throws InputError on empty sequences, ids >= vocab_size or a target without eos.
  void validate(std::size_t vocab_size) const {
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto& p = pairs[i];
      if (p.source.empty() || p.target.empty()) {
        throw InputError("pair " + std::to_string(i) + " has an empty sequence");
      }
      if (p.target.back() != kEos) {
        throw InputError("pair " + std::to_string(i) + " target does not end with eos");
      }
      for (const TokenIds* seq : {&p.source, &p.target}) {
        for (int id : *seq) {
          if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
            throw InputError("pair " + std::to_string(i) + " has token id " + std::to_string(id) +
                             " outside vocabulary of " + std::to_string(vocab_size));
          }
        }
      }
    }
  }

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

enum class Task { Copy, Reverse, CipherReorder };

inline constexpr std::string_view kTaskNames = "copy, reverse, cipher_reorder";

inline Task parse_task(std::string_view name) {
  if (name == "copy") return Task::Copy;
  if (name == "reverse") return Task::Reverse;
  if (name == "cipher_reorder") return Task::CipherReorder;
  throw ConfigError("unknown task '" + std::string(name) + "'; valid tasks: " + std::string(kTaskNames));
}

inline std::string_view task_name(Task task) {
  switch (task) {
    case Task::Copy: return "copy";
    case Task::Reverse: return "reverse";
    case Task::CipherReorder: return "cipher_reorder";
  }
  return "?";
}

inline constexpr std::size_t kReorderWindow = 3;
inline constexpr std::uint64_t kCipherSeed = 0x63697068657231ULL;

/// Fixed permutation of content ids; depends on the vocabulary size only so
/// that corpora generated with different seeds share one cipher.
/// Entry i maps id i; reserved ids map to themselves.
inline std::vector<int> cipher_permutation(std::size_t vocab_size) {
  std::vector<int> content(vocab_size - kFirstContent);
  std::iota(content.begin(), content.end(), kFirstContent);
  SeededRng rng(kCipherSeed);
  rng.shuffle(content);
  std::vector<int> perm(vocab_size);
  std::iota(perm.begin(), perm.begin() + kFirstContent, 0);
  std::copy(content.begin(), content.end(), perm.begin() + kFirstContent);
  return perm;
}

/// Target content (without eos) for a source content sequence (without eos).
inline TokenIds apply_task(Task task, const TokenIds& content, const std::vector<int>& permutation) {
  TokenIds out = content;
  switch (task) {
    case Task::Copy:
      break;
    case Task::Reverse:
      std::reverse(out.begin(), out.end());
      break;
    case Task::CipherReorder:
      for (auto& id : out) {
        id = permutation[static_cast<std::size_t>(id)];
      }
      for (std::size_t start = 0; start < out.size(); start += kReorderWindow) {
        const std::size_t stop = std::min(out.size(), start + kReorderWindow);
        std::reverse(out.begin() + static_cast<std::ptrdiff_t>(start), out.begin() + static_cast<std::ptrdiff_t>(stop));
      }
      break;
  }
  return out;
}

struct CorpusSpec {
  Task task = Task::Copy;
  std::size_t n = 1000;
  std::size_t min_len = 4;
  std::size_t max_len = 12;
  std::size_t vocab_size = 32;
  std::uint64_t seed = 1;
  bool source_eos = true;
};

/// Pure function of `spec`. Lengths count content tokens (eos excluded).
inline Corpus generate_corpus(const CorpusSpec& spec) {
  if (spec.min_len < 1 || spec.min_len > spec.max_len) {
    throw ConfigError("invalid length range [" + std::to_string(spec.min_len) + ", " + std::to_string(spec.max_len) +
                      "]");
  }
  if (spec.vocab_size <= static_cast<std::size_t>(kFirstContent) + 1) {
    throw ConfigError("vocab size " + std::to_string(spec.vocab_size) + " leaves fewer than 2 content tokens");
  }
  const auto perm = cipher_permutation(spec.vocab_size);
  SeededRng rng(spec.seed);
  Corpus corpus;
  corpus.pairs.reserve(spec.n);
  const auto content_count = static_cast<std::int64_t>(spec.vocab_size) - kFirstContent;
  for (std::size_t i = 0; i < spec.n; ++i) {
    const auto len = static_cast<std::size_t>(
        rng.between(static_cast<std::int64_t>(spec.min_len), static_cast<std::int64_t>(spec.max_len)));
    TokenIds content(len);
    for (auto& id : content) {
      id = kFirstContent + static_cast<int>(rng.below(static_cast<std::uint64_t>(content_count)));
    }
    SentencePair pair;
    pair.target = apply_task(spec.task, content, perm);
    pair.target.push_back(kEos);
    pair.source = std::move(content);
    if (spec.source_eos) {
      pair.source.push_back(kEos);
    }
    corpus.pairs.push_back(std::move(pair));
  }
  return corpus;
}

/// Corpus slice where every source has S tokens and every target T tokens
/// (eos included).
struct EvalSet {
  std::vector<SentencePair> pairs;
  std::size_t source_len = 0;
  std::size_t target_len = 0;

  std::size_t size() const { return pairs.size(); }

  void check() const {
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (pairs[i].source.size() != source_len || pairs[i].target.size() != target_len) {
        throw ContractError("eval pair " + std::to_string(i) + " has lengths (" +
                            std::to_string(pairs[i].source.size()) + ", " + std::to_string(pairs[i].target.size()) +
                            "), expected (" + std::to_string(source_len) + ", " + std::to_string(target_len) + ")");
      }
    }
  }
};

/// First n pairs of exactly (S, T) tokens, in corpus order.
inline EvalSet make_eval_set(const Corpus& corpus, std::size_t source_len, std::size_t target_len, std::size_t n) {
  EvalSet eval;
  eval.source_len = source_len;
  eval.target_len = target_len;
  std::size_t found = 0;
  for (const auto& p : corpus.pairs) {
    if (p.source.size() == source_len && p.target.size() == target_len) {
      ++found;
      if (eval.pairs.size() < n) {
        eval.pairs.push_back(p);
      }
    }
  }
  if (eval.pairs.size() < n) {
    throw ConfigError("eval set needs " + std::to_string(n) + " pairs of lengths (" + std::to_string(source_len) +
                      ", " + std::to_string(target_len) + "), found " + std::to_string(found));
  }
  return eval;
}

/// Sources kept in order; targets permuted so no pair keeps its own target.
inline EvalSet shuffle_targets(const EvalSet& eval, std::uint64_t seed) {
  const std::size_t n = eval.size();
  if (n < 2) {
    throw ContractError("shuffle_targets needs at least 2 pairs, got " + std::to_string(n));
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  SeededRng rng(seed);
  rng.shuffle(perm);
  // Swapping a fixed point with its neighbour never creates a new one.
  for (std::size_t i = 0; i < n; ++i) {
    if (perm[i] == i) {
      std::swap(perm[i], perm[(i + 1) % n]);
    }
  }
  EvalSet out = eval;
  for (std::size_t i = 0; i < n; ++i) {
    out.pairs[i].target = eval.pairs[perm[i]].target;
  }
  return out;
}

/// Padded mini-batch. Row-major [size][max_len] id grids; tgt_in is the
/// bos-shifted decoder input, tgt_out the labels.
struct Batch {
  std::size_t size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<int> src;
  std::vector<int> tgt_in;
  std::vector<int> tgt_out;
  std::vector<std::size_t> src_lengths;
  std::vector<std::size_t> tgt_lengths;
  std::vector<float> src_mask;
  std::vector<float> tgt_mask;
  std::vector<std::size_t> pair_index;

  std::size_t source_tokens() const {
    return std::accumulate(src_lengths.begin(), src_lengths.end(), std::size_t{0});
  }
};

inline Batch make_batch(const std::vector<const SentencePair*>& pairs) {
  Batch b;
  b.size = pairs.size();
  for (const auto* p : pairs) {
    b.src_len = std::max(b.src_len, p->source.size());
    b.tgt_len = std::max(b.tgt_len, p->target.size());
  }
  b.src.assign(b.size * b.src_len, kPad);
  b.src_mask.assign(b.size * b.src_len, 0.0f);
  b.tgt_in.assign(b.size * b.tgt_len, kPad);
  b.tgt_out.assign(b.size * b.tgt_len, kPad);
  b.tgt_mask.assign(b.size * b.tgt_len, 0.0f);
  for (std::size_t i = 0; i < b.size; ++i) {
    const auto& p = *pairs[i];
    b.src_lengths.push_back(p.source.size());
    b.tgt_lengths.push_back(p.target.size());
    for (std::size_t k = 0; k < p.source.size(); ++k) {
      b.src[i * b.src_len + k] = p.source[k];
      b.src_mask[i * b.src_len + k] = 1.0f;
    }
    for (std::size_t k = 0; k < p.target.size(); ++k) {
      b.tgt_in[i * b.tgt_len + k] = k == 0 ? kBos : p.target[k - 1];
      b.tgt_out[i * b.tgt_len + k] = p.target[k];
      b.tgt_mask[i * b.tgt_len + k] = 1.0f;
    }
  }
  return b;
}

/// Length-sorted chunks of at most `tokens_per_batch` source tokens, chunk
/// order shuffled by `seed`.
inline std::vector<Batch> make_batches(const Corpus& corpus, std::size_t tokens_per_batch, std::uint64_t seed) {
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& pa = corpus.pairs[a];
    const auto& pb = corpus.pairs[b];
    return std::pair(pa.source.size(), pa.target.size()) < std::pair(pb.source.size(), pb.target.size());
  });
  std::vector<std::vector<std::size_t>> chunks;
  std::size_t tokens = 0;
  for (std::size_t idx : order) {
    const std::size_t len = corpus.pairs[idx].source.size();
    if (len > tokens_per_batch) {
      throw ConfigError("pair " + std::to_string(idx) + " has " + std::to_string(len) +
                        " source tokens, more than tokens_per_batch=" + std::to_string(tokens_per_batch));
    }
    if (chunks.empty() || tokens + len > tokens_per_batch) {
      chunks.emplace_back();
      tokens = 0;
    }
    chunks.back().push_back(idx);
    tokens += len;
  }
  SeededRng rng(seed);
  rng.shuffle(chunks);
  std::vector<Batch> batches;
  batches.reserve(chunks.size());
  for (const auto& chunk : chunks) {
    std::vector<const SentencePair*> ptrs;
    for (std::size_t idx : chunk) {
      ptrs.push_back(&corpus.pairs[idx]);
    }
    Batch b = make_batch(ptrs);
    b.pair_index = chunk;
    batches.push_back(std::move(b));
  }
  return batches;
}

inline std::string join_tokens(const TokenIds& ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) {
      out += ' ';
    }
    out += vocab.lookup(ids[i]);
  }
  return out;
}

inline TokenIds split_tokens(std::string_view text, const Vocab& vocab) {
  TokenIds ids;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) {
    ids.push_back(vocab.encode(tok));
  }
  return ids;
}

/// `source tokens<TAB>target tokens` per line.
inline void write_corpus(const std::string& path, const Corpus& corpus, const Vocab& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("cannot write corpus file " + path);
  }
  for (const auto& p : corpus.pairs) {
    out << join_tokens(p.source, vocab) << '\t' << join_tokens(p.target, vocab) << '\n';
  }
}

inline Corpus read_corpus(const std::string& path, const Vocab& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot read corpus file " + path);
  }
  Corpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (line.empty()) {
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw InputError(path + ":" + std::to_string(lineno) + ": missing TAB between source and target");
    }
    SentencePair p;
    p.source = split_tokens(std::string_view(line).substr(0, tab), vocab);
    p.target = split_tokens(std::string_view(line).substr(tab + 1), vocab);
    if (p.source.empty() || p.target.empty()) {
      throw InputError(path + ":" + std::to_string(lineno) + ": empty source or target");
    }
    if (p.target.back() != kEos) {
      p.target.push_back(kEos);
    }
    corpus.pairs.push_back(std::move(p));
  }
  return corpus;
}

}  // namespace relprop
