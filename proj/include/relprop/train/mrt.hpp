#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "relprop/data/corpus.hpp"
#include "relprop/errors.hpp"
#include "relprop/model/config.hpp"
#include "relprop/model/decode.hpp"
#include "relprop/model/parameters.hpp"
#include "relprop/model/transformer.hpp"
#include "relprop/numerics/rng.hpp"
#include "relprop/numerics/tape.hpp"
#include "relprop/train/bleu.hpp"
#include "relprop/train/checkpoint.hpp"
#include "relprop/train/optimizer.hpp"
#include "relprop/train/trainer.hpp"

namespace relprop {

struct MrtConfig {
  std::size_t n_candidates = 8;
  bool include_reference = true;
  double sharpness = 0.005;
  double learning_rate = 1e-5;
  std::int64_t steps = 0;  // 0 means one pass over the corpus
  std::size_t sentences_per_step = 16;
  std::uint64_t seed = 1;
  double clip_norm = 5.0;

  void validate() const {
    if (n_candidates < 1) {
      throw ConfigError("n_candidates must be at least 1");
    }
    if (!(sharpness > 0.0)) {
      throw ConfigError("mrt sharpness must be positive, got " + std::to_string(sharpness));
    }
    if (!(learning_rate > 0.0)) {
      throw ConfigError("mrt learning rate must be positive");
    }
    if (steps < 0) {
      throw ConfigError("mrt steps must be non-negative");
    }
    if (sentences_per_step < 1) {
      throw ConfigError("sentences_per_step must be at least 1");
    }
  }
};

inline void to_json(nlohmann::json& j, const MrtConfig& c) {
  j = nlohmann::json{{"n_candidates", c.n_candidates},   {"include_reference", c.include_reference},
                     {"sharpness", c.sharpness},         {"learning_rate", c.learning_rate},
                     {"steps", c.steps},                 {"sentences_per_step", c.sentences_per_step},
                     {"seed", c.seed},                   {"clip_norm", c.clip_norm}};
}

inline void from_json(const nlohmann::json& j, MrtConfig& c) {
  MrtConfig d;
  c.n_candidates = j.value("n_candidates", d.n_candidates);
  c.include_reference = j.value("include_reference", d.include_reference);
  c.sharpness = j.value("sharpness", d.sharpness);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.steps = j.value("steps", d.steps);
  c.sentences_per_step = j.value("sentences_per_step", d.sentences_per_step);
  c.seed = j.value("seed", d.seed);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
}

/// Unique candidates in first-seen order, with the reference appended when
/// requested and not already present.
inline std::vector<TokenIds> candidate_subset(const std::vector<TokenIds>& samples, const TokenIds& reference,
                                              bool include_reference) {
  std::vector<TokenIds> out;
  auto add = [&](const TokenIds& c) {
    if (std::find(out.begin(), out.end(), c) == out.end()) {
      out.push_back(c);
    }
  };
  for (const auto& s : samples) {
    add(s);
  }
  if (include_reference) {
    add(reference);
  }
  return out;
}

inline double mrt_cost(const TokenIds& candidate, const TokenIds& reference) {
  return -smoothed_sentence_bleu(candidate, reference);
}

/// Subset distribution softmax(sharpness * logp).
inline std::vector<double> subset_distribution(const std::vector<double>& log_probs, double sharpness) {
  std::vector<double> p(log_probs.size());
  if (p.empty()) {
    return p;
  }
  double mx = -INFINITY;
  for (double lp : log_probs) {
    mx = std::max(mx, sharpness * lp);
  }
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(sharpness * log_probs[i] - mx);
    z += p[i];
  }
  for (double& v : p) {
    v /= z;
  }
  return p;
}

struct MrtSentence {
  TokenIds source;
  TokenIds reference;
  std::vector<TokenIds> candidates;
  std::vector<double> costs;
};

struct MrtGraph {
  Tape<float> tape;
  NodeId log_probs = kNoNode;
  NodeId risk = kNoNode;
  std::size_t groups = 0;
};

/// Builds sequence log-probabilities of every candidate and the mean subset
/// risk over the given sentences.
inline void build_mrt_graph(const Parameters& params, const ModelConfig& config,
                            const std::vector<MrtSentence>& sentences, double sharpness, MrtGraph& g) {
  std::vector<SentencePair> rows;
  std::vector<int> group;
  std::vector<double> costs;
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    for (std::size_t c = 0; c < sentences[s].candidates.size(); ++c) {
      rows.push_back({sentences[s].source, sentences[s].candidates[c]});
      group.push_back(static_cast<int>(s));
      costs.push_back(sentences[s].costs[c]);
    }
  }
  std::vector<const SentencePair*> ptrs;
  for (const auto& r : rows) {
    ptrs.push_back(&r);
  }
  const Batch b = make_batch(ptrs);
  TransformerGraph<float> model(config, params, g.tape);
  const auto src = source_side(b);
  NodeId logits = model.decode(model.encode(src), src, decoder_side(b));
  std::vector<int> row_sequence(b.tgt_out.size(), -1);
  for (std::size_t i = 0; i < b.size; ++i) {
    for (std::size_t k = 0; k < b.tgt_lengths[i]; ++k) {
      row_sequence[i * b.tgt_len + k] = static_cast<int>(i);
    }
  }
  g.log_probs = g.tape.sequence_log_prob(logits, b.tgt_out, row_sequence, b.size);
  g.risk = g.tape.mrt_risk(g.log_probs, group, costs, sharpness, sentences.size());
  g.groups = sentences.size();
}

/// Samples candidates for each pair and assembles the subsets.
inline std::vector<MrtSentence> sample_subsets(const Parameters& params, const ModelConfig& config,
                                               const std::vector<const SentencePair*>& pairs, const MrtConfig& mrt,
                                               SeededRng& rng) {
  std::vector<TokenIds> sources;
  for (const auto* p : pairs) {
    sources.push_back(p->source);
  }
  const auto samples =
      sample_translations(params, config, sources, mrt.n_candidates, config.max_len, rng);
  std::vector<MrtSentence> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    MrtSentence s;
    s.source = pairs[i]->source;
    s.reference = pairs[i]->target;
    s.candidates = candidate_subset(samples[i], s.reference, mrt.include_reference);
    for (const auto& c : s.candidates) {
      s.costs.push_back(mrt_cost(c, s.reference));
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Mean expected cost over the corpus with candidates drawn under `seed`.
/// Sentences whose subset is a single candidate contribute that candidate's cost.
inline double corpus_risk(const Parameters& params, const ModelConfig& config, const Corpus& corpus,
                          const MrtConfig& mrt, std::uint64_t seed, std::size_t max_pairs = 0) {
  mrt.validate();
  const std::size_t n = max_pairs ? std::min(max_pairs, corpus.size()) : corpus.size();
  if (n == 0) {
    throw ConfigError("corpus risk needs at least one pair");
  }
  SeededRng rng(seed);
  double total = 0.0;
  for (std::size_t start = 0; start < n; start += mrt.sentences_per_step) {
    std::vector<const SentencePair*> chunk;
    for (std::size_t i = start; i < std::min(n, start + mrt.sentences_per_step); ++i) {
      chunk.push_back(&corpus.pairs[i]);
    }
    const auto subsets = sample_subsets(params, config, chunk, mrt, rng);
    for (const auto& s : subsets) {
      std::vector<double> lps;
      for (const auto& c : s.candidates) {
        lps.push_back(sequence_log_prob(params, config, s.source, c));
      }
      const auto p = subset_distribution(lps, mrt.sharpness);
      for (std::size_t c = 0; c < p.size(); ++c) {
        total += p[c] * s.costs[c];
      }
    }
  }
  return total / static_cast<double>(n);
}

struct MrtLogRow {
  std::int64_t step = 0;
  double risk = 0.0;
  std::size_t sentences = 0;
  std::size_t skipped = 0;
};

struct MrtResult {
  Checkpoint final;
  std::vector<MrtLogRow> log;
  std::size_t skipped = 0;
};

/// Fine-tunes an MLE checkpoint on expected -BLEU over sampled subsets,
/// sampling fresh candidates from the current model at every step.
inline MrtResult mrt_finetune(const MrtConfig& mrt, const Checkpoint& init, const Corpus& corpus,
                              const std::function<void(const MrtLogRow&)>& on_step = {}) {
  mrt.validate();
  init.params.validate(init.config);
  if (corpus.size() == 0) {
    throw ConfigError("mrt corpus is empty");
  }
  const ModelConfig& mc = init.config;
  corpus.validate(static_cast<std::size_t>(std::min(mc.src_vocab, mc.tgt_vocab)));
  Parameters params = init.params;
  OptimizerState state;
  state.constant_lr = mrt.learning_rate;

  const std::size_t per_epoch = (corpus.size() + mrt.sentences_per_step - 1) / mrt.sentences_per_step;
  const std::int64_t steps = mrt.steps > 0 ? mrt.steps : static_cast<std::int64_t>(per_epoch);
  std::vector<std::size_t> order(corpus.size());
  std::int64_t cached_epoch = -1;
  MrtResult result;

  for (std::int64_t step = 1; step <= steps; ++step) {
    const auto epoch = (step - 1) / static_cast<std::int64_t>(per_epoch);
    if (epoch != cached_epoch) {
      for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
      }
      SeededRng shuffle(mix_seed(mrt.seed ^ 0x4d52ULL, static_cast<std::uint64_t>(epoch)));
      shuffle.shuffle(order);
      cached_epoch = epoch;
    }
    const std::size_t start = static_cast<std::size_t>((step - 1) % static_cast<std::int64_t>(per_epoch)) *
                              mrt.sentences_per_step;
    std::vector<const SentencePair*> chunk;
    for (std::size_t i = start; i < std::min(order.size(), start + mrt.sentences_per_step); ++i) {
      chunk.push_back(&corpus.pairs[order[i]]);
    }
    SeededRng rng(mix_seed(mrt.seed, static_cast<std::uint64_t>(step)));
    auto subsets = sample_subsets(params, mc, chunk, mrt, rng);
    const std::size_t before = subsets.size();
    std::erase_if(subsets, [](const MrtSentence& s) { return s.candidates.size() < 2; });
    MrtLogRow row{step, 0.0, subsets.size(), before - subsets.size()};
    result.skipped += row.skipped;
    if (!subsets.empty()) {
      MrtGraph g;
      build_mrt_graph(params, mc, subsets, mrt.sharpness, g);
      row.risk = g.tape.value(g.risk)[0];
      if (!std::isfinite(row.risk)) {
        throw DivergenceError("mrt risk is not finite at step " + std::to_string(step));
      }
      GradientMap grads = collect_gradients(g.tape, g.risk, params);
      clip_global_norm(grads, mrt.clip_norm);
      adam_step(params, grads, state);
    }
    result.log.push_back(row);
    if (on_step) {
      on_step(row);
    }
  }

  result.final.config = mc;
  result.final.step = init.step + steps;
  result.final.params = std::move(params);
  result.final.meta["mrt"] = mrt;
  result.final.meta["init_step"] = init.step;
  result.final.meta["skipped_sentences"] = result.skipped;
  return result;
}

}  // namespace relprop
