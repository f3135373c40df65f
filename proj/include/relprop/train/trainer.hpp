#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
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
#include "relprop/train/checkpoint.hpp"
#include "relprop/train/optimizer.hpp"
#include "relprop/train/word_dropout.hpp"

namespace relprop {

struct TrainConfig {
  std::size_t tokens_per_batch = 2048;
  std::int64_t total_steps = 5000;
  std::int64_t checkpoint_every = 500;
  std::uint64_t seed = 1;
  DropoutSide word_dropout_side = DropoutSide::None;
  double word_dropout_rate = 0.1;
  double label_smoothing = 0.1;
  std::int64_t warmup_steps = 400;
  double lr_scale = 1.0;
  double clip_norm = 5.0;
  // Stop once teacher-forced accuracy on the first `monitor_pairs` training
  // pairs reaches this value at a checkpoint; 0 disables.
  double stop_at_accuracy = 0.0;
  std::size_t monitor_pairs = 256;

  void validate() const {
    if (tokens_per_batch == 0) {
      throw ConfigError("tokens_per_batch must be positive");
    }
    if (total_steps < 1) {
      throw ConfigError("total_steps must be at least 1");
    }
    if (checkpoint_every < 1) {
      throw ConfigError("checkpoint_every must be at least 1");
    }
    if (word_dropout_rate < 0.0 || word_dropout_rate > 1.0) {
      throw ConfigError("word dropout rate must lie in [0, 1], got " + std::to_string(word_dropout_rate));
    }
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
      throw ConfigError("label smoothing must lie in [0, 1)");
    }
    if (warmup_steps < 1) {
      throw ConfigError("warmup_steps must be positive");
    }
    if (!(lr_scale > 0.0)) {
      throw ConfigError("lr scale must be positive");
    }
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"tokens_per_batch", c.tokens_per_batch},
                     {"total_steps", c.total_steps},
                     {"checkpoint_every", c.checkpoint_every},
                     {"seed", c.seed},
                     {"word_dropout_side", dropout_side_name(c.word_dropout_side)},
                     {"word_dropout_rate", c.word_dropout_rate},
                     {"label_smoothing", c.label_smoothing},
                     {"warmup_steps", c.warmup_steps},
                     {"lr_scale", c.lr_scale},
                     {"clip_norm", c.clip_norm},
                     {"stop_at_accuracy", c.stop_at_accuracy},
                     {"monitor_pairs", c.monitor_pairs}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.tokens_per_batch = j.value("tokens_per_batch", d.tokens_per_batch);
  c.total_steps = j.value("total_steps", d.total_steps);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.seed = j.value("seed", d.seed);
  c.word_dropout_side = parse_dropout_side(j.value("word_dropout_side", std::string("none")));
  c.word_dropout_rate = j.value("word_dropout_rate", d.word_dropout_rate);
  c.label_smoothing = j.value("label_smoothing", d.label_smoothing);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.lr_scale = j.value("lr_scale", d.lr_scale);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.stop_at_accuracy = j.value("stop_at_accuracy", d.stop_at_accuracy);
  c.monitor_pairs = j.value("monitor_pairs", d.monitor_pairs);
}

struct LossRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

inline void write_loss_csv(const std::vector<LossRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("cannot write loss log " + path);
  }
  out << "step,loss,lr\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g\n", static_cast<long long>(r.step), r.loss, r.lr);
    out << buf;
  }
}

/// Fraction of gold target tokens that are the argmax under teacher forcing.
inline double teacher_forced_accuracy(const Parameters& params, const ModelConfig& config,
                                      const std::vector<SentencePair>& pairs, std::size_t batch_pairs = 64) {
  std::size_t correct = 0;
  std::size_t total = 0;
  for (std::size_t start = 0; start < pairs.size(); start += batch_pairs) {
    std::vector<const SentencePair*> chunk;
    for (std::size_t i = start; i < std::min(pairs.size(), start + batch_pairs); ++i) {
      chunk.push_back(&pairs[i]);
    }
    const Batch b = make_batch(chunk);
    Tape<float> tape;
    TransformerGraph<float> g(config, params, tape);
    const auto src = source_side(b);
    const Tensor& logits = tape.value(g.decode(g.encode(src), src, decoder_side(b)));
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      if (b.tgt_mask[r] == 0.0f) {
        continue;
      }
      auto row = logits.row(r);
      std::size_t best = 0;
      for (std::size_t v = 1; v < row.size(); ++v) {
        if (row[v] > row[best]) {
          best = v;
        }
      }
      correct += static_cast<int>(best) == b.tgt_out[r];
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

/// Gradients of every parameter on the tape, keyed by name.
template <typename T>
GradientMap collect_gradients(const Tape<T>& tape, NodeId loss, const Parameters& params) {
  auto grads = tape.backward(loss);
  GradientMap out;
  for (const auto& [name, id] : tape.params()) {
    if (grads.has(id)) {
      out.emplace(name, grads.at(id));
    } else {
      out.emplace(name, Tensor(params.at(name).dims()));
    }
  }
  return out;
}

/// Mean label-smoothed cross entropy of one batch and its gradients.
inline double mle_loss_and_gradients(const Parameters& params, const ModelConfig& config, const Batch& batch,
                                     double smoothing, SeededRng* dropout_rng, GradientMap* grads) {
  Tape<float> tape;
  TransformerGraph<float> g(config, params, tape, dropout_rng);
  const auto src = source_side(batch);
  NodeId logits = g.decode(g.encode(src), src, decoder_side(batch));
  NodeId loss = tape.cross_entropy(logits, batch.tgt_out, batch.tgt_mask, smoothing);
  if (grads) {
    *grads = collect_gradients(tape, loss, params);
  }
  return tape.value(loss)[0];
}

struct TrainHooks {
  std::function<void(const Checkpoint&)> on_checkpoint;
  std::function<void(const LossRow&)> on_step;
};

struct TrainResult {
  Checkpoint final;
  std::vector<LossRow> log;
  bool stopped_early = false;
  double monitor_accuracy = -1.0;  // last measured, -1 when never measured
};

inline Checkpoint make_checkpoint(const ModelConfig& mc, const TrainConfig& tc, const Parameters& params,
                                  const OptimizerState& state) {
  Checkpoint c;
  c.config = mc;
  c.step = state.step;
  c.params = params;
  c.meta["train"] = tc;
  attach_optimizer(c, state);
  return c;
}

/// MLE training with teacher forcing. Batch order, dropout masks and word
/// dropout draws derive from (seed, epoch/step), so a run resumed from a
/// checkpoint continues bit-exactly.
inline TrainResult train_mle(const TrainConfig& tc, const ModelConfig& mc, const Corpus& corpus,
                             const Checkpoint* resume = nullptr, const TrainHooks& hooks = {}) {
  tc.validate();
  mc.validate();
  if (corpus.size() == 0) {
    throw ConfigError("training corpus is empty");
  }
  corpus.validate(static_cast<std::size_t>(std::min(mc.src_vocab, mc.tgt_vocab)));

  Parameters params;
  OptimizerState state;
  state.warmup_steps = tc.warmup_steps;
  state.scale = tc.lr_scale;
  if (resume) {
    const std::string diff = first_difference(resume->config, mc);
    if (!diff.empty()) {
      throw ConfigError("resume checkpoint config differs in field '" + diff + "'");
    }
    if (resume->meta.contains("train")) {
      const nlohmann::json now = tc;
      const auto& then = resume->meta.at("train");
      for (const char* key : {"tokens_per_batch", "seed", "word_dropout_side", "word_dropout_rate", "label_smoothing",
                              "warmup_steps", "lr_scale", "clip_norm"}) {
        if (then.contains(key) && then.at(key) != now.at(key)) {
          throw ConfigError(std::string("resume checkpoint training config differs in field '") + key + "'");
        }
      }
    }
    params = resume->params;
    state = extract_optimizer(*resume);
  } else {
    params = init_parameters(mc, mix_seed(tc.seed, 0x1417));
  }

  std::vector<SentencePair> monitor(corpus.pairs.begin(),
                                    corpus.pairs.begin() + static_cast<std::ptrdiff_t>(
                                                               std::min(tc.monitor_pairs, corpus.size())));
  TrainResult result;
  std::int64_t cached_epoch = -1;
  std::vector<Batch> batches;
  const std::size_t per_epoch = make_batches(corpus, tc.tokens_per_batch, 0).size();

  for (std::int64_t step = state.step + 1; step <= tc.total_steps; ++step) {
    const auto epoch = (step - 1) / static_cast<std::int64_t>(per_epoch);
    if (epoch != cached_epoch) {
      batches = make_batches(corpus, tc.tokens_per_batch, mix_seed(tc.seed, static_cast<std::uint64_t>(epoch)));
      cached_epoch = epoch;
    }
    Batch batch = batches[static_cast<std::size_t>((step - 1) % static_cast<std::int64_t>(per_epoch))];
    if (tc.word_dropout_side != DropoutSide::None) {
      SeededRng wd(mix_seed(tc.seed ^ 0x5744ULL, static_cast<std::uint64_t>(step)));
      const int vocab = tc.word_dropout_side == DropoutSide::Source ? mc.src_vocab : mc.tgt_vocab;
      apply_word_dropout(batch, tc.word_dropout_side, tc.word_dropout_rate, vocab, wd);
    }
    SeededRng drop(mix_seed(tc.seed ^ 0x4452ULL, static_cast<std::uint64_t>(step)));
    GradientMap grads;
    const double loss = mle_loss_and_gradients(params, mc, batch, tc.label_smoothing, &drop, &grads);
    if (!std::isfinite(loss)) {
      throw DivergenceError("training loss is not finite at step " + std::to_string(step));
    }
    clip_global_norm(grads, tc.clip_norm);
    const double lr = adam_step(params, grads, state);
    result.log.push_back({step, loss, lr});
    if (hooks.on_step) {
      hooks.on_step(result.log.back());
    }

    const bool last = step == tc.total_steps;
    if (step % tc.checkpoint_every == 0 || last) {
      bool stop = false;
      if (tc.stop_at_accuracy > 0.0) {
        result.monitor_accuracy = teacher_forced_accuracy(params, mc, monitor);
        stop = result.monitor_accuracy >= tc.stop_at_accuracy;
      }
      if (hooks.on_checkpoint || last || stop) {
        Checkpoint c = make_checkpoint(mc, tc, params, state);
        if (hooks.on_checkpoint) {
          hooks.on_checkpoint(c);
        }
        if (last || stop) {
          result.final = std::move(c);
        }
      }
      if (stop) {
        result.stopped_early = !last;
        break;
      }
    }
  }
  if (result.final.params.tensors().empty()) {
    result.final = make_checkpoint(mc, tc, params, state);
  }
  return result;
}

}  // namespace relprop
