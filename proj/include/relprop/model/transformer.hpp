#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "relprop/data/corpus.hpp"
#include "relprop/data/vocab.hpp"
#include "relprop/errors.hpp"
#include "relprop/model/config.hpp"
#include "relprop/model/parameters.hpp"
#include "relprop/numerics/rng.hpp"
#include "relprop/numerics/tape.hpp"

namespace relprop {

/// Padded id rows, row-major [batch][len].
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<int> ids;
  std::vector<std::size_t> lengths;

  static SequenceBatch single(const TokenIds& seq) { return {1, seq.size(), seq, {seq.size()}}; }
};

inline SequenceBatch source_side(const Batch& b) { return {b.size, b.src_len, b.src, b.src_lengths}; }
inline SequenceBatch decoder_side(const Batch& b) { return {b.size, b.tgt_len, b.tgt_in, b.tgt_lengths}; }

/// Node ids at layer boundaries. Index 0 is the embedding sum, index l + 1
/// the output of layer l.
struct LayerMarks {
  std::vector<NodeId> encoder;
  std::vector<NodeId> decoder;
  NodeId memory = kNoNode;
  NodeId logits = kNoNode;
};

/// Builds the encoder-decoder graph on a tape. Dropout is applied only
/// when an rng is supplied and the configured rate is positive.
template <typename T>
class TransformerGraph {
 public:
  TransformerGraph(const ModelConfig& config, const BasicParameters<T>& params, Tape<T>& tape,
                   SeededRng* dropout_rng = nullptr)
      : c_(config), p_(params), tape_(tape), rng_(config.dropout > 0.0 ? dropout_rng : nullptr) {
    c_.validate();
  }

  /// Encoder output rows [batch][len][d_model].
  NodeId encode(const SequenceBatch& src, LayerMarks* marks = nullptr) {
    check_batch(src, c_.src_vocab, "source");
    tape_.set_scope(Part::Encoder, -1);
    NodeId h = embed(names::kSourceEmbedding, src, Side::Source, false);
    if (marks) {
      marks->encoder.push_back(h);
    }
    auto self = layout(src.batch, src.len, src.len, src.lengths, false);
    for (int l = 0; l < c_.n_layers; ++l) {
      tape_.set_scope(Part::Encoder, l);
      NodeId a = attention(names::encoder(l, "self"), h, h, self);
      h = norm(names::encoder(l, "norm1"), tape_.add(h, a));
      NodeId f = feed_forward(names::encoder(l, "ffn"), h);
      h = norm(names::encoder(l, "norm2"), tape_.add(h, f));
      if (marks) {
        marks->encoder.push_back(h);
      }
    }
    if (marks) {
      marks->memory = h;
    }
    return h;
  }

  /// Logits rows [batch][len][tgt_vocab] for decoder inputs `dec` (each row
  /// starting at bos) attending over `memory`.
  NodeId decode(NodeId memory, const SequenceBatch& src_shape, const SequenceBatch& dec, LayerMarks* marks = nullptr) {
    check_batch(dec, c_.tgt_vocab, "target prefix");
    if (src_shape.batch != dec.batch) {
      throw ShapeError("decoder batch " + std::to_string(dec.batch) + " vs source batch " +
                       std::to_string(src_shape.batch));
    }
    tape_.set_scope(Part::Decoder, -1);
    NodeId h = embed(names::kTargetEmbedding, dec, Side::Target, true);
    if (marks) {
      marks->decoder.push_back(h);
    }
    auto self = layout(dec.batch, dec.len, dec.len, dec.lengths, true);
    auto cross = layout(dec.batch, dec.len, src_shape.len, src_shape.lengths, false);
    for (int l = 0; l < c_.n_layers; ++l) {
      tape_.set_scope(Part::Decoder, l);
      NodeId a = attention(names::decoder(l, "self"), h, h, self);
      h = norm(names::decoder(l, "norm1"), tape_.add(h, a));
      NodeId x = attention(names::decoder(l, "cross"), h, memory, cross);
      h = norm(names::decoder(l, "norm2"), tape_.add(h, x));
      NodeId f = feed_forward(names::decoder(l, "ffn"), h);
      h = norm(names::decoder(l, "norm3"), tape_.add(h, f));
      if (marks) {
        marks->decoder.push_back(h);
      }
    }
    tape_.set_scope(Part::Decoder, c_.n_layers);
    NodeId logits = tape_.linear(h, param(names::kOutputWeight), param(names::kOutputBias), "output");
    if (marks) {
      marks->logits = logits;
    }
    return logits;
  }

 private:
  NodeId param(const std::string& name) { return tape_.param(name, p_.at(name)); }

  void check_batch(const SequenceBatch& s, int vocab, const char* what) const {
    if (s.batch == 0 || s.len == 0) {
      throw InputError(std::string(what) + " is empty");
    }
    if (s.len > static_cast<std::size_t>(c_.max_len)) {
      throw InputError(std::string(what) + " length " + std::to_string(s.len) + " exceeds max_len " +
                       std::to_string(c_.max_len));
    }
    if (s.ids.size() != s.batch * s.len || s.lengths.size() != s.batch) {
      throw ShapeError(std::string(what) + " batch layout is inconsistent");
    }
    for (std::size_t b = 0; b < s.batch; ++b) {
      if (s.lengths[b] == 0 || s.lengths[b] > s.len) {
        throw ShapeError(std::string(what) + " row " + std::to_string(b) + " has length " +
                         std::to_string(s.lengths[b]));
      }
    }
    for (int id : s.ids) {
      if (id < 0 || id >= vocab) {
        throw InputError(std::string(what) + " token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(vocab));
      }
    }
  }

  std::shared_ptr<const AttentionLayout> layout(std::size_t batch, std::size_t q_len, std::size_t k_len,
                                                const std::vector<std::size_t>& key_lengths, bool causal) const {
    auto l = std::make_shared<AttentionLayout>();
    l->batch = batch;
    l->heads = static_cast<std::size_t>(c_.n_heads);
    l->q_len = q_len;
    l->k_len = k_len;
    l->key_lengths = key_lengths;
    l->causal = causal;
    return l;
  }

  // Decoder row 0 holds bos and carries no token slot; row p > 0 holds
  // target token p - 1.
  NodeId embed(const char* table, const SequenceBatch& s, Side side, bool shifted) {
    const auto d = static_cast<std::size_t>(c_.d_model);
    if (positions_.empty()) {
      positions_ = sinusoidal_positions<T>(c_.max_len, c_.d_model);
    }
    std::vector<TokenSlot> slots(s.batch * s.len);
    BasicTensor<T> pos({s.batch * s.len, d});
    for (std::size_t b = 0; b < s.batch; ++b) {
      for (std::size_t i = 0; i < s.len; ++i) {
        const std::size_t r = b * s.len + i;
        if (i < s.lengths[b] && (!shifted || i > 0)) {
          slots[r] = {side, static_cast<int>(shifted ? i - 1 : i)};
        }
        auto src = positions_.row(i);
        auto dst = pos.row(r);
        std::copy(src.begin(), src.end(), dst.begin());
      }
    }
    NodeId e = tape_.embedding(param(table), s.ids, std::sqrt(static_cast<double>(c_.d_model)), slots);
    NodeId p = tape_.constant(std::move(pos), "position", std::move(slots));
    return drop(tape_.add(e, p, "embedding+position"));
  }

  NodeId attention(const std::string& prefix, NodeId query_in, NodeId key_in,
                   const std::shared_ptr<const AttentionLayout>& l) {
    NodeId q = tape_.linear(query_in, param(prefix + ".q.w"), param(prefix + ".q.b"), prefix + ".q");
    NodeId k = tape_.linear(key_in, param(prefix + ".k.w"), param(prefix + ".k.b"), prefix + ".k");
    NodeId v = tape_.linear(key_in, param(prefix + ".v.w"), param(prefix + ".v.b"), prefix + ".v");
    const double scale = 1.0 / std::sqrt(static_cast<double>(c_.d_model / c_.n_heads));
    NodeId scores = tape_.attention_scores(q, k, l, scale, prefix + ".scores");
    NodeId probs = tape_.softmax(scores, l, prefix + ".probs");
    NodeId mixed = tape_.attention_mix(probs, v, l, prefix + ".mix");
    return drop(tape_.linear(mixed, param(prefix + ".o.w"), param(prefix + ".o.b"), prefix + ".o"));
  }

  NodeId feed_forward(const std::string& prefix, NodeId x) {
    NodeId h = tape_.relu(tape_.linear(x, param(prefix + ".in.w"), param(prefix + ".in.b"), prefix + ".in"));
    return drop(tape_.linear(h, param(prefix + ".out.w"), param(prefix + ".out.b"), prefix + ".out"));
  }

  NodeId norm(const std::string& prefix, NodeId x) {
    return tape_.layer_norm(x, param(prefix + ".g"), param(prefix + ".b"), c_.ln_eps, prefix);
  }

  NodeId drop(NodeId x) { return rng_ ? tape_.dropout(x, c_.dropout, *rng_) : x; }

  ModelConfig c_;
  const BasicParameters<T>& p_;
  Tape<T>& tape_;
  SeededRng* rng_;
  BasicTensor<T> positions_;
};

/// Everything a single-sentence forward recorded. Decoder position p
/// predicts target token p given source and the first p prefix tokens.
template <typename T>
struct ActivationTrace {
  Tape<T> tape;
  LayerMarks marks;
  TokenIds source;
  TokenIds prefix;  // decoder inputs, prefix[0] == bos

  std::size_t source_len() const { return source.size(); }
  std::size_t steps() const { return prefix.size(); }
  const BasicTensor<T>& logits() const { return tape.value(marks.logits); }
};

/// Dropout-free forward of one sentence; returns the full trace.
template <typename T>
ActivationTrace<T> trace_forward(const BasicParameters<T>& params, const ModelConfig& config, const TokenIds& src,
                                 const TokenIds& prefix) {
  ActivationTrace<T> trace;
  trace.source = src;
  trace.prefix = prefix;
  TransformerGraph<T> graph(config, params, trace.tape);
  const auto s = SequenceBatch::single(src);
  NodeId memory = graph.encode(s, &trace.marks);
  graph.decode(memory, s, SequenceBatch::single(prefix), &trace.marks);
  return trace;
}

/// Logits [prefix.size(), tgt_vocab], one row per prefix position.
template <typename T>
BasicTensor<T> forward(const BasicParameters<T>& params, const ModelConfig& config, const TokenIds& src,
                       const TokenIds& prefix) {
  return trace_forward(params, config, src, prefix).logits();
}

}  // namespace relprop
