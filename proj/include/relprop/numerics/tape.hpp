#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "relprop/errors.hpp"
#include "relprop/numerics/rng.hpp"
#include "relprop/numerics/tensor.hpp"

namespace relprop {

using NodeId = std::int32_t;
inline constexpr NodeId kNoNode = -1;

enum class OpKind : std::uint8_t {
  Input,
  Param,
  Constant,
  Embedding,
  MatMul,
  Linear,
  Add,
  Mul,
  Scale,
  Sum,
  Relu,
  LayerNorm,
  AttentionScores,
  Softmax,
  AttentionMix,
  Dropout,
  CrossEntropy,
  SequenceLogProb,
  MrtRisk,
};

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Param: return "param";
    case OpKind::Constant: return "constant";
    case OpKind::Embedding: return "embedding";
    case OpKind::MatMul: return "matmul";
    case OpKind::Linear: return "linear";
    case OpKind::Add: return "residual";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Sum: return "sum";
    case OpKind::Relu: return "relu";
    case OpKind::LayerNorm: return "layernorm";
    case OpKind::AttentionScores: return "attention-scores";
    case OpKind::Softmax: return "softmax";
    case OpKind::AttentionMix: return "attention-weighted-sum";
    case OpKind::Dropout: return "dropout";
    case OpKind::CrossEntropy: return "cross-entropy";
    case OpKind::SequenceLogProb: return "sequence-log-prob";
    case OpKind::MrtRisk: return "mrt-risk";
  }
  return "unknown";
}

/// Which half of an encoder-decoder a node belongs to.
enum class Part : std::uint8_t { None, Encoder, Decoder };

enum class Side : std::uint8_t { None, Source, Target };

/// Attribution of one leaf row to an input token. Side::None rows are
/// treated as constants (their relevance counts as absorbed).
struct TokenSlot {
  Side side = Side::None;
  int index = -1;
};

/// Row layout shared by the three attention ops. Query rows are ordered
/// [batch][q], key rows [batch][k], score rows [batch][head][q].
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t heads = 1;
  std::size_t q_len = 1;
  std::size_t k_len = 1;
  std::vector<std::size_t> key_lengths;
  bool causal = false;

  bool valid(std::size_t b, std::size_t q, std::size_t k) const {
    return k < key_lengths[b] && (!causal || k <= q);
  }
  std::size_t score_row(std::size_t b, std::size_t h, std::size_t q) const { return (b * heads + h) * q_len + q; }
};

template <typename T>
struct TapeNode {
  OpKind kind = OpKind::Input;
  std::vector<NodeId> inputs;
  BasicTensor<T> value;
  std::string label;
  Part part = Part::None;
  int layer = -1;

  // Saved context; which fields are used depends on `kind`.
  std::vector<int> ids;         // embedding ids, loss targets
  std::vector<TokenSlot> slots; // leaf row attribution
  std::vector<double> means;    // layer norm
  std::vector<double> rstds;    // layer norm
  std::vector<T> mask;          // dropout keep-scale, loss row weights
  std::shared_ptr<const AttentionLayout> layout;
  std::vector<int> groups;      // sequence-log-prob: row -> sequence; mrt: sequence -> group
  std::vector<double> costs;    // mrt per-sequence cost
  double scalar = 0.0;          // scale factor / eps / smoothing / sharpness
  std::size_t count = 0;        // number of sequences or groups
};

template <typename T>
class Gradients {
 public:
  explicit Gradients(std::size_t n, const std::map<std::string, NodeId>* params) : grads_(n), params_(params) {}

  bool has(NodeId id) const { return !grads_[static_cast<std::size_t>(id)].empty(); }
  const BasicTensor<T>& at(NodeId id) const {
    if (!has(id)) {
      throw ContractError("no gradient reached node " + std::to_string(id));
    }
    return grads_[static_cast<std::size_t>(id)];
  }
  const BasicTensor<T>& param(const std::string& name) const {
    auto it = params_->find(name);
    if (it == params_->end()) {
      throw ContractError("unknown parameter '" + name + "'");
    }
    return at(it->second);
  }
  std::vector<BasicTensor<T>>& raw() { return grads_; }

 private:
  std::vector<BasicTensor<T>> grads_;
  const std::map<std::string, NodeId>* params_;
};

/// Append-only record of a forward computation. Node ids are positions in
/// the record, so inputs always precede consumers.
template <typename T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  using Node = TapeNode<T>;

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  const TensorT& value(NodeId id) const { return node(id).value; }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::map<std::string, NodeId>& params() const { return params_; }

  std::optional<NodeId> find_param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) {
      return std::nullopt;
    }
    return it->second;
  }

  /// Tags subsequently recorded nodes.
  void set_scope(Part part, int layer) {
    part_ = part;
    layer_ = layer;
  }

  NodeId input(TensorT v, std::string label = "input", std::vector<TokenSlot> slots = {}) {
    Node n = make(OpKind::Input, {}, std::move(label));
    n.slots = std::move(slots);
    n.value = std::move(v);
    return push(std::move(n));
  }

  NodeId param(const std::string& name, TensorT v) {
    if (auto existing = find_param(name)) {
      return *existing;
    }
    Node n = make(OpKind::Param, {}, name);
    n.part = Part::None;
    n.value = std::move(v);
    NodeId id = push(std::move(n));
    params_.emplace(name, id);
    return id;
  }

  NodeId constant(TensorT v, std::string label = "constant", std::vector<TokenSlot> slots = {}) {
    Node n = make(OpKind::Constant, {}, std::move(label));
    n.slots = std::move(slots);
    n.value = std::move(v);
    return push(std::move(n));
  }

  NodeId embedding(NodeId table, std::vector<int> ids, double scale, std::vector<TokenSlot> slots,
                   std::string label = "embedding") {
    Node n = make(OpKind::Embedding, {table}, std::move(label));
    n.ids = std::move(ids);
    n.slots = std::move(slots);
    n.scalar = scale;
    return record(std::move(n));
  }

  NodeId matmul(NodeId a, NodeId b, std::string label = "matmul") {
    return record(make(OpKind::MatMul, {a, b}, std::move(label)));
  }

  NodeId linear(NodeId x, NodeId w, NodeId b, std::string label = "linear") {
    return record(make(OpKind::Linear, {x, w, b}, std::move(label)));
  }

  NodeId add(NodeId a, NodeId b, std::string label = "residual") {
    return record(make(OpKind::Add, {a, b}, std::move(label)));
  }

  NodeId mul(NodeId a, NodeId b, std::string label = "mul") {
    return record(make(OpKind::Mul, {a, b}, std::move(label)));
  }

  NodeId scale(NodeId a, double factor, std::string label = "scale") {
    Node n = make(OpKind::Scale, {a}, std::move(label));
    n.scalar = factor;
    return record(std::move(n));
  }

  NodeId sum(NodeId a, std::string label = "sum") { return record(make(OpKind::Sum, {a}, std::move(label))); }

  NodeId relu(NodeId a, std::string label = "relu") { return record(make(OpKind::Relu, {a}, std::move(label))); }

  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps, std::string label = "layernorm") {
    Node n = make(OpKind::LayerNorm, {x, gain, bias}, std::move(label));
    n.scalar = eps;
    return record(std::move(n));
  }

  NodeId attention_scores(NodeId q, NodeId k, std::shared_ptr<const AttentionLayout> layout, double scale,
                          std::string label = "scores") {
    Node n = make(OpKind::AttentionScores, {q, k}, std::move(label));
    n.layout = std::move(layout);
    n.scalar = scale;
    return record(std::move(n));
  }

  NodeId softmax(NodeId scores, std::shared_ptr<const AttentionLayout> layout, std::string label = "softmax") {
    Node n = make(OpKind::Softmax, {scores}, std::move(label));
    n.layout = std::move(layout);
    return record(std::move(n));
  }

  NodeId attention_mix(NodeId probs, NodeId values, std::shared_ptr<const AttentionLayout> layout,
                       std::string label = "mix") {
    Node n = make(OpKind::AttentionMix, {probs, values}, std::move(label));
    n.layout = std::move(layout);
    return record(std::move(n));
  }

  NodeId dropout(NodeId x, double rate, SeededRng& rng, std::string label = "dropout") {
    Node n = make(OpKind::Dropout, {x}, std::move(label));
    const std::size_t count = value(x).size();
    n.mask.resize(count);
    const T keep = static_cast<T>(1.0 / (1.0 - rate));
    for (auto& m : n.mask) {
      m = rng.bernoulli(rate) ? T{0} : keep;
    }
    n.scalar = rate;
    return record(std::move(n));
  }

  /// Mean label-smoothed cross entropy over rows with nonzero weight.
  NodeId cross_entropy(NodeId logits, std::vector<int> targets, std::vector<T> row_weights, double smoothing,
                       std::string label = "loss") {
    Node n = make(OpKind::CrossEntropy, {logits}, std::move(label));
    n.ids = std::move(targets);
    n.mask = std::move(row_weights);
    n.scalar = smoothing;
    return record(std::move(n));
  }

  /// Per-sequence sum of target log-probabilities; rows with sequence -1 are skipped.
  NodeId sequence_log_prob(NodeId logits, std::vector<int> targets, std::vector<int> row_sequence,
                           std::size_t sequences, std::string label = "seq-logp") {
    Node n = make(OpKind::SequenceLogProb, {logits}, std::move(label));
    n.ids = std::move(targets);
    n.groups = std::move(row_sequence);
    n.count = sequences;
    return record(std::move(n));
  }

  /// Mean over groups of sum_s P~(s) * cost(s), P~ = softmax over the group of sharpness * logp.
  NodeId mrt_risk(NodeId log_probs, std::vector<int> sequence_group, std::vector<double> costs, double sharpness,
                  std::size_t groups, std::string label = "risk") {
    Node n = make(OpKind::MrtRisk, {log_probs}, std::move(label));
    n.groups = std::move(sequence_group);
    n.costs = std::move(costs);
    n.scalar = sharpness;
    n.count = groups;
    return record(std::move(n));
  }

  Gradients<T> backward(NodeId loss) const;

  /// Re-runs every op from the leaves; true iff each recomputed output
  /// equals the stored one bit for bit.
  bool replay_matches() const;

 private:
  Node make(OpKind kind, std::vector<NodeId> inputs, std::string label) const {
    for (NodeId in : inputs) {
      if (in < 0 || static_cast<std::size_t>(in) >= nodes_.size()) {
        throw ContractError("op '" + label + "' references unknown node " + std::to_string(in));
      }
    }
    Node n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.label = std::move(label);
    n.part = part_;
    n.layer = layer_;
    return n;
  }

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId record(Node n) {
    std::vector<const TensorT*> in;
    in.reserve(n.inputs.size());
    for (NodeId id : n.inputs) {
      in.push_back(&value(id));
    }
    n.value = evaluate(n, in, &n);
    return push(std::move(n));
  }

  static TensorT evaluate(const Node& n, const std::vector<const TensorT*>& in, Node* save);

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> params_;
  Part part_ = Part::None;
  int layer_ = -1;
};

namespace detail {

template <typename T>
using StridedMap = Eigen::Map<RowMajor<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMajor<T>, 0, Eigen::OuterStride<>>;

// Column block [col, col+width) of rows [row, row+count) of a rank-2 tensor.
template <typename T>
ConstStridedMap<T> block(const BasicTensor<T>& t, std::size_t row, std::size_t count, std::size_t col,
                         std::size_t width) {
  return ConstStridedMap<T>(t.data() + row * t.cols() + col, static_cast<Eigen::Index>(count),
                            static_cast<Eigen::Index>(width), Eigen::OuterStride<>(static_cast<Eigen::Index>(t.cols())));
}

template <typename T>
StridedMap<T> block(BasicTensor<T>& t, std::size_t row, std::size_t count, std::size_t col, std::size_t width) {
  return StridedMap<T>(t.data() + row * t.cols() + col, static_cast<Eigen::Index>(count),
                       static_cast<Eigen::Index>(width), Eigen::OuterStride<>(static_cast<Eigen::Index>(t.cols())));
}

inline void require(bool ok, const std::string& what) {
  if (!ok) {
    throw ShapeError(what);
  }
}

// Log-softmax of one row in double precision.
template <typename T>
void log_softmax_row(std::span<const T> logits, std::vector<double>& out) {
  out.resize(logits.size());
  double mx = logits[0];
  for (T v : logits) {
    mx = std::max(mx, static_cast<double>(v));
  }
  double denom = 0.0;
  for (T v : logits) {
    denom += std::exp(static_cast<double>(v) - mx);
  }
  const double log_denom = std::log(denom) + mx;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = static_cast<double>(logits[i]) - log_denom;
  }
}

template <typename T>
void check_attention(const AttentionLayout& l, const BasicTensor<T>& q_rows, std::size_t q_count,
                     const BasicTensor<T>& k_rows, std::size_t k_count, const std::string& what) {
  require(q_rows.rank() == 2 && k_rows.rank() == 2, what + ": operands must be rank 2");
  require(q_rows.rows() == q_count && k_rows.rows() == k_count,
          what + ": row counts " + shape_string(q_rows.dims()) + " / " + shape_string(k_rows.dims()) +
              " disagree with the attention layout");
  require(l.key_lengths.size() == l.batch, what + ": key_lengths must have one entry per batch");
}

}  // namespace detail

template <typename T>
BasicTensor<T> Tape<T>::evaluate(const Node& n, const std::vector<const TensorT*>& in, Node* save) {
  using detail::require;
  switch (n.kind) {
    case OpKind::Input:
    case OpKind::Param:
    case OpKind::Constant:
      return n.value;

    case OpKind::Embedding: {
      const TensorT& table = *in[0];
      TensorT out({n.ids.size(), table.cols()});
      const T s = static_cast<T>(n.scalar);
      for (std::size_t r = 0; r < n.ids.size(); ++r) {
        const int id = n.ids[r];
        if (id < 0 || static_cast<std::size_t>(id) >= table.rows()) {
          throw InputError("token id " + std::to_string(id) + " outside embedding table of " +
                           std::to_string(table.rows()) + " rows");
        }
        auto src = table.row(static_cast<std::size_t>(id));
        auto dst = out.row(r);
        for (std::size_t c = 0; c < dst.size(); ++c) {
          dst[c] = src[c] * s;
        }
      }
      return out;
    }

    case OpKind::MatMul:
      return relprop::matmul(*in[0], *in[1]);

    case OpKind::Linear: {
      const TensorT& x = *in[0];
      const TensorT& w = *in[1];
      const TensorT& b = *in[2];
      require(w.rank() == 2 && x.cols() == w.rows() && b.size() == w.cols(),
              "linear '" + n.label + "': x " + shape_string(x.dims()) + ", W " + shape_string(w.dims()) + ", b " +
                  shape_string(b.dims()));
      TensorT out({x.rows(), w.cols()});
      auto o = as_matrix(out);
      o.noalias() = as_matrix(x) * as_matrix(w);
      o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data(), static_cast<Eigen::Index>(b.size()));
      return out;
    }

    case OpKind::Add:
    case OpKind::Mul: {
      const TensorT& a = *in[0];
      const TensorT& b = *in[1];
      require(a.dims() == b.dims(), std::string(op_name(n.kind)) + " '" + n.label + "': " + shape_string(a.dims()) +
                                        " vs " + shape_string(b.dims()));
      TensorT out(a.dims());
      for (std::size_t i = 0; i < a.size(); ++i) {
        out[i] = n.kind == OpKind::Add ? a[i] + b[i] : a[i] * b[i];
      }
      return out;
    }

    case OpKind::Scale: {
      TensorT out = *in[0];
      const T s = static_cast<T>(n.scalar);
      for (auto& v : out.values()) {
        v *= s;
      }
      return out;
    }

    case OpKind::Sum: {
      double acc = 0.0;
      for (T v : in[0]->values()) {
        acc += v;
      }
      return TensorT({1}, {static_cast<T>(acc)});
    }

    case OpKind::Relu: {
      TensorT out = *in[0];
      for (auto& v : out.values()) {
        v = v > T{0} ? v : T{0};
      }
      return out;
    }

    case OpKind::LayerNorm:
      return detail::layer_norm_impl(*in[0], *in[1], *in[2], n.scalar, save ? &save->means : nullptr,
                                     save ? &save->rstds : nullptr);

    case OpKind::AttentionScores: {
      const AttentionLayout& l = *n.layout;
      const TensorT& q = *in[0];
      const TensorT& k = *in[1];
      detail::check_attention(l, q, l.batch * l.q_len, k, l.batch * l.k_len, "attention scores '" + n.label + "'");
      require(q.cols() == k.cols() && q.cols() % l.heads == 0, "attention scores: width mismatch");
      const std::size_t dh = q.cols() / l.heads;
      TensorT out({l.batch * l.heads * l.q_len, l.k_len});
      const T s = static_cast<T>(n.scalar);
      for (std::size_t b = 0; b < l.batch; ++b) {
        for (std::size_t h = 0; h < l.heads; ++h) {
          auto dst = detail::block(out, l.score_row(b, h, 0), l.q_len, 0, l.k_len);
          dst.noalias() = detail::block(q, b * l.q_len, l.q_len, h * dh, dh) *
                          detail::block(k, b * l.k_len, l.k_len, h * dh, dh).transpose();
          dst *= s;
          for (std::size_t qi = 0; qi < l.q_len; ++qi) {
            for (std::size_t ki = 0; ki < l.k_len; ++ki) {
              if (!l.valid(b, qi, ki)) {
                dst(static_cast<Eigen::Index>(qi), static_cast<Eigen::Index>(ki)) = T{0};
              }
            }
          }
        }
      }
      return out;
    }

    case OpKind::Softmax: {
      const AttentionLayout& l = *n.layout;
      const TensorT& x = *in[0];
      require(x.rows() == l.batch * l.heads * l.q_len && x.cols() == l.k_len, "softmax: layout mismatch");
      TensorT out(x.dims());
      for (std::size_t b = 0; b < l.batch; ++b) {
        for (std::size_t h = 0; h < l.heads; ++h) {
          for (std::size_t qi = 0; qi < l.q_len; ++qi) {
            const std::size_t r = l.score_row(b, h, qi);
            auto src = x.row(r);
            auto dst = out.row(r);
            double mx = -INFINITY;
            for (std::size_t ki = 0; ki < l.k_len; ++ki) {
              if (l.valid(b, qi, ki)) {
                mx = std::max(mx, static_cast<double>(src[ki]));
              }
            }
            double denom = 0.0;
            for (std::size_t ki = 0; ki < l.k_len; ++ki) {
              if (l.valid(b, qi, ki)) {
                denom += std::exp(static_cast<double>(src[ki]) - mx);
              }
            }
            for (std::size_t ki = 0; ki < l.k_len; ++ki) {
              dst[ki] = l.valid(b, qi, ki) ? static_cast<T>(std::exp(static_cast<double>(src[ki]) - mx) / denom) : T{0};
            }
          }
        }
      }
      return out;
    }

    case OpKind::AttentionMix: {
      const AttentionLayout& l = *n.layout;
      const TensorT& p = *in[0];
      const TensorT& v = *in[1];
      require(p.rows() == l.batch * l.heads * l.q_len && p.cols() == l.k_len, "attention mix: probs layout mismatch");
      require(v.rows() == l.batch * l.k_len && v.cols() % l.heads == 0, "attention mix: values layout mismatch");
      const std::size_t dh = v.cols() / l.heads;
      TensorT out({l.batch * l.q_len, v.cols()});
      for (std::size_t b = 0; b < l.batch; ++b) {
        for (std::size_t h = 0; h < l.heads; ++h) {
          detail::block(out, b * l.q_len, l.q_len, h * dh, dh).noalias() =
              detail::block(p, l.score_row(b, h, 0), l.q_len, 0, l.k_len) *
              detail::block(v, b * l.k_len, l.k_len, h * dh, dh);
        }
      }
      return out;
    }

    case OpKind::Dropout: {
      TensorT out = *in[0];
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= n.mask[i];
      }
      return out;
    }

    case OpKind::CrossEntropy: {
      const TensorT& logits = *in[0];
      require(n.ids.size() == logits.rows() && n.mask.size() == logits.rows(), "cross entropy: target count mismatch");
      const double eps = n.scalar;
      const double vocab = static_cast<double>(logits.cols());
      double total = 0.0;
      double weight = 0.0;
      std::vector<double> logp;
      for (std::size_t r = 0; r < logits.rows(); ++r) {
        if (n.mask[r] == T{0}) {
          continue;
        }
        detail::log_softmax_row(logits.row(r), logp);
        double row_loss = -(1.0 - eps) * logp[static_cast<std::size_t>(n.ids[r])];
        if (eps > 0.0) {
          double s = 0.0;
          for (double lp : logp) {
            s += lp;
          }
          row_loss -= eps / vocab * s;
        }
        total += n.mask[r] * row_loss;
        weight += n.mask[r];
      }
      return TensorT({1}, {static_cast<T>(weight > 0.0 ? total / weight : 0.0)});
    }

    case OpKind::SequenceLogProb: {
      const TensorT& logits = *in[0];
      require(n.ids.size() == logits.rows() && n.groups.size() == logits.rows(),
              "sequence log prob: target count mismatch");
      std::vector<double> acc(n.count, 0.0);
      std::vector<double> logp;
      for (std::size_t r = 0; r < logits.rows(); ++r) {
        if (n.groups[r] < 0) {
          continue;
        }
        detail::log_softmax_row(logits.row(r), logp);
        acc[static_cast<std::size_t>(n.groups[r])] += logp[static_cast<std::size_t>(n.ids[r])];
      }
      TensorT out({n.count});
      for (std::size_t s = 0; s < n.count; ++s) {
        out[s] = static_cast<T>(acc[s]);
      }
      return out;
    }

    case OpKind::MrtRisk: {
      const TensorT& logp = *in[0];
      require(logp.size() == n.groups.size() && n.costs.size() == n.groups.size(), "mrt risk: sequence count mismatch");
      std::vector<double> mx(n.count, -INFINITY);
      for (std::size_t s = 0; s < logp.size(); ++s) {
        auto g = static_cast<std::size_t>(n.groups[s]);
        mx[g] = std::max(mx[g], n.scalar * logp[s]);
      }
      std::vector<double> denom(n.count, 0.0);
      std::vector<double> num(n.count, 0.0);
      for (std::size_t s = 0; s < logp.size(); ++s) {
        auto g = static_cast<std::size_t>(n.groups[s]);
        const double w = std::exp(n.scalar * logp[s] - mx[g]);
        denom[g] += w;
        num[g] += w * n.costs[s];
      }
      double risk = 0.0;
      for (std::size_t g = 0; g < n.count; ++g) {
        risk += num[g] / denom[g];
      }
      return TensorT({1}, {static_cast<T>(risk / static_cast<double>(n.count))});
    }
  }
  throw ContractError("unhandled op kind");
}

template <typename T>
Gradients<T> Tape<T>::backward(NodeId loss) const {
  const Node& root = node(loss);
  if (root.value.size() != 1) {
    throw ContractError("backward needs a scalar loss, node '" + root.label + "' has dims " +
                        shape_string(root.value.dims()));
  }
  Gradients<T> result(nodes_.size(), &params_);
  auto& g = result.raw();
  auto grad_for = [&](NodeId id) -> TensorT& {
    auto& slot = g[static_cast<std::size_t>(id)];
    if (slot.empty()) {
      slot = TensorT(value(id).dims());
    }
    return slot;
  };
  g[static_cast<std::size_t>(loss)] = TensorT(root.value.dims(), T{1});

  for (NodeId id = loss; id >= 0; --id) {
    const auto idx = static_cast<std::size_t>(id);
    if (g[idx].empty()) {
      continue;
    }
    const Node& n = nodes_[idx];
    const TensorT& gy = g[idx];
    switch (n.kind) {
      case OpKind::Input:
      case OpKind::Param:
      case OpKind::Constant:
        break;

      case OpKind::Embedding: {
        TensorT& gt = grad_for(n.inputs[0]);
        const T s = static_cast<T>(n.scalar);
        for (std::size_t r = 0; r < n.ids.size(); ++r) {
          auto dst = gt.row(static_cast<std::size_t>(n.ids[r]));
          auto src = gy.row(r);
          for (std::size_t c = 0; c < dst.size(); ++c) {
            dst[c] += src[c] * s;
          }
        }
        break;
      }

      case OpKind::MatMul: {
        const TensorT& a = value(n.inputs[0]);
        const TensorT& b = value(n.inputs[1]);
        as_matrix(grad_for(n.inputs[0])).noalias() += as_matrix(gy) * as_matrix(b).transpose();
        as_matrix(grad_for(n.inputs[1])).noalias() += as_matrix(a).transpose() * as_matrix(gy);
        break;
      }

      case OpKind::Linear: {
        const TensorT& x = value(n.inputs[0]);
        const TensorT& w = value(n.inputs[1]);
        as_matrix(grad_for(n.inputs[0])).noalias() += as_matrix(gy) * as_matrix(w).transpose();
        as_matrix(grad_for(n.inputs[1])).noalias() += as_matrix(x).transpose() * as_matrix(gy);
        TensorT& gb = grad_for(n.inputs[2]);
        for (std::size_t r = 0; r < gy.rows(); ++r) {
          auto src = gy.row(r);
          for (std::size_t c = 0; c < src.size(); ++c) {
            gb[c] += src[c];
          }
        }
        break;
      }

      case OpKind::Add: {
        for (NodeId in : n.inputs) {
          TensorT& gi = grad_for(in);
          for (std::size_t i = 0; i < gy.size(); ++i) {
            gi[i] += gy[i];
          }
        }
        break;
      }

      case OpKind::Mul: {
        const TensorT& a = value(n.inputs[0]);
        const TensorT& b = value(n.inputs[1]);
        TensorT& ga = grad_for(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) {
          ga[i] += gy[i] * b[i];
        }
        TensorT& gb = grad_for(n.inputs[1]);
        for (std::size_t i = 0; i < gy.size(); ++i) {
          gb[i] += gy[i] * a[i];
        }
        break;
      }

      case OpKind::Scale: {
        TensorT& gi = grad_for(n.inputs[0]);
        const T s = static_cast<T>(n.scalar);
        for (std::size_t i = 0; i < gy.size(); ++i) {
          gi[i] += gy[i] * s;
        }
        break;
      }

      case OpKind::Sum: {
        TensorT& gi = grad_for(n.inputs[0]);
        for (auto& v : gi.values()) {
          v += gy[0];
        }
        break;
      }

      case OpKind::Relu: {
        const TensorT& x = value(n.inputs[0]);
        TensorT& gi = grad_for(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) {
          if (x[i] > T{0}) {
            gi[i] += gy[i];
          }
        }
        break;
      }

      case OpKind::LayerNorm: {
        const TensorT& x = value(n.inputs[0]);
        const TensorT& gain = value(n.inputs[1]);
        TensorT& gx = grad_for(n.inputs[0]);
        TensorT& ggain = grad_for(n.inputs[1]);
        TensorT& gbias = grad_for(n.inputs[2]);
        const std::size_t d = x.cols();
        std::vector<double> xhat(d);
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < x.rows(); ++r) {
          auto xr = x.row(r);
          auto gr = gy.row(r);
          const double mean = n.means[r];
          const double rstd = n.rstds[r];
          double mean_dxhat = 0.0;
          double mean_dxhat_xhat = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            xhat[c] = (xr[c] - mean) * rstd;
            dxhat[c] = static_cast<double>(gr[c]) * gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xhat[c];
            ggain[c] += static_cast<T>(gr[c] * xhat[c]);
            gbias[c] += gr[c];
          }
          mean_dxhat /= static_cast<double>(d);
          mean_dxhat_xhat /= static_cast<double>(d);
          auto gxr = gx.row(r);
          for (std::size_t c = 0; c < d; ++c) {
            gxr[c] += static_cast<T>(rstd * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat));
          }
        }
        break;
      }

      case OpKind::AttentionScores: {
        const AttentionLayout& l = *n.layout;
        const TensorT& q = value(n.inputs[0]);
        const TensorT& k = value(n.inputs[1]);
        TensorT& gq = grad_for(n.inputs[0]);
        TensorT& gk = grad_for(n.inputs[1]);
        const std::size_t dh = q.cols() / l.heads;
        const T s = static_cast<T>(n.scalar);
        RowMajor<T> gs(static_cast<Eigen::Index>(l.q_len), static_cast<Eigen::Index>(l.k_len));
        for (std::size_t b = 0; b < l.batch; ++b) {
          for (std::size_t h = 0; h < l.heads; ++h) {
            gs = detail::block(gy, l.score_row(b, h, 0), l.q_len, 0, l.k_len);
            for (std::size_t qi = 0; qi < l.q_len; ++qi) {
              for (std::size_t ki = 0; ki < l.k_len; ++ki) {
                if (!l.valid(b, qi, ki)) {
                  gs(static_cast<Eigen::Index>(qi), static_cast<Eigen::Index>(ki)) = T{0};
                }
              }
            }
            gs *= s;
            detail::block(gq, b * l.q_len, l.q_len, h * dh, dh).noalias() +=
                gs * detail::block(k, b * l.k_len, l.k_len, h * dh, dh);
            detail::block(gk, b * l.k_len, l.k_len, h * dh, dh).noalias() +=
                gs.transpose() * detail::block(q, b * l.q_len, l.q_len, h * dh, dh);
          }
        }
        break;
      }

      case OpKind::Softmax: {
        const AttentionLayout& l = *n.layout;
        TensorT& gx = grad_for(n.inputs[0]);
        for (std::size_t b = 0; b < l.batch; ++b) {
          for (std::size_t h = 0; h < l.heads; ++h) {
            for (std::size_t qi = 0; qi < l.q_len; ++qi) {
              const std::size_t r = l.score_row(b, h, qi);
              auto s = n.value.row(r);
              auto gr = gy.row(r);
              double dot = 0.0;
              for (std::size_t ki = 0; ki < l.k_len; ++ki) {
                dot += static_cast<double>(gr[ki]) * s[ki];
              }
              auto gxr = gx.row(r);
              for (std::size_t ki = 0; ki < l.k_len; ++ki) {
                if (l.valid(b, qi, ki)) {
                  gxr[ki] += static_cast<T>(s[ki] * (gr[ki] - dot));
                }
              }
            }
          }
        }
        break;
      }

      case OpKind::AttentionMix: {
        const AttentionLayout& l = *n.layout;
        const TensorT& p = value(n.inputs[0]);
        const TensorT& v = value(n.inputs[1]);
        TensorT& gp = grad_for(n.inputs[0]);
        TensorT& gv = grad_for(n.inputs[1]);
        const std::size_t dh = v.cols() / l.heads;
        for (std::size_t b = 0; b < l.batch; ++b) {
          for (std::size_t h = 0; h < l.heads; ++h) {
            auto go = detail::block(gy, b * l.q_len, l.q_len, h * dh, dh);
            detail::block(gp, l.score_row(b, h, 0), l.q_len, 0, l.k_len).noalias() +=
                go * detail::block(v, b * l.k_len, l.k_len, h * dh, dh).transpose();
            detail::block(gv, b * l.k_len, l.k_len, h * dh, dh).noalias() +=
                detail::block(p, l.score_row(b, h, 0), l.q_len, 0, l.k_len).transpose() * go;
          }
        }
        break;
      }

      case OpKind::Dropout: {
        TensorT& gi = grad_for(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) {
          gi[i] += gy[i] * n.mask[i];
        }
        break;
      }

      case OpKind::CrossEntropy: {
        const TensorT& logits = value(n.inputs[0]);
        TensorT& gl = grad_for(n.inputs[0]);
        double weight = 0.0;
        for (T w : n.mask) {
          weight += w;
        }
        if (weight == 0.0) {
          break;
        }
        const double eps = n.scalar;
        const double uniform = eps / static_cast<double>(logits.cols());
        std::vector<double> logp;
        for (std::size_t r = 0; r < logits.rows(); ++r) {
          if (n.mask[r] == T{0}) {
            continue;
          }
          detail::log_softmax_row(logits.row(r), logp);
          const double scale = gy[0] * n.mask[r] / weight;
          auto dst = gl.row(r);
          for (std::size_t c = 0; c < dst.size(); ++c) {
            double target = uniform + (static_cast<int>(c) == n.ids[r] ? 1.0 - eps : 0.0);
            dst[c] += static_cast<T>(scale * (std::exp(logp[c]) - target));
          }
        }
        break;
      }

      case OpKind::SequenceLogProb: {
        const TensorT& logits = value(n.inputs[0]);
        TensorT& gl = grad_for(n.inputs[0]);
        std::vector<double> logp;
        for (std::size_t r = 0; r < logits.rows(); ++r) {
          if (n.groups[r] < 0) {
            continue;
          }
          const double up = gy[static_cast<std::size_t>(n.groups[r])];
          if (up == 0.0) {
            continue;
          }
          detail::log_softmax_row(logits.row(r), logp);
          auto dst = gl.row(r);
          for (std::size_t c = 0; c < dst.size(); ++c) {
            const double onehot = static_cast<int>(c) == n.ids[r] ? 1.0 : 0.0;
            dst[c] += static_cast<T>(up * (onehot - std::exp(logp[c])));
          }
        }
        break;
      }

      case OpKind::MrtRisk: {
        const TensorT& logp = value(n.inputs[0]);
        TensorT& gl = grad_for(n.inputs[0]);
        std::vector<double> mx(n.count, -INFINITY);
        for (std::size_t s = 0; s < logp.size(); ++s) {
          auto grp = static_cast<std::size_t>(n.groups[s]);
          mx[grp] = std::max(mx[grp], n.scalar * logp[s]);
        }
        std::vector<double> denom(n.count, 0.0);
        std::vector<double> num(n.count, 0.0);
        std::vector<double> w(logp.size());
        for (std::size_t s = 0; s < logp.size(); ++s) {
          auto grp = static_cast<std::size_t>(n.groups[s]);
          w[s] = std::exp(n.scalar * logp[s] - mx[grp]);
          denom[grp] += w[s];
          num[grp] += w[s] * n.costs[s];
        }
        const double scale = gy[0] / static_cast<double>(n.count);
        for (std::size_t s = 0; s < logp.size(); ++s) {
          auto grp = static_cast<std::size_t>(n.groups[s]);
          const double prob = w[s] / denom[grp];
          const double expected = num[grp] / denom[grp];
          gl[s] += static_cast<T>(scale * n.scalar * prob * (n.costs[s] - expected));
        }
        break;
      }
    }
  }
  return result;
}

template <typename T>
bool Tape<T>::replay_matches() const {
  std::vector<TensorT> replayed(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    std::vector<const TensorT*> in;
    for (NodeId id : n.inputs) {
      in.push_back(&replayed[static_cast<std::size_t>(id)]);
    }
    replayed[i] = evaluate(n, in, nullptr);
    if (!(replayed[i] == n.value)) {
      return false;
    }
  }
  return true;
}

}  // namespace relprop
