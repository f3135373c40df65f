#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "relprop/errors.hpp"
#include "relprop/lrp/rules.hpp"
#include "relprop/model/transformer.hpp"
#include "relprop/numerics/tape.hpp"

namespace relprop {

struct NodeAudit {
  NodeId id = kNoNode;
  OpKind kind = OpKind::Input;
  Part part = Part::None;
  int layer = -1;
  double incoming = 0.0;
  double outgoing = 0.0;
  double absorbed = 0.0;

  double imbalance() const { return incoming - outgoing - absorbed; }
};

/// Relevance bookkeeping for one layer: what reached its output, what left
/// through its input, what its nodes absorbed and what crossed into the
/// encoder.
struct LayerLedger {
  Part part = Part::None;
  int layer = -1;
  double entering = 0.0;
  double leaving = 0.0;
  double absorbed = 0.0;
  double leaked = 0.0;

  double imbalance() const { return entering - leaving - absorbed - leaked; }
};

struct PropagationAudit {
  std::vector<NodeAudit> nodes;
  std::vector<LayerLedger> layers;
  double leaked_to_encoder = 0.0;
  double memory_relevance = 0.0;
  double unattributed = 0.0;  // leaf rows without a token, such as bos

  double max_node_imbalance() const {
    double m = 0.0;
    for (const auto& n : nodes) {
      m = std::max(m, std::abs(n.imbalance()));
    }
    return m;
  }
  double max_layer_imbalance() const {
    double m = 0.0;
    for (const auto& l : layers) {
      m = std::max(m, std::abs(l.imbalance()));
    }
    return m;
  }
};

/// Relevance per node, aligned with node values; empty when none arrived.
using RelevanceMap = std::vector<std::vector<double>>;

/// Walks a tape backwards from seeded nodes, applying the rule of each
/// node kind. Leaves (inputs, constants, embeddings) keep their relevance.
template <typename T>
class RelevancePropagator {
 public:
  RelevancePropagator(const Tape<T>& tape, LrpConfig cfg) : tape_(tape), cfg_(cfg) {
    cfg_.validate();
    values_.reserve(tape.size());
    for (const auto& n : tape.nodes()) {
      values_.emplace_back(n.value.values().begin(), n.value.values().end());
    }
  }

  const Tape<T>& tape() const { return tape_; }
  const LrpConfig& config() const { return cfg_; }

  RelevanceMap run(const std::vector<std::pair<NodeId, std::vector<double>>>& seeds,
                   PropagationAudit* audit = nullptr) const {
    RelevanceMap r(tape_.size());
    NodeId top = kNoNode;
    for (const auto& [id, seed] : seeds) {
      if (id < 0 || static_cast<std::size_t>(id) >= tape_.size()) {
        throw ContractError("relevance seed on unknown node " + std::to_string(id));
      }
      if (seed.size() != tape_.value(id).size()) {
        throw ShapeError("relevance seed width " + std::to_string(seed.size()) + " for node '" +
                         tape_.node(id).label + "' of size " + std::to_string(tape_.value(id).size()));
      }
      accumulate(r, id, seed);
      top = std::max(top, id);
    }
    for (NodeId id = top; id >= 0; --id) {
      if (r[static_cast<std::size_t>(id)].empty()) {
        continue;
      }
      step(r, id, audit);
    }
    return r;
  }

 private:
  struct Outcome {
    double outgoing = 0.0;
    double absorbed = 0.0;
  };

  static void accumulate(RelevanceMap& r, NodeId id, std::span<const double> add) {
    auto& dst = r[static_cast<std::size_t>(id)];
    if (dst.empty()) {
      dst.assign(add.begin(), add.end());
    } else {
      for (std::size_t i = 0; i < add.size(); ++i) {
        dst[i] += add[i];
      }
    }
  }

  static double total(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) {
      s += x;
    }
    return s;
  }

  const std::vector<double>& val(NodeId id) const { return values_[static_cast<std::size_t>(id)]; }

  // Delivers `msg` to input `to` of node `from`; parameters absorb it.
  double send(RelevanceMap& r, NodeId from, NodeId to, std::vector<double>&& msg, Outcome& o,
              PropagationAudit* audit) const {
    const double mass = total(msg);
    const auto& target = tape_.node(to);
    if (target.kind == OpKind::Param) {
      o.absorbed += mass;
      return mass;
    }
    o.outgoing += mass;
    if (audit && tape_.node(from).part == Part::Decoder && target.part == Part::Encoder) {
      add_leak(*audit, tape_.node(from).layer, mass);
    }
    auto& dst = r[static_cast<std::size_t>(to)];
    if (dst.empty()) {
      dst = std::move(msg);
    } else {
      for (std::size_t i = 0; i < msg.size(); ++i) {
        dst[i] += msg[i];
      }
    }
    return mass;
  }

  static void add_leak(PropagationAudit& audit, int layer, double mass) {
    audit.leaked_to_encoder += mass;
    for (auto& l : audit.layers) {
      if (l.part == Part::Decoder && l.layer == layer) {
        l.leaked += mass;
        return;
      }
    }
    LayerLedger l;
    l.part = Part::Decoder;
    l.layer = layer;
    l.leaked = mass;
    audit.layers.push_back(l);
  }

  void step(RelevanceMap& r, NodeId id, PropagationAudit* audit) const {
    const auto& n = tape_.node(id);
    const std::vector<double> rel = r[static_cast<std::size_t>(id)];
    Outcome o;
    switch (n.kind) {
      case OpKind::Input:
      case OpKind::Constant:
      case OpKind::Embedding:
      case OpKind::Param:
        leaf(n, rel, o, audit);
        break;
      case OpKind::Linear:
        linear(r, id, rel, o, audit);
        break;
      case OpKind::Add: {
        std::vector<double> a(rel.size(), 0.0);
        std::vector<double> b(rel.size(), 0.0);
        const std::span<const double> addends[] = {val(n.inputs[0]), val(n.inputs[1])};
        const std::span<double> outs[] = {a, b};
        o.absorbed += detail::residual_taylor(addends, rel, cfg_, outs);
        send(r, id, n.inputs[0], std::move(a), o, audit);
        send(r, id, n.inputs[1], std::move(b), o, audit);
        break;
      }
      case OpKind::Relu:
      case OpKind::Scale:
      case OpKind::Dropout:
        send(r, id, n.inputs[0], std::vector<double>(rel), o, audit);
        break;
      case OpKind::LayerNorm:
        layer_norm(r, id, rel, o, audit);
        break;
      case OpKind::Softmax:
        softmax(r, id, rel, o, audit);
        break;
      case OpKind::AttentionScores:
        scores(r, id, rel, o, audit);
        break;
      case OpKind::AttentionMix:
        mix(r, id, rel, o, audit);
        break;
      default:
        throw ContractError("no relevance rule for node '" + n.label + "' of kind '" + std::string(op_name(n.kind)) +
                            "'");
    }
    if (audit) {
      NodeAudit a;
      a.id = id;
      a.kind = n.kind;
      a.part = n.part;
      a.layer = n.layer;
      a.incoming = total(rel);
      a.outgoing = o.outgoing;
      a.absorbed = o.absorbed;
      audit->nodes.push_back(a);
    }
  }

  void leaf(const TapeNode<T>& n, const std::vector<double>& rel, Outcome& o, PropagationAudit* audit) const {
    const std::size_t cols = n.value.cols();
    for (std::size_t row = 0; row < n.value.rows(); ++row) {
      const double mass = total(std::span<const double>(rel).subspan(row * cols, cols));
      const bool attributed = row < n.slots.size() && n.slots[row].side != Side::None;
      if (attributed) {
        o.outgoing += mass;
      } else {
        o.absorbed += mass;
        if (audit) {
          audit->unattributed += mass;
        }
      }
    }
  }

  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;

  // Matrix form of the alpha-beta rule: z_ij = x_i w_ij is positive exactly
  // when x_i and w_ij share a sign.
  void linear(RelevanceMap& r, NodeId id, const std::vector<double>& rel, Outcome& o, PropagationAudit* audit) const {
    const auto& n = tape_.node(id);
    const auto& xt = tape_.value(n.inputs[0]);
    const auto& wt = tape_.value(n.inputs[1]);
    const auto rows = static_cast<Eigen::Index>(xt.rows());
    const auto in = static_cast<Eigen::Index>(wt.rows());
    const auto out = static_cast<Eigen::Index>(wt.cols());
    CMap x(val(n.inputs[0]).data(), rows, in);
    CMap w(val(n.inputs[1]).data(), in, out);
    Eigen::Map<const Eigen::RowVectorXd> b(val(n.inputs[2]).data(), out);
    CMap R(rel.data(), rows, out);

    const Mat xp = x.cwiseMax(0.0);
    const Mat xn = x.cwiseMin(0.0);
    const Mat wp = w.cwiseMax(0.0);
    const Mat wn = w.cwiseMin(0.0);
    const Eigen::RowVectorXd bp = b.cwiseMax(0.0);
    const Eigen::RowVectorXd bn = b.cwiseMin(0.0);

    Mat zp = xp * wp + xn * wn;
    zp.rowwise() += bp;
    Mat sp = Mat::Zero(rows, out);
    double absorbed = 0.0;
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < out; ++j) {
        const double rj = R(i, j);
        if (rj == 0.0) {
          continue;
        }
        if (zp(i, j) >= cfg_.denom_eps) {
          sp(i, j) = cfg_.alpha * rj / zp(i, j);
          absorbed += sp(i, j) * bp(j);
        } else {
          absorbed += cfg_.alpha * rj;
        }
      }
    }
    Mat msg = xp.cwiseProduct(sp * wp.transpose()) + xn.cwiseProduct(sp * wn.transpose());

    if (cfg_.beta != 0.0) {
      Mat zn = xp * wn + xn * wp;
      zn.rowwise() += bn;
      Mat sn = Mat::Zero(rows, out);
      for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < out; ++j) {
          const double rj = R(i, j);
          if (rj == 0.0) {
            continue;
          }
          if (-zn(i, j) >= cfg_.denom_eps) {
            sn(i, j) = cfg_.beta * rj / zn(i, j);
            absorbed += sn(i, j) * bn(j);
          } else {
            absorbed += cfg_.beta * rj;
          }
        }
      }
      msg += xp.cwiseProduct(sn * wn.transpose()) + xn.cwiseProduct(sn * wp.transpose());
    }
    o.absorbed += absorbed;
    send(r, id, n.inputs[0], std::vector<double>(msg.data(), msg.data() + msg.size()), o, audit);
  }

  void layer_norm(RelevanceMap& r, NodeId id, const std::vector<double>& rel, Outcome& o,
                  PropagationAudit* audit) const {
    const auto& n = tape_.node(id);
    const std::size_t cols = n.value.cols();
    const auto& x = val(n.inputs[0]);
    const auto& gain = val(n.inputs[1]);
    const auto& bias = val(n.inputs[2]);
    std::vector<double> msg(x.size(), 0.0);
    std::vector<double> xhat(cols);
    std::vector<double> scratch;
    for (std::size_t row = 0; row < n.value.rows(); ++row) {
      auto rrow = std::span<const double>(rel).subspan(row * cols, cols);
      if (std::all_of(rrow.begin(), rrow.end(), [](double v) { return v == 0.0; })) {
        continue;
      }
      auto xrow = std::span<const double>(x).subspan(row * cols, cols);
      for (std::size_t c = 0; c < cols; ++c) {
        xhat[c] = (xrow[c] - n.means[row]) * n.rstds[row];
      }
      o.absorbed += detail::layer_norm_taylor(xrow, xhat, n.rstds[row], gain, bias, rrow, cfg_,
                                              std::span<double>(msg).subspan(row * cols, cols), scratch);
    }
    send(r, id, n.inputs[0], std::move(msg), o, audit);
  }

  void softmax(RelevanceMap& r, NodeId id, const std::vector<double>& rel, Outcome& o, PropagationAudit* audit) const {
    const auto& n = tape_.node(id);
    const AttentionLayout& l = *n.layout;
    const auto& x = val(n.inputs[0]);
    const auto& s = val(id);
    std::vector<double> msg(x.size(), 0.0);
    std::vector<double> scratch;
    for (std::size_t b = 0; b < l.batch; ++b) {
      for (std::size_t h = 0; h < l.heads; ++h) {
        for (std::size_t q = 0; q < l.q_len; ++q) {
          const std::size_t base = l.score_row(b, h, q) * l.k_len;
          std::size_t valid = 0;
          while (valid < l.k_len && l.valid(b, q, valid)) {
            ++valid;
          }
          auto rrow = std::span<const double>(rel).subspan(base, valid);
          o.absorbed += detail::softmax_taylor(std::span<const double>(x).subspan(base, valid),
                                               std::span<const double>(s).subspan(base, valid), rrow, cfg_,
                                               std::span<double>(msg).subspan(base, valid), scratch);
          for (std::size_t k = valid; k < l.k_len; ++k) {
            o.absorbed += rel[base + k];
          }
        }
      }
    }
    send(r, id, n.inputs[0], std::move(msg), o, audit);
  }

  void scores(RelevanceMap& r, NodeId id, const std::vector<double>& rel, Outcome& o, PropagationAudit* audit) const {
    const auto& n = tape_.node(id);
    const AttentionLayout& l = *n.layout;
    const auto& q = val(n.inputs[0]);
    const auto& k = val(n.inputs[1]);
    const std::size_t width = tape_.value(n.inputs[0]).cols();
    const std::size_t dh = width / l.heads;
    std::vector<double> mq(q.size(), 0.0);
    std::vector<double> mk(k.size(), 0.0);
    std::vector<double> z(dh);
    std::vector<double> m(dh);
    for (std::size_t b = 0; b < l.batch; ++b) {
      for (std::size_t h = 0; h < l.heads; ++h) {
        for (std::size_t qi = 0; qi < l.q_len; ++qi) {
          const std::size_t row = l.score_row(b, h, qi);
          const std::size_t qoff = (b * l.q_len + qi) * width + h * dh;
          for (std::size_t ki = 0; ki < l.k_len; ++ki) {
            const double rv = rel[row * l.k_len + ki];
            if (rv == 0.0) {
              continue;
            }
            if (!l.valid(b, qi, ki)) {
              o.absorbed += rv;
              continue;
            }
            const std::size_t koff = (b * l.k_len + ki) * width + h * dh;
            for (std::size_t d = 0; d < dh; ++d) {
              z[d] = n.scalar * q[qoff + d] * k[koff + d];
              m[d] = 0.0;
            }
            o.absorbed += distribute(z, 0.0, rv, cfg_, m);
            for (std::size_t d = 0; d < dh; ++d) {
              mq[qoff + d] += 0.5 * m[d];
              mk[koff + d] += m[d] - 0.5 * m[d];
            }
          }
        }
      }
    }
    send(r, id, n.inputs[0], std::move(mq), o, audit);
    send(r, id, n.inputs[1], std::move(mk), o, audit);
  }

  void mix(RelevanceMap& r, NodeId id, const std::vector<double>& rel, Outcome& o, PropagationAudit* audit) const {
    const auto& n = tape_.node(id);
    const AttentionLayout& l = *n.layout;
    const auto& p = val(n.inputs[0]);
    const auto& v = val(n.inputs[1]);
    const std::size_t width = tape_.value(n.inputs[1]).cols();
    const std::size_t dh = width / l.heads;
    std::vector<double> mp(p.size(), 0.0);
    std::vector<double> mv(v.size(), 0.0);
    std::vector<double> z(l.k_len);
    std::vector<double> m(l.k_len);
    for (std::size_t b = 0; b < l.batch; ++b) {
      for (std::size_t h = 0; h < l.heads; ++h) {
        for (std::size_t qi = 0; qi < l.q_len; ++qi) {
          const std::size_t prow = l.score_row(b, h, qi) * l.k_len;
          for (std::size_t d = 0; d < dh; ++d) {
            const std::size_t col = h * dh + d;
            const double rv = rel[(b * l.q_len + qi) * width + col];
            if (rv == 0.0) {
              continue;
            }
            for (std::size_t ki = 0; ki < l.k_len; ++ki) {
              z[ki] = p[prow + ki] * v[(b * l.k_len + ki) * width + col];
              m[ki] = 0.0;
            }
            o.absorbed += distribute(z, 0.0, rv, cfg_, m);
            for (std::size_t ki = 0; ki < l.k_len; ++ki) {
              const double to_weight = cfg_.attention_as_constant ? 0.0 : 0.5 * m[ki];
              mp[prow + ki] += to_weight;
              mv[(b * l.k_len + ki) * width + col] += m[ki] - to_weight;
            }
          }
        }
      }
    }
    send(r, id, n.inputs[0], std::move(mp), o, audit);
    send(r, id, n.inputs[1], std::move(mv), o, audit);
  }

  const Tape<T>& tape_;
  LrpConfig cfg_;
  std::vector<std::vector<double>> values_;
};

/// Normalized token relevances for one decoder step. `prefix[j]` belongs to
/// target token j + 1 (1-based), so entries j >= step - 1 are zero.
struct ContributionRecord {
  std::size_t step = 0;
  int logit = -1;
  std::vector<double> source;
  std::vector<double> prefix;
  double source_total = 0.0;
  double target_total = 0.0;
  double bias_absorbed = 0.0;  // 1 minus the token mass before renormalizing
  bool degenerate = false;     // no token mass survived, nothing to normalize

  double total() const {
    double s = 0.0;
    for (double v : source) {
      s += v;
    }
    for (double v : prefix) {
      s += v;
    }
    return s;
  }
};

/// Explains every decoder step of one traced sentence.
template <typename T>
class PredictionExplainer {
 public:
  PredictionExplainer(const ActivationTrace<T>& trace, const LrpConfig& cfg) : trace_(trace), prop_(trace.tape, cfg) {
    const auto& m = trace.marks;
    auto require = [&](NodeId id, const char* what) {
      if (id == kNoNode || static_cast<std::size_t>(id) >= trace.tape.size()) {
        throw ContractError(std::string("activation trace is missing the ") + what + " node");
      }
    };
    require(m.logits, "logits");
    require(m.memory, "encoder memory");
    if (m.encoder.empty() || m.decoder.empty()) {
      throw ContractError("activation trace is missing its layer boundary nodes");
    }
    for (NodeId id : m.encoder) {
      require(id, "encoder layer");
    }
    for (NodeId id : m.decoder) {
      require(id, "decoder layer");
    }
  }

  std::size_t steps() const { return trace_.steps(); }

  /// Logit the config selects at `step` (1-based).
  int chosen_logit(std::size_t step) const {
    const auto& cfg = prop_.config();
    const auto& logits = trace_.logits();
    if (cfg.logit_choice == LogitChoice::Index) {
      if (static_cast<std::size_t>(cfg.logit_index) >= logits.cols()) {
        throw ConfigError("logit_index " + std::to_string(cfg.logit_index) + " outside vocabulary of " +
                          std::to_string(logits.cols()));
      }
      return cfg.logit_index;
    }
    auto row = logits.row(step - 1);
    std::size_t best = 0;
    for (std::size_t v = 1; v < row.size(); ++v) {
      if (row[v] > row[best]) {
        best = v;
      }
    }
    return static_cast<int>(best);
  }

  ContributionRecord explain(std::size_t step, PropagationAudit* audit = nullptr) const {
    if (step < 1 || step > trace_.steps()) {
      throw ContractError("step " + std::to_string(step) + " outside traced steps 1.." +
                          std::to_string(trace_.steps()));
    }
    const auto& m = trace_.marks;
    const auto& tape = trace_.tape;
    ContributionRecord rec;
    rec.step = step;
    rec.logit = chosen_logit(step);
    std::vector<double> seed(tape.value(m.logits).size(), 0.0);
    seed[(step - 1) * tape.value(m.logits).cols() + static_cast<std::size_t>(rec.logit)] = 1.0;
    if (audit) {
      *audit = PropagationAudit{};
      for (std::size_t l = 0; l + 1 < m.decoder.size(); ++l) {
        audit->layers.push_back({Part::Decoder, static_cast<int>(l), 0, 0, 0, 0});
      }
      for (std::size_t l = 0; l + 1 < m.encoder.size(); ++l) {
        audit->layers.push_back({Part::Encoder, static_cast<int>(l), 0, 0, 0, 0});
      }
    }
    const RelevanceMap r = prop_.run({{m.logits, std::move(seed)}}, audit);

    std::vector<double> raw_src(trace_.source_len(), 0.0);
    std::vector<double> raw_tgt(trace_.steps() - 1, 0.0);
    for (std::size_t id = 0; id < tape.size(); ++id) {
      const auto& n = tape.node(static_cast<NodeId>(id));
      if (r[id].empty() || n.slots.empty() ||
          (n.kind != OpKind::Embedding && n.kind != OpKind::Constant && n.kind != OpKind::Input)) {
        continue;
      }
      const std::size_t cols = n.value.cols();
      for (std::size_t row = 0; row < n.slots.size(); ++row) {
        const TokenSlot s = n.slots[row];
        if (s.side == Side::None) {
          continue;
        }
        double mass = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          mass += r[id][row * cols + c];
        }
        auto& dst = s.side == Side::Source ? raw_src : raw_tgt;
        dst.at(static_cast<std::size_t>(s.index)) += mass;
      }
    }

    double src_mass = 0.0;
    double tgt_mass = 0.0;
    for (double v : raw_src) {
      src_mass += v;
    }
    for (double v : raw_tgt) {
      tgt_mass += v;
    }
    const double mass = src_mass + tgt_mass;
    rec.bias_absorbed = 1.0 - mass;
    rec.source.assign(raw_src.size(), 0.0);
    rec.prefix.assign(raw_tgt.size(), 0.0);
    if (!(mass > prop_.config().denom_eps)) {
      rec.degenerate = true;
    } else {
      for (std::size_t i = 0; i < raw_src.size(); ++i) {
        rec.source[i] = raw_src[i] / mass;
      }
      for (std::size_t j = 0; j < raw_tgt.size(); ++j) {
        rec.prefix[j] = raw_tgt[j] / mass;
      }
      rec.source_total = src_mass / mass;
      rec.target_total = tgt_mass / mass;
    }

    if (audit) {
      fill_ledgers(r, *audit);
    }
    return rec;
  }

 private:
  static double mass_of(const RelevanceMap& r, NodeId id) {
    double s = 0.0;
    for (double v : r[static_cast<std::size_t>(id)]) {
      s += v;
    }
    return s;
  }

  void fill_ledgers(const RelevanceMap& r, PropagationAudit& audit) const {
    const auto& m = trace_.marks;
    audit.memory_relevance = mass_of(r, m.memory);
    for (auto& l : audit.layers) {
      const auto& bounds = l.part == Part::Decoder ? m.decoder : m.encoder;
      const auto i = static_cast<std::size_t>(l.layer);
      l.entering = mass_of(r, bounds[i + 1]);
      l.leaving = mass_of(r, bounds[i]);
      l.absorbed = 0.0;
      for (const auto& n : audit.nodes) {
        if (n.part == l.part && n.layer == l.layer) {
          l.absorbed += n.absorbed;
        }
      }
    }
  }

  const ActivationTrace<T>& trace_;
  RelevancePropagator<T> prop_;
};

template <typename T>
ContributionRecord propagate_prediction(const ActivationTrace<T>& trace, const LrpConfig& cfg, std::size_t step,
                                        PropagationAudit* audit = nullptr) {
  return PredictionExplainer<T>(trace, cfg).explain(step, audit);
}

}  // namespace relprop
