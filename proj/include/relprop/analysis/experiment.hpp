#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "relprop/analysis/parallel.hpp"
#include "relprop/analysis/statistics.hpp"
#include "relprop/data/corpus.hpp"
#include "relprop/errors.hpp"
#include "relprop/lrp/propagate.hpp"
#include "relprop/lrp/rules.hpp"
#include "relprop/model/decode.hpp"
#include "relprop/model/transformer.hpp"
#include "relprop/train/checkpoint.hpp"

namespace relprop {

enum class PrefixMode : std::uint8_t { Reference, Model, Random };

inline PrefixMode parse_prefix_mode(const std::string& s) {
  if (s == "reference") {
    return PrefixMode::Reference;
  }
  if (s == "model") {
    return PrefixMode::Model;
  }
  if (s == "random") {
    return PrefixMode::Random;
  }
  throw ConfigError("unknown prefix mode '" + s + "'; expected one of: reference, model, random");
}

inline const char* prefix_mode_name(PrefixMode m) {
  switch (m) {
    case PrefixMode::Model:
      return "model";
    case PrefixMode::Random:
      return "random";
    default:
      return "reference";
  }
}

enum class Statistic : std::uint8_t { SourceContribution, SourceInfluence, SourceEntropy, TargetEntropy, Accuracy };

inline Statistic parse_statistic(const std::string& s) {
  if (s == "source-contribution") {
    return Statistic::SourceContribution;
  }
  if (s == "source-influence") {
    return Statistic::SourceInfluence;
  }
  if (s == "source-entropy") {
    return Statistic::SourceEntropy;
  }
  if (s == "target-entropy") {
    return Statistic::TargetEntropy;
  }
  if (s == "accuracy") {
    return Statistic::Accuracy;
  }
  throw ConfigError("unknown statistic '" + s +
                    "'; expected one of: source-contribution, source-influence, source-entropy, target-entropy, "
                    "accuracy, kl");
}

inline const char* statistic_name(Statistic s) {
  switch (s) {
    case Statistic::SourceInfluence:
      return "source-influence";
    case Statistic::SourceEntropy:
      return "source-entropy";
    case Statistic::TargetEntropy:
      return "target-entropy";
    case Statistic::Accuracy:
      return "accuracy";
    default:
      return "source-contribution";
  }
}

struct PrefixSettings {
  int beam = 1;                   // model mode: 1 decodes greedily
  std::uint64_t shuffle_seed = 1;  // random mode
};

struct PrefixedSentence {
  TokenIds source;
  TokenIds prefix;     // bos followed by T-1 tokens
  TokenIds reference;  // gold target of this source
};

struct PrefixedEval {
  std::vector<PrefixedSentence> sentences;
  std::size_t excluded = 0;  // model-mode hypotheses whose length differs from T
};

/// Decoder inputs under one prefix mode. Model-mode hypotheses must have the
/// eval target length T (eos included) to keep steps aligned; others are
/// excluded and counted.
inline PrefixedEval build_prefixes(const Parameters& params, const ModelConfig& config, const EvalSet& eval,
                                   PrefixMode mode, const PrefixSettings& settings, std::size_t threads = 1) {
  eval.check();
  if (eval.size() > 0 && eval.target_len < 1) {
    throw ContractError("eval targets must contain at least one token");
  }
  if (mode == PrefixMode::Random && eval.size() < 2) {
    throw ContractError("random prefixes need an eval set of at least 2 pairs");
  }
  const EvalSet shuffled = mode == PrefixMode::Random ? shuffle_targets(eval, settings.shuffle_seed) : eval;
  const std::size_t T = eval.target_len;
  std::vector<std::optional<TokenIds>> prefix_targets(eval.size());
  parallel_for(eval.size(), threads, [&](std::size_t i) {
    if (mode == PrefixMode::Model) {
      TokenIds hyp = settings.beam > 1
                         ? beam_decode(params, config, eval.pairs[i].source, settings.beam, static_cast<int>(T))
                         : greedy_decode(params, config, eval.pairs[i].source, static_cast<int>(T));
      if (hyp.size() == T) {
        prefix_targets[i] = std::move(hyp);
      }
    } else {
      prefix_targets[i] = shuffled.pairs[i].target;
    }
  });
  PrefixedEval out;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    if (!prefix_targets[i]) {
      ++out.excluded;
      continue;
    }
    PrefixedSentence s;
    s.source = eval.pairs[i].source;
    s.reference = eval.pairs[i].target;
    s.prefix.push_back(kBos);
    s.prefix.insert(s.prefix.end(), prefix_targets[i]->begin(), prefix_targets[i]->end() - 1);
    out.sentences.push_back(std::move(s));
  }
  return out;
}

/// Explains every step of one sentence for the top-1 (or configured) logit.
inline SentenceExplanation explain_sentence(const Parameters& params, const ModelConfig& config,
                                            const PrefixedSentence& s, const LrpConfig& lrp,
                                            std::vector<PropagationAudit>* audits = nullptr) {
  const auto trace = trace_forward(params, config, s.source, s.prefix);
  PredictionExplainer<float> explainer(trace, lrp);
  SentenceExplanation out;
  out.reference = s.reference;
  const auto& logits = trace.logits();
  const std::size_t S = s.source.size();
  for (std::size_t t = 1; t <= explainer.steps(); ++t) {
    PropagationAudit audit;
    out.records.push_back(explainer.explain(t, audits ? &audit : nullptr));
    check_record(out.records.back(), t, S, s.prefix.size() - 1, lrp);
    if (audits) {
      audits->push_back(std::move(audit));
    }
    auto row = logits.row(t - 1);
    int best = 0;
    for (std::size_t v = 1; v < row.size(); ++v) {
      if (row[v] > row[static_cast<std::size_t>(best)]) {
        best = static_cast<int>(v);
      }
    }
    out.predicted.push_back(best);
  }
  return out;
}

inline std::vector<SentenceExplanation> explain_all(const Parameters& params, const ModelConfig& config,
                                                    const PrefixedEval& prefixed, const LrpConfig& lrp,
                                                    std::size_t threads = 1) {
  lrp.validate();
  std::vector<SentenceExplanation> out(prefixed.sentences.size());
  parallel_for(out.size(), threads,
               [&](std::size_t i) { out[i] = explain_sentence(params, config, prefixed.sentences[i], lrp); });
  return out;
}

inline StatisticTable compute_statistic(Statistic stat, const std::vector<SentenceExplanation>& sentences) {
  switch (stat) {
    case Statistic::SourceInfluence:
      return source_position_influence(sentences);
    case Statistic::SourceEntropy:
      return contribution_entropy_curve(sentences, ContributionSide::Source);
    case Statistic::TargetEntropy:
      return contribution_entropy_curve(sentences, ContributionSide::Target);
    case Statistic::Accuracy:
      return accuracy_per_position(sentences);
    default:
      return source_contribution_curve(sentences);
  }
}

struct ExperimentConfig {
  std::vector<PrefixMode> modes{PrefixMode::Reference};
  std::vector<Statistic> statistics{Statistic::SourceContribution};
  LrpConfig lrp;
  PrefixSettings prefixes;
  std::size_t threads = 1;
};

struct ExperimentEntry {
  Statistic statistic;
  PrefixMode mode;
  StatisticTable table;
};

/// One table per (statistic, mode), modes in the configured order.
inline std::vector<ExperimentEntry> run_prefix_experiment(const Parameters& params, const ModelConfig& config,
                                                          const EvalSet& eval, const ExperimentConfig& cfg) {
  if (cfg.modes.empty() || cfg.statistics.empty()) {
    throw ConfigError("prefix experiment needs at least one mode and one statistic");
  }
  cfg.lrp.validate();
  std::vector<ExperimentEntry> out;
  for (PrefixMode mode : cfg.modes) {
    const auto prefixed = build_prefixes(params, config, eval, mode, cfg.prefixes, cfg.threads);
    const auto explained = explain_all(params, config, prefixed, cfg.lrp, cfg.threads);
    for (Statistic stat : cfg.statistics) {
      ExperimentEntry e{stat, mode, compute_statistic(stat, explained)};
      e.table.excluded_sentences += prefixed.excluded;
      out.push_back(std::move(e));
    }
  }
  return out;
}

/// Rows indexed by checkpoint step: mean over sentences and steps of
/// D_KL(final || checkpoint) on reference prefixes.
inline StatisticTable kl_convergence(const EvalSet& eval, const std::vector<Checkpoint>& series,
                                     const Checkpoint& final_ck, const LrpConfig& lrp, std::size_t threads = 1) {
  for (const auto& c : series) {
    const std::string diff = first_difference(final_ck.config, c.config);
    if (!diff.empty()) {
      throw ConfigError("checkpoint at step " + std::to_string(c.step) + " differs from the final model in field '" +
                        diff + "'");
    }
  }
  const auto prefixed = build_prefixes(final_ck.params, final_ck.config, eval, PrefixMode::Reference, {});
  const auto reference = explain_all(final_ck.params, final_ck.config, prefixed, lrp, threads);
  StatisticTable out{"kl", {}, 0, 0};
  for (const auto& c : series) {
    const auto other = explain_all(c.params, c.config, prefixed, lrp, threads);
    double total = 0.0;
    for (std::size_t i = 0; i < other.size(); ++i) {
      total += sentence_kl(reference[i], other[i]);
    }
    if (!other.empty()) {
      out.rows.push_back({static_cast<std::size_t>(c.step), total / static_cast<double>(other.size()), other.size(),
                          0, false});
    }
  }
  return out;
}

struct CsvColumns {
  std::optional<std::string> mode;
  std::optional<std::int64_t> checkpoint_step;
};

/// `index,value,count[,mode,checkpoint_step]`, values to 9 significant digits.
inline std::string rows_to_csv(const StatisticTable& table, const CsvColumns& extra = {}) {
  std::string out = "index,value,count";
  if (extra.mode) {
    out += ",mode";
  }
  if (extra.checkpoint_step) {
    out += ",checkpoint_step";
  }
  out += '\n';
  char buf[64];
  for (const auto& r : table.rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%zu", r.index, r.value, r.count);
    out += buf;
    if (extra.mode) {
      out += ',' + *extra.mode;
    }
    if (extra.checkpoint_step) {
      out += ',' + std::to_string(*extra.checkpoint_step);
    }
    out += '\n';
  }
  return out;
}

inline void write_csv(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) {
    throw IoError("cannot write " + path);
  }
  f << content;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline CsvTable read_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw IoError("cannot read " + path);
  }
  CsvTable t;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::string cell;
    for (char c : s) {
      if (c == ',') {
        cells.push_back(cell);
        cell.clear();
      } else if (c != '\r') {
        cell += c;
      }
    }
    cells.push_back(cell);
    return cells;
  };
  if (std::getline(f, line)) {
    t.header = split(line);
  }
  while (std::getline(f, line)) {
    if (!line.empty()) {
      t.rows.push_back(split(line));
    }
  }
  return t;
}

}  // namespace relprop
