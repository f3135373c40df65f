#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "relprop/data/corpus.hpp"
#include "relprop/errors.hpp"
#include "relprop/lrp/propagate.hpp"
#include "relprop/lrp/rules.hpp"

namespace relprop {

/// Normalizers at or below this are treated as zero.
inline constexpr double kStatGuard = 1e-12;
inline constexpr double kKlSmoothing = 1e-12;

/// Every explained step of one sentence; records[t-1] and predicted[t-1]
/// belong to step t.
struct SentenceExplanation {
  std::vector<ContributionRecord> records;
  std::vector<int> predicted;
  TokenIds reference;  // gold target the accuracy statistic compares against
};

struct AnalysisRow {
  std::size_t index = 0;
  double value = 0.0;
  std::size_t count = 0;
  std::size_t skipped = 0;
  bool flagged = false;
};

struct StatisticTable {
  std::string kind;
  std::vector<AnalysisRow> rows;
  std::size_t skipped = 0;
  std::size_t excluded_sentences = 0;
};

/// Re-checks the record invariants the statistics rely on. `prefix_len`
/// counts prefix tokens after bos; entries from step-1 on must be zero.
inline void check_record(const ContributionRecord& r, std::size_t step, std::size_t source_len,
                         std::size_t prefix_len, const LrpConfig& cfg) {
  auto fail = [&](const std::string& what) {
    throw ContractError("contribution record at step " + std::to_string(step) + " " + what);
  };
  if (r.step != step) {
    fail("carries step " + std::to_string(r.step));
  }
  if (r.source.size() != source_len) {
    fail("has " + std::to_string(r.source.size()) + " source entries, expected " + std::to_string(source_len));
  }
  if (r.prefix.size() != prefix_len || step > prefix_len + 1) {
    fail("has " + std::to_string(r.prefix.size()) + " prefix entries, expected " + std::to_string(prefix_len));
  }
  for (std::size_t j = step - 1; j < r.prefix.size(); ++j) {
    if (r.prefix[j] != 0.0) {
      fail("gives relevance to future prefix token " + std::to_string(j + 1));
    }
  }
  if (!r.degenerate && std::abs(r.total() - 1.0) > 1e-6) {
    fail("sums to " + std::to_string(r.total()));
  }
  if (cfg.beta == 0.0) {
    for (double v : r.source) {
      if (v < 0.0) {
        fail("has a negative source relevance");
      }
    }
    for (double v : r.prefix) {
      if (v < 0.0) {
        fail("has a negative prefix relevance");
      }
    }
  }
}

inline double sum_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) {
    s += x;
  }
  return s;
}

/// Natural-log entropy of v / sum(v); zero entries contribute 0.
inline double normalized_entropy(const std::vector<double>& v, double total) {
  double h = 0.0;
  for (double x : v) {
    const double p = x / total;
    if (p > 0.0) {
      h -= p * std::log(p);
    }
  }
  return std::max(0.0, h);
}

/// D_KL(p || q) after adding `eps` to every entry and renormalizing both.
inline double smoothed_kl(const std::vector<double>& p, const std::vector<double>& q, double eps = kKlSmoothing) {
  if (p.size() != q.size()) {
    throw ShapeError("kl: distributions of size " + std::to_string(p.size()) + " and " + std::to_string(q.size()));
  }
  double zp = 0.0;
  double zq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    zp += std::max(0.0, p[i]) + eps;
    zq += std::max(0.0, q[i]) + eps;
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = (std::max(0.0, p[i]) + eps) / zp;
    const double b = (std::max(0.0, q[i]) + eps) / zq;
    kl += a * std::log(a / b);
  }
  return std::max(0.0, kl);
}

/// Mean r_t(source) per step over sentences. Row t=1 is flagged since it is 1
/// by construction.
inline StatisticTable source_contribution_curve(const std::vector<SentenceExplanation>& sentences) {
  StatisticTable out{"source-contribution", {}, 0, 0};
  if (sentences.empty()) {
    return out;
  }
  const std::size_t T = sentences.front().records.size();
  for (std::size_t t = 1; t <= T; ++t) {
    AnalysisRow row{t, 0.0, 0, 0, t == 1};
    for (const auto& s : sentences) {
      const auto& r = s.records.at(t - 1);
      if (r.degenerate) {
        ++row.skipped;
        continue;
      }
      row.value += r.source_total;
      ++row.count;
    }
    out.skipped += row.skipped;
    if (row.count > 0) {
      row.value /= static_cast<double>(row.count);
      out.rows.push_back(row);
    }
  }
  return out;
}

struct SentenceInfluence {
  std::vector<double> values;  // per source position
  std::size_t used_steps = 0;
  std::size_t skipped_steps = 0;
};

/// (S / T') * sum_t r_t(x_k) / r_t(source) over the T' steps whose source
/// total clears the guard, so the values always sum to S.
inline SentenceInfluence sentence_influence(const SentenceExplanation& s) {
  const std::size_t S = s.records.empty() ? 0 : s.records.front().source.size();
  SentenceInfluence out;
  out.values.assign(S, 0.0);
  for (const auto& r : s.records) {
    const double total = sum_of(r.source);
    if (r.degenerate || total <= kStatGuard) {
      ++out.skipped_steps;
      continue;
    }
    for (std::size_t k = 0; k < S; ++k) {
      out.values[k] += r.source[k] / total;
    }
    ++out.used_steps;
  }
  if (out.used_steps > 0) {
    const double scale = static_cast<double>(S) / static_cast<double>(out.used_steps);
    for (double& v : out.values) {
      v *= scale;
    }
  }
  return out;
}

inline StatisticTable source_position_influence(const std::vector<SentenceExplanation>& sentences) {
  StatisticTable out{"source-influence", {}, 0, 0};
  if (sentences.empty()) {
    return out;
  }
  const std::size_t S = sentences.front().records.front().source.size();
  std::vector<double> acc(S, 0.0);
  std::size_t count = 0;
  for (const auto& s : sentences) {
    const auto inf = sentence_influence(s);
    out.skipped += inf.skipped_steps;
    if (inf.used_steps == 0) {
      ++out.excluded_sentences;
      continue;
    }
    for (std::size_t k = 0; k < S; ++k) {
      acc[k] += inf.values[k];
    }
    ++count;
  }
  if (count == 0) {
    return out;
  }
  for (std::size_t k = 0; k < S; ++k) {
    out.rows.push_back({k + 1, acc[k] / static_cast<double>(count), count, 0, false});
  }
  return out;
}

enum class ContributionSide : std::uint8_t { Source, Target };

/// Mean entropy of the normalized source or prefix contributions per step.
/// Target-side rows start at t=2.
inline StatisticTable contribution_entropy_curve(const std::vector<SentenceExplanation>& sentences,
                                                 ContributionSide side) {
  StatisticTable out{side == ContributionSide::Source ? "source-entropy" : "target-entropy", {}, 0, 0};
  if (sentences.empty()) {
    return out;
  }
  const std::size_t T = sentences.front().records.size();
  for (std::size_t t = side == ContributionSide::Source ? 1 : 2; t <= T; ++t) {
    AnalysisRow row{t, 0.0, 0, 0, false};
    for (const auto& s : sentences) {
      const auto& r = s.records.at(t - 1);
      const std::vector<double> v =
          side == ContributionSide::Source
              ? r.source
              : std::vector<double>(r.prefix.begin(), r.prefix.begin() + static_cast<std::ptrdiff_t>(t - 1));
      const double total = sum_of(v);
      if (r.degenerate || total <= kStatGuard) {
        ++row.skipped;
        continue;
      }
      row.value += normalized_entropy(v, total);
      ++row.count;
    }
    out.skipped += row.skipped;
    if (row.count > 0) {
      row.value /= static_cast<double>(row.count);
      out.rows.push_back(row);
    }
  }
  return out;
}

/// Fraction of sentences whose top prediction at step t is the gold token.
inline StatisticTable accuracy_per_position(const std::vector<SentenceExplanation>& sentences) {
  StatisticTable out{"accuracy", {}, 0, 0};
  if (sentences.empty()) {
    return out;
  }
  const std::size_t T = sentences.front().predicted.size();
  for (std::size_t t = 1; t <= T; ++t) {
    std::size_t hits = 0;
    for (const auto& s : sentences) {
      hits += s.predicted.at(t - 1) == s.reference.at(t - 1);
    }
    out.rows.push_back(
        {t, static_cast<double>(hits) / static_cast<double>(sentences.size()), sentences.size(), 0, false});
  }
  return out;
}

/// Joint (source, prefix) distribution of one record.
inline std::vector<double> joint_contributions(const ContributionRecord& r) {
  std::vector<double> v = r.source;
  v.insert(v.end(), r.prefix.begin(), r.prefix.end());
  return v;
}

/// Mean over steps of D_KL(final || other) for one sentence.
inline double sentence_kl(const SentenceExplanation& final_model, const SentenceExplanation& other) {
  if (final_model.records.size() != other.records.size() || final_model.records.empty()) {
    throw ContractError("kl needs explanations over the same non-empty steps");
  }
  double total = 0.0;
  for (std::size_t t = 0; t < final_model.records.size(); ++t) {
    total += smoothed_kl(joint_contributions(final_model.records[t]), joint_contributions(other.records[t]));
  }
  return total / static_cast<double>(final_model.records.size());
}

/// Mean of the row values with index >= from, weighting rows equally.
inline double mean_over_rows(const StatisticTable& table, std::size_t from = 1) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : table.rows) {
    if (r.index >= from) {
      s += r.value;
      ++n;
    }
  }
  if (n == 0) {
    throw ContractError("statistic '" + table.kind + "' has no rows from index " + std::to_string(from));
  }
  return s / static_cast<double>(n);
}

inline const AnalysisRow* find_row(const StatisticTable& table, std::size_t index) {
  for (const auto& r : table.rows) {
    if (r.index == index) {
      return &r;
    }
  }
  return nullptr;
}

}  // namespace relprop
