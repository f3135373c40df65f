#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "relprop/analysis/experiment.hpp"
#include "relprop/analysis/parallel.hpp"
#include "relprop/analysis/statistics.hpp"

using namespace relprop;

namespace {

ModelConfig tiny_config(int vocab = 16) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.src_vocab = vocab;
  c.tgt_vocab = vocab;
  c.max_len = 16;
  return c;
}

EvalSet tiny_eval(std::size_t n, std::size_t len = 4, int vocab = 16, std::uint64_t seed = 5) {
  CorpusSpec spec;
  spec.task = Task::CipherReorder;
  spec.n = n;
  spec.min_len = len;
  spec.max_len = len;
  spec.vocab_size = static_cast<std::size_t>(vocab);
  spec.seed = seed;
  return make_eval_set(generate_corpus(spec), len + 1, len + 1, n);
}

std::vector<SentenceExplanation> explain(const Parameters& p, const ModelConfig& mc, const EvalSet& e,
                                         PrefixMode mode = PrefixMode::Reference, LrpConfig lrp = {}) {
  return explain_all(p, mc, build_prefixes(p, mc, e, mode, {}), lrp);
}

ContributionRecord record(std::size_t step, std::vector<double> src, std::vector<double> prefix) {
  ContributionRecord r;
  r.step = step;
  r.source = std::move(src);
  r.prefix = std::move(prefix);
  r.source_total = sum_of(r.source);
  r.target_total = sum_of(r.prefix);
  return r;
}

}  // namespace

TEST(Entropy, UniformOverTwentyIsLogTwenty) {
  EXPECT_NEAR(normalized_entropy(std::vector<double>(20, 0.05), 1.0), std::log(20.0), 1e-12);
  EXPECT_DOUBLE_EQ(normalized_entropy({0.0, 0.4, 0.0}, 0.4), 0.0);
}

TEST(Entropy, SecondStepTargetEntropyIsExactlyZero) {
  const auto mc = tiny_config();
  const auto table = contribution_entropy_curve(explain(init_parameters(mc, 2), mc, tiny_eval(6)),
                                                ContributionSide::Target);
  ASSERT_FALSE(table.rows.empty());
  EXPECT_EQ(table.rows.front().index, 2u);
  EXPECT_EQ(table.rows.front().value, 0.0);
}

TEST(Entropy, RowsWithinSupportBound) {
  const auto mc = tiny_config();
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto ex = explain(init_parameters(mc, seed), mc, tiny_eval(8, 5));
    for (auto side : {ContributionSide::Source, ContributionSide::Target}) {
      for (const auto& row : contribution_entropy_curve(ex, side).rows) {
        const double support = side == ContributionSide::Source ? 6.0 : static_cast<double>(row.index - 1);
        ASSERT_GE(row.value, 0.0);
        ASSERT_LE(row.value, std::log(support) + 1e-12);
        ASSERT_GT(row.count, 0u);
      }
    }
  }
}

TEST(Kl, IdentityAndNonNegativity) {
  SeededRng rng(3);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> p(static_cast<std::size_t>(rng.between(1, 10)));
    std::vector<double> q(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = rng.bernoulli(0.3) ? 0.0 : rng.uniform();
      q[i] = rng.bernoulli(0.3) ? 0.0 : rng.uniform();
    }
    ASSERT_NEAR(smoothed_kl(p, p), 0.0, 1e-12);
    ASSERT_GE(smoothed_kl(p, q), 0.0);
  }
  EXPECT_THROW(smoothed_kl({1.0}, {0.5, 0.5}), ShapeError);
}

TEST(Kl, FinalAgainstItselfIsZero) {
  const auto mc = tiny_config();
  Checkpoint c;
  c.config = mc;
  c.step = 7;
  c.params = init_parameters(mc, 4);
  const auto table = kl_convergence(tiny_eval(5), {c}, c, {});
  ASSERT_EQ(table.rows.size(), 1u);
  EXPECT_EQ(table.rows[0].index, 7u);
  EXPECT_NEAR(table.rows[0].value, 0.0, 1e-9);
}

TEST(Kl, DifferentModelsDivergeAndMismatchedConfigsFail) {
  const auto mc = tiny_config();
  Checkpoint a{mc, 10, init_parameters(mc, 1), {}, {}};
  Checkpoint b{mc, 5, init_parameters(mc, 2), {}, {}};
  const auto table = kl_convergence(tiny_eval(5), {b}, a, {});
  EXPECT_GT(table.rows.at(0).value, 0.0);
  Checkpoint other = b;
  other.config.d_ff = 64;
  other.params = init_parameters(other.config, 2);
  EXPECT_THROW(kl_convergence(tiny_eval(5), {other}, a, {}), ConfigError);
}

TEST(Influence, SumsToSourceLengthPerSentence) {
  const auto mc = tiny_config();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const auto& s : explain(init_parameters(mc, seed), mc, tiny_eval(6, 3 + seed % 3))) {
      const auto inf = sentence_influence(s);
      ASSERT_NEAR(sum_of(inf.values), static_cast<double>(s.records[0].source.size()), 1e-6);
    }
  }
}

TEST(Influence, SingleSourceTokenGetsOne) {
  SentenceExplanation s;
  s.records = {record(1, {1.0}, {0.0, 0.0}), record(2, {0.4}, {0.6, 0.0}), record(3, {0.1}, {0.5, 0.4})};
  const auto inf = sentence_influence(s);
  ASSERT_EQ(inf.values.size(), 1u);
  EXPECT_DOUBLE_EQ(inf.values[0], 1.0);
}

TEST(Influence, ZeroSourceStepsAreSkippedAndCounted) {
  SentenceExplanation s;
  s.records = {record(1, {0.5, 0.5}, {0.0}), record(2, {0.0, 0.0}, {1.0})};
  const auto inf = sentence_influence(s);
  EXPECT_EQ(inf.skipped_steps, 1u);
  EXPECT_EQ(inf.used_steps, 1u);
  EXPECT_DOUBLE_EQ(inf.values[0] + inf.values[1], 2.0);
  const auto table = source_position_influence({s});
  EXPECT_EQ(table.skipped, 1u);
}

TEST(SourceCurve, FirstStepIsOneAndFlagged) {
  const auto mc = tiny_config();
  const auto table = source_contribution_curve(explain(init_parameters(mc, 8), mc, tiny_eval(10)));
  ASSERT_EQ(table.rows.size(), 5u);
  EXPECT_EQ(table.rows[0].value, 1.0);
  EXPECT_TRUE(table.rows[0].flagged);
  for (const auto& r : table.rows) {
    EXPECT_GE(r.value, 0.0);
    EXPECT_LE(r.value, 1.0 + 1e-12);
    EXPECT_EQ(r.count, 10u);
  }
}

TEST(Accuracy, UntrainedModelsNearChance) {
  const int V = 16;
  const auto mc = tiny_config(V);
  const auto eval = tiny_eval(60, 5, V);
  double total = 0.0;
  std::size_t rows = 0;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    for (const auto& r : accuracy_per_position(explain(init_parameters(mc, seed), mc, eval)).rows) {
      ASSERT_GE(r.value, 0.0);
      ASSERT_LE(r.value, 1.0);
      total += r.value;
      ++rows;
    }
  }
  const double mean = total / static_cast<double>(rows);
  // 2160 predictions; a wide band covers the model-to-model spread.
  EXPECT_GT(mean, 0.25 / V);
  EXPECT_LT(mean, 2.5 / V);
}

TEST(Accuracy, PerfectPredictionsGiveOne) {
  SentenceExplanation s;
  s.reference = {5, 6, kEos};
  s.predicted = {5, 6, kEos};
  const auto table = accuracy_per_position({s, s});
  ASSERT_EQ(table.rows.size(), 3u);
  for (const auto& r : table.rows) {
    EXPECT_EQ(r.value, 1.0);
  }
}

TEST(Prefixes, ReferenceModeUsesGoldTargets) {
  const auto mc = tiny_config();
  const auto eval = tiny_eval(4);
  const auto pre = build_prefixes(init_parameters(mc, 1), mc, eval, PrefixMode::Reference, {});
  ASSERT_EQ(pre.sentences.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& tgt = eval.pairs[i].target;
    TokenIds expected{kBos};
    expected.insert(expected.end(), tgt.begin(), tgt.end() - 1);
    EXPECT_EQ(pre.sentences[i].prefix, expected);
  }
}

TEST(Prefixes, RandomModeUsesShuffledInSetTargets) {
  const auto mc = tiny_config();
  const auto eval = tiny_eval(6);
  PrefixSettings settings;
  settings.shuffle_seed = 9;
  const auto pre = build_prefixes(init_parameters(mc, 1), mc, eval, PrefixMode::Random, settings);
  const auto shuffled = shuffle_targets(eval, 9);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(pre.sentences[i].source, eval.pairs[i].source);
    EXPECT_EQ(pre.sentences[i].reference, eval.pairs[i].target);
    EXPECT_EQ(TokenIds(pre.sentences[i].prefix.begin() + 1, pre.sentences[i].prefix.end()),
              TokenIds(shuffled.pairs[i].target.begin(), shuffled.pairs[i].target.end() - 1));
  }
  EvalSet one = eval;
  one.pairs.resize(1);
  EXPECT_THROW(build_prefixes(init_parameters(mc, 1), mc, one, PrefixMode::Random, {}), ContractError);
}

TEST(Prefixes, ModelModeKeepsOnlyFullLengthHypotheses) {
  const auto mc = tiny_config();
  const auto params = init_parameters(mc, 12);
  const auto eval = tiny_eval(8);
  const auto pre = build_prefixes(params, mc, eval, PrefixMode::Model, {});
  EXPECT_EQ(pre.sentences.size() + pre.excluded, 8u);
  std::size_t k = 0;
  for (const auto& p : eval.pairs) {
    const auto hyp = greedy_decode(params, mc, p.source, static_cast<int>(eval.target_len));
    if (hyp.size() != eval.target_len) {
      continue;
    }
    TokenIds expected{kBos};
    expected.insert(expected.end(), hyp.begin(), hyp.end() - 1);
    ASSERT_LT(k, pre.sentences.size());
    EXPECT_EQ(pre.sentences[k++].prefix, expected);
  }
  EXPECT_EQ(k, pre.sentences.size());
}

TEST(Experiment, ReferenceRunEqualsDirectCall) {
  const auto mc = tiny_config();
  const auto params = init_parameters(mc, 3);
  const auto eval = tiny_eval(5);
  ExperimentConfig cfg;
  const auto out = run_prefix_experiment(params, mc, eval, cfg);
  ASSERT_EQ(out.size(), 1u);
  const auto direct = source_contribution_curve(explain(params, mc, eval));
  ASSERT_EQ(out[0].table.rows.size(), direct.rows.size());
  for (std::size_t i = 0; i < direct.rows.size(); ++i) {
    EXPECT_EQ(out[0].table.rows[i].value, direct.rows[i].value);
  }
}

TEST(Experiment, EntriesFollowModeAndStatisticOrder) {
  const auto mc = tiny_config();
  ExperimentConfig cfg;
  cfg.modes = {PrefixMode::Random, PrefixMode::Reference};
  cfg.statistics = {Statistic::Accuracy, Statistic::SourceEntropy};
  const auto out = run_prefix_experiment(init_parameters(mc, 3), mc, tiny_eval(4), cfg);
  ASSERT_EQ(out.size(), 4u);
  EXPECT_EQ(out[0].mode, PrefixMode::Random);
  EXPECT_EQ(out[1].statistic, Statistic::SourceEntropy);
  EXPECT_EQ(out[2].mode, PrefixMode::Reference);
  cfg.modes.clear();
  EXPECT_THROW(run_prefix_experiment(init_parameters(mc, 3), mc, tiny_eval(4), cfg), ConfigError);
}

TEST(Experiment, ThreadCountDoesNotChangeResults) {
  const auto mc = tiny_config();
  const auto params = init_parameters(mc, 6);
  const auto pre = build_prefixes(params, mc, tiny_eval(9), PrefixMode::Reference, {});
  const auto one = explain_all(params, mc, pre, {}, 1);
  const auto four = explain_all(params, mc, pre, {}, 4);
  for (std::size_t i = 0; i < one.size(); ++i) {
    for (std::size_t t = 0; t < one[i].records.size(); ++t) {
      ASSERT_EQ(one[i].records[t].source, four[i].records[t].source);
      ASSERT_EQ(one[i].records[t].prefix, four[i].records[t].prefix);
    }
  }
}

TEST(Experiment, ParsesNamesAndRejectsUnknown) {
  EXPECT_EQ(parse_prefix_mode("random"), PrefixMode::Random);
  EXPECT_THROW(parse_prefix_mode("greedy"), ConfigError);
  for (auto s : {Statistic::SourceContribution, Statistic::SourceInfluence, Statistic::SourceEntropy,
                 Statistic::TargetEntropy, Statistic::Accuracy}) {
    EXPECT_EQ(parse_statistic(statistic_name(s)), s);
  }
  EXPECT_THROW(parse_statistic("bleu"), ConfigError);
}

TEST(Ingestion, RejectsBrokenRecords) {
  LrpConfig cfg;
  EXPECT_NO_THROW(check_record(record(2, {0.5, 0.25}, {0.25, 0.0}), 2, 2, 2, cfg));
  EXPECT_THROW(check_record(record(2, {0.5, 0.25}, {0.0, 0.25}), 2, 2, 2, cfg), ContractError);
  EXPECT_THROW(check_record(record(2, {0.5, 0.2}, {0.2, 0.0}), 2, 2, 2, cfg), ContractError);
  EXPECT_THROW(check_record(record(2, {1.5, -0.75}, {0.25, 0.0}), 2, 2, 2, cfg), ContractError);
  cfg.alpha = 2.0;
  cfg.beta = 1.0;
  EXPECT_NO_THROW(check_record(record(2, {1.5, -0.75}, {0.25, 0.0}), 2, 2, 2, cfg));
}

TEST(Csv, HeaderPrecisionAndLineEndings) {
  StatisticTable t{"x", {{1, 1.0, 3, 0, true}, {2, 0.123456789012, 3, 0, false}}, 0, 0};
  EXPECT_EQ(rows_to_csv(t), "index,value,count\n1,1,3\n2,0.123456789,3\n");
  EXPECT_EQ(rows_to_csv(t, {"random", 500}),
            "index,value,count,mode,checkpoint_step\n1,1,3,random,500\n2,0.123456789,3,random,500\n");
}

TEST(Csv, WriteReadRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "relprop_stat.csv").string();
  StatisticTable t{"x", {{1, 0.5, 2, 0, false}}, 0, 0};
  write_csv(path, rows_to_csv(t, {"model", std::nullopt}));
  const auto back = read_csv(path);
  EXPECT_EQ(back.header, (std::vector<std::string>{"index", "value", "count", "mode"}));
  ASSERT_EQ(back.rows.size(), 1u);
  EXPECT_EQ(back.rows[0][1], "0.5");
  std::filesystem::remove(path);
}

TEST(Parallel, CoversEveryIndexOnceAndRethrows) {
  std::vector<int> hits(103, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) {
    ASSERT_EQ(h, 1);
  }
  EXPECT_THROW(parallel_for(10, 3,
                            [](std::size_t i) {
                              if (i == 7) {
                                throw InputError("boom");
                              }
                            }),
               InputError);
}

TEST(Parallel, ThreadsFromEnvironment) {
  ::setenv("RELPROP_THREADS", "3", 1);
  EXPECT_EQ(threads_from_env(), 3u);
  ::setenv("RELPROP_THREADS", "zero", 1);
  EXPECT_THROW(threads_from_env(), ConfigError);
  ::unsetenv("RELPROP_THREADS");
  EXPECT_EQ(threads_from_env(2), 2u);
}
