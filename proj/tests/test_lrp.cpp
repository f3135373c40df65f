#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "relprop/lrp/propagate.hpp"
#include "relprop/lrp/rules.hpp"
#include "relprop/model/parameters.hpp"
#include "relprop/model/transformer.hpp"
#include "support/lrp_oracle.hpp"

using namespace relprop;
using namespace relprop_test;

namespace {

LrpConfig default_cfg() { return LrpConfig{}; }

LrpConfig mixed_cfg() {
  LrpConfig c;
  c.alpha = 0.5;
  c.beta = 0.5;
  return c;
}

ModelConfig small_model() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.src_vocab = 12;
  c.tgt_vocab = 12;
  c.max_len = 12;
  return c;
}

TokenIds random_sentence(SeededRng& rng, std::size_t n, int vocab) {
  TokenIds t;
  for (std::size_t i = 0; i < n; ++i) {
    t.push_back(static_cast<int>(rng.between(kFirstContent, vocab - 1)));
  }
  return t;
}

}  // namespace

TEST(LrpConfig, AlphaBetaMustSumToOne) {
  LrpConfig c;
  c.beta = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(mixed_cfg().validate());
  EXPECT_NO_THROW(default_cfg().validate());
}

TEST(LrpConfig, JsonRoundTrip) {
  LrpConfig c = mixed_cfg();
  c.logit_choice = LogitChoice::Index;
  c.logit_index = 3;
  nlohmann::json j = c;
  auto back = j.get<LrpConfig>();
  EXPECT_EQ(back.alpha, 0.5);
  EXPECT_EQ(back.logit_choice, LogitChoice::Index);
  EXPECT_EQ(back.logit_index, 3);
  j["logit_choice"] = "random";
  EXPECT_THROW(j.get<LrpConfig>(), ConfigError);
}

TEST(LinearRule, OnlyPositiveContributionSurvives) {
  auto m = lrp_linear_message(std::vector<double>{2, 1}, std::vector<double>{1, -1}, std::vector<double>{0},
                              std::vector<double>{1}, default_cfg());
  EXPECT_DOUBLE_EQ(m.input[0], 1.0);
  EXPECT_DOUBLE_EQ(m.input[1], 0.0);
  EXPECT_DOUBLE_EQ(m.absorbed, 0.0);
}

TEST(LinearRule, SymmetricInputsSplitEvenly) {
  auto m = lrp_linear_message(std::vector<double>{1, 1}, std::vector<double>{1, 1}, std::vector<double>{0},
                              std::vector<double>{1}, default_cfg());
  EXPECT_DOUBLE_EQ(m.input[0], 0.5);
  EXPECT_DOUBLE_EQ(m.input[1], 0.5);
}

TEST(LinearRule, ZeroInputIsGuarded) {
  auto m = lrp_linear_message(std::vector<double>{0, 0}, std::vector<double>{1, 2, 3, 4}, std::vector<double>{0, 0},
                              std::vector<double>{0.4, 0.6}, default_cfg());
  EXPECT_EQ(m.input, (std::vector<double>{0, 0}));
  EXPECT_DOUBLE_EQ(m.absorbed, 1.0);
}

TEST(LinearRule, BiasShareIsAbsorbed) {
  auto m = lrp_linear_message(std::vector<double>{1, 1}, std::vector<double>{1, 1}, std::vector<double>{2},
                              std::vector<double>{1}, default_cfg());
  EXPECT_DOUBLE_EQ(m.input[0], 0.25);
  EXPECT_DOUBLE_EQ(m.input[1], 0.25);
  EXPECT_DOUBLE_EQ(m.absorbed, 0.5);
}

TEST(LinearRule, ShapeMismatch) {
  EXPECT_THROW(lrp_linear_message(std::vector<double>{1, 1}, std::vector<double>{1}, std::vector<double>{0},
                                  std::vector<double>{1}, default_cfg()),
               ShapeError);
}

TEST(LinearRule, MessageSumPropertyWithBeta) {
  SeededRng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t in = rng.between(1, 6);
    const std::size_t out = rng.between(1, 6);
    auto x = random_vec(rng, in);
    auto w = random_vec(rng, in * out);
    auto b = random_vec(rng, out);
    auto r = random_vec(rng, out, 0.0, 1.0);
    for (const auto& cfg : {default_cfg(), mixed_cfg()}) {
      auto m = lrp_linear_message(x, w, b, r, cfg);
      double sum = m.absorbed;
      for (double v : m.input) {
        EXPECT_GE(v, 0.0);
        sum += v;
      }
      double in_mass = 0.0;
      for (double v : r) {
        in_mass += v;
      }
      EXPECT_NEAR(sum, in_mass, 1e-12);
    }
  }
}

TEST(TaylorRule, ResidualSplitsByAddends) {
  TaylorInputs in;
  in.inputs = {{3.0}, {1.0}};
  auto m = lrp_taylor_message(OpKind::Add, in, std::vector<double>{1.0}, default_cfg());
  EXPECT_DOUBLE_EQ(m.inputs[0][0], 0.75);
  EXPECT_DOUBLE_EQ(m.inputs[1][0], 0.25);
}

TEST(TaylorRule, SoftmaxAtAnchorSplitsEqually) {
  TaylorInputs in;
  in.inputs = {{0.0, 0.0, 0.0}};
  auto m = lrp_taylor_message(OpKind::Softmax, in, std::vector<double>{1.0, 0.0, 0.0}, default_cfg());
  for (double v : m.inputs[0]) {
    EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
  }
}

TEST(TaylorRule, SoftmaxMatchesScalarOracle) {
  SeededRng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = rng.between(2, 6);
    auto x = random_vec(rng, n, -3, 3);
    auto r = random_vec(rng, n, 0, 1);
    double mx = *std::max_element(x.begin(), x.end());
    oracle::Vec s(n);
    double denom = 0;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = std::exp(x[i] - mx);
      denom += s[i];
    }
    oracle::Mat z(n, oracle::Vec(n));
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < n; ++i) {
        const double sj = s[j] / denom;
        const double si = s[i] / denom;
        z[j][i] = 1.0 / (n * n) + sj * ((i == j) - si) * x[i];
      }
    }
    auto expected = oracle::alpha_beta(z, oracle::Vec(n, 0.0), r, 1.0, 0.0);
    TaylorInputs in;
    in.inputs = {x};
    auto m = lrp_taylor_message(OpKind::Softmax, in, r, default_cfg());
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NEAR(m.inputs[0][i], expected[i], 1e-12);
    }
  }
}

TEST(TaylorRule, LayerNormTwoVectorMatchesScalarOracle) {
  for (double a : {0.3, 1.0, 2.5}) {
    const oracle::Vec x{a, -a};
    const oracle::Vec g{1.3, 0.7};
    const oracle::Vec c{0.2, -0.1};
    const oracle::Vec r{0.6, 0.4};
    TaylorInputs in;
    in.inputs = {x};
    in.gain = g;
    in.bias = c;
    in.eps = 1e-6;
    for (const auto& cfg : {default_cfg(), mixed_cfg()}) {
      auto expected = oracle::layer_norm_relevance(x, g, c, 1e-6, r, cfg.alpha, cfg.beta);
      auto m = lrp_taylor_message(OpKind::LayerNorm, in, r, cfg);
      EXPECT_NEAR(m.inputs[0][0], expected[0], 1e-6);
      EXPECT_NEAR(m.inputs[0][1], expected[1], 1e-6);
    }
  }
}

TEST(TaylorRule, LayerNormRandomRowsMatchScalarOracle) {
  SeededRng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = rng.between(2, 8);
    auto x = random_vec(rng, n, -2, 2);
    auto g = random_vec(rng, n, 0.5, 1.5);
    auto c = random_vec(rng, n, -0.5, 0.5);
    auto r = random_vec(rng, n, 0, 1);
    TaylorInputs in{{x}, g, c, 1e-6};
    auto expected = oracle::layer_norm_relevance(x, g, c, 1e-6, r, 1.0, 0.0);
    auto m = lrp_taylor_message(OpKind::LayerNorm, in, r, default_cfg());
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NEAR(m.inputs[0][i], expected[i], 1e-6);
    }
  }
}

TEST(TaylorRule, UnsupportedKindIsContractError) {
  EXPECT_THROW(lrp_taylor_message(OpKind::Linear, TaylorInputs{}, std::vector<double>{1.0}, default_cfg()),
               ContractError);
}

TEST(BilinearRule, SingleKey) {
  auto m = lrp_bilinear_message(std::vector<double>{1.0}, {{2.0, 3.0}}, std::vector<double>{0.4, 0.6}, default_cfg());
  EXPECT_DOUBLE_EQ(m.values[0][0], 0.2);
  EXPECT_DOUBLE_EQ(m.values[0][1], 0.3);
  EXPECT_DOUBLE_EQ(m.weights[0], 0.5);
}

TEST(BilinearRule, IdenticalValuesEqualPerKey) {
  auto m = lrp_bilinear_message(std::vector<double>{0.5, 0.5}, {{1.0, 2.0}, {1.0, 2.0}}, std::vector<double>{1, 1},
                                default_cfg());
  EXPECT_DOUBLE_EQ(m.weights[0], m.weights[1]);
  EXPECT_DOUBLE_EQ(m.values[0][0] + m.values[0][1], m.values[1][0] + m.values[1][1]);
}

TEST(BilinearRule, HalfSplitHandExample) {
  auto m = lrp_bilinear_message(std::vector<double>{0.9, 0.1}, {{1.0}, {1.0}}, std::vector<double>{1.0}, default_cfg());
  EXPECT_NEAR(m.values[0][0], 0.45, 1e-15);
  EXPECT_NEAR(m.values[1][0], 0.05, 1e-15);
  EXPECT_NEAR(m.weights[0], 0.45, 1e-15);
  EXPECT_NEAR(m.weights[1], 0.05, 1e-15);
  EXPECT_EQ(m.absorbed, 0.0);
}

TEST(BilinearRule, ConstantWeightsSendEverythingToValues) {
  LrpConfig cfg;
  cfg.attention_as_constant = true;
  auto m = lrp_bilinear_message(std::vector<double>{0.9, 0.1}, {{1.0}, {1.0}}, std::vector<double>{1.0}, cfg);
  EXPECT_NEAR(m.values[0][0], 0.9, 1e-15);
  EXPECT_EQ(m.weights[0], 0.0);
}

// Two-layer feed-forward network on the tape vs the scalar oracle.
TEST(Engine, MatchesScalarOracleOnMlps) {
  for (const auto& cfg : {default_cfg(), mixed_cfg()}) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      SeededRng rng(mix_seed(seed, 77));
      const std::size_t n0 = rng.between(2, 6);
      const std::size_t n1 = rng.between(2, 8);
      const std::size_t n2 = rng.between(2, 5);
      auto x = random_vec(rng, n0);
      auto w1 = random_mat(rng, n0, n1);
      auto b1 = random_vec(rng, n1, -0.2, 0.2);
      auto g = random_vec(rng, n1, 0.5, 1.5);
      auto c = random_vec(rng, n1, -0.3, 0.3);
      auto w2 = random_mat(rng, n1, n2);
      auto b2 = random_vec(rng, n2, -0.2, 0.2);
      const double eps = 1e-6;

      Tape<double> tape;
      NodeId in = tape.input(BasicTensor<double>({1, n0}, x));
      NodeId h = tape.relu(tape.linear(in, tape.param("w1", to_tensor(w1)), tape.param("b1", to_tensor(b1))));
      NodeId u = tape.layer_norm(h, tape.param("g", to_tensor(g)), tape.param("c", to_tensor(c)), eps);
      NodeId y = tape.linear(u, tape.param("w2", to_tensor(w2)), tape.param("b2", to_tensor(b2)));

      auto hv = oracle::linear(x, w1, b1);
      for (auto& v : hv) {
        v = std::max(v, 0.0);
      }
      auto uv = oracle::layer_norm(hv, g, c, eps);
      auto yv = oracle::linear(uv, w2, b2);
      const std::size_t k = static_cast<std::size_t>(std::max_element(yv.begin(), yv.end()) - yv.begin());
      oracle::Vec ry(n2, 0.0);
      ry[k] = 1.0;
      auto ru = oracle::linear_relevance(uv, w2, b2, ry, cfg.alpha, cfg.beta);
      auto rh = oracle::layer_norm_relevance(hv, g, c, eps, ru, cfg.alpha, cfg.beta);
      auto rx = oracle::linear_relevance(x, w1, b1, rh, cfg.alpha, cfg.beta);

      RelevancePropagator<double> prop(tape, cfg);
      PropagationAudit audit;
      auto r = prop.run({{y, ry}}, &audit);
      ASSERT_EQ(r[static_cast<std::size_t>(in)].size(), n0);
      for (std::size_t i = 0; i < n0; ++i) {
        EXPECT_NEAR(r[static_cast<std::size_t>(in)][i], rx[i], 1e-6) << "seed " << seed << " beta " << cfg.beta;
      }
      EXPECT_LE(audit.max_node_imbalance(), 1e-12);
    }
  }
}

TEST(Engine, MultiRowLinearMatchesRowwiseMessage) {
  SeededRng rng(5);
  const std::size_t rows = 3, in = 4, out = 5;
  auto x = random_vec(rng, rows * in);
  auto w = random_vec(rng, in * out);
  auto b = random_vec(rng, out);
  auto rel = random_vec(rng, rows * out, 0, 1);
  for (const auto& cfg : {default_cfg(), mixed_cfg()}) {
    Tape<double> tape;
    NodeId xi = tape.input(BasicTensor<double>({rows, in}, x));
    NodeId y = tape.linear(xi, tape.param("w", BasicTensor<double>({in, out}, w)), tape.param("b", to_tensor(b)));
    auto r = RelevancePropagator<double>(tape, cfg).run({{y, rel}});
    for (std::size_t row = 0; row < rows; ++row) {
      auto m = lrp_linear_message(std::span<const double>(x).subspan(row * in, in), w, b,
                                  std::span<const double>(rel).subspan(row * out, out), cfg);
      for (std::size_t i = 0; i < in; ++i) {
        EXPECT_NEAR(r[static_cast<std::size_t>(xi)][row * in + i], m.input[i], 1e-12);
      }
    }
  }
}

TEST(Engine, UnsupportedNodeIsContractError) {
  Tape<double> tape;
  NodeId a = tape.input(BasicTensor<double>::matrix({{1, 2}}));
  NodeId m = tape.mul(a, a, "product");
  RelevancePropagator<double> prop(tape, default_cfg());
  try {
    prop.run({{m, {1.0, 1.0}}});
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("product"), std::string::npos);
  }
}

TEST(Prediction, InvariantsOnRandomModels) {
  const auto c = small_model();
  SeededRng rng(31);
  for (int trial = 0; trial < 12; ++trial) {
    auto p = init_parameters(c, rng.next_u64());
    const auto S = rng.between(1, 7);
    auto src = random_sentence(rng, S, c.src_vocab);
    src.push_back(kEos);
    TokenIds prefix{kBos};
    auto rest = random_sentence(rng, rng.between(1, 7), c.tgt_vocab);
    prefix.insert(prefix.end(), rest.begin(), rest.end());
    auto trace = trace_forward(p, c, src, prefix);
    for (const auto& cfg : {default_cfg(), mixed_cfg()}) {
      PredictionExplainer<float> ex(trace, cfg);
      for (std::size_t t = 1; t <= trace.steps(); ++t) {
        PropagationAudit audit;
        auto rec = ex.explain(t, &audit);
        ASSERT_FALSE(rec.degenerate);
        ASSERT_EQ(rec.source.size(), src.size());
        ASSERT_EQ(rec.prefix.size(), prefix.size() - 1);
        EXPECT_NEAR(rec.total(), 1.0, 1e-6);
        EXPECT_NEAR(rec.source_total + rec.target_total, 1.0, 1e-12);
        if (t == 1) {
          EXPECT_EQ(rec.source_total, 1.0);
          EXPECT_EQ(rec.target_total, 0.0);
        }
        for (std::size_t j = t - 1; j < rec.prefix.size(); ++j) {
          EXPECT_EQ(rec.prefix[j], 0.0) << "t " << t << " j " << j;
        }
        for (double v : rec.source) {
          EXPECT_GE(v, 0.0);
        }
        for (double v : rec.prefix) {
          EXPECT_GE(v, 0.0);
        }
        EXPECT_LE(audit.max_node_imbalance(), 1e-6);
        EXPECT_LE(audit.max_layer_imbalance(), 1e-6);
        EXPECT_NEAR(audit.leaked_to_encoder, audit.memory_relevance, 1e-6);
        EXPECT_GT(audit.memory_relevance, 0.0);
        double bias_total = 0.0;
        for (const auto& n : audit.nodes) {
          if (n.kind != OpKind::Embedding && n.kind != OpKind::Constant) {
            bias_total += n.absorbed;
          }
        }
        EXPECT_NEAR(rec.bias_absorbed, bias_total + audit.unattributed, 1e-6);
      }
    }
  }
}

TEST(Prediction, IndexOverride) {
  const auto c = small_model();
  auto p = init_parameters(c, 3);
  auto trace = trace_forward(p, c, {4, 5, kEos}, {kBos, 6});
  LrpConfig cfg;
  cfg.logit_choice = LogitChoice::Index;
  cfg.logit_index = 7;
  auto rec = propagate_prediction(trace, cfg, 2);
  EXPECT_EQ(rec.logit, 7);
  EXPECT_NEAR(rec.total(), 1.0, 1e-6);
  cfg.logit_index = 99;
  EXPECT_THROW(propagate_prediction(trace, cfg, 2), ConfigError);
}

TEST(Prediction, TopLogitIsArgmax) {
  const auto c = small_model();
  auto p = init_parameters(c, 3);
  auto trace = trace_forward(p, c, {4, 5, kEos}, {kBos, 6});
  auto rec = propagate_prediction(trace, LrpConfig{}, 2);
  const auto& logits = trace.logits();
  for (std::size_t v = 0; v < logits.cols(); ++v) {
    EXPECT_LE(logits(1, v), logits(1, static_cast<std::size_t>(rec.logit)));
  }
}

TEST(Prediction, IncompleteTraceIsContractError) {
  const auto c = small_model();
  auto p = init_parameters(c, 3);
  auto trace = trace_forward(p, c, {4, kEos}, {kBos});
  trace.marks.logits = kNoNode;
  try {
    propagate_prediction(trace, LrpConfig{}, 1);
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("logits"), std::string::npos);
  }
  auto ok = trace_forward(p, c, {4, kEos}, {kBos});
  EXPECT_THROW(propagate_prediction(ok, LrpConfig{}, 2), ContractError);
}

TEST(Prediction, ConstantAttentionStillNormalizes) {
  const auto c = small_model();
  auto p = init_parameters(c, 8);
  auto trace = trace_forward(p, c, {4, 5, 6, kEos}, {kBos, 7, 8});
  LrpConfig cfg;
  cfg.attention_as_constant = true;
  PropagationAudit audit;
  auto rec = propagate_prediction(trace, cfg, 3, &audit);
  EXPECT_NEAR(rec.total(), 1.0, 1e-6);
  EXPECT_LE(audit.max_node_imbalance(), 1e-6);
}
