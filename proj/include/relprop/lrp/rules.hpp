#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "relprop/errors.hpp"
#include "relprop/numerics/tape.hpp"

namespace relprop {

enum class LogitChoice : std::uint8_t { Top1, Index };

struct LrpConfig {
  double alpha = 1.0;
  double beta = 0.0;
  double denom_eps = 1e-12;
  LogitChoice logit_choice = LogitChoice::Top1;
  int logit_index = -1;
  // Treat attention probabilities as fixed weights: the whole product
  // message goes to the values.
  bool attention_as_constant = false;

  void validate() const {
    if (std::abs(alpha + beta - 1.0) > 1e-12) {
      throw ConfigError("alpha + beta must equal 1, got " + std::to_string(alpha) + " + " + std::to_string(beta));
    }
    if (alpha < 0.0 || beta < 0.0) {
      throw ConfigError("alpha and beta must be non-negative");
    }
    if (!(denom_eps > 0.0)) {
      throw ConfigError("denom_eps must be positive");
    }
    if (logit_choice == LogitChoice::Index && logit_index < 0) {
      throw ConfigError("logit_choice=index needs logit_index >= 0");
    }
  }
};

inline void to_json(nlohmann::json& j, const LrpConfig& c) {
  j = nlohmann::json{{"alpha", c.alpha},
                     {"beta", c.beta},
                     {"denom_eps", c.denom_eps},
                     {"logit_choice", c.logit_choice == LogitChoice::Top1 ? "top1" : "index"},
                     {"logit_index", c.logit_index},
                     {"attention_as_constant", c.attention_as_constant}};
}

inline void from_json(const nlohmann::json& j, LrpConfig& c) {
  LrpConfig d;
  c.alpha = j.value("alpha", d.alpha);
  c.beta = j.value("beta", d.beta);
  c.denom_eps = j.value("denom_eps", d.denom_eps);
  const std::string choice = j.value("logit_choice", std::string("top1"));
  if (choice != "top1" && choice != "index") {
    throw ConfigError("logit_choice must be top1 or index, got '" + choice + "'");
  }
  c.logit_choice = choice == "top1" ? LogitChoice::Top1 : LogitChoice::Index;
  c.logit_index = j.value("logit_index", d.logit_index);
  c.attention_as_constant = j.value("attention_as_constant", d.attention_as_constant);
}

/// Splits relevance `r` of one output over contributions `z` (plus an
/// optional bias) by the alpha-beta rule, adding into `out`. Returns the
/// mass not passed on: the bias share plus any guarded term.
inline double distribute(std::span<const double> z, double bias, double r, const LrpConfig& cfg,
                         std::span<double> out) {
  if (r == 0.0) {
    return 0.0;
  }
  double zp = bias > 0.0 ? bias : 0.0;
  double zn = bias < 0.0 ? bias : 0.0;
  for (double v : z) {
    (v > 0.0 ? zp : zn) += v;
  }
  double absorbed = 0.0;
  const double sp = zp >= cfg.denom_eps ? cfg.alpha * r / zp : 0.0;
  const double sn = cfg.beta != 0.0 && -zn >= cfg.denom_eps ? cfg.beta * r / zn : 0.0;
  if (sp == 0.0) {
    absorbed += cfg.alpha * r;
  } else if (bias > 0.0) {
    absorbed += sp * bias;
  }
  if (cfg.beta != 0.0) {
    if (sn == 0.0) {
      absorbed += cfg.beta * r;
    } else if (bias < 0.0) {
      absorbed += sn * bias;
    }
  }
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double v = z[i];
    if (v > 0.0) {
      out[i] += sp * v;
    } else if (v < 0.0) {
      out[i] += sn * v;
    }
  }
  return absorbed;
}

struct LinearMessage {
  std::vector<double> input;
  double absorbed = 0.0;
};

/// Alpha-beta rule for y = x W + b with W stored [in][out].
inline LinearMessage lrp_linear_message(std::span<const double> x, std::span<const double> w,
                                        std::span<const double> b, std::span<const double> r_out,
                                        const LrpConfig& cfg) {
  const std::size_t in = x.size();
  const std::size_t out = r_out.size();
  if (w.size() != in * out || b.size() != out) {
    throw ShapeError("lrp_linear_message: x " + std::to_string(in) + ", W " + std::to_string(w.size()) + ", b " +
                     std::to_string(b.size()) + ", R " + std::to_string(out));
  }
  LinearMessage m;
  m.input.assign(in, 0.0);
  std::vector<double> z(in);
  for (std::size_t j = 0; j < out; ++j) {
    for (std::size_t i = 0; i < in; ++i) {
      z[i] = x[i] * w[i * out + j];
    }
    m.absorbed += distribute(z, b[j], r_out[j], cfg, m.input);
  }
  return m;
}

/// Saved context for the three first-order Taylor rules. Softmax takes the
/// score row in `inputs[0]`; layer norm the pre-norm row plus gain, bias,
/// eps; residual both addends.
struct TaylorInputs {
  std::vector<std::vector<double>> inputs;
  std::vector<double> gain;
  std::vector<double> bias;
  double eps = 0.0;
};

struct TaylorMessage {
  std::vector<std::vector<double>> inputs;
  double absorbed = 0.0;
};

namespace detail {

/// z_ij for row-local Taylor at the zero anchor, output j, input i.
struct SoftmaxTaylor {
  std::span<const double> x;
  std::span<const double> s;
  double anchor;  // f_j(0) / n
  double z(std::size_t j, std::size_t i) const { return anchor + s[j] * ((i == j ? 1.0 : 0.0) - s[i]) * x[i]; }
};

struct LayerNormTaylor {
  std::span<const double> x;
  std::span<const double> xhat;
  std::span<const double> gain;
  std::span<const double> bias;
  double rstd;
  double z(std::size_t j, std::size_t i) const {
    const double n = static_cast<double>(x.size());
    const double jac = gain[j] * rstd * ((i == j ? 1.0 : 0.0) - 1.0 / n - xhat[i] * xhat[j] / n);
    return bias[j] / n + jac * x[i];
  }
};

template <typename Rule>
double taylor_rows(const Rule& rule, std::size_t n, std::span<const double> r_out, const LrpConfig& cfg,
                   std::span<double> out, std::vector<double>& scratch) {
  scratch.resize(n);
  double absorbed = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (r_out[j] == 0.0) {
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) {
      scratch[i] = rule.z(j, i);
    }
    absorbed += distribute(scratch, 0.0, r_out[j], cfg, out);
  }
  return absorbed;
}

inline double softmax_taylor(std::span<const double> x, std::span<const double> s, std::span<const double> r_out,
                             const LrpConfig& cfg, std::span<double> out, std::vector<double>& scratch) {
  const double n = static_cast<double>(x.size());
  return taylor_rows(SoftmaxTaylor{x, s, 1.0 / (n * n)}, x.size(), r_out, cfg, out, scratch);
}

inline double layer_norm_taylor(std::span<const double> x, std::span<const double> xhat, double rstd,
                                std::span<const double> gain, std::span<const double> bias,
                                std::span<const double> r_out, const LrpConfig& cfg, std::span<double> out,
                                std::vector<double>& scratch) {
  return taylor_rows(LayerNormTaylor{x, xhat, gain, bias, rstd}, x.size(), r_out, cfg, out, scratch);
}

inline double residual_taylor(std::span<const std::span<const double>> addends, std::span<const double> r_out,
                              const LrpConfig& cfg, std::span<const std::span<double>> outs) {
  double absorbed = 0.0;
  std::vector<double> z(addends.size());
  std::vector<double> m(addends.size());
  for (std::size_t j = 0; j < r_out.size(); ++j) {
    if (r_out[j] == 0.0) {
      continue;
    }
    for (std::size_t a = 0; a < addends.size(); ++a) {
      z[a] = addends[a][j];
      m[a] = 0.0;
    }
    absorbed += distribute(z, 0.0, r_out[j], cfg, m);
    for (std::size_t a = 0; a < addends.size(); ++a) {
      outs[a][j] += m[a];
    }
  }
  return absorbed;
}

}  // namespace detail

/// First-order Taylor rule at the zero anchor for softmax, layer norm and
/// residual nodes; z_ij then goes through the alpha-beta split.
inline TaylorMessage lrp_taylor_message(OpKind kind, const TaylorInputs& in, std::span<const double> r_out,
                                        const LrpConfig& cfg) {
  TaylorMessage m;
  std::vector<double> scratch;
  switch (kind) {
    case OpKind::Softmax: {
      if (in.inputs.size() != 1 || in.inputs[0].size() != r_out.size()) {
        throw ShapeError("softmax taylor: expected one input row matching the relevance row");
      }
      const auto& x = in.inputs[0];
      double mx = -INFINITY;
      for (double v : x) {
        mx = std::max(mx, v);
      }
      std::vector<double> s(x.size());
      double denom = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        s[i] = std::exp(x[i] - mx);
        denom += s[i];
      }
      for (double& v : s) {
        v /= denom;
      }
      m.inputs.assign(1, std::vector<double>(x.size(), 0.0));
      m.absorbed = detail::softmax_taylor(x, s, r_out, cfg, m.inputs[0], scratch);
      return m;
    }
    case OpKind::LayerNorm: {
      if (in.inputs.size() != 1 || in.inputs[0].size() != r_out.size() || in.gain.size() != r_out.size() ||
          in.bias.size() != r_out.size()) {
        throw ShapeError("layernorm taylor: row, gain, bias and relevance must share one width");
      }
      const auto& x = in.inputs[0];
      const double n = static_cast<double>(x.size());
      double mean = 0.0;
      for (double v : x) {
        mean += v;
      }
      mean /= n;
      double var = 0.0;
      for (double v : x) {
        var += (v - mean) * (v - mean);
      }
      var /= n;
      const double rstd = 1.0 / std::sqrt(var + in.eps);
      std::vector<double> xhat(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) {
        xhat[i] = (x[i] - mean) * rstd;
      }
      m.inputs.assign(1, std::vector<double>(x.size(), 0.0));
      m.absorbed = detail::layer_norm_taylor(x, xhat, rstd, in.gain, in.bias, r_out, cfg, m.inputs[0], scratch);
      return m;
    }
    case OpKind::Add: {
      if (in.inputs.empty()) {
        throw ShapeError("residual taylor: no addends");
      }
      std::vector<std::span<const double>> addends;
      for (const auto& a : in.inputs) {
        if (a.size() != r_out.size()) {
          throw ShapeError("residual taylor: addend width differs from relevance width");
        }
        addends.emplace_back(a);
      }
      m.inputs.assign(in.inputs.size(), std::vector<double>(r_out.size(), 0.0));
      std::vector<std::span<double>> outs(m.inputs.begin(), m.inputs.end());
      m.absorbed = detail::residual_taylor(addends, r_out, cfg, outs);
      return m;
    }
    default:
      throw ContractError("no Taylor rule for node kind '" + std::string(op_name(kind)) + "'");
  }
}

struct BilinearMessage {
  std::vector<double> weights;               // [k]
  std::vector<std::vector<double>> values;   // [k][d]
  double absorbed = 0.0;
};

/// Rule for out_d = sum_k a_k v_kd: products a_k v_kd enter the alpha-beta
/// split over k and each message is shared equally by the two factors.
inline BilinearMessage lrp_bilinear_message(std::span<const double> a, const std::vector<std::vector<double>>& v,
                                            std::span<const double> r_out, const LrpConfig& cfg) {
  if (v.size() != a.size()) {
    throw ShapeError("bilinear message: " + std::to_string(a.size()) + " weights vs " + std::to_string(v.size()) +
                     " value rows");
  }
  BilinearMessage m;
  m.weights.assign(a.size(), 0.0);
  m.values.assign(a.size(), std::vector<double>(r_out.size(), 0.0));
  std::vector<double> z(a.size());
  std::vector<double> msg(a.size());
  for (std::size_t d = 0; d < r_out.size(); ++d) {
    for (std::size_t k = 0; k < a.size(); ++k) {
      if (v[k].size() != r_out.size()) {
        throw ShapeError("bilinear message: value row width differs from relevance width");
      }
      z[k] = a[k] * v[k][d];
      msg[k] = 0.0;
    }
    m.absorbed += distribute(z, 0.0, r_out[d], cfg, msg);
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double to_weight = cfg.attention_as_constant ? 0.0 : 0.5 * msg[k];
      m.weights[k] += to_weight;
      m.values[k][d] += msg[k] - to_weight;
    }
  }
  return m;
}

}  // namespace relprop
