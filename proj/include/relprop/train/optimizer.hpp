#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "json.hpp"
#include "relprop/errors.hpp"
#include "relprop/model/parameters.hpp"

namespace relprop {

/// scale * min(step^-0.5, step * warmup^-1.5)
inline double lr_at_step(std::int64_t step, std::int64_t warmup_steps, double scale) {
  if (step < 1) {
    throw ContractError("lr_at_step needs step >= 1, got " + std::to_string(step));
  }
  if (warmup_steps < 1) {
    throw ConfigError("warmup_steps must be positive, got " + std::to_string(warmup_steps));
  }
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup_steps);
  return scale * std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

using GradientMap = std::map<std::string, Tensor>;

struct OptimizerState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  std::int64_t warmup_steps = 400;
  double scale = 1.0;
  double constant_lr = 0.0;  // replaces the schedule when positive

  double lr_for_next_step() const {
    return constant_lr > 0.0 ? constant_lr : lr_at_step(step + 1, warmup_steps, scale);
  }

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

inline nlohmann::json optimizer_meta(const OptimizerState& s) {
  return {{"step", s.step},
          {"beta1", s.beta1},
          {"beta2", s.beta2},
          {"eps", s.eps},
          {"warmup_steps", s.warmup_steps},
          {"scale", s.scale},
          {"constant_lr", s.constant_lr}};
}

inline void apply_optimizer_meta(const nlohmann::json& j, OptimizerState& s) {
  s.step = j.at("step").get<std::int64_t>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.eps = j.at("eps").get<double>();
  s.warmup_steps = j.at("warmup_steps").get<std::int64_t>();
  s.scale = j.at("scale").get<double>();
  s.constant_lr = j.at("constant_lr").get<double>();
}

/// Global L2 norm of all gradients; rescales them when it exceeds max_norm.
inline double clip_global_norm(GradientMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, g] : grads) {
    for (float v : g.values()) {
      sq += static_cast<double>(v) * v;
    }
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& [_, g] : grads) {
      for (float& v : g.values()) {
        v = static_cast<float>(v * f);
      }
    }
  }
  return norm;
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Returns the learning rate used.
inline double adam_step(Parameters& params, const GradientMap& grads, OptimizerState& state) {
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) {
      throw ContractError("gradient for unknown parameter '" + name + "'");
    }
    if (g.dims() != params.at(name).dims()) {
      throw ShapeError("gradient for '" + name + "' has shape " + shape_string(g.dims()) + ", parameter has " +
                       shape_string(params.at(name).dims()));
    }
    if (!g.all_finite()) {
      throw DivergenceError("non-finite gradient for parameter '" + name + "' at step " +
                            std::to_string(state.step + 1));
    }
  }
  const double lr = state.lr_for_next_step();
  state.step += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    Tensor& m = state.m.try_emplace(name, p.dims()).first->second;
    Tensor& v = state.v.try_emplace(name, p.dims()).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + state.eps);
      p[i] = static_cast<float>(p[i] - update);
    }
  }
  return lr;
}

}  // namespace relprop
