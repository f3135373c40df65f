#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "relprop/errors.hpp"
#include "relprop/model/config.hpp"
#include "relprop/numerics/rng.hpp"
#include "relprop/numerics/tensor.hpp"

namespace relprop {

/// Gain applied to the Glorot limit of the output projection, which keeps
/// the initial token distribution close to uniform.
inline constexpr double kOutputInitGain = 0.5;

namespace names {

inline std::string encoder(int layer, const std::string& leaf) { return "encoder." + std::to_string(layer) + "." + leaf; }
inline std::string decoder(int layer, const std::string& leaf) { return "decoder." + std::to_string(layer) + "." + leaf; }

inline constexpr const char* kSourceEmbedding = "source.embedding";
inline constexpr const char* kTargetEmbedding = "target.embedding";
inline constexpr const char* kOutputWeight = "output.w";
inline constexpr const char* kOutputBias = "output.b";

}  // namespace names

/// Every parameter name the config declares, with its shape.
inline std::map<std::string, Shape> parameter_shapes(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto f = static_cast<std::size_t>(c.d_ff);
  std::map<std::string, Shape> s;
  s[names::kSourceEmbedding] = {static_cast<std::size_t>(c.src_vocab), d};
  s[names::kTargetEmbedding] = {static_cast<std::size_t>(c.tgt_vocab), d};
  s[names::kOutputWeight] = {d, static_cast<std::size_t>(c.tgt_vocab)};
  s[names::kOutputBias] = {static_cast<std::size_t>(c.tgt_vocab)};

  auto attention = [&](const std::string& prefix) {
    for (const char* p : {"q", "k", "v", "o"}) {
      s[prefix + "." + p + ".w"] = {d, d};
      s[prefix + "." + p + ".b"] = {d};
    }
  };
  auto norm = [&](const std::string& prefix) {
    s[prefix + ".g"] = {d};
    s[prefix + ".b"] = {d};
  };
  auto ffn = [&](const std::string& prefix) {
    s[prefix + ".in.w"] = {d, f};
    s[prefix + ".in.b"] = {f};
    s[prefix + ".out.w"] = {f, d};
    s[prefix + ".out.b"] = {d};
  };

  for (int l = 0; l < c.n_layers; ++l) {
    attention(names::encoder(l, "self"));
    norm(names::encoder(l, "norm1"));
    ffn(names::encoder(l, "ffn"));
    norm(names::encoder(l, "norm2"));

    attention(names::decoder(l, "self"));
    norm(names::decoder(l, "norm1"));
    attention(names::decoder(l, "cross"));
    norm(names::decoder(l, "norm2"));
    ffn(names::decoder(l, "ffn"));
    norm(names::decoder(l, "norm3"));
  }
  return s;
}

template <typename T>
class BasicParameters {
 public:
  using TensorT = BasicTensor<T>;

  std::map<std::string, TensorT>& tensors() { return tensors_; }
  const std::map<std::string, TensorT>& tensors() const { return tensors_; }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  const TensorT& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) {
      throw ContractError("missing parameter '" + name + "'");
    }
    return it->second;
  }
  TensorT& at(const std::string& name) {
    return const_cast<TensorT&>(static_cast<const BasicParameters&>(*this).at(name));
  }

  void set(const std::string& name, TensorT value) { tensors_.insert_or_assign(name, std::move(value)); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) {
      n += t.size();
    }
    return n;
  }

  /// Checks that exactly the declared names are present with declared shapes.
  void validate(const ModelConfig& config) const {
    const auto shapes = parameter_shapes(config);
    for (const auto& [name, shape] : shapes) {
      const TensorT& t = at(name);
      if (t.dims() != shape) {
        throw ShapeError("parameter '" + name + "' has shape " + shape_string(t.dims()) + ", expected " +
                         shape_string(shape));
      }
    }
    for (const auto& [name, _] : tensors_) {
      if (!shapes.count(name)) {
        throw ContractError("unexpected parameter '" + name + "'");
      }
    }
  }

  template <typename U>
  BasicParameters<U> cast() const {
    BasicParameters<U> out;
    for (const auto& [name, t] : tensors_) {
      out.set(name, t.template cast<U>());
    }
    return out;
  }

  bool all_finite() const {
    for (const auto& [_, t] : tensors_) {
      if (!t.all_finite()) {
        return false;
      }
    }
    return true;
  }

  friend bool operator==(const BasicParameters&, const BasicParameters&) = default;

 private:
  std::map<std::string, TensorT> tensors_;
};

using Parameters = BasicParameters<float>;

/// Glorot-uniform matrices, unit layer-norm gains, zero biases. Embedding
/// rows are uniform with variance 1/d_model, so after the sqrt(d_model)
/// scale they match the unit-scale positional table.
template <typename T = float>
BasicParameters<T> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  SeededRng rng(seed);
  BasicParameters<T> p;
  for (const auto& [name, shape] : parameter_shapes(config)) {
    BasicTensor<T> t(shape);
    const bool is_bias = name.ends_with(".b");
    const bool is_gain = name.ends_with(".g");
    if (is_gain) {
      for (auto& v : t.values()) {
        v = T{1};
      }
    } else if (!is_bias) {
      double limit = 0.0;
      if (name == names::kSourceEmbedding || name == names::kTargetEmbedding) {
        limit = std::sqrt(3.0 / static_cast<double>(config.d_model));
      } else {
        limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
        if (name == names::kOutputWeight) {
          limit *= kOutputInitGain;
        }
      }
      for (auto& v : t.values()) {
        v = static_cast<T>(rng.uniform(-limit, limit));
      }
    }
    p.set(name, std::move(t));
  }
  return p;
}

/// Fixed sinusoidal table: even dims sin(pos / 10000^(i/d)), odd dims the
/// matching cos.
template <typename T = float>
BasicTensor<T> sinusoidal_positions(int max_len, int d_model) {
  if (max_len <= 0) {
    throw ConfigError("max_len must be positive, got " + std::to_string(max_len));
  }
  if (d_model <= 0 || d_model % 2 != 0) {
    throw ConfigError("d_model must be positive and even, got " + std::to_string(d_model));
  }
  BasicTensor<T> t({static_cast<std::size_t>(max_len), static_cast<std::size_t>(d_model)});
  for (int pos = 0; pos < max_len; ++pos) {
    for (int i = 0; i < d_model; i += 2) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(i) / d_model);
      t(static_cast<std::size_t>(pos), static_cast<std::size_t>(i)) = static_cast<T>(std::sin(angle));
      t(static_cast<std::size_t>(pos), static_cast<std::size_t>(i + 1)) = static_cast<T>(std::cos(angle));
    }
  }
  return t;
}

}  // namespace relprop
