#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "relprop/errors.hpp"

namespace relprop {

/// Desk-scale encoder-decoder hyperparameters.
struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 64;
  int d_ff = 128;
  int src_vocab = 32;
  int tgt_vocab = 32;
  int max_len = 32;
  double dropout = 0.0;  // training only
  double ln_eps = 1e-6;

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) {
        throw ConfigError(std::string(name) + " must be positive, got " + std::to_string(v));
      }
    };
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_model, "d_model");
    positive(d_ff, "d_ff");
    positive(src_vocab, "src_vocab");
    positive(tgt_vocab, "tgt_vocab");
    positive(max_len, "max_len");
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
    }
    if (d_model % 2 != 0) {
      throw ConfigError("d_model must be even for sinusoidal positions, got " + std::to_string(d_model));
    }
    if (dropout < 0.0 || dropout >= 1.0) {
      throw ConfigError("dropout must lie in [0, 1), got " + std::to_string(dropout));
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers}, {"n_heads", c.n_heads},     {"d_model", c.d_model},
                     {"d_ff", c.d_ff},         {"src_vocab", c.src_vocab}, {"tgt_vocab", c.tgt_vocab},
                     {"max_len", c.max_len},   {"dropout", c.dropout},     {"ln_eps", c.ln_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_model = j.value("d_model", d.d_model);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.src_vocab = j.value("src_vocab", d.src_vocab);
  c.tgt_vocab = j.value("tgt_vocab", d.tgt_vocab);
  c.max_len = j.value("max_len", d.max_len);
  c.dropout = j.value("dropout", d.dropout);
  c.ln_eps = j.value("ln_eps", d.ln_eps);
}

/// Name of the first field in which two configs differ, or empty.
inline std::string first_difference(const ModelConfig& a, const ModelConfig& b) {
  const nlohmann::json ja = a;
  const nlohmann::json jb = b;
  for (auto it = ja.begin(); it != ja.end(); ++it) {
    if (jb.at(it.key()) != it.value()) {
      return it.key();
    }
  }
  return {};
}

}  // namespace relprop
