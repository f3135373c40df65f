#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "relprop/errors.hpp"
#include "relprop/model/config.hpp"
#include "relprop/model/parameters.hpp"
#include "relprop/train/optimizer.hpp"

namespace relprop {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'L', 'R', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kOptimizerPrefix = "optim/";

struct Checkpoint {
  ModelConfig config;
  std::int64_t step = 0;
  Parameters params;
  std::map<std::string, Tensor> extra;  // names start with kOptimizerPrefix
  nlohmann::json meta = nlohmann::json::object();

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

template <typename V>
void put(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : s_(bytes), path_(std::move(path)) {}

  template <typename V>
  V get() {
    V v;
    std::memcpy(&v, take(sizeof(V)), sizeof(V));
    return v;
  }
  const char* take(std::size_t n) {
    if (pos_ + n > s_.size()) {
      throw IoError("checkpoint " + path_ + " is truncated at byte " + std::to_string(pos_));
    }
    const char* p = s_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  const std::string& s_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  std::string out(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  const std::string meta = nlohmann::json{{"config", c.config}, {"step", c.step}, {"meta", c.meta}}.dump();
  detail::put<std::uint64_t>(out, meta.size());
  out += meta;

  std::map<std::string, const Tensor*> all;
  for (const auto& [name, t] : c.params.tensors()) {
    all.emplace(name, &t);
  }
  for (const auto& [name, t] : c.extra) {
    if (!all.emplace(name, &t).second) {
      throw ContractError("checkpoint tensor name '" + name + "' used twice");
    }
  }
  for (const auto& [name, t] : all) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t d : t->dims()) {
      detail::put<std::uint64_t>(out, d);
    }
    out.append(reinterpret_cast<const char*>(t->data()), t->size() * sizeof(float));
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
  detail::Reader r(bytes, path);
  if (std::memcmp(r.take(4), kCheckpointMagic, 4) != 0) {
    throw IoError("checkpoint " + path + " has a bad magic number");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint " + path + " has unsupported version " + std::to_string(version));
  }
  const auto meta_len = r.get<std::uint64_t>();
  Checkpoint c;
  try {
    const auto meta = nlohmann::json::parse(std::string(r.take(meta_len), meta_len));
    c.config = meta.at("config").get<ModelConfig>();
    c.step = meta.at("step").get<std::int64_t>();
    c.meta = meta.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint " + path + " has malformed metadata: " + e.what());
  }
  while (!r.done()) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name(r.take(name_len), name_len);
    const auto rank = r.get<std::uint32_t>();
    Shape dims;
    for (std::uint32_t i = 0; i < rank; ++i) {
      dims.push_back(r.get<std::uint64_t>());
    }
    std::vector<float> data(shape_size(dims));
    std::memcpy(data.data(), r.take(data.size() * sizeof(float)), data.size() * sizeof(float));
    Tensor t(dims, std::move(data));
    if (name.starts_with(kOptimizerPrefix)) {
      c.extra.emplace(name, std::move(t));
    } else {
      c.params.set(name, std::move(t));
    }
  }
  c.params.validate(c.config);
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("cannot write checkpoint " + path);
  }
  const std::string bytes = serialize_checkpoint(c);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw IoError("failed writing checkpoint " + path);
  }
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot read checkpoint " + path);
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str(), path);
}

/// Stores optimizer moments and counters inside a checkpoint.
inline void attach_optimizer(Checkpoint& c, const OptimizerState& s) {
  for (const auto& [name, t] : s.m) {
    c.extra.insert_or_assign(std::string(kOptimizerPrefix) + "m/" + name, t);
  }
  for (const auto& [name, t] : s.v) {
    c.extra.insert_or_assign(std::string(kOptimizerPrefix) + "v/" + name, t);
  }
  c.meta["optimizer"] = optimizer_meta(s);
}

inline bool has_optimizer(const Checkpoint& c) { return c.meta.contains("optimizer"); }

inline OptimizerState extract_optimizer(const Checkpoint& c) {
  if (!has_optimizer(c)) {
    throw ContractError("checkpoint at step " + std::to_string(c.step) + " carries no optimizer state");
  }
  OptimizerState s;
  apply_optimizer_meta(c.meta.at("optimizer"), s);
  const std::string m_prefix = std::string(kOptimizerPrefix) + "m/";
  const std::string v_prefix = std::string(kOptimizerPrefix) + "v/";
  for (const auto& [name, t] : c.extra) {
    if (name.starts_with(m_prefix)) {
      s.m.emplace(name.substr(m_prefix.size()), t);
    } else if (name.starts_with(v_prefix)) {
      s.v.emplace(name.substr(v_prefix.size()), t);
    }
  }
  return s;
}

/// Element-wise mean over the last k checkpoints. Each element's values are
/// summed in sorted order so the result ignores checkpoint order.
inline Checkpoint average_checkpoints(const std::vector<Checkpoint>& list, std::size_t k) {
  if (k < 1 || list.size() < k) {
    throw ContractError("average_checkpoints needs at least k=" + std::to_string(k) + " checkpoints, got " +
                        std::to_string(list.size()));
  }
  const auto first = list.end() - static_cast<std::ptrdiff_t>(k);
  for (auto it = first; it != list.end(); ++it) {
    const std::string diff = first_difference(first->config, it->config);
    if (!diff.empty()) {
      throw ConfigError("checkpoint configs differ in field '" + diff + "'");
    }
  }
  Checkpoint out;
  out.config = list.back().config;
  out.step = list.back().step;
  out.meta["averaged"] = k;
  std::vector<double> vals(k);
  for (const auto& [name, ref] : first->params.tensors()) {
    Tensor t(ref.dims());
    for (std::size_t i = 0; i < t.size(); ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        vals[j] = (first + static_cast<std::ptrdiff_t>(j))->params.at(name)[i];
      }
      std::sort(vals.begin(), vals.end());
      double s = 0.0;
      for (double v : vals) {
        s += v;
      }
      t[i] = static_cast<float>(s / static_cast<double>(k));
    }
    out.params.set(name, std::move(t));
  }
  return out;
}

}  // namespace relprop
