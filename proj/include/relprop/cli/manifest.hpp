#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "relprop/errors.hpp"

namespace relprop::cli {

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot read " + path);
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("cannot write " + path);
  }
  out << bytes;
  if (!out) {
    throw IoError("failed writing " + path);
  }
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string hash_file(const std::string& path) { return hash_hex(fnv1a(read_file(path))); }

/// Record of one command invocation. Written before the command computes
/// anything and rewritten with output hashes when it finishes.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;  // subcommand and resolved flags, replayable by `rerun`
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;   // path -> FNV-1a hash
  std::map<std::string, std::string> outputs;  // path -> FNV-1a hash
  std::string status = "running";

  nlohmann::json to_json() const {
    return {{"command", command}, {"argv", argv},     {"config", config}, {"seed", seed},
            {"inputs", inputs},   {"outputs", outputs}, {"status", status}};
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    m.config = j.value("config", nlohmann::json::object());
    m.seed = j.value("seed", std::uint64_t{0});
    m.inputs = j.value("inputs", std::map<std::string, std::string>{});
    m.outputs = j.value("outputs", std::map<std::string, std::string>{});
    m.status = j.value("status", std::string("unknown"));
    return m;
  }

  void add_input(const std::string& path) { inputs[path] = hash_file(path); }
  void add_output(const std::string& path) { outputs[path] = hash_file(path); }

  void save(const std::string& path) const { write_file(path, to_json().dump(2) + "\n"); }

  static RunManifest load(const std::string& path) {
    try {
      return from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("manifest " + path + " is malformed: " + e.what());
    }
  }
};

}  // namespace relprop::cli
