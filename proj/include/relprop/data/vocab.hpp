#pragma once

#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "relprop/errors.hpp"

namespace relprop {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kFirstContent = 4;

inline bool is_reserved(int id) { return id < kFirstContent; }

class Vocab {
 public:
  Vocab() : Vocab(std::vector<std::string>{}) {}

  /// `content` lists the non-reserved tokens in id order, starting at id 4.
  explicit Vocab(const std::vector<std::string>& content) {
    for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>"}) {
      add(t);
    }
    for (const auto& t : content) {
      add(t);
    }
  }

  /// Synthetic vocabulary of `size` entries: reserved tokens then w0, w1, ...
  static Vocab synthetic(std::size_t size) {
    if (size <= static_cast<std::size_t>(kFirstContent)) {
      throw ConfigError("vocab size must exceed the 4 reserved tokens, got " + std::to_string(size));
    }
    std::vector<std::string> content;
    for (std::size_t i = 0; i + kFirstContent < size; ++i) {
      content.push_back("w" + std::to_string(i));
    }
    return Vocab(content);
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int encode(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  const std::string& lookup(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw InputError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
      throw IoError("cannot write vocab file " + path);
    }
    for (const auto& t : tokens_) {
      out << t << '\n';
    }
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
      throw IoError("cannot read vocab file " + path);
    }
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') {
        line.pop_back();
      }
      lines.push_back(line);
    }
    static const char* reserved[] = {"<pad>", "<bos>", "<eos>", "<unk>"};
    if (lines.size() < 4) {
      throw InputError("vocab file " + path + " has fewer than the 4 reserved lines");
    }
    for (int i = 0; i < 4; ++i) {
      if (lines[static_cast<std::size_t>(i)] != reserved[i]) {
        throw InputError("vocab file " + path + " line " + std::to_string(i + 1) + " must be " + reserved[i]);
      }
    }
    return Vocab(std::vector<std::string>(lines.begin() + 4, lines.end()));
  }

 private:
  void add(const std::string& token) {
    if (token.empty() || token.find_first_of(" \t\n") != std::string::npos) {
      throw InputError("invalid vocab token '" + token + "'");
    }
    if (!index_.emplace(token, static_cast<int>(tokens_.size())).second) {
      throw InputError("duplicate vocab token '" + token + "'");
    }
    tokens_.push_back(token);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace relprop
