#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace envisions {

using Tokens = std::vector<std::string>;

inline constexpr std::string_view kBos = "<bos>";
inline constexpr std::string_view kEos = "<eos>";
inline constexpr std::string_view kSep = "<sep>";
inline constexpr std::string_view kPad = "<pad>";

struct EncodingError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline bool is_control_token(std::string_view token) {
  return token == kBos || token == kEos || token == kSep || token == kPad;
}

/// Space-joined rendering used by every on-disk format.
inline std::string join_tokens(const Tokens& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

inline Tokens split_tokens(std::string_view text) {
  Tokens out;
  std::istringstream in{std::string(text)};
  std::string token;
  while (in >> token) out.push_back(token);
  return out;
}

/// Token <-> id bijection. Control tokens occupy ids 0..3.
class Vocab {
 public:
  Vocab() : Vocab(Tokens{}) {}

  explicit Vocab(const Tokens& tokens) {
    for (std::string_view control : {kBos, kEos, kSep, kPad}) add(std::string(control));
    for (const auto& token : tokens) {
      if (is_control_token(token)) throw EncodingError("control token in vocabulary list: " + token);
      if (token.empty() || token.find(' ') != std::string::npos) {
        throw EncodingError("vocabulary tokens must be non-empty and contain no spaces");
      }
      if (index_.count(token)) throw EncodingError("duplicate vocabulary token: " + token);
      add(token);
    }
  }

  std::size_t size() const { return tokens_.size(); }

  int bos() const { return 0; }
  int eos() const { return 1; }
  int sep() const { return 2; }
  int pad() const { return 3; }

  bool contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

  int id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) throw EncodingError("token not in vocabulary: '" + std::string(token) + "'");
    return it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw EncodingError("token id out of range: " + std::to_string(id));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::vector<int> encode(const Tokens& tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
  }

  Tokens decode(const std::vector<int>& ids) const {
    Tokens out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(token(i));
    return out;
  }

  /// Non-control tokens in id order.
  Tokens user_tokens() const { return Tokens(tokens_.begin() + 4, tokens_.end()); }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(std::string token) {
    index_.emplace(token, static_cast<int>(tokens_.size()));
    tokens_.push_back(std::move(token));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace envisions
