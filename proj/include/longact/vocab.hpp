#pragma once

// Fixed 128-token synthetic vocabulary.

#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "longact/errors.hpp"

namespace longact {

class Vocab {
 public:
  // Special and structural ids.
  static constexpr int kEos = 0;
  static constexpr int kThink = 1;
  static constexpr int kThinkEnd = 2;
  static constexpr int kAnswer = 3;
  static constexpr int kAnswerEnd = 4;
  static constexpr int kEquals = 5;
  static constexpr int kSemicolon = 6;
  static constexpr int kQuery = 7;
  static constexpr int kFind = 8;
  static constexpr int kMost = 9;
  static constexpr int kCommon = 10;
  static constexpr int kVar = 11;
  static constexpr int kLocate = 12;
  static constexpr int kRead = 13;
  static constexpr int kCount = 14;
  static constexpr int kFollow = 15;

  static constexpr int kDigitBase = 16;
  static constexpr int kKeyBase = 26;
  static constexpr int kKeyCount = 24;
  static constexpr int kValueBase = kKeyBase + kKeyCount;
  static constexpr int kValueCount = 24;
  static constexpr int kFillerBase = kValueBase + kValueCount;
  static constexpr int kFillerCount = 54;
  static constexpr int kSize = kFillerBase + kFillerCount;

  static const Vocab& standard() {
    static const Vocab v;
    return v;
  }

  std::size_t size() const { return tokens_.size(); }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  int id(std::string_view tok) const {
    auto it = ids_.find(std::string(tok));
    if (it == ids_.end()) throw IndexError("unknown token '" + std::string(tok) + "'");
    return it->second;
  }

  bool contains(std::string_view tok) const { return ids_.count(std::string(tok)) != 0; }

  /// Space-separated rendering.
  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += token(ids[i]);
    }
    return out;
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    std::istringstream is{std::string(text)};
    std::string tok;
    while (is >> tok) out.push_back(id(tok));
    return out;
  }

  static int digit(int d) { return kDigitBase + d; }
  static int key(int i) { return kKeyBase + i; }
  static int value(int i) { return kValueBase + i; }
  static int filler(int i) { return kFillerBase + i; }
  static bool is_key(int id) { return id >= kKeyBase && id < kKeyBase + kKeyCount; }
  static bool is_value(int id) { return id >= kValueBase && id < kValueBase + kValueCount; }
  static bool is_filler(int id) { return id >= kFillerBase && id < kFillerBase + kFillerCount; }

 private:
  Vocab() {
    tokens_ = {"<eos>", "<think>", "</think>", "<answer>", "</answer>", "=",     ";",    "?",
               "find",  "most",    "common",   "var",      "locate",    "read",  "count", "follow"};
    for (int d = 0; d < 10; ++d) tokens_.push_back(std::to_string(d));
    auto numbered = [&](char prefix, int n) {
      for (int i = 0; i < n; ++i) {
        std::string s(1, prefix);
        if (i < 10) s += '0';
        s += std::to_string(i);
        tokens_.push_back(s);
      }
    };
    numbered('k', kKeyCount);
    numbered('v', kValueCount);
    numbered('w', kFillerCount);
    for (std::size_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = static_cast<int>(i);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace longact
