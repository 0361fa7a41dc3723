#pragma once

// Rule-based format/answer reward and the repetition-collapse detector.

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>

#include "longact/vocab.hpp"

namespace longact {

struct RewardBreakdown {
  int format = 0;  // all four tags present
  int answer = 0;  // extracted answer span equals gold

  int total() const { return format + answer; }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  auto ws = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (!s.empty() && ws(s.front())) s.remove_prefix(1);
  while (!s.empty() && ws(s.back())) s.remove_suffix(1);
  return s;
}

}  // namespace detail

/// Writes the trimmed text between the first <answer> and the next </answer>
/// to `out`; false when there is no such span.
inline bool extract_answer(std::string_view text, std::string& out) {
  constexpr std::string_view open = "<answer>", close = "</answer>";
  const auto a = text.find(open);
  if (a == std::string_view::npos) return false;
  const auto b = text.find(close, a + open.size());
  if (b == std::string_view::npos) return false;
  out = std::string(detail::trim(text.substr(a + open.size(), b - a - open.size())));
  return true;
}

inline RewardBreakdown compute_reward(std::string_view text, std::string_view gold) {
  RewardBreakdown r;
  const bool tags = text.find("<think>") != std::string_view::npos &&
                    text.find("</think>") != std::string_view::npos &&
                    text.find("<answer>") != std::string_view::npos &&
                    text.find("</answer>") != std::string_view::npos;
  r.format = tags ? 1 : 0;
  std::string span;
  r.answer = extract_answer(text, span) && span == gold ? 1 : 0;
  return r;
}

/// Token-level entry point; ids outside the vocabulary render as "<unk>".
inline RewardBreakdown compute_reward(std::span<const int> response, std::string_view gold) {
  const auto& v = Vocab::standard();
  std::string text;
  for (std::size_t i = 0; i < response.size(); ++i) {
    if (i) text += ' ';
    const int id = response[i];
    text += (id >= 0 && static_cast<std::size_t>(id) < v.size()) ? v.token(id) : "<unk>";
  }
  return compute_reward(text, gold);
}

inline constexpr std::size_t kCollapseRun = 20;

struct CollapseReport {
  bool collapsed = false;
  std::size_t longest_run = 0;
};

/// Collapsed iff one token repeats at least `run_threshold` times in a row.
inline CollapseReport detect_collapse(std::span<const int> tokens,
                                      std::size_t run_threshold = kCollapseRun) {
  CollapseReport r;
  std::size_t run = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    run = (i > 0 && tokens[i] == tokens[i - 1]) ? run + 1 : 1;
    r.longest_run = std::max(r.longest_run, run);
  }
  r.collapsed = r.longest_run >= run_threshold && run_threshold > 0;
  return r;
}

}  // namespace longact
