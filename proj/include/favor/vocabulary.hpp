#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "favor/error.hpp"

namespace favor {

using TokenId = std::uint32_t;

/// Token alphabet for tagged responses.
///
/// Layout is fixed: the four tags, EOS, the digits 0-9, then `filler_count`
/// single-letter filler tokens ("a", "b", ...) used as think content.
class Vocabulary {
public:
  static constexpr TokenId kThinkOpen = 0;
  static constexpr TokenId kThinkClose = 1;
  static constexpr TokenId kAnswerOpen = 2;
  static constexpr TokenId kAnswerClose = 3;
  static constexpr TokenId kEos = 4;
  static constexpr TokenId kFirstDigit = 5;
  static constexpr TokenId kFirstFiller = kFirstDigit + 10;
  static constexpr std::size_t kMaxFillers = 26;

  explicit Vocabulary(std::size_t filler_count = 8) : filler_count_(filler_count) {
    require(filler_count >= 1 && filler_count <= kMaxFillers,
            "Vocabulary: filler_count must be in [1, 26]");
    surfaces_ = {"<think>", "</think>", "<answer>", "</answer>", ""};
    for (char c = '0'; c <= '9'; ++c) surfaces_.emplace_back(1, c);
    for (std::size_t i = 0; i < filler_count; ++i) surfaces_.emplace_back(1, static_cast<char>('a' + i));
    for (TokenId id = 0; id < surfaces_.size(); ++id) lookup_.emplace(surfaces_[id], id);
  }

  std::size_t size() const { return surfaces_.size(); }
  std::size_t filler_count() const { return filler_count_; }
  bool contains(TokenId id) const { return id < surfaces_.size(); }

  TokenId eos() const { return kEos; }
  TokenId digit(unsigned d) const {
    require(d < 10, "Vocabulary::digit: expected 0-9");
    return kFirstDigit + d;
  }
  TokenId filler(std::size_t i) const {
    require(i < filler_count_, "Vocabulary::filler: index out of range");
    return static_cast<TokenId>(kFirstFiller + i);
  }

  bool is_digit(TokenId id) const { return id >= kFirstDigit && id < kFirstFiller; }
  bool is_filler(TokenId id) const { return id >= kFirstFiller && id < surfaces_.size(); }
  bool is_tag(TokenId id) const { return id <= kAnswerClose; }

  /// Surface string; EOS renders as the empty string.
  const std::string& surface(TokenId id) const {
    require(contains(id), "Vocabulary::surface: unknown token id " + std::to_string(id));
    return surfaces_[id];
  }

  /// Inverse of surface(). The empty string maps to EOS.
  std::optional<TokenId> find(std::string_view text) const {
    auto it = lookup_.find(std::string(text));
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
  }

private:
  std::size_t filler_count_;
  std::vector<std::string> surfaces_;
  std::unordered_map<std::string, TokenId> lookup_;
};

}  // namespace favor
