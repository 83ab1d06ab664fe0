#pragma once

// Rule-based verifier for tagged responses.
//
// Grammar (after trimming surrounding whitespace):
//
//   response := "<think>" TEXT "</think>" WS* "<answer>" TEXT "</answer>"
//
// where TEXT contains none of the four tags. Tag spelling is exact and
// case-sensitive. The answer payload is either a JSON object
// {"answer": <integer>} or a bare integer; the payload only matters for the
// accuracy reward.

#include <cctype>
#include <charconv>
#include <cstdint>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "favor/error.hpp"
#include "favor/policy.hpp"
#include "favor/vocabulary.hpp"

namespace favor {

inline constexpr std::string_view kThinkOpenTag = "<think>";
inline constexpr std::string_view kThinkCloseTag = "</think>";
inline constexpr std::string_view kAnswerOpenTag = "<answer>";
inline constexpr std::string_view kAnswerCloseTag = "</answer>";

struct ParsedResponse {
  std::optional<std::string> think_text;
  std::optional<std::string> answer_payload;
  std::optional<long long> answer_index;
  bool well_formed = false;
};

struct RewardBreakdown {
  int r_acc = 0;
  int r_format = 0;
  int r_total = 0;

  friend bool operator==(const RewardBreakdown&, const RewardBreakdown&) = default;
};

inline std::string render(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : seq.ids) out += vocab.surface(id);
  return out;
}

namespace detail {

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

inline bool contains_tag(std::string_view s) {
  for (auto tag : {kThinkOpenTag, kThinkCloseTag, kAnswerOpenTag, kAnswerCloseTag})
    if (s.find(tag) != std::string_view::npos) return true;
  return false;
}

inline std::optional<long long> parse_bare_integer(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  long long value = 0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || first == last) return std::nullopt;
  return value;
}

/// {"answer": <integer>} (other keys ignored) or a bare integer.
inline std::optional<long long> parse_answer_payload(std::string_view payload) {
  auto doc = nlohmann::json::parse(payload.begin(), payload.end(), nullptr, /*allow_exceptions=*/false);
  if (!doc.is_discarded()) {
    if (doc.is_object()) {
      auto it = doc.find("answer");
      if (it == doc.end()) return std::nullopt;
      if (it->is_number_integer() && !it->is_number_unsigned()) return it->get<long long>();
      if (it->is_number_unsigned()) {
        const auto u = it->get<std::uint64_t>();
        if (u <= static_cast<std::uint64_t>(std::numeric_limits<long long>::max())) return static_cast<long long>(u);
      }
      return std::nullopt;
    }
  }
  return parse_bare_integer(payload);
}

}  // namespace detail

/// Total function: never throws on any input.
inline ParsedResponse parse_response(std::string_view text) {
  ParsedResponse parsed;

  // Answer extraction is independent of the overall structure: the first
  // <answer> ... </answer> pair wins.
  if (auto open = text.find(kAnswerOpenTag); open != std::string_view::npos) {
    const auto body_begin = open + kAnswerOpenTag.size();
    if (auto close = text.find(kAnswerCloseTag, body_begin); close != std::string_view::npos) {
      parsed.answer_payload = std::string(text.substr(body_begin, close - body_begin));
      parsed.answer_index = detail::parse_answer_payload(*parsed.answer_payload);
    }
  }

  std::string_view s = detail::trim(text);
  if (!s.starts_with(kThinkOpenTag)) return parsed;
  s.remove_prefix(kThinkOpenTag.size());
  const auto think_close = s.find(kThinkCloseTag);
  if (think_close == std::string_view::npos) return parsed;
  const std::string_view think = s.substr(0, think_close);
  if (detail::contains_tag(think)) return parsed;
  s.remove_prefix(think_close + kThinkCloseTag.size());
  s = detail::trim(s);
  if (!s.starts_with(kAnswerOpenTag)) return parsed;
  s.remove_prefix(kAnswerOpenTag.size());
  const auto answer_close = s.find(kAnswerCloseTag);
  if (answer_close == std::string_view::npos) return parsed;
  if (detail::contains_tag(s.substr(0, answer_close))) return parsed;
  if (answer_close + kAnswerCloseTag.size() != s.size()) return parsed;

  parsed.think_text = std::string(detail::trim(think));
  parsed.well_formed = true;
  return parsed;
}

inline int accuracy_reward(const ParsedResponse& parsed, long long ground_truth) {
  return parsed.answer_index && *parsed.answer_index == ground_truth ? 1 : 0;
}

inline int format_reward(const ParsedResponse& parsed) { return parsed.well_formed ? 1 : 0; }

inline RewardBreakdown classification_reward(std::string_view text, long long ground_truth) {
  const auto parsed = parse_response(text);
  RewardBreakdown r;
  r.r_acc = accuracy_reward(parsed, ground_truth);
  r.r_format = format_reward(parsed);
  r.r_total = r.r_acc + r.r_format;
  return r;
}

// ---------------------------------------------------------------------------
// Reward corpus files
//
// One record per line, four TAB-separated fields:
//
//   expected_r_acc <TAB> expected_r_format <TAB> ground_truth <TAB> input
//
// The input field is escaped: "\\" backslash, "\t" tab, "\n" newline,
// "\r" carriage return, "\xHH" any other byte. Blank lines and lines starting
// with '#' are ignored.
// ---------------------------------------------------------------------------

struct CorpusRecord {
  std::string input;
  int expected_r_acc = 0;
  int expected_r_format = 0;
  long long ground_truth = 0;
};

inline std::string escape_corpus_field(std::string_view raw) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string out;
  for (char c : raw) {
    const auto u = static_cast<unsigned char>(c);
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default:
        if (u < 0x20 || u == 0x7F) {
          out += "\\x";
          out += kHex[u >> 4];
          out += kHex[u & 0xF];
        } else {
          out += c;
        }
    }
  }
  return out;
}

inline std::string unescape_corpus_field(std::string_view field) {
  auto hex = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    return -1;
  };
  std::string out;
  for (std::size_t i = 0; i < field.size(); ++i) {
    if (field[i] != '\\') {
      out += field[i];
      continue;
    }
    if (++i >= field.size()) throw DataError("corpus: dangling backslash");
    switch (field[i]) {
      case '\\': out += '\\'; break;
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      case 'x': {
        if (i + 2 >= field.size()) throw DataError("corpus: short \\x escape");
        const int hi = hex(field[i + 1]), lo = hex(field[i + 2]);
        if (hi < 0 || lo < 0) throw DataError("corpus: bad \\x escape");
        out += static_cast<char>(hi * 16 + lo);
        i += 2;
        break;
      }
      default: throw DataError(std::string("corpus: unknown escape \\") + field[i]);
    }
  }
  return out;
}

inline std::vector<CorpusRecord> read_reward_corpus(std::istream& in) {
  std::vector<CorpusRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string_view> fields;
    std::string_view rest = line;
    for (int i = 0; i < 3; ++i) {
      const auto tab = rest.find('\t');
      if (tab == std::string_view::npos)
        throw DataError("corpus line " + std::to_string(line_no) + ": expected 4 tab-separated fields");
      fields.push_back(rest.substr(0, tab));
      rest.remove_prefix(tab + 1);
    }
    fields.push_back(rest);
    auto integer = [&](std::string_view s, const char* name) {
      auto v = detail::parse_bare_integer(s);
      if (!v) throw DataError("corpus line " + std::to_string(line_no) + ": bad " + name);
      return *v;
    };
    CorpusRecord rec;
    rec.expected_r_acc = static_cast<int>(integer(fields[0], "expected_r_acc"));
    rec.expected_r_format = static_cast<int>(integer(fields[1], "expected_r_format"));
    rec.ground_truth = integer(fields[2], "ground_truth");
    if ((rec.expected_r_acc != 0 && rec.expected_r_acc != 1) ||
        (rec.expected_r_format != 0 && rec.expected_r_format != 1))
      throw DataError("corpus line " + std::to_string(line_no) + ": expected rewards must be 0 or 1");
    try {
      rec.input = unescape_corpus_field(fields[3]);
    } catch (const DataError& e) {
      throw DataError("corpus line " + std::to_string(line_no) + ": " + e.what());
    }
    records.push_back(std::move(rec));
  }
  return records;
}

inline void write_reward_corpus(std::ostream& out, const std::vector<CorpusRecord>& records) {
  for (const auto& r : records)
    out << r.expected_r_acc << '\t' << r.expected_r_format << '\t' << r.ground_truth << '\t'
        << escape_corpus_field(r.input) << '\n';
}

}  // namespace favor
