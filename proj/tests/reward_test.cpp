#include <gtest/gtest.h>

#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>

#include "favor/reward.hpp"
#include "favor/vocabulary.hpp"

using namespace favor;

namespace {

const Vocabulary kVocab;

std::vector<CorpusRecord> load_corpus() {
  std::ifstream in(std::string(FAVOR_TEST_DATA_DIR) + "/reward_corpus.tsv");
  EXPECT_TRUE(in.good());
  return read_reward_corpus(in);
}

/// Random text biased toward tag fragments so the parser's branches get hit.
std::string fuzz_string(std::mt19937_64& rng) {
  static const std::vector<std::string> pieces = {
      "<think>", "</think>", "<answer>", "</answer>", "<", ">", "/", "think", "answer", "{", "}", "\"answer\"", ":",
      "0",       "1",        "2",        "12",        " ", "\n", "\t", "x",     "-",      "+", "[", "]",  "null",      ","};
  std::uniform_int_distribution<int> len(0, 14);
  std::uniform_int_distribution<std::size_t> pick(0, pieces.size() - 1);
  std::uniform_int_distribution<int> byte(0, 255);
  std::bernoulli_distribution raw(0.15);
  std::string s;
  const int n = len(rng);
  for (int i = 0; i < n; ++i) {
    if (raw(rng)) s += static_cast<char>(byte(rng));
    else s += pieces[pick(rng)];
  }
  return s;
}

}  // namespace

TEST(Render, ConcatenatesSurfaces) {
  TokenSequence seq{{Vocabulary::kThinkOpen, kVocab.filler(0), Vocabulary::kThinkClose, Vocabulary::kAnswerOpen,
                     kVocab.digit(3), Vocabulary::kAnswerClose, kVocab.eos()},
                    true};
  EXPECT_EQ(render(seq, kVocab), "<think>a</think><answer>3</answer>");
  EXPECT_EQ(render(TokenSequence{}, kVocab), "");
  EXPECT_THROW(render(TokenSequence{{99}, false}, kVocab), ContractViolation);
}

TEST(Render, InjectiveOnTagArrangements) {
  const std::vector<TokenId> tags{Vocabulary::kThinkOpen, Vocabulary::kThinkClose, Vocabulary::kAnswerOpen,
                                  Vocabulary::kAnswerClose};
  std::set<std::string> seen;
  std::size_t count = 0;
  std::vector<TokenId> cur;
  std::function<void()> rec = [&] {
    ++count;
    EXPECT_TRUE(seen.insert(render(TokenSequence{cur, false}, kVocab)).second);
    if (cur.size() == 6) return;
    for (TokenId t : tags) {
      cur.push_back(t);
      rec();
      cur.pop_back();
    }
  };
  rec();
  EXPECT_EQ(count, 1u + 4 + 16 + 64 + 256 + 1024 + 4096);
  EXPECT_EQ(seen.size(), count);
}

TEST(Parse, WellFormedJsonAnswer) {
  const auto p = parse_response(R"(<think>steps</think><answer>{"answer": 2}</answer>)");
  EXPECT_TRUE(p.well_formed);
  EXPECT_EQ(p.think_text, "steps");
  EXPECT_EQ(p.answer_index, 2);
  EXPECT_EQ(p.answer_payload, R"({"answer": 2})");
}

TEST(Parse, MissingThinkBlockStillExtractsAnswer) {
  const auto p = parse_response(R"(<answer>{"answer": 2}</answer>)");
  EXPECT_FALSE(p.well_formed);
  EXPECT_EQ(p.answer_index, 2);
  EXPECT_FALSE(p.think_text.has_value());
}

TEST(Parse, TrailingContentBreaksFormat) {
  const auto p = parse_response(R"(<think>x</think><answer>{"answer": 2}</answer>trailing)");
  EXPECT_FALSE(p.well_formed);
  EXPECT_EQ(p.answer_index, 2);
}

TEST(Parse, WhitespaceAroundAndBetweenBlocksTolerated) {
  EXPECT_TRUE(parse_response(" \n<think> a b </think>\n\t<answer> 1 </answer>\n").well_formed);
  EXPECT_EQ(parse_response("<think> a b </think><answer>1</answer>").think_text, "a b");
}

TEST(AccuracyReward, Cases) {
  ParsedResponse p;
  p.answer_index = 2;
  EXPECT_EQ(accuracy_reward(p, 2), 1);
  EXPECT_EQ(accuracy_reward(p, 3), 0);
  p.answer_index = 3;
  EXPECT_EQ(accuracy_reward(p, 2), 0);
  p.answer_index.reset();
  EXPECT_EQ(accuracy_reward(p, 2), 0);
}

TEST(FormatReward, Cases) {
  EXPECT_EQ(format_reward(parse_response("<think>x</think><answer>1</answer>")), 1);
  EXPECT_EQ(format_reward(parse_response("<think>x<answer>1</answer>")), 0);
  EXPECT_EQ(format_reward(parse_response("<answer>1</answer><think>x</think>")), 0);
}

TEST(ClassificationReward, Cases) {
  EXPECT_EQ(classification_reward("<think>x</think><answer>2</answer>", 2), (RewardBreakdown{1, 1, 2}));
  EXPECT_EQ(classification_reward("<think>x</think><answer>1</answer>", 2), (RewardBreakdown{0, 1, 1}));
  EXPECT_EQ(classification_reward("", 2), (RewardBreakdown{0, 0, 0}));
  // The two parts are independent: right answer, broken format.
  EXPECT_EQ(classification_reward("<answer>2</answer>", 2), (RewardBreakdown{1, 0, 1}));
}

TEST(Corpus, EveryRecordScoresAsLabeled) {
  const auto records = load_corpus();
  ASSERT_GE(records.size(), 50u);
  for (const auto& r : records) {
    const auto got = classification_reward(r.input, r.ground_truth);
    EXPECT_EQ(got.r_acc, r.expected_r_acc) << "input: " << escape_corpus_field(r.input);
    EXPECT_EQ(got.r_format, r.expected_r_format) << "input: " << escape_corpus_field(r.input);
  }
}

TEST(Corpus, EscapingRoundTripsEveryByte) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> byte(0, 255), len(0, 40);
  for (int i = 0; i < 2000; ++i) {
    std::string s;
    for (int n = len(rng); n > 0; --n) s += static_cast<char>(byte(rng));
    const auto e = escape_corpus_field(s);
    EXPECT_EQ(e.find('\t'), std::string::npos);
    EXPECT_EQ(e.find('\n'), std::string::npos);
    EXPECT_EQ(unescape_corpus_field(e), s);
  }
}

TEST(Corpus, WriteThenReadIsIdentity) {
  std::vector<CorpusRecord> recs{{"<think>a</think>\t<answer>1</answer>", 1, 1, 1}, {"\\x\n", 0, 0, 7}, {"", 0, 0, 0}};
  std::stringstream io;
  write_reward_corpus(io, recs);
  const auto back = read_reward_corpus(io);
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].input, recs[i].input);
    EXPECT_EQ(back[i].expected_r_acc, recs[i].expected_r_acc);
    EXPECT_EQ(back[i].expected_r_format, recs[i].expected_r_format);
    EXPECT_EQ(back[i].ground_truth, recs[i].ground_truth);
  }
}

TEST(Corpus, MalformedLinesRejected) {
  for (const char* bad : {"1\t1\t2", "2\t1\t0\tx", "a\t1\t0\tx", "1\t1\t0\t\\q", "1\t1\t0\t\\x4", "1\t1\t0\tx\\"}) {
    std::istringstream in(bad);
    EXPECT_THROW(read_reward_corpus(in), DataError) << bad;
  }
}

TEST(Fuzz, TotalAndDecomposes) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 10'000; ++i) {
    const auto s = fuzz_string(rng);
    ParsedResponse p;
    RewardBreakdown r;
    ASSERT_NO_THROW(p = parse_response(s));
    ASSERT_NO_THROW(r = classification_reward(s, 2));
    EXPECT_EQ(r.r_total, r.r_acc + r.r_format);
    EXPECT_TRUE(r.r_total >= 0 && r.r_total <= 2);
    EXPECT_TRUE(!p.answer_index || p.answer_payload.has_value());
    EXPECT_TRUE(!p.well_formed || (p.think_text && p.answer_payload));
  }
}

TEST(Property, InsertingAMissingClosingTagNeverLowersFormat) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> digit(0, 9), len(0, 5);
  for (int i = 0; i < 1000; ++i) {
    std::string think;
    for (int n = len(rng); n > 0; --n) think += static_cast<char>('a' + digit(rng));
    const std::string answer = std::to_string(digit(rng));
    for (const std::string& tag : {std::string(kThinkCloseTag), std::string(kAnswerCloseTag)}) {
      const std::string valid = "<think>" + think + "</think><answer>" + answer + "</answer>";
      const auto at = valid.find(tag);
      const std::string broken = valid.substr(0, at) + valid.substr(at + tag.size());
      EXPECT_LE(format_reward(parse_response(broken)), format_reward(parse_response(valid)));
      EXPECT_EQ(format_reward(parse_response(valid)), 1);
    }
  }
}

TEST(Property, RenderedValidSequencesParseWellFormed) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> len(0, 6), dig(0, 9), fill(0, static_cast<int>(kVocab.filler_count()) - 1);
  std::bernoulli_distribution coin(0.5);
  for (int i = 0; i < 2000; ++i) {
    TokenSequence s;
    s.ids.push_back(Vocabulary::kThinkOpen);
    for (int n = len(rng); n > 0; --n)
      s.ids.push_back(coin(rng) ? kVocab.filler(static_cast<std::size_t>(fill(rng))) : kVocab.digit(static_cast<unsigned>(dig(rng))));
    s.ids.push_back(Vocabulary::kThinkClose);
    s.ids.push_back(Vocabulary::kAnswerOpen);
    const int d = dig(rng);
    s.ids.push_back(kVocab.digit(static_cast<unsigned>(d)));
    s.ids.push_back(Vocabulary::kAnswerClose);
    if (coin(rng)) s.ids.push_back(kVocab.eos());
    const auto p = parse_response(render(s, kVocab));
    EXPECT_TRUE(p.well_formed);
    EXPECT_EQ(p.answer_index, d);
  }
}
