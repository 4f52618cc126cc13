#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "uacvae/corpus.hpp"

using namespace uacvae;

namespace {

DialogueExample parse_line(const std::string& line, const WindowConfig& win = {}) {
  return parse_example(nlohmann::json::parse(line), win);
}

TEST(Tokenize, LowercasesAndSplitsOnWhitespace) {
  EXPECT_EQ(tokenize("  Hello\tWORLD  again\n"), (std::vector<std::string>{"hello", "world", "again"}));
  EXPECT_TRUE(tokenize("   ").empty());
}

TEST(Window, KeepsMostRecentTurnsAndTruncates) {
  std::vector<Utterance> ctx;
  for (int i = 0; i < 6; ++i) ctx.push_back({"turn " + std::to_string(i) + " a b c", {}});
  auto w = window(ctx, 4, 3);
  ASSERT_EQ(w.size(), 4u);
  EXPECT_EQ(w.front().text, "turn 2 a");
  EXPECT_EQ(w.back().text, "turn 5 a");
}

TEST(ParseExample, PersonaRecord) {
  auto ex = parse_line(R"({"context":["Hi there","Do you like tea ?"],"persona":["I like tea"],"response":"Yes I like tea a lot","gold_nli":[0,0]})");
  ASSERT_EQ(ex.context.size(), 2u);
  EXPECT_EQ(ex.context[0].text, "hi there");
  EXPECT_EQ(std::get<PersonaSet>(ex.condition).statements, std::vector<std::string>{"i like tea"});
  EXPECT_EQ(ex.reference.text, "yes i like tea a lot");
  ASSERT_TRUE(ex.gold_nli.has_value());
  EXPECT_FALSE(ex.corrupted);
}

TEST(ParseExample, EmotionRecord) {
  auto ex = parse_line(R"({"context":["guess what"],"emotion":"Happy","response":"great","corrupted":true})");
  EXPECT_EQ(std::get<EmotionLabel>(ex.condition).label, "happy");
  EXPECT_TRUE(ex.corrupted);
}

TEST(ParseExample, SchemaViolations) {
  EXPECT_THROW(parse_line(R"({"context":["a"],"response":"b"})"), DataError);
  EXPECT_THROW(parse_line(R"({"context":["a"],"persona":["x"],"emotion":"sad","response":"b"})"), DataError);
  EXPECT_THROW(parse_line(R"({"context":[],"emotion":"sad","response":"b"})"), DataError);
  EXPECT_THROW(parse_line(R"({"context":["a"],"emotion":"sad"})"), DataError);
  EXPECT_THROW(parse_line(R"({"context":["a","b"],"emotion":"sad","response":"c","gold_nli":[1]})"), DataError);
  EXPECT_THROW(parse_line(R"({"context":["a"],"emotion":"sad","response":"c","gold_nli":[2]})"), DataError);
}

TEST(ParseExample, WindowDropsOldestTurnsAndTheirLabels) {
  auto ex = parse_line(R"({"context":["a","b","c","d","e"],"emotion":"sad","response":"r","gold_nli":[1,0,0,-1,1]})");
  ASSERT_EQ(ex.context.size(), 4u);
  EXPECT_EQ(ex.context.front().text, "b");
  EXPECT_EQ(*ex.gold_nli, (std::vector<NLILabel>{NLILabel::Neutral, NLILabel::Neutral, NLILabel::Contradict,
                                                  NLILabel::Entail}));
}

TEST(ParseJsonl, ReportsLineNumber) {
  std::istringstream in("{\"context\":[\"a\"],\"emotion\":\"sad\",\"response\":\"b\"}\n\n{bad json\n");
  try {
    parse_jsonl(in);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("line 3:", 0), 0u) << e.what();
  }
}

TEST(Jsonl, RoundTrip) {
  SyntheticSpec spec;
  spec.count = 50;
  spec.corruption_rate = 0.3;
  spec.seed = 4;
  auto corpus = generate_synthetic(spec);
  std::stringstream buf;
  write_jsonl(buf, corpus);
  EXPECT_EQ(parse_jsonl(buf), corpus);
}

TEST(Vocab, SpecialsFirstThenFrequencyThenLexicographic) {
  std::vector<DialogueExample> ex(1);
  ex[0].context = {{"b a b c", {}}};
  ex[0].condition = EmotionLabel{"c"};
  ex[0].reference = {"b", {}};
  auto v = Vocab::build(ex);
  ASSERT_EQ(v.size(), 8u);
  EXPECT_EQ(v.token(0), "<pad>");
  EXPECT_EQ(v.token(4), "<sep>");
  EXPECT_EQ(v.token(5), "b");
  EXPECT_EQ(v.token(6), "c");
  EXPECT_EQ(v.token(7), "a");
  EXPECT_EQ(v.id("zzz"), Vocab::kUnk);
  EXPECT_EQ(Vocab::from_json(v.to_json()), v);
}

TEST(Vocab, MinFrequencyMapsRareTokensToUnk) {
  std::vector<DialogueExample> ex(1);
  ex[0].context = {{"a a rare", {}}};
  ex[0].condition = EmotionLabel{"a"};
  ex[0].reference = {"a", {}};
  auto v = Vocab::build(ex, 2);
  EXPECT_FALSE(v.contains("rare"));
  EXPECT_EQ(v.encode("a rare"), (std::vector<int>{5, Vocab::kUnk}));
}

TEST(Vocab, RejectsBadSpecialLayout) {
  EXPECT_THROW(Vocab::from_json(nlohmann::json::array({"<bos>", "<pad>", "<eos>", "<unk>", "<sep>"})), DataError);
}

TEST(Synthetic, SameSeedSameCorpus) {
  SyntheticSpec spec;
  spec.count = 200;
  spec.seed = 9;
  spec.corruption_rate = 0.5;
  EXPECT_EQ(generate_synthetic(spec), generate_synthetic(spec));
  auto other = spec;
  other.seed = 10;
  EXPECT_NE(generate_synthetic(spec), generate_synthetic(other));
}

TEST(Synthetic, ShapeOfExamples) {
  SyntheticSpec spec;
  spec.count = 500;
  spec.seed = 1;
  std::size_t persona = 0;
  for (const auto& ex : generate_synthetic(spec)) {
    EXPECT_GE(ex.context.size(), spec.min_turns);
    EXPECT_LE(ex.context.size(), spec.max_turns);
    ASSERT_TRUE(ex.gold_nli.has_value());
    EXPECT_EQ(ex.gold_nli->size(), ex.context.size());
    EXPECT_FALSE(ex.corrupted);
    if (const auto* p = std::get_if<PersonaSet>(&ex.condition)) {
      ++persona;
      EXPECT_EQ(p->statements.size(), spec.persona_size);
    }
  }
  EXPECT_GT(persona, 150u);
  EXPECT_LT(persona, 350u);
}

TEST(Synthetic, CorruptionRateIsRespected) {
  SyntheticSpec spec;
  spec.count = 2000;
  spec.seed = 2;
  spec.corruption_rate = 0.5;
  std::size_t corrupted = 0;
  for (const auto& ex : generate_synthetic(spec)) corrupted += ex.corrupted;
  // Binomial(2000, 0.5): sd ~ 22.4
  EXPECT_NEAR(static_cast<double>(corrupted), 1000.0, 5 * 22.4);
}

TEST(CorruptUtterance, ReplacesCeilHalfAndKeepsLength) {
  std::mt19937_64 rng(5);
  const std::vector<std::string> inventory{"zz"};
  for (int i = 0; i < 50; ++i) {
    auto out = tokenize(corrupt_utterance("a b c d e", inventory, 0.5, rng));
    ASSERT_EQ(out.size(), 5u);
    EXPECT_EQ(std::count(out.begin(), out.end(), "zz"), 3);
  }
}

TEST(TemplateEntailment, LabelsFollowPolarity) {
  TemplateEntailment oracle{SyntheticSpec{}};
  EXPECT_EQ(oracle.label("i like tea", "yes i like tea a lot"), NLILabel::Entail);
  EXPECT_EQ(oracle.label("i do not like tea", "yes i like tea a lot"), NLILabel::Contradict);
  EXPECT_EQ(oracle.label("i like tea", "no i do not like tea at all"), NLILabel::Contradict);
  EXPECT_EQ(oracle.label("i do not like tea", "no i do not like tea at all"), NLILabel::Entail);
  EXPECT_EQ(oracle.label("i like coffee", "yes i like tea a lot"), NLILabel::Neutral);
  EXPECT_EQ(oracle.label("do you like tea ?", "yes i like tea a lot"), NLILabel::Neutral);
  EXPECT_EQ(oracle.label("i like tea", "i have never tried tea"), NLILabel::Neutral);
}

TEST(Split, DeterministicAndDisjoint) {
  SyntheticSpec spec;
  spec.count = 100;
  auto all = generate_synthetic(spec);
  auto [a, b] = split_corpus(all, 0.9, 3);
  auto [c, d] = split_corpus(all, 0.9, 3);
  EXPECT_EQ(a, c);
  EXPECT_EQ(b, d);
  EXPECT_EQ(a.size(), 90u);
  EXPECT_EQ(b.size(), 10u);
}

TEST(SyntheticSpec, JsonRoundTripAndValidation) {
  SyntheticSpec spec;
  spec.count = 17;
  spec.seed = 99;
  spec.condition = "emotion";
  nlohmann::json j = spec;
  auto back = j.get<SyntheticSpec>();
  EXPECT_EQ(nlohmann::json(back), j);
  spec.items.clear();
  EXPECT_THROW(spec.validate(), ConfigError);
}

}  // namespace
