#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "oracles.hpp"
#include "uacvae/metrics.hpp"

using namespace uacvae;

namespace {

TEST(Perplexity, UniformModelEqualsVocabSize) {
  for (std::size_t v : {2u, 8u, 1000u, 50257u}) {
    const std::size_t tokens = 137;
    EXPECT_NEAR(perplexity(static_cast<double>(tokens) * std::log(static_cast<double>(v)), tokens),
                static_cast<double>(v), 1e-9 * static_cast<double>(v));
  }
  EXPECT_THROW(perplexity(1.0, 0), DataError);
}

TEST(DistinctN, HandCases) {
  EXPECT_DOUBLE_EQ(distinct_n({"a", "a", "a", "a"}, 1), 0.25);
  EXPECT_DOUBLE_EQ(distinct_n({"a", "b", "a", "b"}, 2), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(distinct_n({"a"}, 2), 1.0);
  EXPECT_DOUBLE_EQ(distinct_n({}, 1), 1.0);
  EXPECT_THROW(distinct_n({"a"}, 0), ConfigError);
}

TEST(RougeL, HandCases) {
  auto r = rouge_l({"the", "cat", "sat"}, {"the", "cat", "on", "the", "mat"});
  EXPECT_DOUBLE_EQ(r.precision, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.recall, 2.0 / 5.0);
  EXPECT_DOUBLE_EQ(r.f1, 2 * (2.0 / 3.0) * 0.4 / (2.0 / 3.0 + 0.4));
  EXPECT_DOUBLE_EQ(rouge_l({}, {"a"}).f1, 0.0);
  EXPECT_DOUBLE_EQ(rouge_l({"a", "b"}, {"a", "b"}).f1, 1.0);
}

TEST(DistinctN, MatchesBruteForceOnRandomSequences) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    auto s = oracles::random_tokens(rng, 0, 12, 5);
    for (std::size_t n = 1; n <= 3; ++n) ASSERT_EQ(distinct_n(s, n), oracles::brute_distinct_n(s, n));
  }
}

TEST(RougeL, MatchesBruteForceOnRandomPairs) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) {
    auto a = oracles::random_tokens(rng, 0, 9, 4), b = oracles::random_tokens(rng, 0, 9, 4);
    ASSERT_EQ(lcs_length(a, b), oracles::brute_lcs(a, b));
    const auto r = rouge_l(a, b);
    const auto o = oracles::brute_rouge_l(a, b);
    ASSERT_EQ(r.precision, o[0]);
    ASSERT_EQ(r.recall, o[1]);
    ASSERT_EQ(r.f1, o[2]);
  }
}

TEST(Meteor, IdenticalAndDisjoint) {
  Tokens a{"i", "like", "tea"};
  EXPECT_NEAR(meteor_lite(a, a), 1.0 - 0.5 / 27.0, 1e-12);
  EXPECT_DOUBLE_EQ(meteor_lite(a, {"x", "y"}), 0.0);
  EXPECT_LE(meteor_lite({"tea", "like", "i"}, a), meteor_lite(a, a));
}

TEST(RougeL, PrefixAndSymmetry) {
  auto r = rouge_l({"the", "cat", "sat"}, {"the", "cat", "sat", "down"});
  EXPECT_DOUBLE_EQ(r.precision, 1.0);
  EXPECT_DOUBLE_EQ(r.recall, 0.75);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    auto a = oracles::random_tokens(rng, 1, 8, 3), b = oracles::random_tokens(rng, 1, 8, 3);
    EXPECT_DOUBLE_EQ(rouge_l(a, b).precision, rouge_l(b, a).recall);
    EXPECT_DOUBLE_EQ(rouge_l(a, b).f1, rouge_l(b, a).f1);
  }
}

TEST(DistinctN, RepeatedPair) { EXPECT_DOUBLE_EQ(distinct_n({"a", "b", "a", "b"}, 1), 0.5); }

TEST(Meteor, StaysInUnitInterval) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 500; ++i) {
    auto a = oracles::random_tokens(rng, 0, 10, 4), b = oracles::random_tokens(rng, 0, 10, 4);
    const double m = meteor_lite(a, b);
    ASSERT_GE(m, 0.0);
    ASSERT_LE(m, 1.0);
  }
}

TEST(CorpusDistinct, IsMeanOfPerResponse) {
  std::vector<Tokens> rs{{"a", "a"}, {"a", "b"}};
  EXPECT_DOUBLE_EQ(corpus_distinct_n(rs, 1), 0.75);
}

}  // namespace
