#include <gtest/gtest.h>

#include <random>
#include <set>
#include <vector>

#include "alignedis/generate.hpp"
#include "alignedis/stats.hpp"

namespace alignedis {
namespace {

// A bigram table: row = last token (or a fixed row for the empty context).
class TableModel {
 public:
  TableModel(std::size_t n, double concentration, std::uint64_t seed) : n_(n) {
    std::mt19937_64 rng(seed);
    std::gamma_distribution<double> g(concentration, 1.0);
    for (std::size_t r = 0; r <= n; ++r) {
      std::vector<double> p(n);
      for (double& v : p) v = g(rng) + 1e-12;
      rows_.emplace_back(std::move(p), Normalize::kYes);
    }
  }
  std::size_t vocab_size() const { return n_; }
  ProbVector next_dist(std::span<const TokenId> ctx) const {
    return ctx.empty() ? rows_[n_] : rows_[ctx.back()];
  }

 private:
  std::size_t n_;
  std::vector<ProbVector> rows_;
};

static_assert(NextTokenModel<TableModel>);

ClusterMap striped_map(std::size_t n, std::size_t h) {
  std::vector<std::uint32_t> a(n);
  for (std::size_t t = 0; t < n; ++t) a[t] = static_cast<std::uint32_t>(t % h);
  return ClusterMap(h, a, std::vector<std::vector<double>>(h, std::vector<double>{0.0}));
}

ReweightConfig aligned(std::size_t h) { return ReweightConfig{Strategy::kAlignedIs, h, 0, 0.5, 0}; }

TEST(Session, Validation) {
  const auto map = striped_map(10, 5);
  EXPECT_THROW(GenerationSession(WatermarkKey("k"), aligned(5), 1, 0), InvalidArgument);
  EXPECT_THROW(GenerationSession(WatermarkKey("k"), aligned(4), 1, 0, &map), InvalidArgument);
  EXPECT_THROW(GenerationSession(WatermarkKey("k"), aligned(5), 0, 0, &map), InvalidArgument);
  EXPECT_NO_THROW(GenerationSession(WatermarkKey("k"), aligned(5), 1, 0, &map));
}

TEST(Generate, LengthAndDeterminism) {
  TableModel model(30, 0.5, 1);
  const auto map = striped_map(30, 6);
  const TokenSeq prompt{4};
  GenerationSession a(WatermarkKey("k"), aligned(6), 1, 99, &map);
  GenerationSession b(WatermarkKey("k"), aligned(6), 1, 99, &map);
  auto x = generate(model, prompt, 50, a);
  EXPECT_EQ(x.size(), 50u);
  EXPECT_EQ(x, generate(model, prompt, 50, b));
  EXPECT_THROW(generate(model, prompt, 0, a), InvalidArgument);
}

TEST(Generate, EmptyPromptSkipsFirstStep) {
  TableModel model(20, 0.5, 2);
  const auto map = striped_map(20, 4);
  GenerationSession s(WatermarkKey("k"), aligned(4), 2, 5, &map);
  std::vector<StepRecord> trace;
  generate(model, {}, 10, s, &trace);
  ASSERT_EQ(trace.size(), 10u);
  EXPECT_FALSE(trace[0].watermarked);
  EXPECT_FALSE(trace[1].watermarked);
  EXPECT_TRUE(trace[2].watermarked);
}

TEST(Generate, RepeatedCodesAreNotWatermarked) {
  // Two tokens, so 1-gram codes repeat almost immediately.
  TableModel model(2, 1.0, 3);
  const auto map = striped_map(2, 2);
  GenerationSession s(WatermarkKey("k"), aligned(2), 1, 7, &map);
  std::vector<StepRecord> trace;
  const TokenSeq prompt{0};
  generate(model, prompt, 40, s, &trace);
  std::set<std::uint64_t> seen;
  for (const auto& rec : trace) {
    EXPECT_NE(rec.fingerprint, 0u);
    EXPECT_EQ(rec.watermarked, seen.insert(rec.fingerprint).second);
  }
  EXPECT_LE(s.history.size(), 2u);

  // The history persists across calls on the same session.
  generate(model, prompt, 10, s, &trace);
  for (const auto& rec : trace) EXPECT_FALSE(rec.watermarked);

  s.use_history = false;
  generate(model, prompt, 10, s, &trace);
  for (const auto& rec : trace) EXPECT_TRUE(rec.watermarked);
}

TEST(Generate, TraceRecordsPrfValue) {
  TableModel model(12, 0.5, 4);
  const auto map = striped_map(12, 3);
  WatermarkKey key("trace");
  GenerationSession s(key, aligned(3), 1, 11, &map);
  const TokenSeq prompt{7};
  std::vector<StepRecord> trace;
  auto out = generate(model, prompt, 1, s, &trace);
  EXPECT_EQ(trace[0].r, prf_r(WatermarkCode(key, prompt)));
  EXPECT_EQ(trace[0].fingerprint, code_fingerprint(WatermarkCode(key, prompt)));
}

TEST(Generate, SingleClusterMatchesModel) {
  // h = 1: every step samples from dist restricted to the only cluster.
  TableModel model(6, 1.0, 5);
  const auto map = striped_map(6, 1);
  const TokenSeq prompt{2};
  std::vector<double> counts(6, 0.0);
  for (std::uint64_t k = 0; k < 20000; ++k) {
    GenerationSession s(WatermarkKey("one").derive(k), aligned(1), 1, k, &map);
    counts[generate(model, prompt, 1, s)[0]] += 1.0;
  }
  EXPECT_GT(chi_square_gof(counts, model.next_dist(prompt).values()).p_value, 0.001);
}

class FirstStepOverKeys : public ::testing::TestWithParam<Strategy> {};

TEST_P(FirstStepOverKeys, MatchesModelDistribution) {
  TableModel model(40, 0.3, 6);
  const auto map = striped_map(40, 8);
  const TokenSeq prompt{9};
  ReweightConfig cfg{GetParam(), 8, 2.0, 0.5, 0.4};
  std::vector<double> counts(40, 0.0);
  for (std::uint64_t k = 0; k < 20000; ++k) {
    GenerationSession s(WatermarkKey("keys").derive(k), cfg, 1, k, &map);
    counts[generate(model, prompt, 1, s)[0]] += 1.0;
  }
  EXPECT_GT(chi_square_gof(counts, model.next_dist(prompt).values()).p_value, 0.001);
}

INSTANTIATE_TEST_SUITE_P(DistortionFree, FirstStepOverKeys,
                         ::testing::Values(Strategy::kAlignedIs, Strategy::kIts, Strategy::kDipmark,
                                           Strategy::kGammaReweight),
                         [](const auto& info) { return to_string(info.param); });

TEST(Generate, KgwIsBiased) {
  TableModel model(40, 0.3, 6);
  const TokenSeq prompt{9};
  ReweightConfig cfg{Strategy::kUnigram, 0, 2.0, 0.5, 0};
  std::vector<double> counts(40, 0.0);
  // Unigram's green list does not depend on the context, so one key shows
  // the bias directly.
  GenerationSession s(WatermarkKey("fixed"), cfg, 1, 1);
  s.use_history = false;
  for (int i = 0; i < 20000; ++i) counts[generate(model, prompt, 1, s)[0]] += 1.0;
  EXPECT_LT(chi_square_gof(counts, model.next_dist(prompt).values()).p_value, 1e-6);
}

TEST(Generate, UnwatermarkedIsSeeded) {
  TableModel model(15, 0.5, 7);
  const TokenSeq prompt{1};
  EXPECT_EQ(generate_unwatermarked(model, prompt, 30, 4), generate_unwatermarked(model, prompt, 30, 4));
  EXPECT_NE(generate_unwatermarked(model, prompt, 30, 4), generate_unwatermarked(model, prompt, 30, 5));
  EXPECT_THROW(generate_unwatermarked(model, prompt, 0, 4), InvalidArgument);
}

}  // namespace
}  // namespace alignedis
