#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "alignedis/core.hpp"

namespace alignedis {
namespace {

// Reference values below were computed with Python's hashlib from the byte
// layout key || domain || u32be(n) || u32be(tokens...).

TEST(ProbVector, RejectsBadInput) {
  EXPECT_THROW(ProbVector(std::vector<double>{}), InvalidArgument);
  EXPECT_THROW(ProbVector({0.5, 0.6}), InvalidArgument);
  EXPECT_THROW(ProbVector({-0.1, 1.1}), InvalidArgument);
  EXPECT_THROW(ProbVector({NAN, 1.0}), InvalidArgument);
  EXPECT_NO_THROW(ProbVector({0.5, 0.5 + 1e-10}));
}

TEST(ProbVector, NormalizesOnRequest) {
  ProbVector p({2.0, 6.0}, Normalize::kYes);
  EXPECT_DOUBLE_EQ(p[0], 0.25);
  EXPECT_DOUBLE_EQ(p[1], 0.75);
  EXPECT_THROW(ProbVector({0.0, 0.0}, Normalize::kYes), InvalidArgument);
}

TEST(SampleIndex, SkipsZeroMass) {
  const std::vector<double> p{0.0, 0.5, 0.0, 0.5};
  EXPECT_EQ(sample_index(p, 0.0), 1u);
  EXPECT_EQ(sample_index(p, 0.49), 1u);
  EXPECT_EQ(sample_index(p, 0.5), 3u);
  EXPECT_EQ(sample_index(p, 0.999999), 3u);
  const std::vector<double> tail{0.5, 0.5, 0.0};
  EXPECT_EQ(sample_index(tail, 1.0), 1u);
}

TEST(WatermarkKey, EmptyKeyRejected) {
  EXPECT_THROW(WatermarkKey(std::string_view("")), InvalidArgument);
  EXPECT_THROW(WatermarkKey(std::vector<std::uint8_t>{}), InvalidArgument);
}

TEST(WatermarkKey, DeriveAppendsIndex) {
  WatermarkKey k("abc");
  EXPECT_EQ(k.derive(12), WatermarkKey("abc:12"));
  EXPECT_FALSE(k.derive(1) == k.derive(2));
}

TEST(WatermarkCode, AtNeedsFullContext) {
  WatermarkKey k("secret");
  const TokenSeq toks{5, 6, 7};
  EXPECT_THROW(WatermarkCode::at(k, toks, 1, 2), InvalidArgument);
  EXPECT_THROW(WatermarkCode::at(k, toks, 4, 1), InvalidArgument);
  auto c = WatermarkCode::at(k, toks, 3, 2);
  ASSERT_EQ(c.ngram_n(), 2u);
  EXPECT_EQ(c.context()[0], 6u);
  EXPECT_EQ(c.context()[1], 7u);
}

TEST(Prf, MatchesReferenceDigests) {
  WatermarkKey k("secret");
  const TokenSeq ctx{42};
  WatermarkCode c(k, ctx);
  EXPECT_EQ(prf_r(c), 0.49868089678364913);
  EXPECT_EQ(code_fingerprint(c), 0xed3da76e19d640a0ULL);
  const TokenSeq ctx2{7, 9};
  EXPECT_EQ(prf_r(WatermarkCode(k, ctx2)), 0.3424227865342985);
}

TEST(Prf, PermutationMatchesReference) {
  WatermarkKey k("secret");
  const TokenSeq ctx{42};
  EXPECT_EQ(prf_permutation(WatermarkCode(k, ctx), 10),
            (std::vector<TokenId>{2, 0, 5, 4, 3, 1, 8, 9, 7, 6}));
  EXPECT_EQ(key_permutation(k, 10), (std::vector<TokenId>{2, 1, 3, 4, 7, 9, 6, 8, 5, 0}));
}

TEST(Prf, DeterministicAndKeySensitive) {
  WatermarkKey a("k1");
  WatermarkKey b("k2");
  const TokenSeq ctx{3, 1, 4};
  EXPECT_EQ(prf_r(WatermarkCode(a, ctx)), prf_r(WatermarkCode(a, ctx)));
  EXPECT_NE(prf_r(WatermarkCode(a, ctx)), prf_r(WatermarkCode(b, ctx)));
  // Domains are separated: r and fingerprint come from different digests.
  const double r = prf_r(WatermarkCode(a, ctx));
  const double fp_as_r = static_cast<double>(code_fingerprint(WatermarkCode(a, ctx)) >> 11) * 0x1.0p-53;
  EXPECT_NE(r, fp_as_r);
}

TEST(Prf, UniformOverContexts) {
  // Kolmogorov-Smirnov against U[0,1) over 1e5 distinct contexts; the
  // asymptotic 1% critical value of sqrt(n) * D is 1.628.
  WatermarkKey k("uniformity");
  const std::size_t n = 100000;
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n; ++i) {
    const TokenId t = static_cast<TokenId>(i);
    r[i] = prf_r(WatermarkCode(k, std::span<const TokenId>(&t, 1)));
    ASSERT_GE(r[i], 0.0);
    ASSERT_LT(r[i], 1.0);
  }
  std::sort(r.begin(), r.end());
  double d = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lo = static_cast<double>(i) / n;
    const double hi = static_cast<double>(i + 1) / n;
    d = std::max({d, r[i] - lo, hi - r[i]});
  }
  EXPECT_LT(std::sqrt(static_cast<double>(n)) * d, 1.628);
}

TEST(Prf, PermutationIsBijection) {
  WatermarkKey k("perm");
  for (TokenId c = 0; c < 50; ++c) {
    for (std::size_t n : {1u, 2u, 7u, 500u}) {
      auto p = prf_permutation(WatermarkCode(k, std::span<const TokenId>(&c, 1)), n);
      std::set<TokenId> seen(p.begin(), p.end());
      ASSERT_EQ(seen.size(), n);
      ASSERT_EQ(*seen.rbegin(), n - 1);
      auto rank = invert_permutation(p);
      for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(p[rank[i]], i);
    }
  }
  EXPECT_THROW(key_permutation(k, 0), InvalidArgument);
}

TEST(Prf, PermutationFirstRankRoughlyUniform) {
  // Each of 5 tokens should lead the permutation about 1/5 of the time.
  WatermarkKey k("shuffle");
  std::vector<int> first(5, 0);
  const int trials = 20000;
  for (int i = 0; i < trials; ++i) {
    const TokenId c = static_cast<TokenId>(i);
    ++first[prf_permutation(WatermarkCode(k, std::span<const TokenId>(&c, 1)), 5)[0]];
  }
  // Pearson chi-square with 4 dof; 1% critical value 13.28.
  double chi = 0.0;
  for (int f : first) chi += (f - trials / 5.0) * (f - trials / 5.0) / (trials / 5.0);
  EXPECT_LT(chi, 13.28);
}

TEST(CodeHistory, InsertReportsNovelty) {
  CodeHistory h;
  EXPECT_TRUE(h.insert(1));
  EXPECT_FALSE(h.insert(1));
  EXPECT_TRUE(h.contains(1));
  EXPECT_EQ(h.size(), 1u);
  h.clear();
  EXPECT_FALSE(h.contains(1));
}

TEST(DeriveSeed, StreamsAndIndicesDiffer) {
  std::set<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 4; ++s) {
    for (std::uint64_t i = 0; i < 100; ++i) seeds.insert(derive_seed(7, s, i));
  }
  EXPECT_EQ(seeds.size(), 400u);
  EXPECT_EQ(derive_seed(7, 1, 2), derive_seed(7, 1, 2));
}

}  // namespace
}  // namespace alignedis
