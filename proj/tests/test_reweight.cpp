#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "alignedis/reweight.hpp"
#include "alignedis/stats.hpp"

namespace alignedis {
namespace {

ProbVector random_dist(std::size_t n, double concentration, std::mt19937_64& rng) {
  std::gamma_distribution<double> g(concentration, 1.0);
  std::vector<double> p(n);
  for (double& v : p) v = g(rng) + 1e-300;
  return ProbVector(std::move(p), Normalize::kYes);
}

// n tokens, token t in cluster t % h.
ClusterMap striped_map(std::size_t n, std::size_t h) {
  std::vector<std::uint32_t> a(n);
  for (std::size_t t = 0; t < n; ++t) a[t] = static_cast<std::uint32_t>(t % h);
  return ClusterMap(h, a, std::vector<std::vector<double>>(h, std::vector<double>{0.0}));
}

std::vector<double> cluster_mass_oracle(const ProbVector& p, const ClusterMap& m) {
  std::vector<double> out(m.h(), 0.0);
  for (std::size_t t = 0; t < p.size(); ++t) out[m.cluster_of(static_cast<TokenId>(t))] += p[t];
  return out;
}

TEST(SegmentTable, TwoClusterExample) {
  const std::vector<double> probs{0.7, 0.3};
  auto t = build_segment_table(probs);
  const std::vector<Segment> expect{{0, 0.0, 0.5}, {1, 0.5, 0.8}, {0, 0.8, 1.0}};
  ASSERT_EQ(t.segments().size(), expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i) {
    EXPECT_EQ(t.segments()[i].cluster, expect[i].cluster);
    EXPECT_NEAR(t.segments()[i].start, expect[i].start, 1e-15);
    EXPECT_NEAR(t.segments()[i].end, expect[i].end, 1e-15);
  }
  EXPECT_EQ(t.locate(0.79).cluster, 1u);
  EXPECT_EQ(t.locate(0.8).cluster, 0u);
  EXPECT_THROW(t.locate(1.0), InvalidArgument);
  EXPECT_THROW(t.locate(-0.1), InvalidArgument);
}

TEST(SegmentTable, DonorOrderingAndFill) {
  // h = 4, width 0.25. Clusters 1 and 3 overflow by 0.15 and 0.25; cluster
  // 3 donates first (larger overflow) into bin 0, then bin 2.
  const std::vector<double> probs{0.1, 0.4, 0.0, 0.5};
  auto t = build_segment_table(probs);
  const std::vector<Segment> expect{{0, 0.0, 0.1},  {3, 0.1, 0.25}, {1, 0.25, 0.5},
                                    {3, 0.5, 0.6},  {1, 0.6, 0.75}, {3, 0.75, 1.0}};
  ASSERT_EQ(t.segments().size(), expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i) {
    EXPECT_EQ(t.segments()[i].cluster, expect[i].cluster) << i;
    EXPECT_NEAR(t.segments()[i].start, expect[i].start, 1e-15) << i;
    EXPECT_NEAR(t.segments()[i].end, expect[i].end, 1e-15) << i;
  }
}

TEST(SegmentTable, UniformMassesGiveOneSegmentPerBin) {
  auto t = build_segment_table(std::vector<double>(20, 0.05));
  ASSERT_EQ(t.segments().size(), 20u);
  EXPECT_DOUBLE_EQ(t.own_mass(), 1.0);
}

TEST(SegmentTable, RejectsBadMasses) {
  EXPECT_THROW(build_segment_table(std::vector<double>{0.5, 0.6}), InvalidArgument);
  EXPECT_THROW(build_segment_table(std::vector<double>{1.5, -0.5}), InvalidArgument);
  EXPECT_THROW(build_segment_table(std::vector<double>{}), InvalidArgument);
}

TEST(SegmentTable, TilingAndOwnMassOnRandomDistributions) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 1 + trial % 40;
    const auto dist = random_dist(h * 5, trial % 2 ? 0.05 : 1.0, rng);
    const auto map = striped_map(h * 5, h);
    const auto masses = cluster_mass_oracle(dist, map);
    auto t = build_segment_table(dist, map);

    double cursor = 0.0;
    std::vector<double> len(h, 0.0);
    for (const auto& s : t.segments()) {
      ASSERT_EQ(s.start, cursor);
      ASSERT_GT(s.end, s.start);
      cursor = s.end;
      len[s.cluster] += s.end - s.start;
    }
    ASSERT_EQ(cursor, 1.0);
    double expected_own = 0.0;
    for (std::size_t c = 0; c < h; ++c) {
      ASSERT_NEAR(len[c], masses[c], 1e-12) << "trial " << trial << " cluster " << c;
      expected_own += std::min(masses[c], 1.0 / static_cast<double>(h));
    }
    ASSERT_NEAR(t.own_mass(), expected_own, 1e-12);
  }
}

TEST(Aligned, MarginalEqualsDistribution) {
  // Oracle: r integrated over [0,1) puts len(c) on cluster c and spreads it
  // within c proportionally to dist.
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto dist = random_dist(100, 0.1, rng);
    const auto map = striped_map(100, 20);
    auto t = build_segment_table(dist, map);
    const auto masses = cluster_mass_oracle(dist, map);
    std::vector<double> len(20, 0.0);
    for (const auto& s : t.segments()) len[s.cluster] += s.length();
    std::vector<double> oracle(100);
    for (std::size_t x = 0; x < 100; ++x) {
      const auto c = map.cluster_of(static_cast<TokenId>(x));
      oracle[x] = len[c] * dist[x] / masses[c];
    }
    EXPECT_LT(tv_distance(oracle, dist.values()), 1e-12);
    EXPECT_LT(tv_distance(aligned_marginal(t, dist, map), dist.values()), 1e-12);
  }
}

TEST(Aligned, SampleStaysInSelectedCluster) {
  std::mt19937_64 rng(6);
  const auto dist = random_dist(60, 0.3, rng);
  const auto map = striped_map(60, 12);
  auto t = build_segment_table(dist, map);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 5000; ++i) {
    const double r = u(rng);
    const TokenId x = aligned_sample(t, dist, map, r, rng);
    ASSERT_EQ(map.cluster_of(x), t.locate(r).cluster);
    ASSERT_GT(dist[x], 0.0);
  }
  EXPECT_THROW(aligned_sample(t, dist, map, 1.0, rng), InvalidArgument);
}

TEST(Aligned, MonteCarloFrequenciesMatchDistribution) {
  std::mt19937_64 rng(7);
  const auto dist = random_dist(40, 1.0, rng);
  const auto map = striped_map(40, 8);
  auto t = build_segment_table(dist, map);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> counts(40, 0.0);
  for (int i = 0; i < 100000; ++i) counts[aligned_sample(t, dist, map, u(rng), rng)] += 1.0;
  EXPECT_GT(chi_square_gof(counts, dist.values()).p_value, 0.001);
}

TEST(Aligned, ScoreUsesFixedBins) {
  // h = 20: r = 0.21 lies in bin 4, r = 0.25 in bin 5.
  std::vector<std::uint32_t> a(20);
  std::iota(a.begin(), a.end(), 0u);
  ClusterMap m(20, a, std::vector<std::vector<double>>(20, std::vector<double>{0.0}));
  EXPECT_EQ(aligned_score(0.21, 4, m), 1);
  EXPECT_EQ(aligned_score(0.25, 4, m), 0);
  EXPECT_EQ(aligned_score(0.25, 5, m), 1);
  EXPECT_EQ(aligned_score(std::nextafter(1.0, 0.0), 19, m), 1);
}

TEST(Aligned, SingleClusterIsPlainSampling) {
  std::mt19937_64 rng(8);
  const auto dist = random_dist(10, 1.0, rng);
  const auto map = striped_map(10, 1);
  auto t = build_segment_table(dist, map);
  ASSERT_EQ(t.segments().size(), 1u);
  EXPECT_EQ(aligned_token_law(t, dist, map, 0.3), std::vector<double>(dist.values().begin(), dist.values().end()));
}

TEST(Kgw, HandWorkedExample) {
  const ProbVector d({0.5, 0.5});
  const std::vector<TokenId> perm{0, 1};
  auto w = kgw_reweight(d, perm, std::log(3.0), 0.5);
  EXPECT_NEAR(w[0], 0.75, 1e-15);
  EXPECT_NEAR(w[1], 0.25, 1e-15);
  EXPECT_EQ(kgw_reweight(d, perm, 0.0, 0.5), d);
  EXPECT_EQ(green_list_size(10, 0.25), 3u);
  EXPECT_EQ(green_list_size(4, 0.5), 2u);
}

TEST(Kgw, OutputsAreDistributions) {
  std::mt19937_64 rng(9);
  WatermarkKey key("k");
  for (TokenId c = 0; c < 20; ++c) {
    const auto d = random_dist(50, 0.2, rng);
    const WatermarkCode code(key, std::span<const TokenId>(&c, 1));
    for (const auto& w : {kgw_reweight(d, code, 2.0, 0.25), unigram_reweight(d, key, 2.0, 0.5)}) {
      EXPECT_NEAR(std::accumulate(w.values().begin(), w.values().end(), 0.0), 1.0, 1e-9);
    }
  }
  EXPECT_EQ(unigram_reweight(ProbVector::uniform(8), key, 1.0, 0.5),
            kgw_reweight(ProbVector::uniform(8), key_permutation(key, 8), 1.0, 0.5));
}

TEST(Dipmark, HandWorkedExamples) {
  const ProbVector d({0.5, 0.5});
  const std::vector<TokenId> perm{0, 1};
  auto w = dipmark_reweight(d, perm, 0.5);
  EXPECT_NEAR(w[0], 0.0, 1e-15);
  EXPECT_NEAR(w[1], 1.0, 1e-15);
  // alpha = 0 leaves the distribution alone.
  std::mt19937_64 rng(10);
  const auto r = random_dist(30, 0.5, rng);
  std::vector<TokenId> p(30);
  std::iota(p.begin(), p.end(), 0u);
  std::shuffle(p.begin(), p.end(), rng);
  EXPECT_LT(tv_distance(dipmark_reweight(r, p, 0.0).values(), r.values()), 1e-15);
  EXPECT_THROW(dipmark_reweight(r, p, 0.6), InvalidArgument);
}

TEST(Dipmark, PermutationAverageIsExact) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto d = random_dist(3, 1.0, rng);
    for (double alpha : {0.1, 0.3, 0.4, 0.5}) {
      std::vector<TokenId> perm{0, 1, 2};
      std::vector<double> avg(3, 0.0);
      do {
        auto w = dipmark_reweight(d, perm, alpha);
        for (int k = 0; k < 3; ++k) avg[k] += w[k] / 6.0;
      } while (std::next_permutation(perm.begin(), perm.end()));
      EXPECT_LT(tv_distance(avg, d.values()), 1e-12) << "alpha " << alpha;
    }
  }
}

TEST(Dipmark, GammaReweightIsHalf) {
  std::mt19937_64 rng(12);
  WatermarkKey key("g");
  const TokenId c = 3;
  const WatermarkCode code(key, std::span<const TokenId>(&c, 1));
  const auto d = random_dist(25, 0.5, rng);
  EXPECT_EQ(gamma_reweight(d, code), dipmark_reweight(d, code, 0.5));
}

TEST(Its, SampleAtZeroAndSingleToken) {
  const ProbVector d({0.0, 0.3, 0.7});
  const std::vector<TokenId> perm{0, 2, 1};
  EXPECT_EQ(its_sample(d, perm, 0.0), 2u);
  EXPECT_EQ(its_sample(d, perm, 0.69), 2u);
  EXPECT_EQ(its_sample(d, perm, 0.7), 1u);
  EXPECT_DOUBLE_EQ(its_score(0.2, 0u, 1), 1.0 - 0.3);
}

TEST(Its, IntegratedSamplingIsDistortionFree) {
  // Exact integration: r in [F_{k-1}, F_k) selects the k-th permuted token.
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const auto d = random_dist(80, 0.1, rng);
    std::vector<TokenId> perm(80);
    std::iota(perm.begin(), perm.end(), 0u);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> marginal(80, 0.0);
    double lo = 0.0;
    for (TokenId tok : perm) {
      const double hi = lo + d[tok];
      if (d[tok] > 0.0) marginal[its_sample(d, perm, std::min(0.5 * (lo + hi), std::nextafter(1.0, 0.0)))] += d[tok];
      lo = hi;
    }
    EXPECT_LT(tv_distance(marginal, d.values()), 1e-12);
  }
}

TEST(Its, NullMeanMatchesNumericalIntegration) {
  // Midpoint rule over r for every rank; 1 - |r - u| is piecewise linear so
  // a grid that contains every u as a node is exact up to rounding.
  for (std::size_t n : {1u, 2u, 5u, 200u}) {
    const std::size_t steps = 2000 * n;
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t s = 0; s < steps; ++s) {
        const double r = (static_cast<double>(s) + 0.5) / static_cast<double>(steps);
        total += its_score(r, static_cast<std::uint32_t>(k), n);
      }
    }
    const double numeric = total / static_cast<double>(steps * n);
    EXPECT_NEAR(its_null_mean(n), numeric, 1e-9) << "n = " << n;
  }
  EXPECT_DOUBLE_EQ(its_null_mean(1), 0.75);  // token fixed at the centre rank
  EXPECT_NEAR(its_null_mean(100000), 2.0 / 3.0, 1e-9);
}

TEST(Config, NamesAndValidation) {
  for (auto s : {Strategy::kAlignedIs, Strategy::kIts, Strategy::kKgw, Strategy::kUnigram,
                 Strategy::kDipmark, Strategy::kGammaReweight}) {
    EXPECT_EQ(strategy_from_string(to_string(s)), s);
  }
  EXPECT_THROW(strategy_from_string("sir"), InvalidArgument);
  ReweightConfig c;
  c.strategy = Strategy::kKgw;
  c.gamma = 1.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c.gamma = 0.25;
  EXPECT_EQ(c.params(), "delta=2,gamma=0.25");
  EXPECT_FALSE(c.distortion_free());
  c.strategy = Strategy::kDipmark;
  c.alpha = 0.7;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

}  // namespace
}  // namespace alignedis
