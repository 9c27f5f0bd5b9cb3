#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>
#include <vector>

#include "alignedis/clustering.hpp"

namespace alignedis {
namespace {

// k well-separated isotropic blobs of `per` points each in `dim`
// dimensions; returns the embeddings and the generating labels.
std::pair<EmbeddingMatrix, std::vector<std::uint32_t>> blobs(std::size_t k, std::size_t per,
                                                             std::size_t dim, double spacing,
                                                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> data;
  std::vector<std::uint32_t> labels;
  for (std::size_t i = 0; i < k * per; ++i) {
    const std::size_t c = i % k;
    for (std::size_t j = 0; j < dim; ++j) {
      data.push_back((j == c % dim ? spacing * static_cast<double>(1 + c / dim) : 0.0) + noise(rng));
    }
    labels.push_back(static_cast<std::uint32_t>(c));
  }
  return {EmbeddingMatrix(k * per, dim, std::move(data)), labels};
}

// Within-cluster sum of squares with means recomputed from the labels.
double wcss(const EmbeddingMatrix& x, std::span<const std::uint32_t> labels, std::size_t h) {
  std::vector<std::vector<double>> mean(h, std::vector<double>(x.dim(), 0.0));
  std::vector<double> count(h, 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.dim(); ++j) mean[labels[i]][j] += x.row(i)[j];
    count[labels[i]] += 1.0;
  }
  double s = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.dim(); ++j) {
      const double d = x.row(i)[j] - mean[labels[i]][j] / count[labels[i]];
      s += d * d;
    }
  }
  return s;
}

// True iff the two labelings induce the same partition.
bool same_partition(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
  std::map<std::uint32_t, std::uint32_t> ab;
  std::map<std::uint32_t, std::uint32_t> ba;
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto [it1, new1] = ab.emplace(a[i], b[i]);
    auto [it2, new2] = ba.emplace(b[i], a[i]);
    if (it1->second != b[i] || it2->second != a[i]) return false;
  }
  return true;
}

TEST(ClusterMap, Validation) {
  std::vector<std::vector<double>> c2{{0.0}, {1.0}};
  EXPECT_THROW(ClusterMap(2, {0, 0, 0}, c2), InvalidArgument);  // cluster 1 empty
  EXPECT_THROW(ClusterMap(2, {0, 2, 1}, c2), InvalidArgument);  // index >= h
  EXPECT_THROW(ClusterMap(2, {0, 1}, {{0.0}}), InvalidArgument);
  EXPECT_THROW(ClusterMap(2, {0, 1}, {{0.0}, {1.0, 2.0}}), InvalidArgument);
  ClusterMap m(2, {1, 0, 1}, c2);
  EXPECT_EQ(m.members(1).size(), 2u);
  EXPECT_EQ(m.cluster_of(0), 1u);
  EXPECT_THROW(m.cluster_of(3), std::out_of_range);
}

TEST(Assign, LowestIndexWinsTies) {
  const std::vector<std::vector<double>> cents{{1.0, 0.0}, {-1.0, 0.0}, {0.0, 5.0}};
  const std::vector<double> mid{0.0, 0.0};
  EXPECT_EQ(assign(mid, cents), 0u);
  const std::vector<double> near_second{-0.9, 0.0};
  EXPECT_EQ(assign(near_second, cents), 1u);
  const std::vector<double> wrong_dim{0.0};
  EXPECT_THROW(assign(wrong_dim, cents), InvalidArgument);
}

TEST(KMeans, RecoversSeparatedBlobs) {
  auto [x, truth] = blobs(20, 25, 32, 30.0, 11);
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    KMeansOptions opts;
    opts.h = 20;
    opts.seed = seed;
    ClusterMap m = kmeans_fit(x, opts);
    EXPECT_TRUE(same_partition(m.assignment(), truth)) << "seed " << seed;
  }
}

TEST(KMeans, SingleClusterIsTheMean) {
  auto [x, truth] = blobs(3, 10, 4, 5.0, 3);
  KMeansOptions opts;
  opts.h = 1;
  ClusterMap m = kmeans_fit(x, opts);
  for (std::size_t j = 0; j < x.dim(); ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) mean += x.row(i)[j];
    mean /= static_cast<double>(x.rows());
    EXPECT_NEAR(m.centroids()[0][j], mean, 1e-12);
  }
}

TEST(KMeans, InertiaNonIncreasingAndMatchesOracle) {
  // Overlapping blobs so Lloyd takes several iterations.
  auto [x, truth] = blobs(8, 40, 3, 2.0, 5);
  KMeansOptions opts;
  opts.h = 8;
  opts.seed = 9;
  KMeansTrace trace;
  ClusterMap m = kmeans_fit(x, opts, &trace);
  ASSERT_GE(trace.inertia.size(), 2u);
  for (std::size_t i = 1; i < trace.inertia.size(); ++i) {
    EXPECT_LE(trace.inertia[i], trace.inertia[i - 1] * (1 + 1e-12)) << "iteration " << i;
  }
  // At convergence centroids are the label means, so the library inertia
  // equals the oracle WCSS.
  ASSERT_TRUE(trace.converged);
  EXPECT_NEAR(inertia(x, m.assignment(), m.centroids()), wcss(x, m.assignment(), 8), 1e-6);
}

TEST(KMeans, EveryTokenNearestToOwnCentroid) {
  auto [x, truth] = blobs(6, 30, 2, 1.5, 8);
  KMeansOptions opts;
  opts.h = 6;
  ClusterMap m = kmeans_fit(x, opts);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double own = squared_distance(x.row(i), m.centroids()[m.cluster_of(static_cast<TokenId>(i))]);
    for (const auto& c : m.centroids()) EXPECT_LE(own, squared_distance(x.row(i), c) + 1e-12);
  }
}

TEST(KMeans, DeterministicPerSeed) {
  auto [x, truth] = blobs(5, 20, 3, 1.0, 4);
  KMeansOptions opts;
  opts.h = 5;
  opts.seed = 77;
  EXPECT_EQ(kmeans_fit(x, opts), kmeans_fit(x, opts));
}

TEST(KMeans, DuplicatePointsStillFillEveryCluster) {
  // Ten identical points and two distinct ones; h = 4 forces repairs.
  std::vector<double> data(10, 0.0);
  data.push_back(5.0);
  data.push_back(9.0);
  EmbeddingMatrix x(12, 1, data);
  KMeansOptions opts;
  opts.h = 4;
  ClusterMap m = kmeans_fit(x, opts);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_FALSE(m.members(c).empty());
}

TEST(KMeans, Errors) {
  auto [x, truth] = blobs(2, 3, 2, 5.0, 1);
  KMeansOptions opts;
  opts.h = 7;
  EXPECT_THROW(kmeans_fit(x, opts), InvalidArgument);
  opts.h = 2;
  opts.max_iters = 0;
  EXPECT_THROW(kmeans_fit(x, opts), InvalidArgument);
  opts.max_iters = 10;
  opts.tol = 0.0;
  EXPECT_THROW(kmeans_fit(x, opts), InvalidArgument);
  std::vector<double> bad{0.0, NAN, 1.0, 2.0};
  opts.tol = 1e-6;
  EXPECT_THROW(kmeans_fit(EmbeddingMatrix(2, 2, bad), opts), InvalidArgument);
}

TEST(KMeans, FarApartRelabelKeepsPartition) {
  auto [x, truth] = blobs(6, 15, 6, 20.0, 2);
  KMeansOptions opts;
  opts.h = 6;
  ClusterMap plain = kmeans_fit(x, opts);
  opts.relabel_far_apart = true;
  ClusterMap relabeled = kmeans_fit(x, opts);
  EXPECT_TRUE(same_partition(plain.assignment(), relabeled.assignment()));
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto c = relabeled.cluster_of(static_cast<TokenId>(i));
    EXPECT_EQ(assign(x.row(i), relabeled), c);
  }
}

TEST(Mismatch, CountsTokenAndClusterDisagreement) {
  ClusterMap m(2, {0, 0, 1, 1}, {{0.0}, {1.0}});
  const TokenSeq a{0, 1, 2, 3, 0};
  const TokenSeq b{1, 1, 3, 0, 0};  // same-cluster, equal, same-cluster, cross, equal
  auto r = mismatch_rates(a, b, m);
  EXPECT_DOUBLE_EQ(r.token_rate, 3.0 / 5.0);
  EXPECT_DOUBLE_EQ(r.cluster_rate, 1.0 / 5.0);
  EXPECT_NEAR(r.reduction_pct, 100.0 * 2.0 / 3.0, 1e-12);
  EXPECT_FALSE(r.truncated);
}

TEST(Mismatch, EdgeCases) {
  ClusterMap m(2, {0, 0, 1, 1}, {{0.0}, {1.0}});
  const TokenSeq a{0, 1, 2};
  auto same = mismatch_rates(a, a, m);
  EXPECT_EQ(same.token_rate, 0.0);
  EXPECT_EQ(same.reduction_pct, 0.0);
  const TokenSeq shorter{0, 3};
  auto r = mismatch_rates(a, shorter, m);
  EXPECT_TRUE(r.truncated);
  EXPECT_EQ(r.positions, 2u);
  EXPECT_DOUBLE_EQ(r.cluster_rate, 0.5);
  EXPECT_THROW(mismatch_rates(a, TokenSeq{}, m), InvalidArgument);
}

}  // namespace
}  // namespace alignedis
