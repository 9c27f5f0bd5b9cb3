// Copyright 2026 The alignedis Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Token clustering: k-means over token embeddings, nearest-centroid
// assignment and token- vs cluster-level mismatch measurement.

#ifndef ALIGNEDIS_CLUSTERING_HPP_
#define ALIGNEDIS_CLUSTERING_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "alignedis/core.hpp"

namespace alignedis {

/// N token embeddings of dimension d, stored row-major.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t rows, std::size_t dim, std::vector<double> data)
      : rows_(rows), dim_(dim), data_(std::move(data)) {
    if (dim_ == 0) throw InvalidArgument("EmbeddingMatrix: dimension must be >= 1");
    if (data_.size() != rows_ * dim_) {
      throw InvalidArgument("EmbeddingMatrix: data size does not match rows * dim");
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t dim() const { return dim_; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
  std::span<const double> data() const { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

 private:
  std::size_t rows_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> data_;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    double d = a[k] - b[k];
    s += d * d;
  }
  return s;
}

/// Token -> cluster assignment with centroids. Clusters are 0-indexed.
class ClusterMap {
 public:
  ClusterMap() = default;

  /// Validates: every assignment < h, no empty cluster, centroids h x dim.
  ClusterMap(std::size_t h, std::vector<std::uint32_t> assignment,
             std::vector<std::vector<double>> centroids, std::uint64_t seed = 0)
      : h_(h), assignment_(std::move(assignment)), centroids_(std::move(centroids)), seed_(seed) {
    if (h_ < 1) throw InvalidArgument("ClusterMap: h must be >= 1");
    if (assignment_.size() < h_) throw InvalidArgument("ClusterMap: fewer tokens than clusters");
    if (centroids_.size() != h_) throw InvalidArgument("ClusterMap: expected h centroids");
    for (const auto& c : centroids_) {
      if (c.size() != centroids_.front().size() || c.empty()) {
        throw InvalidArgument("ClusterMap: centroids have inconsistent dimension");
      }
    }
    members_.assign(h_, {});
    for (std::size_t t = 0; t < assignment_.size(); ++t) {
      if (assignment_[t] >= h_) {
        throw InvalidArgument("ClusterMap: token " + std::to_string(t) + " assigned to cluster " +
                              std::to_string(assignment_[t]) + " >= h");
      }
      members_[assignment_[t]].push_back(static_cast<TokenId>(t));
    }
    for (std::size_t c = 0; c < h_; ++c) {
      if (members_[c].empty()) {
        throw InvalidArgument("ClusterMap: cluster " + std::to_string(c) + " is empty");
      }
    }
  }

  std::size_t h() const { return h_; }
  std::size_t n_tokens() const { return assignment_.size(); }
  std::size_t dim() const { return centroids_.empty() ? 0 : centroids_.front().size(); }
  std::uint64_t seed() const { return seed_; }

  std::uint32_t cluster_of(TokenId t) const { return assignment_.at(t); }
  std::span<const std::uint32_t> assignment() const { return assignment_; }
  std::span<const TokenId> members(std::size_t c) const { return members_[c]; }
  const std::vector<std::vector<double>>& centroids() const { return centroids_; }

  friend bool operator==(const ClusterMap& a, const ClusterMap& b) {
    return a.h_ == b.h_ && a.assignment_ == b.assignment_ && a.centroids_ == b.centroids_ &&
           a.seed_ == b.seed_;
  }

 private:
  std::size_t h_ = 0;
  std::vector<std::uint32_t> assignment_;
  std::vector<std::vector<double>> centroids_;
  std::vector<std::vector<TokenId>> members_;
  std::uint64_t seed_ = 0;
};

/// Nearest centroid by Euclidean distance; ties go to the lowest index.
inline std::uint32_t assign(std::span<const double> embedding_row,
                            const std::vector<std::vector<double>>& centroids) {
  if (centroids.empty()) throw InvalidArgument("assign: no centroids");
  if (embedding_row.size() != centroids.front().size()) {
    throw InvalidArgument("assign: dimension mismatch (row " +
                          std::to_string(embedding_row.size()) + ", centroids " +
                          std::to_string(centroids.front().size()) + ")");
  }
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    double d = squared_distance(embedding_row, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::uint32_t>(c);
    }
  }
  return best;
}

inline std::uint32_t assign(std::span<const double> embedding_row, const ClusterMap& map) {
  return assign(embedding_row, map.centroids());
}

/// Within-cluster sum of squares of `embeddings` under the given labels.
inline double inertia(const EmbeddingMatrix& embeddings, std::span<const std::uint32_t> labels,
                      const std::vector<std::vector<double>>& centroids) {
  double s = 0.0;
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    s += squared_distance(embeddings.row(i), centroids[labels[i]]);
  }
  return s;
}

struct KMeansOptions {
  std::size_t h = 20;
  std::uint64_t seed = 0;
  std::size_t max_iters = 300;
  double tol = 1e-6;
  /// Reorder cluster labels so consecutive indices have far-apart
  /// centroids. Detection only needs a consistent labeling.
  bool relabel_far_apart = false;
};

/// Per-iteration diagnostics of a fit.
struct KMeansTrace {
  /// Inertia after each assignment step.
  std::vector<double> inertia;
  std::size_t iterations = 0;
  bool converged = false;
};

namespace detail {

// Greedy k-means++: each new centre is the best of several D^2-sampled
// candidates by resulting potential.
inline std::vector<std::vector<double>> kmeanspp_init(const EmbeddingMatrix& x, std::size_t h,
                                                      std::mt19937_64& rng) {
  const std::size_t n = x.rows();
  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(h)));
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<std::vector<double>> centres;
  std::size_t first = pick(rng);
  centres.emplace_back(x.row(first).begin(), x.row(first).end());

  std::vector<double> closest(n);
  for (std::size_t i = 0; i < n; ++i) closest[i] = squared_distance(x.row(i), centres[0]);

  std::vector<double> candidate_d(n);
  std::vector<double> best_d(n);
  while (centres.size() < h) {
    double potential = 0.0;
    for (double d : closest) potential += d;
    std::size_t best_idx = 0;
    double best_potential = std::numeric_limits<double>::infinity();
    for (std::size_t trial = 0; trial < trials; ++trial) {
      std::size_t idx = 0;
      if (potential > 0.0) {
        double target = unit(rng) * potential;
        double acc = 0.0;
        idx = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
          acc += closest[i];
          if (target < acc) {
            idx = i;
            break;
          }
        }
      } else {
        idx = pick(rng);
      }
      double p = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        candidate_d[i] = std::min(closest[i], squared_distance(x.row(i), x.row(idx)));
        p += candidate_d[i];
      }
      if (p < best_potential) {
        best_potential = p;
        best_idx = idx;
        best_d.swap(candidate_d);
      }
    }
    centres.emplace_back(x.row(best_idx).begin(), x.row(best_idx).end());
    closest.swap(best_d);
    best_d.resize(n);
  }
  return centres;
}

inline double assign_all(const EmbeddingMatrix& x, const std::vector<std::vector<double>>& centres,
                         std::vector<std::uint32_t>& labels) {
  double total = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    labels[i] = assign(x.row(i), centres);
    total += squared_distance(x.row(i), centres[labels[i]]);
  }
  return total;
}

// Every empty cluster takes the point farthest from its current centroid
// (among points whose cluster can spare one). Returns true if anything moved.
inline bool repair_empty(const EmbeddingMatrix& x, std::vector<std::vector<double>>& centres,
                         std::vector<std::uint32_t>& labels) {
  const std::size_t h = centres.size();
  std::vector<std::size_t> counts(h, 0);
  for (auto l : labels) ++counts[l];
  bool moved = false;
  for (std::size_t c = 0; c < h; ++c) {
    if (counts[c] != 0) continue;
    std::size_t far = 0;
    double far_d = -1.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      if (counts[labels[i]] < 2) continue;
      double d = squared_distance(x.row(i), centres[labels[i]]);
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    --counts[labels[far]];
    labels[far] = static_cast<std::uint32_t>(c);
    ++counts[c];
    centres[c].assign(x.row(far).begin(), x.row(far).end());
    moved = true;
  }
  return moved;
}

inline std::vector<std::uint32_t> far_apart_order(const std::vector<std::vector<double>>& centres) {
  const std::size_t h = centres.size();
  std::vector<std::uint32_t> order{0};
  std::vector<bool> used(h, false);
  used[0] = true;
  while (order.size() < h) {
    const auto& last = centres[order.back()];
    std::uint32_t best = 0;
    double best_d = -1.0;
    for (std::size_t c = 0; c < h; ++c) {
      if (used[c]) continue;
      double d = squared_distance(last, centres[c]);
      if (d > best_d) {
        best_d = d;
        best = static_cast<std::uint32_t>(c);
      }
    }
    used[best] = true;
    order.push_back(best);
  }
  return order;
}

}  // namespace detail

/// Lloyd's algorithm with greedy k-means++ seeding. Stops when the largest
/// centroid movement drops below `tol` or after `max_iters` iterations.
/// At return every token is assigned to its nearest stored centroid.
inline ClusterMap kmeans_fit(const EmbeddingMatrix& embeddings, const KMeansOptions& opts,
                             KMeansTrace* trace = nullptr) {
  const std::size_t n = embeddings.rows();
  const std::size_t h = opts.h;
  const std::size_t d = embeddings.dim();
  if (h < 1) throw InvalidArgument("kmeans_fit: h must be >= 1");
  if (n < h) {
    throw InvalidArgument("kmeans_fit: " + std::to_string(n) + " tokens but h = " +
                          std::to_string(h));
  }
  if (opts.max_iters < 1) throw InvalidArgument("kmeans_fit: max_iters must be >= 1");
  if (!(opts.tol > 0.0)) throw InvalidArgument("kmeans_fit: tol must be > 0");
  if (!embeddings.all_finite()) throw InvalidArgument("kmeans_fit: non-finite embedding");

  std::mt19937_64 rng(opts.seed);
  std::vector<std::vector<double>> centres = detail::kmeanspp_init(embeddings, h, rng);
  std::vector<std::uint32_t> labels(n, 0);
  KMeansTrace local;

  for (std::size_t iter = 0; iter < opts.max_iters; ++iter) {
    detail::assign_all(embeddings, centres, labels);
    detail::repair_empty(embeddings, centres, labels);
    local.inertia.push_back(inertia(embeddings, labels, centres));
    local.iterations = iter + 1;

    std::vector<std::vector<double>> next(h, std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(h, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = embeddings.row(i);
      auto& acc = next[labels[i]];
      for (std::size_t k = 0; k < d; ++k) acc[k] += row[k];
      ++counts[labels[i]];
    }
    double max_shift = 0.0;
    for (std::size_t c = 0; c < h; ++c) {
      for (double& v : next[c]) v /= static_cast<double>(counts[c]);
      max_shift = std::max(max_shift, std::sqrt(squared_distance(next[c], centres[c])));
    }
    centres = std::move(next);
    if (max_shift < opts.tol) {
      local.converged = true;
      break;
    }
  }

  // Final labels against the stored centroids.
  detail::assign_all(embeddings, centres, labels);
  for (std::size_t round = 0; round < h && detail::repair_empty(embeddings, centres, labels); ++round) {
    detail::assign_all(embeddings, centres, labels);
  }
  // With fewer distinct points than clusters, tied points keep flowing back
  // to the lowest index; the last repair's labels then stand as they are.
  detail::repair_empty(embeddings, centres, labels);

  if (opts.relabel_far_apart && h > 1) {
    auto order = detail::far_apart_order(centres);
    std::vector<std::uint32_t> new_label(h);
    std::vector<std::vector<double>> reordered(h);
    for (std::size_t k = 0; k < h; ++k) {
      new_label[order[k]] = static_cast<std::uint32_t>(k);
      reordered[k] = centres[order[k]];
    }
    for (auto& l : labels) l = new_label[l];
    centres = std::move(reordered);
  }

  if (trace) *trace = std::move(local);
  return ClusterMap(h, std::move(labels), std::move(centres), opts.seed);
}

/// Token-level vs cluster-level disagreement between a sequence and its
/// retokenization.
struct MismatchReport {
  double token_rate = 0.0;
  double cluster_rate = 0.0;
  /// 100 * (token_rate - cluster_rate) / token_rate; 0 when token_rate is 0.
  double reduction_pct = 0.0;
  std::size_t positions = 0;
  /// Set when the inputs differed in length and were compared on the
  /// common prefix.
  bool truncated = false;
};

inline MismatchReport mismatch_rates(std::span<const TokenId> original,
                                     std::span<const TokenId> retokenized, const ClusterMap& map) {
  const std::size_t n = std::min(original.size(), retokenized.size());
  if (n == 0) throw InvalidArgument("mismatch_rates: empty sequence");
  std::size_t token_diff = 0;
  std::size_t cluster_diff = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (original[i] != retokenized[i]) {
      ++token_diff;
      if (map.cluster_of(original[i]) != map.cluster_of(retokenized[i])) ++cluster_diff;
    }
  }
  MismatchReport r;
  r.positions = n;
  r.truncated = original.size() != retokenized.size();
  r.token_rate = static_cast<double>(token_diff) / static_cast<double>(n);
  r.cluster_rate = static_cast<double>(cluster_diff) / static_cast<double>(n);
  if (token_diff > 0) r.reduction_pct = 100.0 * (r.token_rate - r.cluster_rate) / r.token_rate;
  return r;
}

}  // namespace alignedis

#endif  // ALIGNEDIS_CLUSTERING_HPP_
