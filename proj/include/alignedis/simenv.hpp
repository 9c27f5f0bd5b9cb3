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

// Desk-scale stand-ins for an audio generation stack:
//
//  * SyntheticModel: a vocabulary whose embeddings form a Gaussian mixture,
//    and an autoregressive next-token law drawn from Dirichlet(beta) per
//    context, seeded by hashing the context.
//  * RetokenizationChannel: the decode-then-encode perturbation. Each
//    position independently survives, flips to a nearby token of the same
//    cluster, or flips to a token of another cluster.
//  * Token-level attacks: substitution, cropping, insertion/deletion.

#ifndef ALIGNEDIS_SIMENV_HPP_
#define ALIGNEDIS_SIMENV_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "alignedis/clustering.hpp"
#include "alignedis/core.hpp"

namespace alignedis {

struct SyntheticModelConfig {
  std::size_t vocab_size = 200;
  std::size_t dim = 32;
  std::size_t true_clusters = 20;
  /// Centroid spacing in units of the component spread (RMS distance of
  /// a member from its component mean).
  double separation = 12.0;
  double dirichlet_beta = 0.2;
  /// How many trailing tokens the next-token law depends on.
  std::size_t context_order = 1;
  std::uint64_t seed = 7;

  void validate() const {
    if (true_clusters < 1) throw InvalidArgument("synthetic model: true_clusters must be >= 1");
    if (vocab_size < true_clusters) {
      throw InvalidArgument("synthetic model: vocab_size must be >= true_clusters");
    }
    if (dim < true_clusters) {
      throw InvalidArgument("synthetic model: dim must be >= true_clusters for equidistant centroids");
    }
    if (!(separation > 0.0)) throw InvalidArgument("synthetic model: separation must be > 0");
    if (!(dirichlet_beta > 0.0)) throw InvalidArgument("synthetic model: dirichlet_beta must be > 0");
    if (context_order < 1) throw InvalidArgument("synthetic model: context_order must be >= 1");
  }
};

namespace detail {

// log of a Gamma(shape, 1) draw. Marsaglia-Tsang for shape >= 1; for
// shape < 1 uses G(shape) = G(shape + 1) * U^(1/shape) in log space.
template <class Rng>
double log_gamma_draw(double shape, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (shape < 1.0) {
    double u = unit(rng);
    while (u <= 0.0) u = unit(rng);
    return log_gamma_draw(shape + 1.0, rng) + std::log(u) / shape;
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = normal(rng);
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    const double u = unit(rng);
    if (u < 1.0 - 0.0331 * x * x * x * x) return std::log(d * v);
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return std::log(d * v);
  }
}

}  // namespace detail

/// A Dirichlet(beta) draw over n categories, computed in log space so that
/// tiny concentrations do not underflow to an all-zero vector.
template <class Rng>
ProbVector dirichlet_draw(std::size_t n, double beta, Rng& rng) {
  std::vector<double> logs(n);
  for (double& l : logs) l = detail::log_gamma_draw(beta, rng);
  const double peak = *std::max_element(logs.begin(), logs.end());
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = std::exp(logs[i] - peak);
  return ProbVector(std::move(p), Normalize::kYes);
}

class SyntheticModel {
 public:
  explicit SyntheticModel(const SyntheticModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    build_embeddings();
    if (cfg_.context_order == 1) {
      // Rows 0..N-1 are keyed by the last token; row N is the empty context.
      rows_.reserve(cfg_.vocab_size + 1);
      for (std::size_t t = 0; t < cfg_.vocab_size; ++t) {
        const TokenId tok = static_cast<TokenId>(t);
        rows_.push_back(draw_for(std::span<const TokenId>(&tok, 1)));
      }
      rows_.push_back(draw_for({}));
    }
  }

  std::size_t vocab_size() const { return cfg_.vocab_size; }
  const SyntheticModelConfig& config() const { return cfg_; }
  const EmbeddingMatrix& embeddings() const { return embeddings_; }
  /// Generating mixture component of every token.
  std::span<const std::uint32_t> true_labels() const { return labels_; }

  /// The generating partition as a cluster map (centroids = component means).
  ClusterMap true_cluster_map() const {
    return ClusterMap(cfg_.true_clusters, labels_, component_means_, cfg_.seed);
  }

  const ProbVector& next_dist_ref(std::span<const TokenId> context) const {
    return context.empty() ? rows_.back() : rows_[context.back()];
  }

  ProbVector next_dist(std::span<const TokenId> context) const {
    if (cfg_.context_order == 1) return next_dist_ref(context);
    const std::size_t k = std::min(cfg_.context_order, context.size());
    return draw_for(context.subspan(context.size() - k, k));
  }

 private:
  ProbVector draw_for(std::span<const TokenId> window) const {
    detail::Sha256 h;
    h.update_u64(cfg_.seed);
    for (TokenId t : window) h.update_u32(t);
    std::mt19937_64 rng(detail::be64(h.finish()));
    return dirichlet_draw(cfg_.vocab_size, cfg_.dirichlet_beta, rng);
  }

  void build_embeddings() {
    const std::size_t n = cfg_.vocab_size;
    const std::size_t d = cfg_.dim;
    const std::size_t k = cfg_.true_clusters;
    // Scaled basis vectors are pairwise separation apart.
    const double radius = cfg_.separation / std::sqrt(2.0);
    const double coord_sd = 1.0 / std::sqrt(static_cast<double>(d));
    std::mt19937_64 rng(mix_seed(cfg_.seed));
    std::normal_distribution<double> noise(0.0, coord_sd);

    component_means_.assign(k, std::vector<double>(d, 0.0));
    for (std::size_t c = 0; c < k; ++c) component_means_[c][c] = radius;
    labels_.resize(n);
    std::vector<double> data(n * d);
    for (std::size_t t = 0; t < n; ++t) {
      const auto c = static_cast<std::uint32_t>(t * k / n);
      labels_[t] = c;
      for (std::size_t j = 0; j < d; ++j) data[t * d + j] = component_means_[c][j] + noise(rng);
    }
    embeddings_ = EmbeddingMatrix(n, d, std::move(data));
  }

  SyntheticModelConfig cfg_;
  EmbeddingMatrix embeddings_;
  std::vector<std::uint32_t> labels_;
  std::vector<std::vector<double>> component_means_;
  std::vector<ProbVector> rows_;
};

inline SyntheticModel build_synthetic_model(const SyntheticModelConfig& cfg) {
  return SyntheticModel(cfg);
}

// ---------------------------------------------------------------------------
// Retokenization channel.

struct ChannelConfig {
  /// Per-position probability that the token changes.
  double p_tok = 0.0;
  /// Probability that a change stays inside the token's cluster.
  double q_same = 0.0;
  /// Same-cluster replacements come from this many nearest neighbours.
  std::size_t neighbors = 5;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(p_tok >= 0.0 && p_tok <= 1.0)) throw InvalidArgument("channel: p_tok must be in [0,1]");
    if (!(q_same >= 0.0 && q_same <= 1.0)) throw InvalidArgument("channel: q_same must be in [0,1]");
    if (neighbors < 1) throw InvalidArgument("channel: neighbors must be >= 1");
  }

  double expected_cluster_rate() const { return p_tok * (1.0 - q_same); }
};

/// Token/cluster mismatch rates measured on a real audio LM, one per
/// evaluation dataset; q_same = 1 - cluster_rate / token_rate.
struct ChannelPreset {
  const char* name;
  double token_rate;
  double cluster_rate;

  ChannelConfig config(std::uint64_t seed = 0) const {
    return ChannelConfig{token_rate, 1.0 - cluster_rate / token_rate, 5, seed};
  }
};

inline constexpr ChannelPreset kChannelPresets[] = {
    {"mmw_book_report", 0.3749, 0.2117}, {"mmw_story", 0.3652, 0.2174},
    {"mmw_fake_news", 0.4295, 0.2300},   {"dolly_cw", 0.3634, 0.2134},
    {"longform_qa", 0.3757, 0.2109},     {"finance_qa", 0.3587, 0.2133},
};

inline std::optional<ChannelPreset> find_channel_preset(std::string_view name) {
  for (const auto& p : kChannelPresets) {
    if (name == p.name) return p;
  }
  return std::nullopt;
}

class RetokenizationChannel {
 public:
  /// `map` defines which replacements count as same-cluster.
  RetokenizationChannel(const ClusterMap& map, const EmbeddingMatrix& emb, ChannelConfig cfg)
      : cfg_(cfg), n_(map.n_tokens()) {
    cfg_.validate();
    if (emb.rows() != map.n_tokens()) {
      throw InvalidArgument("channel: embeddings and cluster map cover different vocabularies");
    }
    near_.resize(n_);
    for (std::size_t t = 0; t < n_; ++t) {
      const auto c = map.cluster_of(static_cast<TokenId>(t));
      std::vector<std::pair<double, TokenId>> cand;
      for (TokenId o : map.members(c)) {
        if (o != t) cand.emplace_back(squared_distance(emb.row(t), emb.row(o)), o);
      }
      const std::size_t k = std::min(cfg_.neighbors, cand.size());
      std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
      for (std::size_t i = 0; i < k; ++i) near_[t].push_back(cand[i].second);
    }
    others_.resize(map.h());
    for (std::size_t c = 0; c < map.h(); ++c) {
      for (std::size_t t = 0; t < n_; ++t) {
        if (map.cluster_of(static_cast<TokenId>(t)) != c) others_[c].push_back(static_cast<TokenId>(t));
      }
    }
    cluster_of_.assign(map.assignment().begin(), map.assignment().end());
  }

  const ChannelConfig& config() const { return cfg_; }

  /// Same-cluster moves on singleton clusters, and cross-cluster moves
  /// when there is only one cluster, keep the token.
  TokenSeq apply(std::span<const TokenId> tokens, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double p_same = cfg_.p_tok * cfg_.q_same;
    TokenSeq out(tokens.begin(), tokens.end());
    for (TokenId& tok : out) {
      if (tok >= n_) throw InvalidArgument("channel: token outside vocabulary");
      const double u = unit(rng);
      if (u < p_same) {
        const auto& pool = near_[tok];
        if (!pool.empty()) tok = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      } else if (u < cfg_.p_tok) {
        const auto& pool = others_[cluster_of_[tok]];
        if (!pool.empty()) tok = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      }
    }
    return out;
  }

  TokenSeq apply(std::span<const TokenId> tokens) const { return apply(tokens, cfg_.seed); }

 private:
  ChannelConfig cfg_;
  std::size_t n_;
  std::vector<std::vector<TokenId>> near_;
  std::vector<std::vector<TokenId>> others_;
  std::vector<std::uint32_t> cluster_of_;
};

inline TokenSeq apply_channel(std::span<const TokenId> tokens, const ClusterMap& map,
                              const EmbeddingMatrix& emb, const ChannelConfig& ch) {
  return RetokenizationChannel(map, emb, ch).apply(tokens);
}

// ---------------------------------------------------------------------------
// Attacks.

/// Each position becomes a uniform random token with probability `rate`.
inline TokenSeq attack_substitute(std::span<const TokenId> tokens, double rate,
                                  std::size_t vocab_size, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw InvalidArgument("attack_substitute: rate must be in [0,1]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<TokenId> any(0, static_cast<TokenId>(vocab_size - 1));
  TokenSeq out(tokens.begin(), tokens.end());
  for (TokenId& t : out) {
    if (unit(rng) < rate) t = any(rng);
  }
  return out;
}

/// Drops whole tokens from both ends; at least two must remain.
inline TokenSeq attack_crop(std::span<const TokenId> tokens, std::size_t drop_front,
                            std::size_t drop_back) {
  if (drop_front + drop_back + 2 > tokens.size()) {
    throw InvalidArgument("attack_crop: cropping must leave at least 2 tokens");
  }
  return TokenSeq(tokens.begin() + static_cast<std::ptrdiff_t>(drop_front),
                  tokens.end() - static_cast<std::ptrdiff_t>(drop_back));
}

/// Keeps a uniformly placed window of `keep` tokens.
inline TokenSeq attack_random_crop(std::span<const TokenId> tokens, std::size_t keep,
                                   std::uint64_t seed) {
  if (keep > tokens.size()) throw InvalidArgument("attack_random_crop: window longer than input");
  std::mt19937_64 rng(seed);
  const std::size_t slack = tokens.size() - keep;
  const std::size_t front = std::uniform_int_distribution<std::size_t>(0, slack)(rng);
  return attack_crop(tokens, front, slack - front);
}

/// Per position: delete with p_del; otherwise keep and, with p_ins,
/// insert a uniform random token after it.
inline TokenSeq attack_insert_delete(std::span<const TokenId> tokens, double p_ins, double p_del,
                                     std::size_t vocab_size, std::uint64_t seed) {
  if (!(p_ins >= 0.0 && p_ins <= 1.0 && p_del >= 0.0 && p_del <= 1.0)) {
    throw InvalidArgument("attack_insert_delete: rates must be in [0,1]");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<TokenId> any(0, static_cast<TokenId>(vocab_size - 1));
  TokenSeq out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (unit(rng) < p_del) continue;
    out.push_back(t);
    if (unit(rng) < p_ins) out.push_back(any(rng));
  }
  return out;
}

}  // namespace alignedis

#endif  // ALIGNEDIS_SIMENV_HPP_
