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

// Reweight strategies.
//
// Aligned inverse sampling splits [0, 1) into h bins of width 1/h, one per
// cluster. Cluster i keeps min(Pr(c_i), 1/h) at the start of its own bin;
// clusters heavier than 1/h spill the rest into the unfilled tails of the
// lighter clusters' bins. A number r in bin i therefore selects cluster i
// whenever that cluster has enough mass, and the detector can recover the
// intended cluster from r alone. Because every cluster still owns exactly
// Pr(c_i) of [0, 1), integrating over r reproduces the model distribution.
//
// Baselines: KGW and Unigram green lists, DiPmark (gamma-reweight is the
// alpha = 0.5 case, where both formulas coincide) and a simplified
// inverse-transform sampler (ITS) over a keyed permutation.

#ifndef ALIGNEDIS_REWEIGHT_HPP_
#define ALIGNEDIS_REWEIGHT_HPP_

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "alignedis/clustering.hpp"
#include "alignedis/core.hpp"

namespace alignedis {

enum class Strategy { kAlignedIs, kIts, kKgw, kUnigram, kDipmark, kGammaReweight };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kAlignedIs: return "aligned_is";
    case Strategy::kIts: return "its";
    case Strategy::kKgw: return "kgw";
    case Strategy::kUnigram: return "unigram";
    case Strategy::kDipmark: return "dipmark";
    case Strategy::kGammaReweight: return "gamma_reweight";
  }
  return "unknown";
}

inline Strategy strategy_from_string(const std::string& name) {
  for (Strategy s : {Strategy::kAlignedIs, Strategy::kIts, Strategy::kKgw, Strategy::kUnigram,
                     Strategy::kDipmark, Strategy::kGammaReweight}) {
    if (to_string(s) == name) return s;
  }
  throw InvalidArgument("unknown strategy '" + name + "'");
}

/// Which reweight strategy to run and its parameters. Only the parameters
/// the strategy uses are meaningful; validate() checks their ranges.
struct ReweightConfig {
  Strategy strategy = Strategy::kAlignedIs;
  std::size_t h = 20;     // aligned_is
  double delta = 2.0;     // kgw, unigram
  double gamma = 0.5;     // kgw, unigram
  double alpha = 0.4;     // dipmark

  void validate() const {
    switch (strategy) {
      case Strategy::kAlignedIs:
        if (h < 1) throw InvalidArgument("aligned_is: h must be >= 1");
        break;
      case Strategy::kKgw:
      case Strategy::kUnigram:
        if (!(delta >= 0.0)) throw InvalidArgument("kgw/unigram: delta must be >= 0");
        if (!(gamma > 0.0 && gamma < 1.0)) throw InvalidArgument("kgw/unigram: gamma must be in (0,1)");
        break;
      case Strategy::kDipmark:
        if (!(alpha >= 0.0 && alpha <= 0.5)) throw InvalidArgument("dipmark: alpha must be in [0,0.5]");
        break;
      case Strategy::kIts:
      case Strategy::kGammaReweight:
        break;
    }
  }

  /// Human-readable parameter summary, e.g. "delta=2,gamma=0.5".
  std::string params() const {
    auto fmt = [](double v) {
      std::ostringstream os;
      os << v;
      return os.str();
    };
    switch (strategy) {
      case Strategy::kAlignedIs: return "h=" + std::to_string(h);
      case Strategy::kKgw:
      case Strategy::kUnigram: return "delta=" + fmt(delta) + ",gamma=" + fmt(gamma);
      case Strategy::kDipmark: return "alpha=" + fmt(alpha);
      case Strategy::kGammaReweight: return "alpha=0.5";
      case Strategy::kIts: return "";
    }
    return "";
  }

  /// Distortion-free strategies leave E_theta[P_W] = P_M.
  bool distortion_free() const {
    return strategy != Strategy::kKgw && strategy != Strategy::kUnigram;
  }
};

// ---------------------------------------------------------------------------
// Aligned inverse sampling.

/// Per-cluster probability mass.
inline std::vector<double> cluster_probs(const ProbVector& dist, const ClusterMap& map) {
  if (dist.size() != map.n_tokens()) {
    throw InvalidArgument("cluster_probs: distribution has " + std::to_string(dist.size()) +
                          " entries, cluster map covers " + std::to_string(map.n_tokens()));
  }
  std::vector<double> mass(map.h(), 0.0);
  auto assignment = map.assignment();
  for (std::size_t t = 0; t < dist.size(); ++t) mass[assignment[t]] += dist[t];
  return mass;
}

struct Segment {
  std::uint32_t cluster;
  double start;
  double end;

  double length() const { return end - start; }
  friend bool operator==(const Segment&, const Segment&) = default;
};

/// An exact tiling of [0, 1) by (cluster, interval) pairs. Bin i is
/// [i/h, (i+1)/h); cluster i's own mass sits at its start.
class SegmentTable {
 public:
  SegmentTable(std::size_t h, std::vector<Segment> segments)
      : h_(h), segments_(std::move(segments)) {}

  std::size_t h() const { return h_; }
  std::span<const Segment> segments() const { return segments_; }

  /// The segment containing r, r in [0, 1).
  const Segment& locate(double r) const {
    if (!(r >= 0.0 && r < 1.0)) throw InvalidArgument("SegmentTable: r must lie in [0, 1)");
    auto it = std::upper_bound(segments_.begin(), segments_.end(), r,
                               [](double v, const Segment& s) { return v < s.end; });
    if (it == segments_.end()) --it;
    return *it;
  }

  /// Total length owned by each cluster.
  std::vector<double> cluster_lengths() const {
    std::vector<double> len(h_, 0.0);
    for (const auto& s : segments_) len[s.cluster] += s.length();
    return len;
  }

  /// Probability that r lands in the bin of the cluster it selects, i.e.
  /// the expected per-step detection score: sum_i min(Pr(c_i), 1/h).
  double own_mass() const {
    double total = 0.0;
    for (const auto& s : segments_) {
      if (bin_of(0.5 * (s.start + s.end), h_) == s.cluster) total += s.length();
    }
    return total;
  }

  static std::size_t bin_of(double r, std::size_t h) {
    auto b = static_cast<std::size_t>(r * static_cast<double>(h));
    return std::min(b, h - 1);
  }

 private:
  std::size_t h_;
  std::vector<Segment> segments_;
};

/// Builds the aligned tiling from cluster masses. Masses are rescaled by
/// their sum (which must be 1 within 1e-9) so the tiling is exact.
///
/// Bins are filled in ascending index order: own mass first, then overflow
/// from donor clusters taken in descending-overflow order (ties by lower
/// index), each fill taking min(remaining deficit, remaining overflow).
inline SegmentTable build_segment_table(std::span<const double> probs) {
  const std::size_t h = probs.size();
  if (h < 1) throw InvalidArgument("build_segment_table: h must be >= 1");
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw InvalidArgument("build_segment_table: negative cluster mass");
    total += p;
  }
  if (std::abs(total - 1.0) > kProbSumTolerance) {
    throw InvalidArgument("build_segment_table: cluster masses sum to " + std::to_string(total));
  }

  const double width = 1.0 / static_cast<double>(h);
  auto bin_start = [h](std::size_t i) {
    return i == h ? 1.0 : static_cast<double>(i) / static_cast<double>(h);
  };

  std::vector<double> mass(h);
  std::vector<double> overflow(h, 0.0);
  std::vector<std::uint32_t> donors;
  for (std::size_t i = 0; i < h; ++i) {
    mass[i] = probs[i] / total;
    if (mass[i] > width) {
      overflow[i] = mass[i] - width;
      donors.push_back(static_cast<std::uint32_t>(i));
    }
  }
  std::stable_sort(donors.begin(), donors.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return overflow[a] > overflow[b]; });

  // Gaps this small are rounding residue, not mass.
  constexpr double kSnap = 1e-14;
  std::vector<Segment> segments;
  segments.reserve(2 * h);
  std::size_t donor = 0;
  for (std::size_t i = 0; i < h; ++i) {
    const double lo = bin_start(i);
    const double hi = bin_start(i + 1);
    double cursor = lo;
    const double own = std::min(mass[i], width);
    if (own > 0.0) {
      const double end = (hi - (lo + own) <= kSnap) ? hi : lo + own;
      // Masses below the spacing of doubles near lo vanish here.
      if (end > lo) {
        segments.push_back({static_cast<std::uint32_t>(i), lo, end});
        cursor = end;
      }
    }
    while (hi - cursor > kSnap && donor < donors.size()) {
      const std::uint32_t c = donors[donor];
      const double take = std::min(hi - cursor, overflow[c]);
      if (take > 0.0) {
        const double end = (hi - (cursor + take) <= kSnap) ? hi : cursor + take;
        if (end > cursor) segments.push_back({c, cursor, end});
        cursor = end;
        overflow[c] -= take;
      }
      if (overflow[c] <= kSnap) ++donor;
    }
    if (cursor < hi) {
      // Residue with donors exhausted: stretch the bin's last segment.
      if (segments.empty()) throw InvariantViolation("build_segment_table: first bin is empty");
      segments.back().end = hi;
    }
  }
  return SegmentTable(h, std::move(segments));
}

inline SegmentTable build_segment_table(const ProbVector& dist, const ClusterMap& map) {
  return build_segment_table(cluster_probs(dist, map));
}

/// The token law aligned sampling uses once r is fixed: dist restricted
/// to the selected cluster and renormalized.
inline std::vector<double> aligned_token_law(const SegmentTable& table, const ProbVector& dist,
                                             const ClusterMap& map, double r) {
  const Segment& seg = table.locate(r);
  std::vector<double> law(dist.size(), 0.0);
  double mass = 0.0;
  for (TokenId t : map.members(seg.cluster)) mass += dist[t];
  if (!(mass > 0.0)) throw InvariantViolation("aligned_token_law: selected a zero-mass cluster");
  for (TokenId t : map.members(seg.cluster)) law[t] = dist[t] / mass;
  return law;
}

/// The token distribution of aligned sampling with r integrated over
/// [0, 1): each segment contributes its length times the token law it
/// selects.
inline std::vector<double> aligned_marginal(const SegmentTable& table, const ProbVector& dist,
                                            const ClusterMap& map) {
  std::vector<double> marginal(dist.size(), 0.0);
  for (const Segment& seg : table.segments()) {
    auto law = aligned_token_law(table, dist, map, 0.5 * (seg.start + seg.end));
    for (std::size_t t = 0; t < law.size(); ++t) marginal[t] += seg.length() * law[t];
  }
  return marginal;
}

/// Draws a token: locate r's segment, then sample within that cluster
/// proportionally to dist.
template <class Rng>
TokenId aligned_sample(const SegmentTable& table, const ProbVector& dist, const ClusterMap& map,
                       double r, Rng& tie_rng) {
  if (!(r >= 0.0 && r < 1.0)) throw InvalidArgument("aligned_sample: r must lie in [0, 1)");
  const Segment& seg = table.locate(r);
  auto members = map.members(seg.cluster);
  double mass = 0.0;
  for (TokenId t : members) mass += dist[t];
  if (!(mass > 0.0)) throw InvariantViolation("aligned_sample: selected a zero-mass cluster");
  const double u = std::uniform_real_distribution<double>(0.0, mass)(tie_rng);
  double acc = 0.0;
  TokenId last = members.front();
  for (TokenId t : members) {
    if (dist[t] <= 0.0) continue;
    last = t;
    acc += dist[t];
    if (u < acc) return t;
  }
  return last;
}

/// Detection score: 1 iff r falls in the bin of the token's cluster.
inline int aligned_score(double r, TokenId token, const ClusterMap& map) {
  return SegmentTable::bin_of(r, map.h()) == map.cluster_of(token) ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Green-list baselines.

namespace detail {

inline ProbVector boost_green(const ProbVector& dist, std::span<const TokenId> perm, double delta,
                              double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw InvalidArgument("green list: gamma must be in (0,1)");
  const std::size_t n = dist.size();
  const auto green = static_cast<std::size_t>(std::ceil(gamma * static_cast<double>(n)));
  const double boost = std::exp(delta);
  std::vector<double> out(dist.values().begin(), dist.values().end());
  for (std::size_t k = 0; k < std::min(green, n); ++k) out[perm[k]] *= boost;
  return ProbVector(std::move(out), Normalize::kYes);
}

}  // namespace detail

/// Number of green tokens for a vocabulary of n: ceil(gamma * n).
inline std::size_t green_list_size(std::size_t n, double gamma) {
  return std::min(n, static_cast<std::size_t>(std::ceil(gamma * static_cast<double>(n))));
}

/// KGW: add delta to the log-probability of the first ceil(gamma*N)
/// tokens of the code's permutation, then renormalize.
inline ProbVector kgw_reweight(const ProbVector& dist, const WatermarkCode& code, double delta,
                               double gamma) {
  return detail::boost_green(dist, prf_permutation(code, dist.size()), delta, gamma);
}

/// KGW with an explicit green-list permutation.
inline ProbVector kgw_reweight(const ProbVector& dist, std::span<const TokenId> perm, double delta,
                               double gamma) {
  return detail::boost_green(dist, perm, delta, gamma);
}

/// Unigram: KGW with one global green list seeded by the key alone.
inline ProbVector unigram_reweight(const ProbVector& dist, const WatermarkKey& key, double delta,
                                   double gamma) {
  return detail::boost_green(dist, key_permutation(key, dist.size()), delta, gamma);
}

// ---------------------------------------------------------------------------
// DiPmark / gamma-reweight.

/// Reweights along a given permutation. With F the permuted CDF the t-th
/// permuted token gets
///   [max(F_t - a, 0) - max(F_{t-1} - a, 0)] + [max(F_t - (1-a), 0) - max(F_{t-1} - (1-a), 0)].
inline ProbVector dipmark_reweight(const ProbVector& dist, std::span<const TokenId> perm,
                                   double alpha) {
  if (!(alpha >= 0.0 && alpha <= 0.5)) throw InvalidArgument("dipmark: alpha must be in [0,0.5]");
  if (perm.size() != dist.size()) throw InvalidArgument("dipmark: permutation size mismatch");
  std::vector<double> out(dist.size(), 0.0);
  double prev = 0.0;
  double cdf = 0.0;
  auto clamp = [](double v) { return v > 0.0 ? v : 0.0; };
  for (TokenId tok : perm) {
    cdf += dist[tok];
    const double f = std::min(cdf, 1.0);
    out[tok] = (clamp(f - alpha) - clamp(prev - alpha)) +
               (clamp(f - (1.0 - alpha)) - clamp(prev - (1.0 - alpha)));
    prev = f;
  }
  return ProbVector(std::move(out), Normalize::kYes);
}

inline ProbVector dipmark_reweight(const ProbVector& dist, const WatermarkCode& code, double alpha) {
  return dipmark_reweight(dist, prf_permutation(code, dist.size()), alpha);
}

/// gamma-reweight is DiPmark at alpha = 0.5.
inline ProbVector gamma_reweight(const ProbVector& dist, const WatermarkCode& code) {
  return dipmark_reweight(dist, code, 0.5);
}

// ---------------------------------------------------------------------------
// Simplified ITS.

/// Inverse-transform sampling at quantile r over the permuted vocabulary.
inline TokenId its_sample(const ProbVector& dist, std::span<const TokenId> perm, double r) {
  if (!(r >= 0.0 && r < 1.0)) throw InvalidArgument("its_sample: r must lie in [0, 1)");
  double acc = 0.0;
  TokenId last = perm.front();
  for (TokenId tok : perm) {
    if (dist[tok] <= 0.0) continue;
    last = tok;
    acc += dist[tok];
    if (r < acc) return tok;
  }
  return last;
}

inline TokenId its_sample(const ProbVector& dist, const WatermarkCode& code) {
  return its_sample(dist, prf_permutation(code, dist.size()), prf_r(code));
}

/// Position score 1 - |r - u|, u = (rank + 0.5) / N.
inline double its_score(double r, std::uint32_t rank, std::size_t n) {
  const double u = (static_cast<double>(rank) + 0.5) / static_cast<double>(n);
  return 1.0 - std::abs(r - u);
}

inline double its_score(double r, TokenId token, const WatermarkCode& code, std::size_t n) {
  auto perm = prf_permutation(code, n);
  auto it = std::find(perm.begin(), perm.end(), token);
  if (it == perm.end()) throw InvalidArgument("its_score: token outside vocabulary");
  return its_score(r, static_cast<std::uint32_t>(it - perm.begin()), n);
}

/// Mean of its_score under H0 (r uniform, rank uniform):
/// 1 - mean_k[(u_k^2 + (1-u_k)^2) / 2].
inline double its_null_mean(std::size_t n) {
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double u = (static_cast<double>(k) + 0.5) / static_cast<double>(n);
    s += 0.5 * (u * u + (1.0 - u) * (1.0 - u));
  }
  return 1.0 - s / static_cast<double>(n);
}

}  // namespace alignedis

#endif  // ALIGNEDIS_REWEIGHT_HPP_
