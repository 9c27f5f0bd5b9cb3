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

// Model-agnostic detectors. Each consumes only tokens, the key and (for
// aligned inverse sampling) the cluster map.
//
// Under H0 the aligned per-step scores are Bernoulli(1/h), so S over t
// scored steps is Binomial(t, 1/h). Hoeffding gives
//   Pr(S >= k) <= exp(-2t (k/t - 1/h)^2),
// which yields a threshold with a guaranteed false-positive rate.

#ifndef ALIGNEDIS_DETECT_HPP_
#define ALIGNEDIS_DETECT_HPP_

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <nlohmann/json.hpp>

#include "alignedis/clustering.hpp"
#include "alignedis/core.hpp"
#include "alignedis/reweight.hpp"

namespace alignedis {

// ---------------------------------------------------------------------------
// Tail bounds and p-values.

/// exp(-2t (S/t - q)^2) when S/t > q, else 1.
inline double hoeffding_pvalue(double score, std::size_t t, double null_rate) {
  if (t < 1) throw InvalidArgument("hoeffding_pvalue: t must be >= 1");
  const double td = static_cast<double>(t);
  const double gap = score / td - null_rate;
  if (!(gap > 0.0)) return 1.0;
  return std::exp(-2.0 * td * gap * gap);
}

/// z = t q + sqrt(t ln(1/fpr) / 2), the score where the Hoeffding bound
/// equals fpr.
inline double hoeffding_threshold(std::size_t t, double null_rate, double fpr) {
  if (!(fpr > 0.0 && fpr <= 1.0)) throw InvalidArgument("hoeffding_threshold: fpr must be in (0,1]");
  const double td = static_cast<double>(t);
  return td * null_rate + std::sqrt(td * std::log(1.0 / fpr) / 2.0);
}

/// Upper tail Pr(Bin(t, p) >= S), summed in log space.
inline double exact_binomial_pvalue(std::int64_t s, std::int64_t t, double p) {
  if (t < 0) throw InvalidArgument("exact_binomial_pvalue: t must be >= 0");
  if (s <= 0) return 1.0;
  if (s > t) return 0.0;
  if (p <= 0.0) return 0.0;
  if (p >= 1.0) return 1.0;
  const double td = static_cast<double>(t);
  const double log_p = std::log(p);
  const double log_q = std::log1p(-p);
  auto log_pmf = [&](std::int64_t k) {
    const double kd = static_cast<double>(k);
    return std::lgamma(td + 1.0) - std::lgamma(kd + 1.0) - std::lgamma(td - kd + 1.0) +
           kd * log_p + (td - kd) * log_q;
  };
  // Terms rise up to the mode and fall after it; sum them relative to the
  // largest so nothing underflows.
  const auto mode = std::max<std::int64_t>(s, static_cast<std::int64_t>(std::floor((td + 1.0) * p)));
  const double log_peak = log_pmf(std::min(mode, t));
  const double log_ratio_base = log_p - log_q;
  double sum = 0.0;
  double log_term = log_pmf(s);
  for (std::int64_t k = s; k <= t; ++k) {
    if (k > s) {
      log_term += std::log(static_cast<double>(t - k + 1)) - std::log(static_cast<double>(k)) +
                  log_ratio_base;
    }
    const double rel = std::exp(log_term - log_peak);
    sum += rel;
    if (k > mode && rel < 1e-18 * sum) break;
  }
  return std::min(1.0, std::exp(log_peak + std::log(sum)));
}

inline double normal_upper_tail(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

inline double normal_upper_quantile(double fpr) {
  return boost::math::quantile(boost::math::complement(boost::math::normal(), fpr));
}

// ---------------------------------------------------------------------------

struct TraceEntry {
  double r = 0.0;
  TokenId token = 0;
  double score = 0.0;
};

struct DetectionReport {
  Strategy strategy = Strategy::kAlignedIs;
  double score = 0.0;
  std::size_t t = 0;
  double threshold = 0.0;
  /// Mean per-step score under H0.
  double null_rate = 0.0;
  double p_hoeffding = 1.0;
  /// Exact binomial tail; for ITS a seeded Monte-Carlo estimate.
  double p_exact = 1.0;
  /// Green-list z-statistic and its normal upper tail (kgw, unigram).
  double z_score = 0.0;
  double p_normal = 1.0;
  bool verdict = false;
  double fpr = 0.01;
  std::vector<TraceEntry> trace;
};

/// Serializes the report summary (trace omitted unless asked for).
inline nlohmann::json to_json(const DetectionReport& r, bool with_trace = false) {
  nlohmann::json j = {{"score", r.score},
                      {"t", r.t},
                      {"threshold", r.threshold},
                      {"p_hoeffding", r.p_hoeffding},
                      {"p_exact", r.p_exact},
                      {"verdict", r.verdict},
                      {"strategy", to_string(r.strategy)},
                      {"fpr", r.fpr},
                      {"null_rate", r.null_rate}};
  if (r.strategy == Strategy::kKgw || r.strategy == Strategy::kUnigram) {
    j["z_score"] = r.z_score;
    j["p_normal"] = r.p_normal;
  }
  if (with_trace) {
    auto& tr = j["trace"] = nlohmann::json::array();
    for (const auto& e : r.trace) tr.push_back({{"r", e.r}, {"token", e.token}, {"score", e.score}});
  }
  return j;
}

struct DetectOptions {
  /// Score each watermark code only at its first occurrence.
  bool dedup = false;
  bool keep_trace = true;
  std::size_t its_null_samples = 10000;
  std::uint64_t its_null_seed = 0x5eed;
};

/// Samples of the H0 ITS statistic for t steps over a vocabulary of n,
/// sorted ascending. Cached per (t, n, samples, seed); thread-safe.
inline std::shared_ptr<const std::vector<double>> its_null_sums(std::size_t t, std::size_t n,
                                                                std::size_t samples,
                                                                std::uint64_t seed) {
  using Key = std::tuple<std::size_t, std::size_t, std::size_t, std::uint64_t>;
  static std::mutex mu;
  static std::map<Key, std::shared_ptr<const std::vector<double>>> cache;
  const Key key{t, n, samples, seed};
  {
    std::lock_guard<std::mutex> lock(mu);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }
  std::mt19937_64 rng(derive_seed(seed, t, n));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::uint32_t> rank(0, static_cast<std::uint32_t>(n - 1));
  auto sums = std::make_shared<std::vector<double>>(samples);
  for (double& s : *sums) {
    double acc = 0.0;
    for (std::size_t i = 0; i < t; ++i) acc += its_score(unit(rng), rank(rng), n);
    s = acc;
  }
  std::sort(sums->begin(), sums->end());
  std::lock_guard<std::mutex> lock(mu);
  return cache.emplace(key, std::move(sums)).first->second;
}

/// Re-evaluates a report's decision at another false-positive rate.
inline bool verdict_at(const DetectionReport& r, double fpr) {
  switch (r.strategy) {
    case Strategy::kKgw:
    case Strategy::kUnigram:
      return r.z_score > normal_upper_quantile(fpr);
    case Strategy::kIts:
      return r.p_exact <= fpr;
    default:
      return r.score > hoeffding_threshold(r.t, r.null_rate, fpr);
  }
}

namespace detail {

inline void require_length(std::span<const TokenId> tokens, std::size_t ngram_n) {
  if (ngram_n < 1) throw InvalidArgument("detect: ngram_n must be >= 1");
  if (tokens.size() < ngram_n + 1) {
    throw InvalidArgument("detect: sequence has " + std::to_string(tokens.size()) +
                          " tokens, need at least " + std::to_string(ngram_n + 1));
  }
}

inline void require_vocab(std::span<const TokenId> tokens, std::size_t n) {
  for (TokenId t : tokens) {
    if (t >= n) {
      throw InvalidArgument("detect: token " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(n));
    }
  }
}

// Walks the full-context positions, calling score(code, r, token).
template <class ScoreFn>
void scan(std::span<const TokenId> tokens, const WatermarkKey& key, std::size_t ngram_n,
          const DetectOptions& opts, DetectionReport& rep, ScoreFn&& score) {
  CodeHistory seen;
  for (std::size_t i = ngram_n; i < tokens.size(); ++i) {
    WatermarkCode code = WatermarkCode::at(key, tokens, i, ngram_n);
    if (opts.dedup && !seen.insert(code_fingerprint(code))) continue;
    const double r = prf_r(code);
    const double s = score(code, r, tokens[i]);
    rep.score += s;
    ++rep.t;
    if (opts.keep_trace) rep.trace.push_back({r, tokens[i], s});
  }
}

inline void finish_binomial(DetectionReport& rep, double fpr) {
  rep.fpr = fpr;
  rep.threshold = hoeffding_threshold(rep.t, rep.null_rate, fpr);
  rep.p_hoeffding = hoeffding_pvalue(rep.score, rep.t, rep.null_rate);
  rep.p_exact = exact_binomial_pvalue(static_cast<std::int64_t>(std::llround(rep.score)),
                                      static_cast<std::int64_t>(rep.t), rep.null_rate);
  rep.verdict = rep.score > rep.threshold;
}

inline void finish_green(DetectionReport& rep, double gamma, double fpr) {
  const double td = static_cast<double>(rep.t);
  const double sd = std::sqrt(gamma * (1.0 - gamma) * td);
  rep.fpr = fpr;
  rep.null_rate = gamma;
  rep.z_score = (rep.score - gamma * td) / sd;
  rep.p_normal = normal_upper_tail(rep.z_score);
  rep.threshold = gamma * td + normal_upper_quantile(fpr) * sd;
  rep.p_hoeffding = hoeffding_pvalue(rep.score, rep.t, gamma);
  rep.p_exact = exact_binomial_pvalue(static_cast<std::int64_t>(std::llround(rep.score)),
                                      static_cast<std::int64_t>(rep.t), gamma);
  rep.verdict = rep.z_score > normal_upper_quantile(fpr);
}

inline void check_fpr(double fpr) {
  if (!(fpr > 0.0 && fpr < 1.0)) throw InvalidArgument("detect: fpr must be in (0,1)");
}

}  // namespace detail

/// Aligned inverse sampling detector.
inline DetectionReport detect_aligned(std::span<const TokenId> tokens, const WatermarkKey& key,
                                      const ClusterMap& map, std::size_t ngram_n, double fpr,
                                      const DetectOptions& opts = {}) {
  detail::require_length(tokens, ngram_n);
  detail::require_vocab(tokens, map.n_tokens());
  detail::check_fpr(fpr);
  DetectionReport rep;
  rep.strategy = Strategy::kAlignedIs;
  rep.null_rate = 1.0 / static_cast<double>(map.h());
  detail::scan(tokens, key, ngram_n, opts, rep, [&](const WatermarkCode&, double r, TokenId tok) {
    return static_cast<double>(aligned_score(r, tok, map));
  });
  detail::finish_binomial(rep, fpr);
  return rep;
}

/// KGW: count tokens in the code's green list; one-sided z-test.
inline DetectionReport detect_kgw(std::span<const TokenId> tokens, const WatermarkKey& key,
                                  std::size_t vocab_size, double gamma, std::size_t ngram_n,
                                  double fpr, const DetectOptions& opts = {}) {
  detail::require_length(tokens, ngram_n);
  detail::require_vocab(tokens, vocab_size);
  detail::check_fpr(fpr);
  const std::size_t green = green_list_size(vocab_size, gamma);
  DetectionReport rep;
  rep.strategy = Strategy::kKgw;
  detail::scan(tokens, key, ngram_n, opts, rep, [&](const WatermarkCode& code, double, TokenId tok) {
    auto rank = invert_permutation(prf_permutation(code, vocab_size));
    return rank[tok] < green ? 1.0 : 0.0;
  });
  detail::finish_green(rep, static_cast<double>(green) / static_cast<double>(vocab_size), fpr);
  return rep;
}

/// Unigram: one global green list; every position is scored.
inline DetectionReport detect_unigram(std::span<const TokenId> tokens, const WatermarkKey& key,
                                      std::size_t vocab_size, double gamma, double fpr,
                                      const DetectOptions& opts = {}) {
  if (tokens.empty()) throw InvalidArgument("detect: sequence has 0 tokens, need at least 1");
  detail::require_vocab(tokens, vocab_size);
  detail::check_fpr(fpr);
  const std::size_t green = green_list_size(vocab_size, gamma);
  auto rank = invert_permutation(key_permutation(key, vocab_size));
  DetectionReport rep;
  rep.strategy = Strategy::kUnigram;
  for (TokenId tok : tokens) {
    const double s = rank[tok] < green ? 1.0 : 0.0;
    rep.score += s;
    ++rep.t;
    if (opts.keep_trace) rep.trace.push_back({0.0, tok, s});
  }
  detail::finish_green(rep, static_cast<double>(green) / static_cast<double>(vocab_size), fpr);
  return rep;
}

/// DiPmark / gamma-reweight: score 1 when the token sits in the last
/// (1 - alpha) share of the permuted order, where reweighting moves mass.
inline DetectionReport detect_dipmark(std::span<const TokenId> tokens, const WatermarkKey& key,
                                      std::size_t vocab_size, double alpha_detect,
                                      std::size_t ngram_n, double fpr,
                                      const DetectOptions& opts = {}) {
  detail::require_length(tokens, ngram_n);
  detail::require_vocab(tokens, vocab_size);
  detail::check_fpr(fpr);
  if (!(alpha_detect >= 0.0 && alpha_detect < 1.0)) {
    throw InvalidArgument("detect_dipmark: alpha must be in [0,1)");
  }
  const auto green_start =
      static_cast<std::uint32_t>(std::floor(alpha_detect * static_cast<double>(vocab_size)));
  DetectionReport rep;
  rep.strategy = alpha_detect == 0.5 ? Strategy::kGammaReweight : Strategy::kDipmark;
  rep.null_rate = static_cast<double>(vocab_size - green_start) / static_cast<double>(vocab_size);
  detail::scan(tokens, key, ngram_n, opts, rep, [&](const WatermarkCode& code, double, TokenId tok) {
    auto rank = invert_permutation(prf_permutation(code, vocab_size));
    return rank[tok] >= green_start ? 1.0 : 0.0;
  });
  detail::finish_binomial(rep, fpr);
  return rep;
}

/// Simplified ITS: S = sum of 1 - |r - u(token)|. The p-value and
/// threshold come from a seeded Monte-Carlo null, so the false-positive
/// rate is estimated rather than guaranteed. p_hoeffding uses the exact
/// null mean and is a valid bound.
inline DetectionReport detect_its(std::span<const TokenId> tokens, const WatermarkKey& key,
                                  std::size_t vocab_size, std::size_t ngram_n, double fpr,
                                  const DetectOptions& opts = {}) {
  detail::require_length(tokens, ngram_n);
  detail::require_vocab(tokens, vocab_size);
  detail::check_fpr(fpr);
  DetectionReport rep;
  rep.strategy = Strategy::kIts;
  rep.fpr = fpr;
  rep.null_rate = its_null_mean(vocab_size);
  detail::scan(tokens, key, ngram_n, opts, rep, [&](const WatermarkCode& code, double r, TokenId tok) {
    auto rank = invert_permutation(prf_permutation(code, vocab_size));
    return its_score(r, rank[tok], vocab_size);
  });
  rep.p_hoeffding = hoeffding_pvalue(rep.score, rep.t, rep.null_rate);
  if (rep.t == 0) {
    rep.p_exact = 1.0;
    return rep;
  }
  auto null = its_null_sums(rep.t, vocab_size, opts.its_null_samples, opts.its_null_seed);
  const auto at_least = static_cast<double>(
      null->end() - std::lower_bound(null->begin(), null->end(), rep.score));
  rep.p_exact = (1.0 + at_least) / (1.0 + static_cast<double>(null->size()));
  // S above null[k] leaves at most M - 1 - k samples >= S, so p <= fpr
  // once k >= M - fpr (M + 1).
  const double m = static_cast<double>(null->size());
  const double k = std::clamp(std::ceil(m - fpr * (m + 1.0)), 0.0, m - 1.0);
  rep.threshold = (*null)[static_cast<std::size_t>(k)];
  rep.verdict = rep.score > rep.threshold;
  return rep;
}

/// Dispatches on the strategy. `map` is required for aligned_is.
inline DetectionReport detect(std::span<const TokenId> tokens, const WatermarkKey& key,
                              const ReweightConfig& cfg, const ClusterMap* map,
                              std::size_t vocab_size, std::size_t ngram_n, double fpr,
                              const DetectOptions& opts = {}) {
  switch (cfg.strategy) {
    case Strategy::kAlignedIs:
      if (map == nullptr) throw InvalidArgument("detect: aligned_is needs a cluster map");
      return detect_aligned(tokens, key, *map, ngram_n, fpr, opts);
    case Strategy::kIts:
      return detect_its(tokens, key, vocab_size, ngram_n, fpr, opts);
    case Strategy::kKgw:
      return detect_kgw(tokens, key, vocab_size, cfg.gamma, ngram_n, fpr, opts);
    case Strategy::kUnigram:
      return detect_unigram(tokens, key, vocab_size, cfg.gamma, fpr, opts);
    case Strategy::kDipmark:
      return detect_dipmark(tokens, key, vocab_size, cfg.alpha, ngram_n, fpr, opts);
    case Strategy::kGammaReweight:
      return detect_dipmark(tokens, key, vocab_size, 0.5, ngram_n, fpr, opts);
  }
  throw InvariantViolation("unhandled strategy");
}

}  // namespace alignedis

#endif  // ALIGNEDIS_DETECT_HPP_
