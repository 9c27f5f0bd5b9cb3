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

// Watermarked autoregressive generation over any next-token model.

#ifndef ALIGNEDIS_GENERATE_HPP_
#define ALIGNEDIS_GENERATE_HPP_

#include <concepts>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "alignedis/clustering.hpp"
#include "alignedis/core.hpp"
#include "alignedis/reweight.hpp"

namespace alignedis {

/// A next-token source: a deterministic distribution for every context.
template <class M>
concept NextTokenModel = requires(const M& m, std::span<const TokenId> context) {
  { m.vocab_size() } -> std::convertible_to<std::size_t>;
  { m.next_dist(context) } -> std::convertible_to<ProbVector>;
};

/// State of one generation session. The code history starts empty and
/// persists across generate() calls on the same session.
struct GenerationSession {
  GenerationSession(WatermarkKey k, ReweightConfig cfg, std::size_t n, std::uint64_t seed,
                    const ClusterMap* cluster_map = nullptr)
      : key(std::move(k)), strategy(cfg), ngram_n(n), clusters(cluster_map), rng(seed) {
    strategy.validate();
    if (ngram_n < 1) throw InvalidArgument("GenerationSession: ngram_n must be >= 1");
    if (strategy.strategy == Strategy::kAlignedIs) {
      if (clusters == nullptr) throw InvalidArgument("aligned_is needs a cluster map");
      if (clusters->h() != strategy.h) {
        throw InvalidArgument("aligned_is: config h = " + std::to_string(strategy.h) +
                              " but cluster map has h = " + std::to_string(clusters->h()));
      }
    }
  }

  WatermarkKey key;
  ReweightConfig strategy;
  std::size_t ngram_n;
  const ClusterMap* clusters;
  CodeHistory history;
  /// Skip codes already in the history. Turning this off watermarks every
  /// step with full context.
  bool use_history = true;
  std::mt19937_64 rng;
};

struct StepRecord {
  bool watermarked = false;
  std::uint64_t fingerprint = 0;
  double r = 0.0;
};

namespace detail {

template <class Rng>
TokenId sample_from(const ProbVector& dist, Rng& rng) {
  return static_cast<TokenId>(
      sample_index(dist.values(), std::uniform_real_distribution<double>(0.0, 1.0)(rng)));
}

template <class Rng>
TokenId watermarked_step(const ProbVector& dist, const WatermarkCode& code, double r,
                         const GenerationSession& s, std::span<const TokenId> unigram_perm,
                         Rng& rng) {
  const ReweightConfig& cfg = s.strategy;
  switch (cfg.strategy) {
    case Strategy::kAlignedIs: {
      auto table = build_segment_table(dist, *s.clusters);
      return aligned_sample(table, dist, *s.clusters, r, rng);
    }
    case Strategy::kIts:
      return its_sample(dist, prf_permutation(code, dist.size()), r);
    case Strategy::kKgw:
      return sample_from(kgw_reweight(dist, code, cfg.delta, cfg.gamma), rng);
    case Strategy::kUnigram:
      return sample_from(kgw_reweight(dist, unigram_perm, cfg.delta, cfg.gamma), rng);
    case Strategy::kDipmark:
      return sample_from(dipmark_reweight(dist, code, cfg.alpha), rng);
    case Strategy::kGammaReweight:
      return sample_from(dipmark_reweight(dist, code, 0.5), rng);
  }
  throw InvariantViolation("unhandled strategy");
}

}  // namespace detail

/// Generates t tokens after `prompt`. A step is watermarked when the n
/// preceding tokens exist and their code has not been used before in this
/// session; otherwise the token is drawn from the model unmodified.
template <NextTokenModel Model>
TokenSeq generate(const Model& model, std::span<const TokenId> prompt, std::size_t t,
                  GenerationSession& session, std::vector<StepRecord>* trace = nullptr) {
  if (t < 1) throw InvalidArgument("generate: length must be >= 1");
  const std::size_t n = session.ngram_n;
  TokenSeq buffer(prompt.begin(), prompt.end());
  buffer.reserve(prompt.size() + t);

  std::vector<TokenId> unigram_perm;
  if (session.strategy.strategy == Strategy::kUnigram) {
    unigram_perm = key_permutation(session.key, model.vocab_size());
  }
  if (trace) trace->clear();

  for (std::size_t step = 0; step < t; ++step) {
    ProbVector dist = model.next_dist(std::span<const TokenId>(buffer));
    StepRecord rec;
    TokenId next;
    if (buffer.size() >= n) {
      WatermarkCode code = WatermarkCode::at(session.key, buffer, buffer.size(), n);
      rec.fingerprint = code_fingerprint(code);
      if (!session.use_history || session.history.insert(rec.fingerprint)) {
        rec.watermarked = true;
        rec.r = prf_r(code);
        next = detail::watermarked_step(dist, code, rec.r, session, unigram_perm, session.rng);
      } else {
        next = detail::sample_from(dist, session.rng);
      }
    } else {
      next = detail::sample_from(dist, session.rng);
    }
    buffer.push_back(next);
    if (trace) trace->push_back(rec);
  }
  return TokenSeq(buffer.begin() + static_cast<std::ptrdiff_t>(prompt.size()), buffer.end());
}

/// Plain ancestral sampling.
template <NextTokenModel Model>
TokenSeq generate_unwatermarked(const Model& model, std::span<const TokenId> prompt, std::size_t t,
                                std::uint64_t seed) {
  if (t < 1) throw InvalidArgument("generate_unwatermarked: length must be >= 1");
  std::mt19937_64 rng(seed);
  TokenSeq buffer(prompt.begin(), prompt.end());
  buffer.reserve(prompt.size() + t);
  for (std::size_t step = 0; step < t; ++step) {
    buffer.push_back(detail::sample_from(model.next_dist(std::span<const TokenId>(buffer)), rng));
  }
  return TokenSeq(buffer.begin() + static_cast<std::ptrdiff_t>(prompt.size()), buffer.end());
}

}  // namespace alignedis

#endif  // ALIGNEDIS_GENERATE_HPP_
