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

// Foundational types shared by every module: token ids, probability
// vectors, watermark keys/codes and the keyed pseudo-random function that
// turns a watermark code into a number in [0, 1) or a vocabulary
// permutation.
//
// Every hash is SHA-256 over a fixed byte layout so that independent
// implementations agree bit for bit:
//
//   key bytes || domain byte || ngram_n (u32 BE) || context tokens (u32 BE)
//
// with domain byte 0x00 for fingerprints, 0x01 for r(theta) and 0x02 for
// the permutation stream (which additionally appends the block counter).

#ifndef ALIGNEDIS_CORE_HPP_
#define ALIGNEDIS_CORE_HPP_

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace alignedis {

// ---------------------------------------------------------------------------
// Errors. The CLI maps these onto exit codes.

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// ---------------------------------------------------------------------------

/// Index of a token in the vocabulary. Hashed as 4-byte big-endian, so
/// vocabularies above 2^32 are not supported.
using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

inline constexpr double kProbSumTolerance = 1e-9;

enum class Normalize { kNo, kYes };

/// A distribution over the vocabulary. Entries are non-negative and sum to
/// one within 1e-9. Renormalization only happens when asked for.
class ProbVector {
 public:
  ProbVector() = default;

  explicit ProbVector(std::vector<double> probs, Normalize normalize = Normalize::kNo)
      : probs_(std::move(probs)) {
    if (probs_.empty()) throw InvalidArgument("ProbVector: empty distribution");
    double total = 0.0;
    for (double p : probs_) {
      if (!(p >= 0.0) || !std::isfinite(p)) {
        throw InvalidArgument("ProbVector: entries must be finite and non-negative");
      }
      total += p;
    }
    if (normalize == Normalize::kYes) {
      if (!(total > 0.0)) throw InvalidArgument("ProbVector: cannot normalize zero mass");
      for (double& p : probs_) p /= total;
    } else if (std::abs(total - 1.0) > kProbSumTolerance) {
      throw InvalidArgument("ProbVector: entries sum to " + std::to_string(total) +
                            ", expected 1");
    }
  }

  static ProbVector uniform(std::size_t n) {
    if (n == 0) throw InvalidArgument("ProbVector: empty distribution");
    return ProbVector(std::vector<double>(n, 1.0 / static_cast<double>(n)), Normalize::kYes);
  }

  static ProbVector one_hot(std::size_t n, TokenId token) {
    if (token >= n) throw InvalidArgument("ProbVector: one-hot index out of range");
    std::vector<double> p(n, 0.0);
    p[token] = 1.0;
    return ProbVector(std::move(p));
  }

  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::span<const double> values() const { return probs_; }

  friend bool operator==(const ProbVector&, const ProbVector&) = default;

 private:
  std::vector<double> probs_;
};

/// Total-variation distance between two equal-length distributions.
inline double tv_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidArgument("tv_distance: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s;
}

/// Inverse-CDF draw: the first index whose cumulative mass exceeds u.
/// Zero-mass entries are never returned.
inline std::size_t sample_index(std::span<const double> probs, double u) {
  double acc = 0.0;
  std::size_t last_nonzero = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    last_nonzero = i;
    acc += probs[i];
    if (u < acc) return i;
  }
  // u landed in the rounding slack above the accumulated total.
  return last_nonzero;
}

/// Opaque secret key.
class WatermarkKey {
 public:
  explicit WatermarkKey(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {
    if (bytes_.empty()) throw InvalidArgument("WatermarkKey: key must be non-empty");
  }
  explicit WatermarkKey(std::string_view text)
      : WatermarkKey(std::vector<std::uint8_t>(text.begin(), text.end())) {}

  std::span<const std::uint8_t> bytes() const { return bytes_; }

  /// A key derived from this one for an independent trial.
  WatermarkKey derive(std::uint64_t index) const {
    std::vector<std::uint8_t> b = bytes_;
    b.push_back(':');
    for (char c : std::to_string(index)) b.push_back(static_cast<std::uint8_t>(c));
    return WatermarkKey(std::move(b));
  }

  friend bool operator==(const WatermarkKey&, const WatermarkKey&) = default;

 private:
  std::vector<std::uint8_t> bytes_;
};

/// The per-step watermark code theta = (key, preceding n-gram). A view: the
/// key and context must outlive it.
class WatermarkCode {
 public:
  WatermarkCode(const WatermarkKey& key, std::span<const TokenId> context)
      : key_(&key), context_(context) {}

  /// The code for predicting position `pos` of `tokens` from the n tokens
  /// before it. Requires pos >= n.
  static WatermarkCode at(const WatermarkKey& key, std::span<const TokenId> tokens,
                          std::size_t pos, std::size_t ngram_n) {
    if (ngram_n < 1) throw InvalidArgument("WatermarkCode: ngram_n must be >= 1");
    if (pos < ngram_n || pos > tokens.size()) {
      throw InvalidArgument("WatermarkCode: insufficient context");
    }
    return WatermarkCode(key, tokens.subspan(pos - ngram_n, ngram_n));
  }

  const WatermarkKey& key() const { return *key_; }
  std::span<const TokenId> context() const { return context_; }
  std::size_t ngram_n() const { return context_.size(); }

 private:
  const WatermarkKey* key_;
  std::span<const TokenId> context_;
};

// ---------------------------------------------------------------------------
// SHA-256 plumbing (OpenSSL EVP).

namespace detail {

using Digest = std::array<std::uint8_t, 32>;

struct EvpCtxDeleter {
  void operator()(EVP_MD_CTX* ctx) const { EVP_MD_CTX_free(ctx); }
};
using EvpCtx = std::unique_ptr<EVP_MD_CTX, EvpCtxDeleter>;

inline EvpCtx new_ctx() {
  EvpCtx ctx(EVP_MD_CTX_new());
  if (!ctx) throw InvariantViolation("EVP_MD_CTX_new failed");
  return ctx;
}

class Sha256 {
 public:
  Sha256() : ctx_(new_ctx()) {
    if (EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
      throw InvariantViolation("SHA-256 init failed");
    }
  }
  Sha256(const Sha256& other) : ctx_(new_ctx()) {
    if (EVP_MD_CTX_copy_ex(ctx_.get(), other.ctx_.get()) != 1) {
      throw InvariantViolation("SHA-256 copy failed");
    }
  }
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(std::span<const std::uint8_t> bytes) {
    EVP_DigestUpdate(ctx_.get(), bytes.data(), bytes.size());
    return *this;
  }
  Sha256& update_byte(std::uint8_t b) { return update(std::span<const std::uint8_t>(&b, 1)); }
  Sha256& update_u32(std::uint32_t v) {
    const std::array<std::uint8_t, 4> be = {
        static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
        static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)};
    return update(be);
  }
  Sha256& update_u64(std::uint64_t v) {
    update_u32(static_cast<std::uint32_t>(v >> 32));
    return update_u32(static_cast<std::uint32_t>(v));
  }

  Digest finish() {
    Digest out{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), out.data(), &len);
    return out;
  }

 private:
  EvpCtx ctx_;
};

inline std::uint64_t be64(const Digest& d, std::size_t offset = 0) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 8; ++i) v = (v << 8) | d[offset + i];
  return v;
}

inline std::uint32_t be32(const Digest& d, std::size_t offset) {
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | d[offset + i];
  return v;
}

enum Domain : std::uint8_t { kFingerprint = 0x00, kUnitInterval = 0x01, kPermutation = 0x02 };

inline Sha256 code_hasher(std::span<const std::uint8_t> key, Domain domain,
                          std::span<const TokenId> context) {
  Sha256 h;
  h.update(key).update_byte(domain).update_u32(static_cast<std::uint32_t>(context.size()));
  for (TokenId t : context) h.update_u32(t);
  return h;
}

/// Top 53 bits of a 64-bit word as a double in [0, 1).
inline double unit_interval(std::uint64_t u) {
  return static_cast<double>(u >> 11) * 0x1.0p-53;
}

}  // namespace detail

/// 64-bit identity of a watermark code, used for history membership.
inline std::uint64_t code_fingerprint(const WatermarkCode& code) {
  return detail::be64(
      detail::code_hasher(code.key().bytes(), detail::kFingerprint, code.context()).finish());
}

/// r(theta) in [0, 1). The first eight digest bytes are read as a big-endian
/// u64 and truncated to the 53 bits a double holds exactly, so the result
/// can never round up to 1.
inline double prf_r(const WatermarkCode& code) {
  return detail::unit_interval(detail::be64(
      detail::code_hasher(code.key().bytes(), detail::kUnitInterval, code.context()).finish()));
}

namespace detail {

/// Counter-mode u32 stream: block j = SHA-256(prefix || j as u32 BE),
/// consumed four bytes at a time, big-endian.
class PermutationStream {
 public:
  explicit PermutationStream(Sha256 prefix) : prefix_(std::move(prefix)) {}

  std::uint32_t next() {
    if (offset_ == block_.size()) refill();
    std::uint32_t v = be32(block_, offset_);
    offset_ += 4;
    return v;
  }

  /// Unbiased draw in [0, bound) by rejection.
  std::uint32_t below(std::uint32_t bound) {
    const std::uint64_t range = std::uint64_t{1} << 32;
    const std::uint64_t limit = range - (range % bound);
    for (;;) {
      std::uint64_t v = next();
      if (v < limit) return static_cast<std::uint32_t>(v % bound);
    }
  }

 private:
  void refill() {
    Sha256 h(prefix_);
    block_ = h.update_u32(counter_++).finish();
    offset_ = 0;
  }

  Sha256 prefix_;
  Digest block_{};
  std::size_t offset_ = 32;
  std::uint32_t counter_ = 0;
};

inline std::vector<TokenId> permutation_from(Sha256 prefix, std::size_t n) {
  if (n < 1) throw InvalidArgument("prf_permutation: N must be >= 1");
  if (n > std::numeric_limits<std::uint32_t>::max()) {
    throw InvalidArgument("prf_permutation: vocabulary exceeds 2^32");
  }
  std::vector<TokenId> perm(n);
  std::iota(perm.begin(), perm.end(), TokenId{0});
  PermutationStream stream(std::move(prefix));
  // Durstenfeld: for i = n-1 down to 1, swap i with j uniform in [0, i].
  for (std::size_t i = n - 1; i >= 1; --i) {
    std::uint32_t j = stream.below(static_cast<std::uint32_t>(i + 1));
    std::swap(perm[i], perm[j]);
  }
  return perm;
}

}  // namespace detail

/// Keyed permutation of [0, n). perm[k] is the token at rank k.
inline std::vector<TokenId> prf_permutation(const WatermarkCode& code, std::size_t n) {
  return detail::permutation_from(
      detail::code_hasher(code.key().bytes(), detail::kPermutation, code.context()), n);
}

/// Context-free permutation seeded by the key alone (ngram_n = 0, empty
/// context). Used by the Unigram watermark.
inline std::vector<TokenId> key_permutation(const WatermarkKey& key, std::size_t n) {
  return detail::permutation_from(detail::code_hasher(key.bytes(), detail::kPermutation, {}), n);
}

/// rank[token] = position of token in perm.
inline std::vector<std::uint32_t> invert_permutation(std::span<const TokenId> perm) {
  std::vector<std::uint32_t> rank(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) rank[perm[k]] = static_cast<std::uint32_t>(k);
  return rank;
}

/// Watermark codes already used for biased sampling in one session.
class CodeHistory {
 public:
  /// Returns true if the fingerprint was new.
  bool insert(std::uint64_t fingerprint) { return seen_.insert(fingerprint).second; }
  bool contains(std::uint64_t fingerprint) const { return seen_.contains(fingerprint); }
  std::size_t size() const { return seen_.size(); }
  void clear() { seen_.clear(); }

 private:
  std::unordered_set<std::uint64_t> seen_;
};

/// splitmix64 finalizer; derives independent per-trial seeds from a master.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  return mix_seed(mix_seed(master ^ mix_seed(stream)) + index);
}

}  // namespace alignedis

#endif  // ALIGNEDIS_CORE_HPP_
