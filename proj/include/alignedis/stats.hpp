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

// Goodness-of-fit helpers used by the audits.

#ifndef ALIGNEDIS_STATS_HPP_
#define ALIGNEDIS_STATS_HPP_

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/chi_squared.hpp>

#include "alignedis/core.hpp"

namespace alignedis {

struct ChiSquareResult {
  double statistic = 0.0;
  std::size_t dof = 0;
  double p_value = 1.0;
};

/// Pearson chi-square of observed counts against expected probabilities.
/// Adjacent cells are pooled left to right until each pooled cell expects
/// at least `min_expected` observations; a short tail joins the last cell.
inline ChiSquareResult chi_square_gof(std::span<const double> observed,
                                      std::span<const double> expected_probs,
                                      double min_expected = 5.0) {
  if (observed.size() != expected_probs.size()) throw InvalidArgument("chi_square_gof: size mismatch");
  double total = 0.0;
  for (double o : observed) total += o;
  std::vector<double> obs_cells;
  std::vector<double> exp_cells;
  double o_acc = 0.0;
  double e_acc = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    o_acc += observed[i];
    e_acc += expected_probs[i] * total;
    if (e_acc >= min_expected) {
      obs_cells.push_back(o_acc);
      exp_cells.push_back(e_acc);
      o_acc = e_acc = 0.0;
    }
  }
  if (!obs_cells.empty()) {
    obs_cells.back() += o_acc;
    exp_cells.back() += e_acc;
  }
  ChiSquareResult r;
  if (obs_cells.size() < 2) return r;
  for (std::size_t i = 0; i < obs_cells.size(); ++i) {
    const double d = obs_cells[i] - exp_cells[i];
    r.statistic += d * d / exp_cells[i];
  }
  r.dof = obs_cells.size() - 1;
  boost::math::chi_squared dist(static_cast<double>(r.dof));
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.statistic));
  return r;
}

/// Binomial(t, p) probability mass for k = 0..t.
inline std::vector<double> binomial_pmf(std::size_t t, double p) {
  boost::math::binomial dist(static_cast<double>(t), p);
  std::vector<double> pmf(t + 1);
  for (std::size_t k = 0; k <= t; ++k) pmf[k] = boost::math::pdf(dist, static_cast<double>(k));
  return pmf;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

}  // namespace alignedis

#endif  // ALIGNEDIS_STATS_HPP_
