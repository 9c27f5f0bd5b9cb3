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

// Experiment harness: configuration, a small worker pool and the experiment
// recipes (distortion audit, FPR audit, detectability, robustness and the
// cluster-count ablation).
//
// Every trial derives its randomness from (master seed, stream, trial
// index), so results do not depend on thread scheduling and a rerun with
// the same config reproduces the output bit for bit.

#ifndef ALIGNEDIS_HARNESS_HPP_
#define ALIGNEDIS_HARNESS_HPP_

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "alignedis/cluster_io.hpp"
#include "alignedis/clustering.hpp"
#include "alignedis/core.hpp"
#include "alignedis/detect.hpp"
#include "alignedis/generate.hpp"
#include "alignedis/reweight.hpp"
#include "alignedis/simenv.hpp"
#include "alignedis/stats.hpp"

namespace alignedis {

// ---------------------------------------------------------------------------
// Worker pool.

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The first
/// exception thrown by any task is rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::min(resolve_threads(threads), std::max<std::size_t>(n, 1));
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n || failed.load()) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t k = 0; k < threads; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Configuration.

struct RobustnessGrid {
  std::vector<double> substitute_rates{0.1, 0.2, 0.3, 0.5, 1.0};
  std::vector<std::size_t> crop_lengths{50, 100, 200, 300, 400, 500};
  std::vector<std::pair<double, double>> insert_delete{{0.02, 0.02}, {0.05, 0.05}, {0.1, 0.1}};
  /// Multipliers on the channel's p_tok (capped at 1).
  std::vector<double> channel_scales{0.0, 0.5, 1.5};
};

inline std::vector<ReweightConfig> default_methods() {
  return {
      ReweightConfig{Strategy::kAlignedIs, 20, 0.0, 0.5, 0.0},
      ReweightConfig{Strategy::kIts, 0, 0.0, 0.5, 0.0},
      ReweightConfig{Strategy::kKgw, 0, 2.0, 0.5, 0.0},
      ReweightConfig{Strategy::kUnigram, 0, 2.0, 0.5, 0.0},
      ReweightConfig{Strategy::kDipmark, 0, 0.0, 0.5, 0.4},
      ReweightConfig{Strategy::kGammaReweight, 0, 0.0, 0.5, 0.5},
  };
}

struct ExperimentConfig {
  std::uint64_t seed = 2024;
  SyntheticModelConfig model;
  /// When set, `cluster` reads embeddings from this file instead of the
  /// synthetic model.
  std::string embeddings_path;
  KMeansOptions cluster;
  std::string key = "secret";
  std::size_t ngram_n = 1;
  /// Strategy for single-sequence generate/detect.
  ReweightConfig watermark;
  std::vector<ReweightConfig> methods = default_methods();
  std::optional<ChannelConfig> channel;
  std::string channel_name = "none";
  std::size_t trials = 500;
  std::size_t seq_len = 500;
  std::vector<double> fpr_grid{0.01, 0.001};
  std::string output = "out";
  std::size_t threads = 0;
  std::vector<std::size_t> h_grid{5, 10, 20, 40, 80};
  RobustnessGrid robustness;
  DetectOptions detect;
  std::size_t audit_contexts = 100;
  std::size_t audit_keys = 10000;

  void validate() const {
    model.validate();
    watermark.validate();
    for (const auto& m : methods) m.validate();
    if (channel) channel->validate();
    if (trials < 1) throw InvalidArgument("config: trials must be >= 1");
    if (ngram_n < 1) throw InvalidArgument("config: ngram_n must be >= 1");
    if (seq_len < ngram_n + 1) throw InvalidArgument("config: seq_len must be >= ngram_n + 1");
    if (fpr_grid.empty()) throw InvalidArgument("config: fpr_grid must not be empty");
    for (double f : fpr_grid) {
      if (!(f > 0.0 && f < 1.0)) throw InvalidArgument("config: fpr values must be in (0,1)");
    }
    if (key.empty()) throw InvalidArgument("config: key must be non-empty");
  }
};

namespace detail {

template <class T>
void read_opt(const nlohmann::json& j, const char* field, T& out, const std::string& where) {
  auto it = j.find(field);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError("config: field '" + where + field + "' has the wrong type");
  }
}

inline ReweightConfig reweight_from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw ParseError("config: '" + where + "' must be an object");
  ReweightConfig c;
  std::string name = "aligned_is";
  read_opt(j, "strategy", name, where);
  try {
    c.strategy = strategy_from_string(name);
  } catch (const InvalidArgument& e) {
    throw ParseError("config: '" + where + "strategy': " + e.what());
  }
  if (c.strategy == Strategy::kGammaReweight) c.alpha = 0.5;
  read_opt(j, "h", c.h, where);
  read_opt(j, "delta", c.delta, where);
  read_opt(j, "gamma", c.gamma, where);
  read_opt(j, "alpha", c.alpha, where);
  return c;
}

inline nlohmann::json reweight_to_json(const ReweightConfig& c) {
  nlohmann::json j = {{"strategy", to_string(c.strategy)}};
  switch (c.strategy) {
    case Strategy::kAlignedIs: j["h"] = c.h; break;
    case Strategy::kKgw:
    case Strategy::kUnigram: j["delta"] = c.delta; j["gamma"] = c.gamma; break;
    case Strategy::kDipmark: j["alpha"] = c.alpha; break;
    default: break;
  }
  return j;
}

}  // namespace detail

/// Parses the JSON experiment config. Missing fields keep their defaults.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read_opt;
  if (!j.is_object()) throw ParseError("config: top level must be a JSON object");
  ExperimentConfig c;
  read_opt(j, "seed", c.seed, "");
  if (auto m = j.find("model"); m != j.end()) {
    if (!m->is_object()) throw ParseError("config: 'model' must be an object");
    read_opt(*m, "vocab_size", c.model.vocab_size, "model.");
    read_opt(*m, "dim", c.model.dim, "model.");
    read_opt(*m, "true_clusters", c.model.true_clusters, "model.");
    read_opt(*m, "separation", c.model.separation, "model.");
    read_opt(*m, "dirichlet_beta", c.model.dirichlet_beta, "model.");
    read_opt(*m, "context_order", c.model.context_order, "model.");
    read_opt(*m, "seed", c.model.seed, "model.");
    read_opt(*m, "embeddings", c.embeddings_path, "model.");
  }
  if (auto m = j.find("cluster"); m != j.end()) {
    if (!m->is_object()) throw ParseError("config: 'cluster' must be an object");
    read_opt(*m, "h", c.cluster.h, "cluster.");
    read_opt(*m, "seed", c.cluster.seed, "cluster.");
    read_opt(*m, "max_iters", c.cluster.max_iters, "cluster.");
    read_opt(*m, "tol", c.cluster.tol, "cluster.");
    read_opt(*m, "relabel_far_apart", c.cluster.relabel_far_apart, "cluster.");
  }
  c.watermark.h = c.cluster.h;
  if (auto m = j.find("watermark"); m != j.end()) {
    c.watermark = detail::reweight_from_json(*m, "watermark.");
    if (m->find("h") == m->end()) c.watermark.h = c.cluster.h;
    read_opt(*m, "key", c.key, "watermark.");
    read_opt(*m, "ngram_n", c.ngram_n, "watermark.");
  }
  if (auto m = j.find("methods"); m != j.end()) {
    if (!m->is_array()) throw ParseError("config: 'methods' must be an array");
    c.methods.clear();
    for (std::size_t i = 0; i < m->size(); ++i) {
      c.methods.push_back(detail::reweight_from_json((*m)[i], "methods[" + std::to_string(i) + "]."));
    }
  }
  if (auto m = j.find("channel"); m != j.end() && !m->is_null()) {
    if (m->is_string()) {
      const auto name = m->get<std::string>();
      if (name != "none") {
        auto preset = find_channel_preset(name);
        if (!preset) throw ParseError("config: unknown channel preset '" + name + "'");
        c.channel = preset->config();
        c.channel_name = name;
      }
    } else if (m->is_object()) {
      ChannelConfig ch;
      if (auto p = m->find("preset"); p != m->end()) {
        auto preset = find_channel_preset(p->get<std::string>());
        if (!preset) throw ParseError("config: unknown channel preset '" + p->dump() + "'");
        ch = preset->config();
        c.channel_name = preset->name;
      } else {
        c.channel_name = "custom";
      }
      read_opt(*m, "p_tok", ch.p_tok, "channel.");
      read_opt(*m, "q_same", ch.q_same, "channel.");
      read_opt(*m, "neighbors", ch.neighbors, "channel.");
      read_opt(*m, "seed", ch.seed, "channel.");
      c.channel = ch;
    } else {
      throw ParseError("config: 'channel' must be a preset name or an object");
    }
  }
  read_opt(j, "trials", c.trials, "");
  read_opt(j, "seq_len", c.seq_len, "");
  read_opt(j, "fpr_grid", c.fpr_grid, "");
  read_opt(j, "output", c.output, "");
  read_opt(j, "threads", c.threads, "");
  read_opt(j, "h_grid", c.h_grid, "");
  read_opt(j, "audit_contexts", c.audit_contexts, "");
  read_opt(j, "audit_keys", c.audit_keys, "");
  if (auto m = j.find("robustness"); m != j.end()) {
    read_opt(*m, "substitute_rates", c.robustness.substitute_rates, "robustness.");
    read_opt(*m, "crop_lengths", c.robustness.crop_lengths, "robustness.");
    read_opt(*m, "insert_delete", c.robustness.insert_delete, "robustness.");
    read_opt(*m, "channel_scales", c.robustness.channel_scales, "robustness.");
  }
  if (auto m = j.find("detect"); m != j.end()) {
    read_opt(*m, "dedup", c.detect.dedup, "detect.");
    read_opt(*m, "its_null_samples", c.detect.its_null_samples, "detect.");
    read_opt(*m, "its_null_seed", c.detect.its_null_seed, "detect.");
  }
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    throw ParseError(e.what());
  }
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["model"] = {{"vocab_size", c.model.vocab_size}, {"dim", c.model.dim},
                {"true_clusters", c.model.true_clusters}, {"separation", c.model.separation},
                {"dirichlet_beta", c.model.dirichlet_beta}, {"context_order", c.model.context_order},
                {"seed", c.model.seed}};
  if (!c.embeddings_path.empty()) j["model"]["embeddings"] = c.embeddings_path;
  j["cluster"] = {{"h", c.cluster.h}, {"seed", c.cluster.seed}, {"max_iters", c.cluster.max_iters},
                  {"tol", c.cluster.tol}, {"relabel_far_apart", c.cluster.relabel_far_apart}};
  j["watermark"] = detail::reweight_to_json(c.watermark);
  j["watermark"]["key"] = c.key;
  j["watermark"]["ngram_n"] = c.ngram_n;
  j["methods"] = nlohmann::json::array();
  for (const auto& m : c.methods) j["methods"].push_back(detail::reweight_to_json(m));
  if (c.channel) {
    j["channel"] = {{"p_tok", c.channel->p_tok}, {"q_same", c.channel->q_same},
                    {"neighbors", c.channel->neighbors}, {"seed", c.channel->seed}};
  } else {
    j["channel"] = "none";
  }
  j["trials"] = c.trials;
  j["seq_len"] = c.seq_len;
  j["fpr_grid"] = c.fpr_grid;
  j["output"] = c.output;
  j["threads"] = c.threads;
  j["h_grid"] = c.h_grid;
  j["robustness"] = {{"substitute_rates", c.robustness.substitute_rates},
                     {"crop_lengths", c.robustness.crop_lengths},
                     {"insert_delete", c.robustness.insert_delete},
                     {"channel_scales", c.robustness.channel_scales}};
  j["detect"] = {{"dedup", c.detect.dedup}, {"its_null_samples", c.detect.its_null_samples},
                 {"its_null_seed", c.detect.its_null_seed}};
  j["audit_contexts"] = c.audit_contexts;
  j["audit_keys"] = c.audit_keys;
  return j;
}

// ---------------------------------------------------------------------------
// Result tables.

struct ResultRow {
  std::string experiment;
  std::string method;
  std::string params;
  std::string sweep = "none";
  std::string sweep_value;
  std::size_t trials = 0;
  /// Indexed like the table's fpr_grid.
  std::vector<double> tpr;
  std::vector<double> null_fpr;
  double median_p = 1.0;
  /// Mean per-step score S/t of the watermarked sequences.
  double mean_score_rate = 0.0;
};

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

struct ResultTable {
  std::vector<double> fpr_grid;
  std::vector<ResultRow> rows;

  const ResultRow* find(const std::string& method, const std::string& sweep_value = "") const {
    for (const auto& r : rows) {
      if (r.method == method && (sweep_value.empty() || r.sweep_value == sweep_value)) return &r;
    }
    return nullptr;
  }

  static constexpr const char* kFixedColumns =
      "experiment,method,params,sweep,sweep_value,trials";

  void write_csv(std::ostream& out) const {
    out << kFixedColumns;
    for (double f : fpr_grid) out << ",tpr@" << format_number(f);
    for (double f : fpr_grid) out << ",null_fpr@" << format_number(f);
    out << ",median_p,mean_score_rate\n";
    for (const auto& r : rows) {
      out << r.experiment << ',' << r.method << ",\"" << r.params << "\"," << r.sweep << ','
          << r.sweep_value << ',' << r.trials;
      for (double v : r.tpr) out << ',' << format_number(v);
      for (double v : r.null_fpr) out << ',' << format_number(v);
      out << ',' << format_number(r.median_p) << ',' << format_number(r.mean_score_rate) << '\n';
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["fpr_grid"] = fpr_grid;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json row = {{"experiment", r.experiment}, {"method", r.method},
                            {"params", r.params},         {"sweep", r.sweep},
                            {"sweep_value", r.sweep_value}, {"trials", r.trials},
                            {"median_p", r.median_p},     {"mean_score_rate", r.mean_score_rate}};
      nlohmann::json tpr = nlohmann::json::object();
      nlohmann::json nf = nlohmann::json::object();
      for (std::size_t i = 0; i < fpr_grid.size(); ++i) {
        tpr[format_number(fpr_grid[i])] = r.tpr[i];
        nf[format_number(fpr_grid[i])] = r.null_fpr[i];
      }
      row["tpr_at_fpr"] = tpr;
      row["null_fpr_at_fpr"] = nf;
      j["rows"].push_back(row);
    }
    return j;
  }
};

// ---------------------------------------------------------------------------
// Experiment setup and trials.

/// Seed streams; one per independent source of randomness in a trial.
enum SeedStream : std::uint64_t {
  kPromptStream = 1,
  kGenerateStream,
  kNullStream,
  kChannelStream,
  kNullChannelStream,
  kAttackStream,
  kNullAttackStream,
  kAuditStream,
};

/// The synthetic model, its fitted cluster maps and the channel, shared
/// read-only by every trial.
class ExperimentSetup {
 public:
  explicit ExperimentSetup(const ExperimentConfig& cfg)
      : cfg_(cfg), model_(cfg.model), true_map_(model_.true_cluster_map()) {
    if (cfg_.channel) {
      channel_.emplace(true_map_, model_.embeddings(), *cfg_.channel);
    }
  }

  const ExperimentConfig& config() const { return cfg_; }
  const SyntheticModel& model() const { return model_; }
  const ClusterMap& true_map() const { return true_map_; }
  const RetokenizationChannel* channel() const { return channel_ ? &*channel_ : nullptr; }

  /// k-means map with h clusters over the model's embeddings. Not
  /// thread-safe; call before fanning out.
  const ClusterMap& clusters(std::size_t h) {
    auto it = maps_.find(h);
    if (it != maps_.end()) return it->second;
    KMeansOptions opts = cfg_.cluster;
    opts.h = h;
    return maps_.emplace(h, kmeans_fit(model_.embeddings(), opts)).first->second;
  }

  const ClusterMap* clusters_if_fitted(std::size_t h) const {
    auto it = maps_.find(h);
    return it == maps_.end() ? nullptr : &it->second;
  }

  TokenSeq prompt(std::size_t trial) const {
    std::mt19937_64 rng(derive_seed(cfg_.seed, kPromptStream, trial));
    std::uniform_int_distribution<TokenId> any(0, static_cast<TokenId>(model_.vocab_size() - 1));
    TokenSeq p(cfg_.ngram_n);
    for (auto& t : p) t = any(rng);
    return p;
  }

  WatermarkKey trial_key(std::size_t trial) const { return WatermarkKey(cfg_.key).derive(trial); }

 private:
  ExperimentConfig cfg_;
  SyntheticModel model_;
  ClusterMap true_map_;
  std::optional<RetokenizationChannel> channel_;
  std::map<std::size_t, ClusterMap> maps_;
};

using Attack = std::function<TokenSeq(std::span<const TokenId>, std::uint64_t)>;

struct TrialOutcome {
  DetectionReport watermarked;
  DetectionReport null;
};

namespace detail {

inline DetectionReport detect_or_reject(std::span<const TokenId> tokens, const WatermarkKey& key,
                                        const ReweightConfig& method, const ClusterMap* map,
                                        std::size_t vocab, std::size_t n, double fpr,
                                        DetectOptions opts) {
  opts.keep_trace = false;
  try {
    return detect(tokens, key, method, map, vocab, n, fpr, opts);
  } catch (const InvalidArgument&) {
    // Too short after an attack: nothing to score, never flagged.
    DetectionReport r;
    r.strategy = method.strategy;
    r.fpr = fpr;
    r.null_rate = 1.0;
    r.threshold = std::numeric_limits<double>::infinity();
    r.z_score = -std::numeric_limits<double>::infinity();
    return r;
  }
}

}  // namespace detail

/// One watermarked and one unwatermarked sequence through the channel and
/// attack, both detected with the trial key.
inline TrialOutcome run_trial(const ExperimentSetup& setup, const ReweightConfig& method,
                              const ClusterMap* map, std::size_t trial,
                              const RetokenizationChannel* channel, const Attack& attack) {
  const auto& cfg = setup.config();
  const auto& model = setup.model();
  const WatermarkKey key = setup.trial_key(trial);
  const TokenSeq prompt = setup.prompt(trial);

  GenerationSession session(key, method, cfg.ngram_n, derive_seed(cfg.seed, kGenerateStream, trial),
                            map);
  // The prompt is kept in front so that all seq_len generated tokens are
  // scored.
  TokenSeq wm = prompt;
  TokenSeq null = prompt;
  const TokenSeq wm_tail = generate(model, prompt, cfg.seq_len, session);
  const TokenSeq null_tail = generate_unwatermarked(model, prompt, cfg.seq_len,
                                                    derive_seed(cfg.seed, kNullStream, trial));
  wm.insert(wm.end(), wm_tail.begin(), wm_tail.end());
  null.insert(null.end(), null_tail.begin(), null_tail.end());
  if (channel) {
    wm = channel->apply(wm, derive_seed(cfg.seed, kChannelStream, trial));
    null = channel->apply(null, derive_seed(cfg.seed, kNullChannelStream, trial));
  }
  if (attack) {
    wm = attack(wm, derive_seed(cfg.seed, kAttackStream, trial));
    null = attack(null, derive_seed(cfg.seed, kNullAttackStream, trial));
  }
  const double fpr = cfg.fpr_grid.front();
  return {detail::detect_or_reject(wm, key, method, map, model.vocab_size(), cfg.ngram_n, fpr,
                                   cfg.detect),
          detail::detect_or_reject(null, key, method, map, model.vocab_size(), cfg.ngram_n, fpr,
                                   cfg.detect)};
}

/// Runs `trials` trials of one method and summarizes them into a row.
inline ResultRow evaluate_method(const ExperimentSetup& setup, const ReweightConfig& method,
                                 const ClusterMap* map, const RetokenizationChannel* channel,
                                 const Attack& attack = {}) {
  const auto& cfg = setup.config();
  std::vector<TrialOutcome> outcomes(cfg.trials);
  parallel_for(cfg.trials, cfg.threads, [&](std::size_t i) {
    outcomes[i] = run_trial(setup, method, map, i, channel, attack);
  });
  ResultRow row;
  row.method = to_string(method.strategy);
  row.params = method.params();
  row.trials = cfg.trials;
  std::vector<double> ps;
  double rate_sum = 0.0;
  for (double f : cfg.fpr_grid) {
    std::size_t tp = 0;
    std::size_t fp = 0;
    for (const auto& o : outcomes) {
      if (o.watermarked.t > 0 && verdict_at(o.watermarked, f)) ++tp;
      if (o.null.t > 0 && verdict_at(o.null, f)) ++fp;
    }
    row.tpr.push_back(static_cast<double>(tp) / static_cast<double>(cfg.trials));
    row.null_fpr.push_back(static_cast<double>(fp) / static_cast<double>(cfg.trials));
  }
  for (const auto& o : outcomes) {
    ps.push_back(o.watermarked.p_exact);
    if (o.watermarked.t > 0) rate_sum += o.watermarked.score / static_cast<double>(o.watermarked.t);
  }
  row.median_p = median(ps);
  row.mean_score_rate = rate_sum / static_cast<double>(cfg.trials);
  return row;
}

// ---------------------------------------------------------------------------
// Recipes.

/// TPR at each fpr for every configured method, through the channel.
inline ResultTable run_detectability(ExperimentSetup& setup) {
  const auto& cfg = setup.config();
  ResultTable table{cfg.fpr_grid, {}};
  for (const auto& m : cfg.methods) {
    const ClusterMap* map = m.strategy == Strategy::kAlignedIs ? &setup.clusters(m.h) : nullptr;
    ResultRow row = evaluate_method(setup, m, map, setup.channel());
    row.experiment = "detectability";
    row.sweep = "channel";
    row.sweep_value = cfg.channel_name;
    table.rows.push_back(std::move(row));
  }
  return table;
}

/// Attack sweeps layered on top of the channel. The "identity" rows use
/// the same trial seeds as run_detectability and reproduce its numbers.
inline ResultTable run_robustness(ExperimentSetup& setup) {
  const auto& cfg = setup.config();
  const std::size_t vocab = setup.model().vocab_size();
  struct Cell {
    std::string sweep;
    std::string value;
    Attack attack;
    std::optional<RetokenizationChannel> channel;
  };
  std::vector<Cell> cells;
  cells.push_back({"identity", "", {}, {}});
  for (double rate : cfg.robustness.substitute_rates) {
    cells.push_back({"substitute", format_number(rate),
                     [rate, vocab](std::span<const TokenId> t, std::uint64_t s) {
                       return attack_substitute(t, rate, vocab, s);
                     },
                     {}});
  }
  for (std::size_t keep : cfg.robustness.crop_lengths) {
    cells.push_back({"crop", std::to_string(keep),
                     [keep](std::span<const TokenId> t, std::uint64_t s) {
                       return attack_random_crop(t, std::min(keep, t.size()), s);
                     },
                     {}});
  }
  for (auto [p_ins, p_del] : cfg.robustness.insert_delete) {
    cells.push_back({"insert_delete", format_number(p_ins) + "/" + format_number(p_del),
                     [p_ins, p_del, vocab](std::span<const TokenId> t, std::uint64_t s) {
                       return attack_insert_delete(t, p_ins, p_del, vocab, s);
                     },
                     {}});
  }
  if (cfg.channel) {
    for (double scale : cfg.robustness.channel_scales) {
      ChannelConfig ch = *cfg.channel;
      ch.p_tok = std::min(1.0, ch.p_tok * scale);
      cells.push_back({"channel_scale", format_number(scale), {},
                       RetokenizationChannel(setup.true_map(), setup.model().embeddings(), ch)});
    }
  }

  ResultTable table{cfg.fpr_grid, {}};
  for (const auto& m : cfg.methods) {
    if (m.strategy == Strategy::kAlignedIs) setup.clusters(m.h);
  }
  for (const auto& cell : cells) {
    const RetokenizationChannel* channel = cell.channel ? &*cell.channel : setup.channel();
    for (const auto& m : cfg.methods) {
      const ClusterMap* map =
          m.strategy == Strategy::kAlignedIs ? setup.clusters_if_fitted(m.h) : nullptr;
      ResultRow row = evaluate_method(setup, m, map, channel, cell.attack);
      row.experiment = "robustness";
      row.sweep = cell.sweep;
      row.sweep_value = cell.value;
      table.rows.push_back(std::move(row));
    }
  }
  return table;
}

/// Aligned-IS detectability as the cluster count varies; clusters are
/// refitted for every h while the channel keeps the true partition.
inline ResultTable run_ablation_h(ExperimentSetup& setup) {
  const auto& cfg = setup.config();
  ResultTable table{cfg.fpr_grid, {}};
  for (std::size_t h : cfg.h_grid) {
    ReweightConfig m{Strategy::kAlignedIs, h, 0.0, 0.5, 0.0};
    const ClusterMap& map = setup.clusters(h);
    ResultRow row = evaluate_method(setup, m, &map, setup.channel());
    row.experiment = "ablation_h";
    row.sweep = "h";
    row.sweep_value = std::to_string(h);
    table.rows.push_back(std::move(row));
  }
  return table;
}

/// Null calibration of the aligned detector: S over many unwatermarked
/// sequences against Binomial(t, 1/h), plus empirical FPR at the Hoeffding
/// thresholds.
struct FprAudit {
  std::size_t sequences = 0;
  std::size_t t = 0;
  std::size_t h = 0;
  std::vector<std::size_t> score_histogram;
  ChiSquareResult chi_square;
  std::vector<double> fpr_grid;
  std::vector<double> empirical_fpr;
  std::vector<double> thresholds;
  std::string corpus;

  nlohmann::json to_json() const {
    return {{"corpus", corpus},
            {"sequences", sequences},
            {"t", t},
            {"h", h},
            {"chi_square", {{"statistic", chi_square.statistic},
                            {"dof", chi_square.dof},
                            {"p_value", chi_square.p_value}}},
            {"fpr_grid", fpr_grid},
            {"thresholds", thresholds},
            {"empirical_fpr", empirical_fpr}};
  }
};

/// Null sequences for the FPR audit. kModel is unwatermarked model output
/// (prompt plus seq_len tokens, so exactly seq_len steps are scored). kIid
/// draws seq_len + ngram_n tokens uniformly from a large vocabulary with a
/// round-robin cluster map, so codes practically never repeat within a
/// sequence and per-step scores are independent.
enum class NullCorpus { kModel, kIid };

inline ClusterMap round_robin_map(std::size_t vocab, std::size_t h) {
  std::vector<std::uint32_t> assignment(vocab);
  for (std::size_t t = 0; t < vocab; ++t) assignment[t] = static_cast<std::uint32_t>(t % h);
  std::vector<std::vector<double>> centroids(h, std::vector<double>(1, 0.0));
  for (std::size_t c = 0; c < h; ++c) centroids[c][0] = static_cast<double>(c);
  return ClusterMap(h, std::move(assignment), std::move(centroids), 0);
}

/// Each sequence is checked with its own key.
inline FprAudit run_fpr_audit(ExperimentSetup& setup, std::size_t sequences,
                              NullCorpus corpus = NullCorpus::kModel,
                              std::size_t iid_vocab = 100000) {
  const auto& cfg = setup.config();
  std::optional<ClusterMap> iid_map;
  if (corpus == NullCorpus::kIid) iid_map = round_robin_map(iid_vocab, cfg.cluster.h);
  const ClusterMap& map = iid_map ? *iid_map : setup.clusters(cfg.cluster.h);
  std::vector<std::size_t> scores(sequences);
  DetectOptions opts = cfg.detect;
  opts.keep_trace = false;
  parallel_for(sequences, cfg.threads, [&](std::size_t i) {
    TokenSeq tokens;
    if (corpus == NullCorpus::kIid) {
      std::mt19937_64 rng(derive_seed(cfg.seed, kNullStream, i));
      std::uniform_int_distribution<TokenId> any(0, static_cast<TokenId>(iid_vocab - 1));
      tokens.resize(cfg.seq_len + cfg.ngram_n);
      for (auto& t : tokens) t = any(rng);
    } else {
      tokens = setup.prompt(i);
      const TokenSeq tail = generate_unwatermarked(setup.model(), tokens, cfg.seq_len,
                                                   derive_seed(cfg.seed, kNullStream, i));
      tokens.insert(tokens.end(), tail.begin(), tail.end());
    }
    auto rep = detect_aligned(tokens, setup.trial_key(i), map, cfg.ngram_n, cfg.fpr_grid.front(), opts);
    scores[i] = static_cast<std::size_t>(std::llround(rep.score));
  });
  FprAudit a;
  a.corpus = corpus == NullCorpus::kIid ? "iid" : "model";
  a.sequences = sequences;
  a.t = cfg.seq_len;
  a.h = map.h();
  a.score_histogram.assign(a.t + 1, 0);
  for (auto s : scores) ++a.score_histogram[s];
  std::vector<double> observed(a.score_histogram.begin(), a.score_histogram.end());
  const double null_rate = 1.0 / static_cast<double>(a.h);
  a.chi_square = chi_square_gof(observed, binomial_pmf(a.t, null_rate));
  a.fpr_grid = cfg.fpr_grid;
  for (double f : cfg.fpr_grid) {
    const double z = hoeffding_threshold(a.t, null_rate, f);
    const auto over = std::count_if(scores.begin(), scores.end(),
                                    [z](std::size_t s) { return static_cast<double>(s) > z; });
    a.thresholds.push_back(z);
    a.empirical_fpr.push_back(static_cast<double>(over) / static_cast<double>(sequences));
  }
  return a;
}

/// Checks that E_theta[P_W] = P_M:
///  * exact integration over r for aligned_is and its,
///  * exhaustive permutation averaging for dipmark / gamma-reweight (N = 3),
///  * Monte-Carlo key averaging for every method, where kgw/unigram are
///    expected to come out biased,
///  * a chi-square test of first-step token frequencies of the full
///    generator over independent keys.
inline nlohmann::json run_distortion_audit(ExperimentSetup& setup) {
  const auto& cfg = setup.config();
  const auto& model = setup.model();
  const ClusterMap& map = setup.clusters(cfg.cluster.h);
  const std::size_t vocab = model.vocab_size();
  std::mt19937_64 rng(derive_seed(cfg.seed, kAuditStream, 0));
  std::uniform_int_distribution<TokenId> any(0, static_cast<TokenId>(vocab - 1));
  nlohmann::json report;

  // Exact integration over r.
  double aligned_tv = 0.0;
  double its_tv = 0.0;
  const WatermarkKey audit_key(cfg.key);
  for (std::size_t i = 0; i < cfg.audit_contexts; ++i) {
    const TokenId ctx = any(rng);
    const ProbVector dist = model.next_dist(std::span<const TokenId>(&ctx, 1));
    auto table = build_segment_table(dist, map);
    aligned_tv = std::max(aligned_tv, tv_distance(aligned_marginal(table, dist, map), dist.values()));

    auto perm = prf_permutation(WatermarkCode(audit_key, std::span<const TokenId>(&ctx, 1)), vocab);
    std::vector<double> marginal(vocab, 0.0);
    double lo = 0.0;
    for (TokenId tok : perm) {
      const double hi = lo + dist[tok];
      if (dist[tok] > 0.0 && lo < 1.0) {
        marginal[its_sample(dist, perm, std::min(0.5 * (lo + hi), std::nextafter(1.0, 0.0)))] +=
            dist[tok];
      }
      lo = hi;
    }
    its_tv = std::max(its_tv, tv_distance(marginal, dist.values()));
  }
  report["exact"] = nlohmann::json::array();
  report["exact"].push_back({{"method", "aligned_is"}, {"contexts", cfg.audit_contexts},
                             {"max_tv", aligned_tv}, {"distortion_free", aligned_tv < 1e-12}});
  report["exact"].push_back({{"method", "its"}, {"contexts", cfg.audit_contexts},
                             {"max_tv", its_tv}, {"distortion_free", its_tv < 1e-12}});

  // Exhaustive averaging over every permutation of a small vocabulary: 3!
  // for dipmark / gamma-reweight, 4! for the green-list methods (a 3-token
  // vocabulary would make the half green list a single token).
  {
    auto enumerate = [&](std::size_t n, const auto& reweight) {
      const ProbVector small = dirichlet_draw(n, 1.0, rng);
      std::vector<TokenId> perm(n);
      std::iota(perm.begin(), perm.end(), TokenId{0});
      std::vector<double> avg(n, 0.0);
      double count = 0.0;
      do {
        auto w = reweight(small, perm);
        for (std::size_t k = 0; k < n; ++k) avg[k] += w[k];
        count += 1.0;
      } while (std::next_permutation(perm.begin(), perm.end()));
      for (double& v : avg) v /= count;
      return std::pair{tv_distance(avg, small.values()), static_cast<std::size_t>(count)};
    };
    for (double alpha : {0.3, 0.4, 0.5}) {
      auto [tv, perms] = enumerate(3, [alpha](const ProbVector& d, std::span<const TokenId> perm) {
        return dipmark_reweight(d, perm, alpha);
      });
      report["exact"].push_back({{"method", alpha == 0.5 ? "gamma_reweight" : "dipmark"},
                                 {"alpha", alpha}, {"permutations", perms}, {"max_tv", tv},
                                 {"distortion_free", tv < 1e-12}});
    }
    for (const auto& m : cfg.methods) {
      if (m.strategy != Strategy::kKgw && m.strategy != Strategy::kUnigram) continue;
      auto [tv, perms] = enumerate(4, [&m](const ProbVector& d, std::span<const TokenId> perm) {
        return kgw_reweight(d, perm, m.delta, m.gamma);
      });
      report["exact"].push_back({{"method", to_string(m.strategy)}, {"params", m.params()},
                                 {"permutations", perms}, {"max_tv", tv},
                                 {"distortion_free", tv < 1e-12}});
    }
  }

  // Monte-Carlo average over keys for one context, per method.
  const TokenId ctx0 = any(rng);
  const std::span<const TokenId> ctx0_span(&ctx0, 1);
  const ProbVector dist0 = model.next_dist(ctx0_span);
  const std::size_t keys = cfg.audit_keys;
  struct McRow {
    ReweightConfig method;
    double tv = 0.0;
    double noise = 0.0;
  };
  std::vector<McRow> mc;
  for (const auto& m : cfg.methods) mc.push_back({m});
  parallel_for(mc.size(), cfg.threads, [&](std::size_t idx) {
    const ReweightConfig& m = mc[idx].method;
    const ClusterMap* mmap = m.strategy == Strategy::kAlignedIs ? setup.clusters_if_fitted(m.h) : nullptr;
    std::vector<double> avg(vocab, 0.0);
    std::vector<double> sq(vocab, 0.0);
    for (std::size_t k = 0; k < keys; ++k) {
      const WatermarkKey key = WatermarkKey(cfg.key).derive(k);
      const WatermarkCode code(key, ctx0_span);
      std::vector<double> w;
      switch (m.strategy) {
        case Strategy::kAlignedIs: {
          const ClusterMap& use = mmap ? *mmap : map;
          auto table = build_segment_table(dist0, use);
          w = aligned_token_law(table, dist0, use, prf_r(code));
          break;
        }
        case Strategy::kIts: {
          w.assign(vocab, 0.0);
          w[its_sample(dist0, code)] = 1.0;
          break;
        }
        case Strategy::kKgw: {
          auto p = kgw_reweight(dist0, code, m.delta, m.gamma);
          w.assign(p.values().begin(), p.values().end());
          break;
        }
        case Strategy::kUnigram: {
          auto p = unigram_reweight(dist0, key, m.delta, m.gamma);
          w.assign(p.values().begin(), p.values().end());
          break;
        }
        case Strategy::kDipmark:
        case Strategy::kGammaReweight: {
          auto p = dipmark_reweight(dist0, code, m.strategy == Strategy::kDipmark ? m.alpha : 0.5);
          w.assign(p.values().begin(), p.values().end());
          break;
        }
      }
      for (std::size_t t = 0; t < vocab; ++t) {
        avg[t] += w[t] / static_cast<double>(keys);
        sq[t] += w[t] * w[t] / static_cast<double>(keys);
      }
    }
    mc[idx].tv = tv_distance(avg, dist0.values());
    // Standard error of the key average, summed like a TV distance. A
    // distortion-free method stays within a few of these of zero; the
    // green-list bias is second order on flat contexts, which is why the
    // exact small-vocabulary enumeration above is the decisive check.
    for (std::size_t t = 0; t < vocab; ++t) {
      const double var = std::max(0.0, sq[t] - avg[t] * avg[t]);
      mc[idx].noise += 0.5 * std::sqrt(var / static_cast<double>(keys));
    }
  });
  report["monte_carlo"] = nlohmann::json::array();
  for (const auto& row : mc) {
    report["monte_carlo"].push_back({{"method", to_string(row.method.strategy)},
                                     {"params", row.method.params()},
                                     {"keys", keys},
                                     {"tv", row.tv},
                                     {"noise_scale", row.noise},
                                     {"biased", row.tv > 3.0 * row.noise},
                                     {"expected_biased", !row.method.distortion_free()}});
  }

  // First-step frequencies of the generator over independent keys.
  report["generator"] = nlohmann::json::array();
  for (const auto& m : cfg.methods) {
    if (!m.distortion_free()) continue;
    const ClusterMap* mmap = m.strategy == Strategy::kAlignedIs ? &setup.clusters(m.h) : nullptr;
    std::vector<double> counts(vocab, 0.0);
    std::mutex mu;
    parallel_for(keys, cfg.threads, [&](std::size_t k) {
      GenerationSession s(WatermarkKey(cfg.key).derive(k), m, cfg.ngram_n,
                          derive_seed(cfg.seed, kGenerateStream, k), mmap);
      TokenSeq out = generate(model, ctx0_span, 1, s);
      std::lock_guard<std::mutex> lock(mu);
      counts[out[0]] += 1.0;
    });
    auto chi = chi_square_gof(counts, dist0.values());
    report["generator"].push_back({{"method", to_string(m.strategy)},
                                   {"keys", keys},
                                   {"chi_square", chi.statistic},
                                   {"dof", chi.dof},
                                   {"p_value", chi.p_value},
                                   {"pass_at_1pct", chi.p_value >= 0.01}});
  }
  return report;
}

}  // namespace alignedis

#endif  // ALIGNEDIS_HARNESS_HPP_
