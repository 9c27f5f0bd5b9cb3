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

// Command-line front end: cluster fitting, single-sequence generate/detect
// and the experiment recipes.
//
// Exit codes: 0 success, 2 usage or validation error, 3 I/O error,
// 4 internal invariant violation.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "alignedis/alignedis.hpp"

namespace fs = std::filesystem;
using namespace alignedis;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitInternal = 4;

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> threads;
  std::string format = "csv";
  std::optional<std::size_t> trials;
  std::optional<std::size_t> seq_len;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw IoError("cannot write '" + path.string() + "'");
}

ExperimentConfig load_config(const GlobalOptions& g) {
  nlohmann::json j = nlohmann::json::object();
  if (!g.config_path.empty()) {
    const std::string text = read_file(g.config_path);
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("config '" + g.config_path + "': " + e.what());
    }
  }
  ExperimentConfig cfg = config_from_json(j);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out.empty()) cfg.output = g.out;
  if (g.threads) cfg.threads = *g.threads;
  if (g.trials) cfg.trials = *g.trials;
  if (g.seq_len) cfg.seq_len = *g.seq_len;
  try {
    cfg.validate();
  } catch (const InvalidArgument& e) {
    throw ParseError(e.what());
  }
  return cfg;
}

TokenSeq read_tokens(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open token file '" + path.string() + "'");
  TokenSeq tokens;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    const std::string field = line.substr(first, last - first + 1);
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(field, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != field.size() || field[0] == '-' || v > 0xffffffffULL) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": '" + field +
                       "' is not a token id");
    }
    tokens.push_back(static_cast<TokenId>(v));
  }
  return tokens;
}

void write_tokens(const fs::path& path, std::span<const TokenId> tokens) {
  std::ostringstream ss;
  for (TokenId t : tokens) ss << t << '\n';
  write_file(path, ss.str());
}

void emit_table(const ResultTable& table, const ExperimentConfig& cfg, const std::string& name,
                const std::string& format) {
  const fs::path dir(cfg.output);
  if (format == "json") {
    nlohmann::json j = table.to_json();
    j["experiment"] = name;
    j["config"] = config_to_json(cfg);
    write_file(dir / (name + ".json"), j.dump(2) + "\n");
    std::cout << (dir / (name + ".json")).string() << '\n';
  } else {
    std::ostringstream ss;
    table.write_csv(ss);
    write_file(dir / (name + ".csv"), ss.str());
    std::cout << ss.str();
  }
}

ClusterMap cluster_map_for(ExperimentSetup& setup, const std::string& path, std::size_t h) {
  if (!path.empty()) return load_cluster_map(path);
  return setup.clusters(h);
}

int run(int argc, char** argv) {
  CLI::App app{"Aligned inverse sampling watermark toolkit"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config_path, "JSON experiment config");
  app.add_option("--seed", g.seed, "master seed (overrides config)");
  app.add_option("--out", g.out, "output directory (overrides config)");
  app.add_option("--threads", g.threads, "worker threads, 0 = all cores");
  app.add_option("--format", g.format, "table output format")
      ->check(CLI::IsMember({"csv", "json"}));
  app.add_option("--trials", g.trials, "trials per cell (overrides config)");
  app.add_option("--seq-len", g.seq_len, "generated tokens per trial (overrides config)");

  // cluster
  auto* cluster = app.add_subcommand("cluster", "fit and save a cluster map");
  std::string cluster_out;
  std::optional<std::size_t> cluster_h;
  cluster->add_option("--cluster-map", cluster_out, "output path (default <out>/cluster_map.json)");
  cluster->add_option("--clusters", cluster_h, "number of clusters (overrides config)");

  // generate
  auto* gen = app.add_subcommand("generate", "generate one watermarked sequence");
  std::string gen_key;
  std::string gen_tokens;
  std::string gen_map;
  std::string gen_strategy;
  std::optional<std::size_t> gen_length;
  gen->add_option("--key", gen_key, "secret key")->required();
  gen->add_option("--tokens", gen_tokens, "output token file (default <out>/tokens.txt)");
  gen->add_option("--cluster-map", gen_map, "cluster map (default: fit from config)");
  gen->add_option("--strategy", gen_strategy, "reweight strategy (overrides config)");
  gen->add_option("--length", gen_length, "tokens to generate (default seq_len)");

  // detect
  auto* det = app.add_subcommand("detect", "detect a watermark in a token file");
  std::string det_key;
  std::string det_tokens;
  std::string det_map;
  std::string det_strategy;
  std::optional<double> det_fpr;
  bool det_trace = false;
  det->add_option("--key", det_key, "secret key")->required();
  det->add_option("--tokens", det_tokens, "token file")->required();
  det->add_option("--cluster-map", det_map, "cluster map (default: fit from config)");
  det->add_option("--strategy", det_strategy, "reweight strategy (overrides config)");
  det->add_option("--fpr", det_fpr, "target false positive rate (default first of fpr_grid)");
  det->add_flag("--trace", det_trace, "include the per-step trace");

  auto* audit = app.add_subcommand("audit-distortion", "distortion-freeness audit");
  auto* audit_fpr = app.add_subcommand("audit-fpr", "null calibration of the aligned detector");
  std::size_t audit_sequences = 10000;
  std::string audit_corpus = "model";
  audit_fpr->add_option("--sequences", audit_sequences, "unwatermarked sequences");
  audit_fpr->add_option("--corpus", audit_corpus, "null corpus: model output or iid tokens")
      ->check(CLI::IsMember({"model", "iid"}));
  auto* detectability = app.add_subcommand("run-detectability", "TPR sweep over methods");
  auto* robustness = app.add_subcommand("run-robustness", "attack sweep over methods");
  auto* ablate = app.add_subcommand("ablate-h", "cluster-count ablation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  ExperimentConfig cfg = load_config(g);
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  if (*cluster) {
    KMeansOptions opts = cfg.cluster;
    if (cluster_h) opts.h = *cluster_h;
    KMeansTrace trace;
    std::optional<ClusterMap> map;
    std::optional<EmbeddingMatrix> emb;
    if (!cfg.embeddings_path.empty()) {
      emb = read_embeddings(cfg.embeddings_path);
    } else {
      emb = SyntheticModel(cfg.model).embeddings();
    }
    map = kmeans_fit(*emb, opts, &trace);
    const fs::path path = cluster_out.empty() ? fs::path(cfg.output) / "cluster_map.json" : fs::path(cluster_out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    save_cluster_map(*map, path);
    std::cout << "wrote " << path.string() << "\n"
              << "iterations " << trace.iterations << (trace.converged ? " (converged)" : "") << "\n"
              << "inertia " << format_number(inertia(*emb, map->assignment(), map->centroids())) << "\n"
              << "sizes";
    for (std::size_t c = 0; c < map->h(); ++c) std::cout << ' ' << map->members(static_cast<std::uint32_t>(c)).size();
    std::cout << '\n';
    return 0;
  }

  ReweightConfig wm = cfg.watermark;
  const std::string& strategy_flag = *gen ? gen_strategy : det_strategy;
  if (!strategy_flag.empty()) {
    wm.strategy = strategy_from_string(strategy_flag);
    if (wm.strategy == Strategy::kGammaReweight) wm.alpha = 0.5;
  }

  if (*gen) {
    ExperimentSetup setup(cfg);
    std::optional<ClusterMap> map;
    if (wm.strategy == Strategy::kAlignedIs) {
      map = cluster_map_for(setup, gen_map, wm.h);
      wm.h = map->h();
    }
    GenerationSession session(WatermarkKey(gen_key), wm, cfg.ngram_n,
                              derive_seed(cfg.seed, kGenerateStream, 0), map ? &*map : nullptr);
    const TokenSeq prompt = setup.prompt(0);
    TokenSeq all = prompt;
    const TokenSeq tail = generate(setup.model(), prompt, gen_length.value_or(cfg.seq_len), session);
    all.insert(all.end(), tail.begin(), tail.end());
    const fs::path path = gen_tokens.empty() ? fs::path(cfg.output) / "tokens.txt" : fs::path(gen_tokens);
    write_tokens(path, all);
    std::cout << "wrote " << all.size() << " tokens to " << path.string() << '\n';
    return 0;
  }

  if (*det) {
    const TokenSeq tokens = read_tokens(det_tokens);
    std::optional<ClusterMap> map;
    if (wm.strategy == Strategy::kAlignedIs) {
      if (!det_map.empty()) {
        map = load_cluster_map(det_map);
      } else {
        // Only the embeddings are needed to refit the clusters.
        KMeansOptions opts = cfg.cluster;
        opts.h = wm.h;
        map = kmeans_fit(SyntheticModel(cfg.model).embeddings(), opts);
      }
      wm.h = map->h();
    }
    DetectOptions opts = cfg.detect;
    opts.keep_trace = det_trace;
    const std::size_t vocab = map ? map->n_tokens() : cfg.model.vocab_size;
    const auto report = detect(tokens, WatermarkKey(det_key), wm, map ? &*map : nullptr, vocab,
                               cfg.ngram_n, det_fpr.value_or(cfg.fpr_grid.front()), opts);
    std::cout << to_json(report, det_trace).dump(2) << '\n';
    return 0;
  }

  ExperimentSetup setup(cfg);
  if (*audit) {
    nlohmann::json report = run_distortion_audit(setup);
    report["elapsed_s"] = elapsed();
    write_file(fs::path(cfg.output) / "distortion_audit.json", report.dump(2) + "\n");
    std::cout << report.dump(2) << '\n';
    return 0;
  }
  if (*audit_fpr) {
    nlohmann::json report = run_fpr_audit(setup, audit_sequences,
                                                audit_corpus == "iid" ? NullCorpus::kIid : NullCorpus::kModel).to_json();
    report["elapsed_s"] = elapsed();
    write_file(fs::path(cfg.output) / "fpr_audit.json", report.dump(2) + "\n");
    std::cout << report.dump(2) << '\n';
    return 0;
  }
  if (*detectability) {
    emit_table(run_detectability(setup), cfg, "detectability", g.format);
  } else if (*robustness) {
    emit_table(run_robustness(setup), cfg, "robustness", g.format);
  } else if (*ablate) {
    emit_table(run_ablation_h(setup), cfg, "ablation_h", g.format);
  }
  std::cerr << "elapsed " << format_number(elapsed()) << " s\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const InvariantViolation& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}
