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

// On-disk formats for cluster maps (JSON) and token embeddings (CSV or the
// little-endian "AQEM" binary layout).

#ifndef ALIGNEDIS_CLUSTER_IO_HPP_
#define ALIGNEDIS_CLUSTER_IO_HPP_

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "alignedis/clustering.hpp"
#include "alignedis/core.hpp"

namespace alignedis {

inline nlohmann::json cluster_map_to_json(const ClusterMap& map) {
  nlohmann::json j;
  j["h"] = map.h();
  j["n_tokens"] = map.n_tokens();
  j["assignment"] = std::vector<std::uint32_t>(map.assignment().begin(), map.assignment().end());
  j["centroids"] = map.centroids();
  j["metric"] = "euclidean";
  j["seed"] = map.seed();
  return j;
}

namespace detail {

inline bool is_index(const nlohmann::json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

inline const nlohmann::json& require(const nlohmann::json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end()) throw ParseError(std::string("cluster map: missing field '") + field + "'");
  return *it;
}

}  // namespace detail

inline ClusterMap cluster_map_from_json(const nlohmann::json& j) {
  using detail::require;
  if (!j.is_object()) throw ParseError("cluster map: top level must be a JSON object");
  const auto& jh = require(j, "h");
  const auto& jn = require(j, "n_tokens");
  const auto& ja = require(j, "assignment");
  const auto& jc = require(j, "centroids");
  if (!detail::is_index(jh) || jh.get<std::size_t>() < 1) {
    throw ParseError("cluster map: field 'h' must be a positive integer");
  }
  if (!detail::is_index(jn)) throw ParseError("cluster map: field 'n_tokens' must be an integer");
  if (!ja.is_array()) throw ParseError("cluster map: field 'assignment' must be an array");
  if (!jc.is_array()) throw ParseError("cluster map: field 'centroids' must be an array");
  if (auto m = j.find("metric"); m != j.end() && *m != "euclidean") {
    throw ParseError("cluster map: field 'metric' must be \"euclidean\"");
  }
  const auto h = jh.get<std::size_t>();
  const auto n = jn.get<std::size_t>();
  if (ja.size() != n) {
    throw ParseError("cluster map: field 'assignment' has " + std::to_string(ja.size()) +
                     " entries, expected n_tokens = " + std::to_string(n));
  }
  std::vector<std::uint32_t> assignment;
  assignment.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!detail::is_index(ja[i]) || ja[i].get<std::uint64_t>() >= h) {
      throw ParseError("cluster map: assignment[" + std::to_string(i) + "] = " + ja[i].dump() +
                       " is not a cluster index below h = " + std::to_string(h));
    }
    assignment.push_back(ja[i].get<std::uint32_t>());
  }
  if (jc.size() != h) {
    throw ParseError("cluster map: field 'centroids' has " + std::to_string(jc.size()) +
                     " rows, expected h = " + std::to_string(h));
  }
  std::vector<std::vector<double>> centroids;
  for (std::size_t c = 0; c < h; ++c) {
    if (!jc[c].is_array() || jc[c].empty()) {
      throw ParseError("cluster map: centroids[" + std::to_string(c) + "] must be a non-empty array");
    }
    std::vector<double> row;
    for (const auto& v : jc[c]) {
      if (!v.is_number()) {
        throw ParseError("cluster map: centroids[" + std::to_string(c) + "] has a non-numeric entry");
      }
      row.push_back(v.get<double>());
    }
    centroids.push_back(std::move(row));
  }
  std::uint64_t seed = 0;
  if (auto s = j.find("seed"); s != j.end()) {
    if (!detail::is_index(*s)) throw ParseError("cluster map: field 'seed' must be an integer");
    seed = s->get<std::uint64_t>();
  }
  try {
    return ClusterMap(h, std::move(assignment), std::move(centroids), seed);
  } catch (const InvalidArgument& e) {
    throw ParseError(std::string("cluster map: ") + e.what());
  }
}

inline void save_cluster_map(const ClusterMap& map, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << cluster_map_to_json(map).dump(1) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline ClusterMap load_cluster_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return cluster_map_from_json(j);
}

// ---------------------------------------------------------------------------
// Embeddings.

inline constexpr char kEmbeddingMagic[4] = {'A', 'Q', 'E', 'M'};

namespace detail {

inline std::uint32_t read_le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void write_le32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

/// 16-byte header {"AQEM", u32 N, u32 d, u32 reserved} then N*d f32, all
/// little-endian.
inline EmbeddingMatrix read_embeddings_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  unsigned char header[16];
  if (!in.read(reinterpret_cast<char*>(header), 16)) {
    throw ParseError(path.string() + ": truncated embedding header");
  }
  if (std::memcmp(header, kEmbeddingMagic, 4) != 0) {
    throw ParseError(path.string() + ": bad magic, expected AQEM");
  }
  const std::uint32_t n = detail::read_le32(header + 4);
  const std::uint32_t d = detail::read_le32(header + 8);
  if (n == 0 || d == 0) throw ParseError(path.string() + ": N and d must be positive");
  std::vector<double> data(static_cast<std::size_t>(n) * d);
  std::vector<unsigned char> raw(data.size() * 4);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw ParseError(path.string() + ": expected " + std::to_string(data.size()) + " floats");
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = static_cast<double>(std::bit_cast<float>(detail::read_le32(raw.data() + 4 * i)));
  }
  return EmbeddingMatrix(n, d, std::move(data));
}

inline void write_embeddings_binary(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kEmbeddingMagic, 4);
  detail::write_le32(out, static_cast<std::uint32_t>(m.rows()));
  detail::write_le32(out, static_cast<std::uint32_t>(m.dim()));
  detail::write_le32(out, 0);
  for (double v : m.data()) detail::write_le32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!out) throw IoError("failed writing " + path.string());
}

/// One row per token, comma-separated reals. Blank lines are skipped.
inline EmbeddingMatrix read_embeddings_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<double> data;
  std::size_t dim = 0;
  std::size_t rows = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t cols = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        data.push_back(std::stod(cell, &used));
        if (cell.find_first_not_of(" \t\r", used) != std::string::npos) throw std::invalid_argument("");
      } catch (const std::exception&) {
        throw ParseError(path.string() + ":" + std::to_string(lineno) + ": column " +
                         std::to_string(cols + 1) + " is not a number");
      }
      ++cols;
    }
    if (dim == 0) dim = cols;
    if (cols != dim) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                       std::to_string(dim) + " columns, got " + std::to_string(cols));
    }
    ++rows;
  }
  if (rows == 0) throw ParseError(path.string() + ": no embedding rows");
  return EmbeddingMatrix(rows, dim, std::move(data));
}

/// Dispatches on the first four bytes: AQEM -> binary, otherwise CSV.
inline EmbeddingMatrix read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() == 4 && std::memcmp(magic, kEmbeddingMagic, 4) == 0) {
    return read_embeddings_binary(path);
  }
  return read_embeddings_csv(path);
}

}  // namespace alignedis

#endif  // ALIGNEDIS_CLUSTER_IO_HPP_
