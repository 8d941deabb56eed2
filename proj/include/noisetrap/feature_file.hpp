#pragma once

#include <bit>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "noisetrap/error.hpp"

namespace noisetrap {

/// Features and labels exchanged between the language model and probe heads.
///
/// File layout: an ASCII header line "d=<int> C=<int> n=<int>\n", then n*d
/// little-endian float32 values row-major, then n little-endian uint16 labels.
struct FeatureTable {
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  std::vector<std::vector<double>> features;
  std::vector<std::uint32_t> labels;
};

inline void write_feature_file(const std::filesystem::path& path, const FeatureTable& t) {
  if (t.features.size() != t.labels.size()) throw invalid_argument("feature/label count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw invalid_argument("cannot write feature file " + path.string());
  out << "d=" << t.dim << " C=" << t.num_classes << " n=" << t.features.size() << "\n";
  for (const auto& row : t.features) {
    if (row.size() != t.dim) throw invalid_argument("feature row has wrong dimension");
    for (double v : row) {
      const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      const char b[4] = {static_cast<char>(u), static_cast<char>(u >> 8), static_cast<char>(u >> 16),
                         static_cast<char>(u >> 24)};
      out.write(b, 4);
    }
  }
  for (auto y : t.labels) {
    if (y >= 65536 || y >= t.num_classes) throw invalid_argument("label out of range for feature file");
    const char b[2] = {static_cast<char>(y & 0xFF), static_cast<char>(y >> 8)};
    out.write(b, 2);
  }
}

inline FeatureTable read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw invalid_argument("cannot open feature file " + path.string());
  std::string header;
  std::getline(in, header);
  FeatureTable t;
  std::size_t n = 0;
  if (std::sscanf(header.c_str(), "d=%zu C=%zu n=%zu", &t.dim, &t.num_classes, &n) != 3) {
    throw corrupt_file("feature file header malformed: '" + header + "'");
  }
  t.features.assign(n, std::vector<double>(t.dim));
  unsigned char b[4];
  for (auto& row : t.features) {
    for (auto& v : row) {
      if (!in.read(reinterpret_cast<char*>(b), 4)) throw corrupt_file("feature file truncated");
      const std::uint32_t u = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
      v = static_cast<double>(std::bit_cast<float>(u));
    }
  }
  t.labels.resize(n);
  for (auto& y : t.labels) {
    if (!in.read(reinterpret_cast<char*>(b), 2)) throw corrupt_file("feature file label block truncated");
    y = static_cast<std::uint32_t>(b[0] | (b[1] << 8));
    if (y >= t.num_classes) throw corrupt_file("label outside declared class count");
  }
  return t;
}

}  // namespace noisetrap
