#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "noisetrap/error.hpp"

namespace noisetrap::harness {

/// Shortest-ish stable rendering: %.10g, empty for NaN (missing value).
inline std::string fmt_num(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_num(*v) : std::string(); }

/// Builds a CSV in memory; the header is fixed at construction.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  CsvTable& row(std::vector<std::string> cells) {
    if (cells.size() != header_.size()) {
      throw invalid_argument("CSV row has " + std::to_string(cells.size()) + " cells, header has " +
                             std::to_string(header_.size()));
    }
    rows_.push_back(std::move(cells));
    return *this;
  }

  std::string str() const {
    std::ostringstream out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
      out << '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out.str();
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

struct CsvData {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    return std::nullopt;
  }

  static double number(const std::string& cell) {
    if (cell.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw corrupt_file("non-numeric CSV cell '" + cell + "'");
    return v;
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline CsvData read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw invalid_argument("cannot open CSV " + path.string());
  CsvData d;
  std::string line;
  if (!std::getline(in, line)) throw corrupt_file("CSV " + path.string() + " has no header");
  d.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != d.header.size()) throw corrupt_file("CSV " + path.string() + " has a ragged row");
    d.rows.push_back(std::move(cells));
  }
  return d;
}

}  // namespace noisetrap::harness
