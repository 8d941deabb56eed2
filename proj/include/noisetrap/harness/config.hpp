#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "noisetrap/error.hpp"

namespace noisetrap::harness {

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool valid_name(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
                    c == '-' || c == '.';
    if (!ok) return false;
  }
  return true;
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto piece = trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (!piece.empty()) out.emplace_back(piece);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace detail

/// Sectioned key = value text:
///
///   # comment
///   [section]
///   key = value
///
/// Keys outside any section are rejected. Lists are comma separated. The
/// serialized form is canonical (sorted sections and keys), so
/// parse(serialize(c)) == c for every config.
class Config {
 public:
  using Section = std::map<std::string, std::string>;

  static Config parse(std::string_view text, std::string_view origin = "<config>") {
    Config c;
    std::string section;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const auto nl = text.find('\n', pos);
      const auto raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
      pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
      ++line_no;
      const auto line = detail::trim(raw);
      if (line.empty() || line.front() == '#' || line.front() == ';') continue;
      auto fail = [&](const std::string& why) {
        throw invalid_argument(std::string(origin) + ":" + std::to_string(line_no) + ": " + why);
      };
      if (line.front() == '[') {
        if (line.back() != ']') fail("unterminated section header");
        section = std::string(detail::trim(line.substr(1, line.size() - 2)));
        if (!detail::valid_name(section)) fail("bad section name '" + section + "'");
        c.sections_[section];
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) fail("expected 'key = value'");
      if (section.empty()) fail("key outside any [section]");
      const std::string key(detail::trim(line.substr(0, eq)));
      if (!detail::valid_name(key)) fail("bad key name '" + key + "'");
      auto& sec = c.sections_[section];
      if (sec.count(key)) fail("duplicate key '" + section + "." + key + "'");
      sec[key] = std::string(detail::trim(line.substr(eq + 1)));
    }
    return c;
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw invalid_argument("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }

  std::string serialize() const {
    std::ostringstream out;
    bool first = true;
    for (const auto& [name, sec] : sections_) {
      if (!first) out << '\n';
      first = false;
      out << '[' << name << "]\n";
      for (const auto& [k, v] : sec) out << k << " = " << v << '\n';
    }
    return out.str();
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw invalid_argument("cannot write config file " + path.string());
    out << serialize();
  }

  bool operator==(const Config& o) const { return sections_ == o.sections_; }

  bool has(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    return it != sections_.end() && it->second.count(key);
  }

  void set(const std::string& section, const std::string& key, std::string value) {
    if (!detail::valid_name(section) || !detail::valid_name(key)) {
      throw invalid_argument("bad config name '" + section + "." + key + "'");
    }
    if (value.find('\n') != std::string::npos) throw invalid_argument("config values cannot span lines");
    sections_[section][key] = std::string(detail::trim(value));
  }

  /// Applies "section.key=value".
  void apply_override(std::string_view assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string_view::npos || dot == std::string_view::npos || dot > eq) {
      throw invalid_argument("override must look like section.key=value, got '" + std::string(assignment) + "'");
    }
    set(std::string(detail::trim(assignment.substr(0, dot))),
        std::string(detail::trim(assignment.substr(dot + 1, eq - dot - 1))), std::string(assignment.substr(eq + 1)));
  }

  const std::map<std::string, Section>& sections() const { return sections_; }

  // Typed getters. Each records the key as consumed so leftovers can be flagged.

  std::string get(const std::string& section, const std::string& key, const std::string& fallback) const {
    used_.insert({section, key});
    auto it = sections_.find(section);
    if (it == sections_.end()) return fallback;
    auto kv = it->second.find(key);
    return kv == it->second.end() ? fallback : kv->second;
  }

  double get_double(const std::string& section, const std::string& key, double fallback) const {
    if (!present(section, key)) return fallback;
    return to_double(get(section, key, ""), section + "." + key);
  }

  std::uint64_t get_u64(const std::string& section, const std::string& key, std::uint64_t fallback) const {
    if (!present(section, key)) return fallback;
    return to_u64(get(section, key, ""), section + "." + key);
  }

  bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
    if (!present(section, key)) return fallback;
    const auto v = get(section, key, "");
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw invalid_argument(section + "." + key + ": expected a boolean, got '" + v + "'");
  }

  std::vector<double> get_doubles(const std::string& section, const std::string& key,
                                  std::vector<double> fallback) const {
    if (!present(section, key)) return fallback;
    std::vector<double> out;
    for (const auto& s : detail::split_list(get(section, key, ""))) out.push_back(to_double(s, section + "." + key));
    if (out.empty()) throw invalid_argument(section + "." + key + ": empty list");
    return out;
  }

  std::vector<std::uint64_t> get_u64s(const std::string& section, const std::string& key,
                                      std::vector<std::uint64_t> fallback) const {
    if (!present(section, key)) return fallback;
    std::vector<std::uint64_t> out;
    for (const auto& s : detail::split_list(get(section, key, ""))) out.push_back(to_u64(s, section + "." + key));
    if (out.empty()) throw invalid_argument(section + "." + key + ": empty list");
    return out;
  }

  /// Keys present in the file but never read; a typo guard run after parsing.
  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [s, sec] : sections_) {
      for (const auto& [k, v] : sec) {
        if (!used_.count({s, k})) out.push_back(s + "." + k);
      }
    }
    return out;
  }

  void reject_unused(std::string_view context) const {
    const auto extra = unused_keys();
    if (extra.empty()) return;
    std::string msg = std::string(context) + ": unknown config key(s):";
    for (const auto& k : extra) msg += " " + k;
    throw invalid_argument(msg);
  }

  static double to_double(std::string_view s, const std::string& what) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
      throw invalid_argument(what + ": expected a number, got '" + std::string(s) + "'");
    }
    return v;
  }

  static std::uint64_t to_u64(std::string_view s, const std::string& what) {
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
      throw invalid_argument(what + ": expected a non-negative integer, got '" + std::string(s) + "'");
    }
    return v;
  }

 private:
  bool present(const std::string& section, const std::string& key) const {
    used_.insert({section, key});
    return has(section, key);
  }

  std::map<std::string, Section> sections_;
  mutable std::set<std::pair<std::string, std::string>> used_;
};

}  // namespace noisetrap::harness
