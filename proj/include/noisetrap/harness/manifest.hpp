#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "noisetrap/error.hpp"
#include "noisetrap/rng.hpp"

namespace noisetrap::harness {

inline constexpr const char* kCodeVersion = "noisetrap 0.1.0";
inline constexpr const char* kHashAlgorithm = "SHA-256";
inline constexpr const char* kManifestFile = "manifest.json";

/// Incremental SHA-256 on top of OpenSSL's EVP interface.
class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
      throw std::runtime_error("SHA-256 initialisation failed");
    }
  }

  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw std::runtime_error("SHA-256 update failed");
  }
  void update(std::string_view s) { update(s.data(), s.size()); }

  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md.data(), &len) != 1) throw std::runtime_error("SHA-256 final failed");
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += digits[md[i] >> 4];
      out += digits[md[i] & 0xF];
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view s) {
  Sha256 h;
  h.update(s);
  return h.hex();
}

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw invalid_argument("cannot hash missing file " + path.string());
  Sha256 h;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct FileEntry {
  std::string path;  // relative to the run directory, '/'-separated
  std::string sha256;
  std::uint64_t bytes = 0;

  bool operator==(const FileEntry&) const = default;
};

/// Record of one experiment execution. Timestamps vary between runs; the
/// content digest covers only the produced files, so identical reruns of a
/// deterministic experiment share it.
struct RunManifest {
  std::string experiment;
  std::uint64_t seed = 0;
  std::string config;  // canonical serialized config
  std::string prng_name = std::string(Rng::name);
  std::string code_version = kCodeVersion;
  std::string hash_algorithm = kHashAlgorithm;
  std::string started_at;
  std::string finished_at;
  std::string status = "running";  // ok | checks_failed | failed
  std::string error;
  std::map<std::string, bool> checks;
  nlohmann::json summary = nlohmann::json::object();
  std::vector<FileEntry> files;

  bool ok() const { return status == "ok"; }

  const FileEntry* find(std::string_view rel) const {
    for (const auto& f : files) {
      if (f.path == rel) return &f;
    }
    return nullptr;
  }

  /// SHA-256 over "path\tsha256\n" lines in path order.
  std::string content_digest() const {
    std::vector<const FileEntry*> sorted;
    for (const auto& f : files) sorted.push_back(&f);
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->path < b->path; });
    Sha256 h;
    for (const auto* f : sorted) {
      h.update(f->path);
      h.update("\t");
      h.update(f->sha256);
      h.update("\n");
    }
    return h.hex();
  }

  nlohmann::json to_json() const {
    nlohmann::json files_j = nlohmann::json::array();
    for (const auto& f : files) files_j.push_back({{"path", f.path}, {"sha256", f.sha256}, {"bytes", f.bytes}});
    return {{"experiment", experiment},
            {"seed", seed},
            {"config", config},
            {"prng", prng_name},
            {"code_version", code_version},
            {"hash_algorithm", hash_algorithm},
            {"started_at", started_at},
            {"finished_at", finished_at},
            {"status", status},
            {"error", error},
            {"checks", checks},
            {"summary", summary},
            {"files", files_j},
            {"content_digest", content_digest()}};
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    try {
      m.experiment = j.at("experiment").get<std::string>();
      m.seed = j.at("seed").get<std::uint64_t>();
      m.config = j.at("config").get<std::string>();
      m.prng_name = j.at("prng").get<std::string>();
      m.code_version = j.at("code_version").get<std::string>();
      m.hash_algorithm = j.at("hash_algorithm").get<std::string>();
      m.started_at = j.at("started_at").get<std::string>();
      m.finished_at = j.at("finished_at").get<std::string>();
      m.status = j.at("status").get<std::string>();
      m.error = j.value("error", "");
      m.checks = j.value("checks", std::map<std::string, bool>{});
      m.summary = j.value("summary", nlohmann::json::object());
      for (const auto& f : j.at("files")) {
        m.files.push_back({f.at("path").get<std::string>(), f.at("sha256").get<std::string>(),
                           f.at("bytes").get<std::uint64_t>()});
      }
    } catch (const nlohmann::json::exception& e) {
      throw corrupt_file(std::string("malformed manifest: ") + e.what());
    }
    if (m.hash_algorithm != kHashAlgorithm) {
      throw unsupported("manifest hashed with " + m.hash_algorithm + ", expected " + kHashAlgorithm);
    }
    return m;
  }

  void save(const std::filesystem::path& dir) const {
    std::ofstream out(dir / kManifestFile);
    if (!out) throw invalid_argument("cannot write manifest in " + dir.string());
    out << to_json().dump(2) << '\n';
  }

  /// Accepts either the run directory or the manifest file itself.
  static RunManifest load(const std::filesystem::path& p) {
    const auto file = std::filesystem::is_directory(p) ? p / kManifestFile : p;
    std::ifstream in(file);
    if (!in) throw invalid_argument("cannot open manifest " + file.string());
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw corrupt_file("manifest " + file.string() + " is not valid JSON: " + e.what());
    }
  }
};

/// Writes files under one run directory and remembers what was produced.
/// Relative paths that climb out of the directory are refused.
class RunDir {
 public:
  explicit RunDir(std::filesystem::path root) : root_(std::move(root)) {
    std::filesystem::create_directories(root_);
  }

  const std::filesystem::path& root() const { return root_; }

  std::filesystem::path path_for(const std::string& rel) {
    const std::filesystem::path p = std::filesystem::path(rel).lexically_normal();
    if (p.empty() || p.is_absolute() || *p.begin() == "..") {
      throw invalid_argument("output path '" + rel + "' escapes the run directory");
    }
    if (rel == kManifestFile) throw invalid_argument("manifest.json is reserved");
    const auto full = root_ / p;
    std::filesystem::create_directories(full.parent_path());
    if (std::find(produced_.begin(), produced_.end(), p.generic_string()) == produced_.end()) {
      produced_.push_back(p.generic_string());
    }
    return full;
  }

  void write_text(const std::string& rel, std::string_view text) {
    std::ofstream out(path_for(rel), std::ios::binary);
    if (!out) throw invalid_argument("cannot write " + (root_ / rel).string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
  }

  /// Hashes every produced file that exists (partial outputs included).
  std::vector<FileEntry> hash_all() const {
    std::vector<FileEntry> out;
    for (const auto& rel : produced_) {
      const auto full = root_ / rel;
      if (!std::filesystem::exists(full)) continue;
      out.push_back({rel, sha256_file(full), static_cast<std::uint64_t>(std::filesystem::file_size(full))});
    }
    return out;
  }

 private:
  std::filesystem::path root_;
  std::vector<std::string> produced_;
};

}  // namespace noisetrap::harness
