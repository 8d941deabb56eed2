#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "noisetrap/error.hpp"
#include "noisetrap/rng.hpp"

namespace noisetrap::corpus {

using token_t = std::uint32_t;

enum class Origin { clean, uniform_noise, gaussian_noise, mixed };

inline std::string_view to_string(Origin o) {
  switch (o) {
    case Origin::clean: return "clean";
    case Origin::uniform_noise: return "uniform_noise";
    case Origin::gaussian_noise: return "gaussian_noise";
    case Origin::mixed: return "mixed";
  }
  return "clean";
}

inline Origin parse_origin(std::string_view s) {
  if (s == "clean") return Origin::clean;
  if (s == "uniform_noise") return Origin::uniform_noise;
  if (s == "gaussian_noise") return Origin::gaussian_noise;
  if (s == "mixed") return Origin::mixed;
  throw invalid_argument("unknown corpus origin '" + std::string(s) + "'");
}

enum class NoiseKind { uniform, gaussian };

inline std::string_view to_string(NoiseKind k) {
  return k == NoiseKind::uniform ? "uniform" : "gaussian";
}

inline NoiseKind parse_noise_kind(std::string_view s) {
  if (s == "uniform") return NoiseKind::uniform;
  if (s == "gaussian") return NoiseKind::gaussian;
  throw invalid_argument("noise kind must be uniform|gaussian, got '" + std::string(s) + "'");
}

/// Generation metadata carried alongside the tokens and written to the sidecar.
struct CorpusMeta {
  std::optional<double> alpha;
  std::optional<double> mu;
  std::optional<double> sigma;
  std::optional<std::uint64_t> seed;
  std::string prng_name;
  // First index of the noise segment for mixed corpora (== clean length).
  std::optional<std::size_t> noise_begin;
};

/// A finite token sequence over the vocabulary [0, vocab_size).
struct TokenCorpus {
  std::uint32_t vocab_size = 0;
  std::vector<token_t> tokens;
  Origin origin = Origin::clean;
  CorpusMeta meta;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }

  /// Half-open index range of the noise segment; empty for clean corpora.
  std::pair<std::size_t, std::size_t> noise_range() const {
    switch (origin) {
      case Origin::clean: return {size(), size()};
      case Origin::uniform_noise:
      case Origin::gaussian_noise: return {0, size()};
      case Origin::mixed: return {meta.noise_begin.value_or(size()), size()};
    }
    return {size(), size()};
  }

  void validate() const {
    detail::require(vocab_size >= 1, "corpus vocab_size must be positive");
    for (token_t t : tokens) {
      if (t >= vocab_size) {
        throw invalid_argument("token " + std::to_string(t) + " outside vocabulary of size " +
                               std::to_string(vocab_size));
      }
    }
  }
};

struct NoiseSpec {
  NoiseKind kind = NoiseKind::uniform;
  double alpha = 0.05;
  double mu = 0.0;
  double sigma = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(alpha >= 0.0 && alpha < 1.0, "noise alpha must lie in [0, 1)");
    if (kind == NoiseKind::gaussian) {
      detail::require(sigma > 0.0 && std::isfinite(sigma), "gaussian noise sigma must be > 0");
      detail::require(std::isfinite(mu), "gaussian noise mu must be finite");
    }
  }

  /// Default ratios for a vocabulary: mu at the centre, sigma = V/100.
  static NoiseSpec gaussian_for(std::uint32_t vocab_size, double alpha, std::uint64_t seed) {
    return {NoiseKind::gaussian, alpha, (vocab_size - 1.0) / 2.0, vocab_size / 100.0, seed};
  }
};

inline TokenCorpus gen_uniform_noise(std::uint32_t vocab_size, std::size_t count,
                                     std::uint64_t seed) {
  detail::require(vocab_size >= 1, "gen_uniform_noise: vocab_size must be >= 1");
  detail::require(count >= 1, "gen_uniform_noise: count must be >= 1");
  Rng rng(seed);
  TokenCorpus out;
  out.vocab_size = vocab_size;
  out.origin = Origin::uniform_noise;
  out.tokens.resize(count);
  for (auto& t : out.tokens) t = static_cast<token_t>(rng.uniform_index(vocab_size));
  out.meta.seed = seed;
  out.meta.prng_name = Rng::name;
  return out;
}

/// clip(round(z), 0, V-1) with z ~ Normal(mu, sigma^2); rounding ties away from zero.
/// z is first quantized to multiples of 2^-20, so a vanishing sigma yields round(mu).
inline TokenCorpus gen_gaussian_noise(std::uint32_t vocab_size, std::size_t count, double mu,
                                      double sigma, std::uint64_t seed) {
  detail::require(sigma > 0.0 && std::isfinite(sigma), "gen_gaussian_noise: sigma must be > 0");
  detail::require(std::isfinite(mu), "gen_gaussian_noise: mu must be finite");
  detail::require(vocab_size >= 1, "gen_gaussian_noise: vocab_size must be >= 1");
  detail::require(count >= 1, "gen_gaussian_noise: count must be >= 1");
  Rng rng(seed);
  const double hi = static_cast<double>(vocab_size - 1);
  TokenCorpus out;
  out.vocab_size = vocab_size;
  out.origin = Origin::gaussian_noise;
  out.tokens.resize(count);
  for (auto& t : out.tokens) {
    // Snap to a 2^-20 grid first so samples within a hair of a .5 tie round as the tie.
    const double x = std::round((mu + sigma * rng.normal()) * 1048576.0) / 1048576.0;
    const double z = std::round(x);
    t = static_cast<token_t>(std::clamp(z, 0.0, hi));
  }
  out.meta.mu = mu;
  out.meta.sigma = sigma;
  out.meta.seed = seed;
  out.meta.prng_name = Rng::name;
  return out;
}

inline TokenCorpus gen_noise(const NoiseSpec& spec, std::uint32_t vocab_size, std::size_t count) {
  spec.validate();
  TokenCorpus out = spec.kind == NoiseKind::uniform
                        ? gen_uniform_noise(vocab_size, count, spec.seed)
                        : gen_gaussian_noise(vocab_size, count, spec.mu, spec.sigma, spec.seed);
  out.meta.alpha = spec.alpha;
  return out;
}

inline double noise_fraction(std::uint64_t clean_len, std::uint64_t noise_len) {
  detail::require(clean_len + noise_len >= 1, "noise_fraction: both lengths are zero");
  return static_cast<double>(noise_len) / static_cast<double>(clean_len + noise_len);
}

/// Noise length n with n / (n + clean_len) == alpha, i.e. ceil(alpha/(1-alpha) * clean_len).
/// A quotient within 1e-9 (relative) of an integer is taken as that integer, so
/// decimal alphas such as 0.05 are not pushed up by their binary representation.
inline std::uint64_t required_noise_length(std::uint64_t clean_len, double alpha) {
  detail::require(alpha >= 0.0 && alpha < 1.0, "alpha must lie in [0, 1)");
  const long double a = alpha;
  const long double x = a / (1.0L - a) * static_cast<long double>(clean_len);
  const long double nearest = std::round(x);
  if (std::fabs(x - nearest) <= 1e-9L * std::max(1.0L, x)) {
    return static_cast<std::uint64_t>(nearest);
  }
  return static_cast<std::uint64_t>(std::ceil(x));
}

/// Concatenate clean then noise (noise is appended, never interleaved).
inline TokenCorpus mix_corpora(const TokenCorpus& clean, const TokenCorpus& noise) {
  if (clean.vocab_size != noise.vocab_size) {
    throw invalid_argument("mix_corpora: vocabulary mismatch (" +
                           std::to_string(clean.vocab_size) + " vs " +
                           std::to_string(noise.vocab_size) + ")");
  }
  TokenCorpus out;
  out.vocab_size = clean.vocab_size;
  out.origin = Origin::mixed;
  out.tokens.reserve(clean.size() + noise.size());
  out.tokens = clean.tokens;
  out.tokens.insert(out.tokens.end(), noise.tokens.begin(), noise.tokens.end());
  out.meta = noise.meta;
  if (clean.size() + noise.size() > 0) {
    out.meta.alpha = noise_fraction(clean.size(), noise.size());
  }
  out.meta.noise_begin = clean.size();
  if (out.meta.prng_name.empty()) out.meta.prng_name = std::string(Rng::name);
  return out;
}

/// Build D_m for a target alpha: generate the required amount of noise and append it.
inline TokenCorpus make_mixed(const TokenCorpus& clean, const NoiseSpec& spec) {
  spec.validate();
  const std::uint64_t n = required_noise_length(clean.size(), spec.alpha);
  if (n == 0) {
    TokenCorpus out = clean;
    out.origin = Origin::mixed;
    out.meta = {};
    out.meta.alpha = 0.0;
    out.meta.noise_begin = clean.size();
    out.meta.seed = spec.seed;
    out.meta.prng_name = Rng::name;
    return out;
  }
  return mix_corpora(clean, gen_noise(spec, clean.vocab_size, n));
}

/// B x L next-token windows, stored row-major.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t context_len = 0;
  std::vector<token_t> inputs;
  std::vector<token_t> targets;
  std::vector<std::size_t> offsets;

  token_t input(std::size_t b, std::size_t j) const { return inputs[b * context_len + j]; }
  token_t target(std::size_t b, std::size_t j) const { return targets[b * context_len + j]; }
};

inline Batch batch_from_offsets(const TokenCorpus& corpus, std::size_t L,
                                std::vector<std::size_t> offsets) {
  Batch batch;
  batch.batch_size = offsets.size();
  batch.context_len = L;
  batch.inputs.resize(offsets.size() * L);
  batch.targets.resize(offsets.size() * L);
  for (std::size_t b = 0; b < offsets.size(); ++b) {
    const std::size_t i = offsets[b];
    if (i + L + 1 > corpus.size()) throw invalid_argument("window crosses the corpus end");
    std::copy_n(corpus.tokens.begin() + static_cast<std::ptrdiff_t>(i), L,
                batch.inputs.begin() + static_cast<std::ptrdiff_t>(b * L));
    std::copy_n(corpus.tokens.begin() + static_cast<std::ptrdiff_t>(i + 1), L,
                batch.targets.begin() + static_cast<std::ptrdiff_t>(b * L));
  }
  batch.offsets = std::move(offsets);
  return batch;
}

/// Offsets uniform on [0, |corpus| - L - 1], drawn independently (repeats allowed).
inline Batch sample_batch(const TokenCorpus& corpus, std::size_t L, std::size_t B, Rng& rng) {
  detail::require(L >= 1 && B >= 1, "sample_batch: L and B must be positive");
  if (corpus.size() < L + 1) {
    throw invalid_argument("sample_batch: corpus of length " + std::to_string(corpus.size()) +
                           " is shorter than L+1 = " + std::to_string(L + 1));
  }
  const std::uint64_t n_offsets = corpus.size() - L;
  std::vector<std::size_t> offsets(B);
  for (auto& o : offsets) o = static_cast<std::size_t>(rng.uniform_index(n_offsets));
  return batch_from_offsets(corpus, L, std::move(offsets));
}

/// Offsets of windows (input and target) lying entirely inside [begin, end).
inline std::vector<std::size_t> windows_inside(std::size_t begin, std::size_t end, std::size_t L,
                                               std::size_t count, Rng& rng) {
  if (end < begin || end - begin < L + 1) return {};
  const std::uint64_t n_offsets = end - begin - L;
  std::vector<std::size_t> out(count);
  for (auto& o : out) o = begin + static_cast<std::size_t>(rng.uniform_index(n_offsets));
  return out;
}

/// Non-overlapping tiling of [begin, end) by windows of length L (+1 target).
inline std::vector<std::size_t> tiled_windows(std::size_t begin, std::size_t end, std::size_t L,
                                              std::size_t max_count) {
  std::vector<std::size_t> out;
  for (std::size_t i = begin; i + L + 1 <= end && out.size() < max_count; i += L) out.push_back(i);
  return out;
}

/// Split off the trailing `fraction` of a corpus (e.g. a validation set).
inline std::pair<TokenCorpus, TokenCorpus> split_tail(const TokenCorpus& corpus, double fraction) {
  detail::require(fraction > 0.0 && fraction < 1.0, "split fraction must lie in (0, 1)");
  const auto cut = static_cast<std::size_t>(std::floor(corpus.size() * (1.0 - fraction)));
  TokenCorpus head = corpus, tail = corpus;
  head.tokens.assign(corpus.tokens.begin(), corpus.tokens.begin() + static_cast<std::ptrdiff_t>(cut));
  tail.tokens.assign(corpus.tokens.begin() + static_cast<std::ptrdiff_t>(cut), corpus.tokens.end());
  return {std::move(head), std::move(tail)};
}

inline TokenCorpus from_bytes(std::string_view bytes) {
  TokenCorpus out;
  out.vocab_size = 256;
  out.origin = Origin::clean;
  out.tokens.reserve(bytes.size());
  for (unsigned char c : bytes) out.tokens.push_back(c);
  return out;
}

/// Empirical unigram entropy in nats.
inline double unigram_entropy(const TokenCorpus& corpus) {
  if (corpus.empty()) return 0.0;
  std::vector<std::uint64_t> counts(corpus.vocab_size, 0);
  for (token_t t : corpus.tokens) ++counts[t];
  const double n = static_cast<double>(corpus.size());
  double h = 0.0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Token files: flat little-endian uint16, no header. Metadata goes to a
// key=value sidecar at "<path>.meta".

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".meta";
  return p;
}

inline void write_sidecar(const TokenCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream meta(sidecar_path(path));
  if (!meta) throw invalid_argument("cannot open sidecar for writing: " + sidecar_path(path).string());
  meta.precision(17);
  meta << "vocab_size=" << corpus.vocab_size << "\n";
  meta << "origin=" << to_string(corpus.origin) << "\n";
  meta << "length=" << corpus.size() << "\n";
  if (corpus.meta.alpha) meta << "alpha=" << *corpus.meta.alpha << "\n";
  if (corpus.meta.mu) meta << "mu=" << *corpus.meta.mu << "\n";
  if (corpus.meta.sigma) meta << "sigma=" << *corpus.meta.sigma << "\n";
  if (corpus.meta.seed) meta << "seed=" << *corpus.meta.seed << "\n";
  if (corpus.meta.noise_begin) meta << "noise_begin=" << *corpus.meta.noise_begin << "\n";
  meta << "prng_name=" << (corpus.meta.prng_name.empty() ? std::string(Rng::name) : corpus.meta.prng_name) << "\n";
}

inline std::map<std::string, std::string> read_key_values(const std::filesystem::path& path) {
  std::map<std::string, std::string> kv;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline void write_token_file(const TokenCorpus& corpus, const std::filesystem::path& path) {
  std::vector<unsigned char> bytes;
  bytes.reserve(corpus.size() * 2);
  for (token_t t : corpus.tokens) {
    if (t >= 65536) {
      throw unsupported("token " + std::to_string(t) + " does not fit the uint16 token file format");
    }
    bytes.push_back(static_cast<unsigned char>(t & 0xFF));
    bytes.push_back(static_cast<unsigned char>(t >> 8));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw invalid_argument("cannot open token file for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  write_sidecar(corpus, path);
}

/// Reads tokens and, when present, the sidecar metadata. The caller's
/// vocab_size is authoritative; tokens outside it are rejected.
inline TokenCorpus read_token_file(const std::filesystem::path& path, std::uint32_t vocab_size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw invalid_argument("cannot open token file: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 2 != 0) {
    throw corrupt_file("token file " + path.string() + " has odd length " + std::to_string(bytes.size()));
  }
  TokenCorpus out;
  out.vocab_size = vocab_size;
  out.tokens.resize(bytes.size() / 2);
  for (std::size_t i = 0; i < out.tokens.size(); ++i) {
    out.tokens[i] = static_cast<token_t>(bytes[2 * i]) | (static_cast<token_t>(bytes[2 * i + 1]) << 8);
  }
  if (std::filesystem::exists(sidecar_path(path))) {
    const auto kv = read_key_values(sidecar_path(path));
    auto get = [&](const char* k) -> const std::string* {
      auto it = kv.find(k);
      return it == kv.end() ? nullptr : &it->second;
    };
    if (auto* v = get("origin")) out.origin = parse_origin(*v);
    if (auto* v = get("alpha")) out.meta.alpha = std::stod(*v);
    if (auto* v = get("mu")) out.meta.mu = std::stod(*v);
    if (auto* v = get("sigma")) out.meta.sigma = std::stod(*v);
    if (auto* v = get("seed")) out.meta.seed = std::stoull(*v);
    if (auto* v = get("noise_begin")) out.meta.noise_begin = std::stoull(*v);
    if (auto* v = get("prng_name")) out.meta.prng_name = *v;
  }
  out.validate();
  return out;
}

}  // namespace noisetrap::corpus
