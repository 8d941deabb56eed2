#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <string>
#include <vector>

#include "noisetrap/corpus.hpp"
#include "noisetrap/rng.hpp"

namespace noisetrap::corpus {

/// Deterministic English-like ASCII text used as the clean corpus when no
/// text file is supplied. A fixed pseudo-word lexicon with Zipfian word
/// frequencies is combined by a small agreement grammar (singular/plural
/// subjects, prepositional phrases, coordinated clauses) and paragraphs with
/// recurring topic nouns, so a byte-level model has short- and mid-range
/// structure to learn.
class SyntheticText {
 public:
  explicit SyntheticText(std::uint64_t lexicon_seed = 0x5eed) {
    Rng rng(lexicon_seed);
    nouns_ = make_words(rng, 900, 1, 3);
    verbs_ = make_words(rng, 320, 1, 2);
    adjectives_ = make_words(rng, 300, 2, 3);
    adverbs_ = make_words(rng, 80, 2, 3);
    for (auto& a : adverbs_) a += "ly";
    noun_cdf_ = zipf_cdf(nouns_.size());
    verb_cdf_ = zipf_cdf(verbs_.size());
    adj_cdf_ = zipf_cdf(adjectives_.size());
    adv_cdf_ = zipf_cdf(adverbs_.size());
  }

  /// Exactly `n_bytes` bytes of text drawn with `seed`.
  std::string generate(std::size_t n_bytes, std::uint64_t seed) const {
    Rng rng(seed);
    std::string out;
    out.reserve(n_bytes + 512);
    while (out.size() < n_bytes) paragraph(rng, out);
    out.resize(n_bytes);
    return out;
  }

  TokenCorpus corpus(std::size_t n_bytes, std::uint64_t seed) const {
    TokenCorpus c = from_bytes(generate(n_bytes, seed));
    c.meta.seed = seed;
    c.meta.prng_name = Rng::name;
    return c;
  }

 private:
  static std::vector<std::string> make_words(Rng& rng, std::size_t n, int min_syl, int max_syl) {
    static const char* onsets[] = {"b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s",
                                   "t", "v", "w", "z", "br", "ch", "cl", "dr", "fl", "gr", "pl", "pr",
                                   "sh", "sl", "st", "th", "tr", ""};
    static const char* nuclei[] = {"a", "e", "i", "o", "u", "ai", "ea", "ee", "oo", "ou", "y"};
    static const char* codas[] = {"", "", "", "n", "r", "s", "t", "l", "m", "nd", "st", "ck", "ng"};
    std::vector<std::string> words;
    while (words.size() < n) {
      const int syl = min_syl + static_cast<int>(rng.uniform_index(max_syl - min_syl + 1));
      std::string w;
      for (int s = 0; s < syl; ++s) {
        w += onsets[rng.uniform_index(std::size(onsets))];
        w += nuclei[rng.uniform_index(std::size(nuclei))];
        w += codas[rng.uniform_index(std::size(codas))];
      }
      if (w.size() < 2 || std::find(words.begin(), words.end(), w) != words.end()) continue;
      words.push_back(std::move(w));
    }
    return words;
  }

  static std::vector<double> zipf_cdf(std::size_t n) {
    std::vector<double> cdf(n);
    double acc = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      acc += 1.0 / (static_cast<double>(r) + 2.7);
      cdf[r] = acc;
    }
    for (auto& c : cdf) c /= acc;
    return cdf;
  }

  static const std::string& pick(const std::vector<std::string>& words, const std::vector<double>& cdf,
                                 Rng& rng) {
    const double u = rng.uniform01();
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    const auto idx = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), words.size() - 1);
    return words[idx];
  }

  template <std::size_t N>
  static const char* pick(const char* const (&options)[N], Rng& rng) {
    return options[rng.uniform_index(N)];
  }

  bool chance(Rng& rng, double p) const { return rng.uniform01() < p; }

  std::string noun(Rng& rng, const std::vector<std::string>& topic) const {
    if (!topic.empty() && chance(rng, 0.4)) return topic[rng.uniform_index(topic.size())];
    return pick(nouns_, noun_cdf_, rng);
  }

  std::string noun_phrase(Rng& rng, bool plural, const std::vector<std::string>& topic) const {
    static const char* const det_sg[] = {"the", "the", "the", "a", "this", "every", "one", "that"};
    static const char* const det_pl[] = {"the", "the", "some", "these", "many", "two", "all", "few"};
    std::string np = plural ? pick(det_pl, rng) : pick(det_sg, rng);
    if (chance(rng, 0.45)) np += " " + pick(adjectives_, adj_cdf_, rng);
    np += " " + noun(rng, topic);
    if (plural) np += "s";
    return np;
  }

  std::string clause(Rng& rng, const std::vector<std::string>& topic) const {
    static const char* const preps[] = {"in", "on", "with", "under", "near", "from", "over", "after"};
    const bool plural = chance(rng, 0.4);
    std::string c = noun_phrase(rng, plural, topic);
    if (chance(rng, 0.2)) c += " " + pick(adverbs_, adv_cdf_, rng);
    c += " " + pick(verbs_, verb_cdf_, rng);
    if (!plural) c += "s";
    if (chance(rng, 0.7)) c += " " + noun_phrase(rng, chance(rng, 0.4), topic);
    if (chance(rng, 0.4)) c += std::string(" ") + pick(preps, rng) + " " + noun_phrase(rng, chance(rng, 0.3), topic);
    return c;
  }

  void sentence(Rng& rng, const std::vector<std::string>& topic, std::string& out) const {
    static const char* const joins[] = {", and ", ", but ", " because ", ", so ", " while "};
    std::string s = clause(rng, topic);
    if (chance(rng, 0.3)) s += pick(joins, rng) + clause(rng, topic);
    s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    out += s;
    out += chance(rng, 0.08) ? "!" : ".";
  }

  void paragraph(Rng& rng, std::string& out) const {
    std::vector<std::string> topic;
    for (int i = 0; i < 4; ++i) topic.push_back(pick(nouns_, noun_cdf_, rng));
    const auto n_sentences = 3 + rng.uniform_index(5);
    for (std::uint64_t i = 0; i < n_sentences; ++i) {
      if (i > 0) out += ' ';
      sentence(rng, topic, out);
    }
    out += "\n\n";
  }

  std::vector<std::string> nouns_, verbs_, adjectives_, adverbs_;
  std::vector<double> noun_cdf_, verb_cdf_, adj_cdf_, adv_cdf_;
};

}  // namespace noisetrap::corpus
