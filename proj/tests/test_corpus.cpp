#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "noisetrap/corpus.hpp"
#include "noisetrap/text_source.hpp"

namespace nt = noisetrap;
namespace co = noisetrap::corpus;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "noisetrap_test_corpus";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::vector<unsigned char> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

co::TokenCorpus counting_corpus(std::size_t n, std::uint32_t V = 1000) {
  co::TokenCorpus c;
  c.vocab_size = V;
  for (std::size_t i = 0; i < n; ++i) c.tokens.push_back(static_cast<co::token_t>(i % V));
  return c;
}

}  // namespace

TEST(UniformNoise, RangeAndDeterminism) {
  const auto a = co::gen_uniform_noise(50256, 5, 7);
  const auto b = co::gen_uniform_noise(50256, 5, 7);
  ASSERT_EQ(a.size(), 5u);
  EXPECT_EQ(a.tokens, b.tokens);
  for (auto t : a.tokens) EXPECT_LT(t, 50256u);
  EXPECT_EQ(a.origin, co::Origin::uniform_noise);
  EXPECT_NE(co::gen_uniform_noise(50256, 5, 8).tokens, a.tokens);
}

TEST(UniformNoise, SingleSymbolVocabulary) {
  EXPECT_EQ(co::gen_uniform_noise(1, 3, 0).tokens, (std::vector<co::token_t>{0, 0, 0}));
}

TEST(UniformNoise, RejectsEmptyRequests) {
  EXPECT_THROW(co::gen_uniform_noise(256, 0, 1), nt::invalid_argument);
  EXPECT_THROW(co::gen_uniform_noise(0, 10, 1), nt::invalid_argument);
}

TEST(UniformNoise, ChiSquareGoodnessOfFit) {
  constexpr std::uint32_t V = 256;
  constexpr std::size_t n = 1'000'000;
  for (std::uint64_t seed : {1ULL, 2ULL, 99ULL}) {
    const auto c = co::gen_uniform_noise(V, n, seed);
    std::vector<double> counts(V, 0.0);
    for (auto t : c.tokens) counts[t] += 1.0;
    const double expected = static_cast<double>(n) / V;
    double stat = 0.0;
    for (double k : counts) stat += (k - expected) * (k - expected) / expected;
    const boost::math::chi_squared dist(V - 1);
    const double critical = boost::math::quantile(boost::math::complement(dist, 1e-3));
    EXPECT_LT(stat, critical) << "seed " << seed;
  }
}

TEST(UniformNoise, EntropyApproachesLogV) {
  const auto c = co::gen_uniform_noise(256, 1'000'000, 3);
  EXPECT_NEAR(co::unigram_entropy(c), std::log(256.0), 1e-2);
}

TEST(GaussianNoise, MeanNearCentre) {
  const auto c = co::gen_gaussian_noise(50256, 1'000'000, 25127.5, 500.0, 11);
  const double mean = std::accumulate(c.tokens.begin(), c.tokens.end(), 0.0) / c.size();
  EXPECT_NEAR(mean, 25127.5, 5.0);
  EXPECT_EQ(c.origin, co::Origin::gaussian_noise);
}

TEST(GaussianNoise, DegenerateSigmaRoundsHalfAway) {
  const auto c = co::gen_gaussian_noise(50256, 4, 25127.5, 1e-9, 0);
  EXPECT_EQ(c.tokens, (std::vector<co::token_t>(4, 25128)));
}

TEST(GaussianNoise, ClippingMassAtZero) {
  const auto c = co::gen_gaussian_noise(50256, 1'000'000, 0.0, 1000.0, 5);
  const double freq = static_cast<double>(std::count(c.tokens.begin(), c.tokens.end(), 0u)) / c.size();
  const boost::math::normal nd(0.0, 1000.0);
  const double analytic = boost::math::cdf(nd, 0.5);  // everything rounding to <= 0
  EXPECT_GE(freq, 0.49);
  EXPECT_LE(freq, 0.51);
  EXPECT_NEAR(freq, analytic, 3e-3);
}

TEST(GaussianNoise, RejectsBadSigma) {
  EXPECT_THROW(co::gen_gaussian_noise(256, 4, 0.0, 0.0, 0), nt::invalid_argument);
  EXPECT_THROW(co::gen_gaussian_noise(256, 4, 0.0, -1.0, 0), nt::invalid_argument);
}

TEST(GaussianNoise, RangeSafetyOverRandomSpecs) {
  nt::Rng rng(17);
  for (int i = 0; i < 50; ++i) {
    const auto V = static_cast<std::uint32_t>(1 + rng.uniform_index(3000));
    const double mu = rng.uniform(-2.0 * V, 3.0 * V);
    const double sigma = rng.uniform(1e-3, 2.0 * V);
    const auto c = co::gen_gaussian_noise(V, 500, mu, sigma, rng.next());
    EXPECT_NO_THROW(c.validate());
    const auto u = co::gen_uniform_noise(V, 500, rng.next());
    EXPECT_NO_THROW(u.validate());
  }
}

TEST(Mixing, ConcatenatesCleanThenNoise) {
  const auto clean = counting_corpus(95);
  const auto noise = co::gen_uniform_noise(1000, 5, 1);
  const auto m = co::mix_corpora(clean, noise);
  ASSERT_EQ(m.size(), 100u);
  EXPECT_EQ(m.origin, co::Origin::mixed);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(m.tokens[95 + i], noise.tokens[i]);
  EXPECT_EQ(m.noise_range(), (std::pair<std::size_t, std::size_t>{95, 100}));
  EXPECT_DOUBLE_EQ(*m.meta.alpha, 0.05);
}

TEST(Mixing, EmptyNoiseKeepsClean) {
  const auto clean = counting_corpus(40);
  co::TokenCorpus none;
  none.vocab_size = clean.vocab_size;
  const auto m = co::mix_corpora(clean, none);
  EXPECT_EQ(m.tokens, clean.tokens);
}

TEST(Mixing, VocabularyMismatchRejected) {
  EXPECT_THROW(co::mix_corpora(counting_corpus(10, 256), co::gen_uniform_noise(255, 3, 1)), nt::invalid_argument);
}

TEST(Mixing, RequiredNoiseLength) {
  EXPECT_EQ(co::required_noise_length(8'000'000'000ULL, 0.05), 421'052'632ULL);
  EXPECT_EQ(co::required_noise_length(95, 0.05), 5u);
  EXPECT_EQ(co::required_noise_length(100, 0.0), 0u);
  EXPECT_EQ(co::required_noise_length(80, 0.2), 20u);
}

TEST(Mixing, NoiseFraction) {
  EXPECT_DOUBLE_EQ(co::noise_fraction(95, 5), 0.05);
  EXPECT_DOUBLE_EQ(co::noise_fraction(100, 0), 0.0);
  EXPECT_NEAR(co::noise_fraction(8'000'000'000ULL, 421'052'632ULL), 0.05, 1e-9);
  EXPECT_THROW(co::noise_fraction(0, 0), nt::invalid_argument);
}

TEST(Mixing, AccountingWithinOneToken) {
  for (double alpha : {0.01, 0.05, 0.2, 0.37}) {
    for (std::size_t n : {97u, 1000u, 12345u}) {
      const auto m = co::make_mixed(counting_corpus(n), {co::NoiseKind::uniform, alpha, 0, 1, 3});
      EXPECT_LE(std::abs(*m.meta.alpha - alpha), 1.0 / m.size()) << alpha << " " << n;
    }
  }
}

TEST(Batch, ShiftByOne) {
  const auto c = counting_corpus(500);
  nt::Rng rng(2);
  const auto b = co::sample_batch(c, 16, 8, rng);
  ASSERT_EQ(b.inputs.size(), 128u);
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t j = 0; j < 16; ++j) {
      EXPECT_EQ(b.input(r, j), c.tokens[b.offsets[r] + j]);
      EXPECT_EQ(b.target(r, j), c.tokens[b.offsets[r] + j + 1]);
    }
    EXPECT_LE(b.offsets[r] + 16 + 1, c.size());
  }
}

TEST(Batch, SingleValidOffset) {
  const auto c = counting_corpus(9);
  nt::Rng rng(3);
  const auto b = co::sample_batch(c, 8, 5, rng);
  for (auto o : b.offsets) EXPECT_EQ(o, 0u);
}

TEST(Batch, MaximalOffsetReached) {
  const auto c = counting_corpus(12);
  nt::Rng rng(4);
  std::size_t max_seen = 0;
  for (int i = 0; i < 200; ++i) {
    const auto b = co::sample_batch(c, 8, 4, rng);
    for (auto o : b.offsets) max_seen = std::max(max_seen, o);
  }
  EXPECT_EQ(max_seen, 3u);
}

TEST(Batch, ShortCorpusRejected) {
  nt::Rng rng(1);
  EXPECT_THROW(co::sample_batch(counting_corpus(8), 8, 1, rng), nt::invalid_argument);
  co::TokenCorpus empty;
  empty.vocab_size = 4;
  EXPECT_THROW(co::sample_batch(empty, 2, 1, rng), nt::invalid_argument);
}

TEST(Batch, Deterministic) {
  const auto c = counting_corpus(1000);
  nt::Rng a(9), b(9);
  EXPECT_EQ(co::sample_batch(c, 10, 4, a).offsets, co::sample_batch(c, 10, 4, b).offsets);
}

TEST(Windows, InsideRegion) {
  nt::Rng rng(5);
  const auto w = co::windows_inside(100, 200, 10, 500, rng);
  for (auto o : w) {
    EXPECT_GE(o, 100u);
    EXPECT_LE(o + 11, 200u);
  }
  EXPECT_TRUE(co::windows_inside(100, 105, 10, 3, rng).empty());
}

TEST(TokenFile, LittleEndianBytes) {
  co::TokenCorpus c;
  c.vocab_size = 300;
  c.tokens = {1, 258};
  const auto p = temp_file("le.bin");
  co::write_token_file(c, p);
  EXPECT_EQ(file_bytes(p), (std::vector<unsigned char>{0x01, 0x00, 0x02, 0x01}));
}

TEST(TokenFile, RoundTripWithSidecar) {
  auto c = co::make_mixed(counting_corpus(1000, 256), co::NoiseSpec::gaussian_for(256, 0.05, 42));
  const auto p = temp_file("rt.bin");
  co::write_token_file(c, p);
  const auto back = co::read_token_file(p, 256);
  EXPECT_EQ(back.tokens, c.tokens);
  EXPECT_EQ(back.origin, co::Origin::mixed);
  ASSERT_TRUE(back.meta.seed.has_value());
  EXPECT_EQ(*back.meta.seed, 42u);
  EXPECT_EQ(back.meta.prng_name, std::string(nt::Rng::name));
  EXPECT_EQ(back.noise_range(), c.noise_range());
  const auto kv = co::read_key_values(co::sidecar_path(p));
  EXPECT_EQ(kv.at("vocab_size"), "256");
}

TEST(TokenFile, OddLengthIsCorrupt) {
  const auto p = temp_file("odd.bin");
  {
    std::ofstream out(p, std::ios::binary);
    out.write("\x01\x00\x02", 3);
  }
  EXPECT_THROW(co::read_token_file(p, 256), nt::corrupt_file);
}

TEST(TokenFile, EmptyFileGivesEmptyCorpus) {
  const auto p = temp_file("empty.bin");
  std::filesystem::remove(co::sidecar_path(p));
  { std::ofstream out(p, std::ios::binary); }
  const auto c = co::read_token_file(p, 256);
  EXPECT_TRUE(c.empty());
  nt::Rng rng(1);
  EXPECT_THROW(co::sample_batch(c, 4, 1, rng), nt::invalid_argument);
}

TEST(TokenFile, WideTokensUnsupported) {
  co::TokenCorpus c;
  c.vocab_size = 70000;
  c.tokens = {65536};
  EXPECT_THROW(co::write_token_file(c, temp_file("wide.bin")), nt::unsupported);
}

TEST(SyntheticText, DeterministicBytes) {
  nt::corpus::SyntheticText a, b;
  const auto x = a.generate(20000, 3);
  EXPECT_EQ(x, b.generate(20000, 3));
  EXPECT_EQ(x.size(), 20000u);
  EXPECT_NE(x, a.generate(20000, 4));
  const auto c = a.corpus(50000, 1);
  EXPECT_EQ(c.vocab_size, 256u);
  // text-like: far below the entropy of uniform bytes
  EXPECT_LT(co::unigram_entropy(c), 3.5);
}
