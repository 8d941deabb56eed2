#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "noisetrap/harness.hpp"

namespace nt = noisetrap;
namespace hs = noisetrap::harness;
namespace fs = std::filesystem;

namespace {

fs::path tmp(const std::string& name) { return fs::temp_directory_path() / ("noisetrap_harness_" + name); }

// Fresh, empty run directory.
fs::path scratch(const std::string& name) {
  fs::remove_all(tmp(name));
  return tmp(name);
}

hs::Config tiny_lm(const std::string& experiment) {
  return hs::Config::parse("[experiment]\nname = " + experiment +
                           "\nseed = 3\n"
                           "[model]\nn_layers = 1\nn_heads = 2\nd_model = 16\ncontext_len = 16\n"
                           "[train]\niters = 20\nbatch_size = 2\neval_interval = 10\neval_windows = 4\n"
                           "[corpus]\nclean_bytes = 20000\n");
}

}  // namespace

TEST(Config, ParsesSectionsCommentsAndLists) {
  const auto c = hs::Config::parse("# top\n[a]\nx = 1.5\n; note\ny=  hello world  \n\n[b]\nlist = 1, 2,3\n");
  EXPECT_EQ(c.get_double("a", "x", 0), 1.5);
  EXPECT_EQ(c.get("a", "y", ""), "hello world");
  EXPECT_EQ(c.get_u64s("b", "list", {}), (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(c.get_double("b", "missing", 7.0), 7.0);
}

TEST(Config, RoundTripIsIdentity) {
  const auto c = hs::Config::parse("[z]\nb = 2\na = x y\n[a]\nk = 0.05,0.2\n[empty]\n");
  const auto text = c.serialize();
  const auto again = hs::Config::parse(text);
  EXPECT_EQ(again, c);
  EXPECT_EQ(again.serialize(), text);
}

TEST(Config, RejectsMalformedInput) {
  EXPECT_THROW(hs::Config::parse("x = 1\n"), nt::invalid_argument);
  EXPECT_THROW(hs::Config::parse("[a]\nx = 1\nx = 2\n"), nt::invalid_argument);
  EXPECT_THROW(hs::Config::parse("[a\n"), nt::invalid_argument);
  EXPECT_THROW(hs::Config::parse("[a]\njunk\n"), nt::invalid_argument);
  const auto c = hs::Config::parse("[a]\nx = 1e\nn = -3\n");
  EXPECT_THROW(c.get_double("a", "x", 0), nt::invalid_argument);
  EXPECT_THROW(c.get_u64("a", "n", 0), nt::invalid_argument);
}

TEST(Config, OverridesAndUnusedKeys) {
  auto c = hs::Config::parse("[a]\nx = 1\ntypo = 2\n");
  c.apply_override("a.x=5");
  c.apply_override("b.y = z");
  EXPECT_EQ(c.get_u64("a", "x", 0), 5u);
  EXPECT_EQ(c.get("b", "y", ""), "z");
  EXPECT_EQ(c.unused_keys(), std::vector<std::string>{"a.typo"});
  EXPECT_THROW(c.reject_unused("test"), nt::invalid_argument);
  EXPECT_THROW(c.apply_override("novalue"), nt::invalid_argument);
}

TEST(Manifest, Sha256KnownAnswer) {
  EXPECT_EQ(hs::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(hs::sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Manifest, JsonRoundTrip) {
  hs::RunManifest m;
  m.experiment = "flatness";
  m.seed = 4;
  m.config = "[a]\nx = 1\n";
  m.status = "ok";
  m.checks["c"] = true;
  m.files.push_back({"f.csv", hs::sha256_hex("x"), 1});
  const auto back = hs::RunManifest::from_json(m.to_json());
  EXPECT_EQ(back.files, m.files);
  EXPECT_EQ(back.checks, m.checks);
  EXPECT_EQ(back.content_digest(), m.content_digest());
  EXPECT_EQ(back.hash_algorithm, "SHA-256");
  auto j = m.to_json();
  j["hash_algorithm"] = "MD5";
  EXPECT_THROW(hs::RunManifest::from_json(j), nt::unsupported);
}

TEST(RunDir, RefusesEscapingPaths) {
  hs::RunDir d(scratch("rundir"));
  EXPECT_THROW(d.path_for("../x.csv"), nt::invalid_argument);
  EXPECT_THROW(d.path_for("/tmp/x.csv"), nt::invalid_argument);
  EXPECT_THROW(d.path_for("manifest.json"), nt::invalid_argument);
  d.write_text("sub/ok.csv", "a\n1\n");
  ASSERT_EQ(d.hash_all().size(), 1u);
  EXPECT_EQ(d.hash_all()[0].path, "sub/ok.csv");
}

TEST(Harness, OutputRootFromEnvironment) {
  ::setenv(hs::kOutputRootEnv, "/tmp/nt_root", 1);
  EXPECT_EQ(hs::output_root(), fs::path("/tmp/nt_root"));
  const auto spec = hs::ExperimentSpec::from_config(hs::Config::parse("[experiment]\nname = flatness\nseed = 2\n"));
  EXPECT_EQ(spec.out_dir, fs::path("/tmp/nt_root/flatness/seed-2"));
  ::unsetenv(hs::kOutputRootEnv);
  EXPECT_EQ(hs::output_root(), fs::path("noisetrap-runs"));
}

TEST(Harness, RejectsBadSpecsBeforeCompute) {
  const auto dir = scratch("reject");
  auto bad_name = hs::ExperimentSpec::from_config(hs::Config::parse("[experiment]\nname = nope\n"), dir);
  EXPECT_THROW(hs::run_experiment(bad_name), nt::invalid_argument);
  auto typo = hs::ExperimentSpec::from_config(
      hs::Config::parse("[experiment]\nname = flatness\n[flatness]\nconfigz = 3\n"), dir);
  EXPECT_THROW(hs::run_experiment(typo), nt::invalid_argument);
  EXPECT_FALSE(fs::exists(dir / "manifest.json"));
}

TEST(Harness, TheoryVerifyIsDeterministic) {
  const auto c = hs::Config::parse(
      "[experiment]\nname = theory-verify\nseed = 5\n[theory]\nlinearity_instances = 10\ndraws = 20\ngrid = 200\n");
  const auto a = hs::run_experiment(hs::ExperimentSpec::from_config(c, scratch("theory_a")));
  const auto b = hs::run_experiment(hs::ExperimentSpec::from_config(c, scratch("theory_b")));
  EXPECT_EQ(a.status, "ok") << a.error;
  EXPECT_EQ(a.checks.size(), 5u);
  EXPECT_EQ(a.content_digest(), b.content_digest());
  const auto loaded = hs::RunManifest::load(tmp("theory_a"));
  EXPECT_EQ(loaded.content_digest(), a.content_digest());
  EXPECT_TRUE(a.find("theory.csv"));
  EXPECT_TRUE(a.find("config.ini"));
}

TEST(Harness, FlatnessAndProbeRuns) {
  const auto f = hs::run_experiment(hs::ExperimentSpec::from_config(
      hs::Config::parse("[experiment]\nname = flatness\n[flatness]\nconfigs = 10\nn_dirs = 4\n"), scratch("flat")));
  EXPECT_EQ(f.status, "ok") << f.error;
  EXPECT_EQ(f.summary["violations"], 0);

  const auto probe_cfg = hs::Config::parse(
      "[experiment]\nname = lgm-probe\nseed = 1\n"
      "[data]\ndim = 4\nn_train = 64\nn_val = 16\nn_test = 32\n"
      "[probe]\nepochs = 2\nlrs = 1e-3\nbatches = 8\nseeds = 1,2\n"
      "[eval]\nplanes = 2\ngrid = 5\nn_dirs = 2\nn_pairs = 2\n");
  const auto p = hs::run_experiment(hs::ExperimentSpec::from_config(probe_cfg, scratch("probe_a")));
  ASSERT_NE(p.status, "failed") << p.error;
  EXPECT_EQ(p.checks.size(), 3u);
  const auto csv = hs::read_csv(tmp("probe_a") / "probe.csv");
  EXPECT_EQ(csv.rows.size(), 4u);  // 2 seeds x 2 lambdas
  const auto p2 = hs::run_experiment(hs::ExperimentSpec::from_config(probe_cfg, scratch("probe_b")));
  EXPECT_EQ(p.content_digest(), p2.content_digest());
}

TEST(Harness, SensmapWritesGridsAndRecordsFailure) {
  const std::string base =
      "[experiment]\nname = sensmap\n[data]\ndim = 4\nn_train = 64\nn_val = 8\nn_test = 8\n"
      "[probe]\nepochs = 1\n[sensmap]\ngrid = 5\n";
  const auto ok = hs::run_experiment(hs::ExperimentSpec::from_config(hs::Config::parse(base), scratch("sens")));
  EXPECT_EQ(ok.status, "ok") << ok.error;
  const auto grid = hs::read_csv(tmp("sens") / "sensmap_lambda-0_plane-0.csv");
  EXPECT_EQ(grid.rows.size(), 25u);
  EXPECT_EQ(grid.header, (std::vector<std::string>{"i", "j", "a", "b", "label", "correct"}));

  const auto dir = scratch("sens_fail");
  const auto bad = hs::run_experiment(
      hs::ExperimentSpec::from_config(hs::Config::parse(base + "index = 100\n"), dir));
  EXPECT_EQ(bad.status, "failed");
  EXPECT_NE(bad.error.find("index"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  EXPECT_TRUE(bad.find("config.ini"));
}

TEST(Harness, NoiseSweepOutputsAndCompare) {
  auto c = tiny_lm("noise-sweep");
  c.set("sweep", "alphas", "0, 0.2");
  const auto a = hs::run_experiment(hs::ExperimentSpec::from_config(c, scratch("sweep_a")));
  ASSERT_NE(a.status, "failed") << a.error;
  for (const char* f : {"mean_curves.csv", "deltas.csv", "k.csv", "curves/noise-uniform_alpha-0.2_seed-3.csv"}) {
    EXPECT_TRUE(a.find(f)) << f;
  }
  const auto curve = hs::read_csv(tmp("sweep_a") / "curves/noise-uniform_alpha-0_seed-3.csv");
  EXPECT_EQ(curve.header.front(), "iter");
  EXPECT_EQ(curve.rows.size(), 3u);  // iterations 0, 10, 20

  const auto b = hs::run_experiment(hs::ExperimentSpec::from_config(c, scratch("sweep_b")));
  EXPECT_EQ(a.content_digest(), b.content_digest());

  const auto self = hs::compare_runs(tmp("sweep_a"),
                                     tmp("sweep_b"),
                                     "loss_clean_val");
  ASSERT_FALSE(self.series.empty());
  for (const auto& s : self.series) EXPECT_EQ(s.max_abs_delta, 0.0) << s.file;

  auto shifted = c;
  shifted.set("train", "eval_interval", "5");
  hs::run_experiment(hs::ExperimentSpec::from_config(shifted, scratch("sweep_c")));
  EXPECT_THROW(hs::compare_runs(tmp("sweep_a"),
                                tmp("sweep_c"), "loss_clean_val"),
               nt::alignment_error);
  EXPECT_THROW(hs::compare_runs(tmp("sweep_a"),
                                tmp("sweep_b"), "no_such_metric"),
               nt::alignment_error);
}

TEST(Harness, GaussianVsUniformRuns) {
  auto c = tiny_lm("gaussian-vs-uniform");
  c.set("checks", "clean_drop", "0.1");
  const auto m = hs::run_experiment(hs::ExperimentSpec::from_config(c, scratch("gvu")));
  ASSERT_NE(m.status, "failed") << m.error;
  EXPECT_TRUE(m.find("comparison.csv"));
  EXPECT_TRUE(m.checks.count("gaussian_noise_lower"));
}

TEST(KSeries, ReferenceFromEarlyNoisyCheckpoint) {
  std::vector<nt::lm::EvalReport> clean(3), noisy(3);
  for (std::uint32_t i = 0; i < 3; ++i) clean[i].iter = noisy[i].iter = 10 * i;
  clean[2].loss_clean_val = -std::log(0.5);
  noisy[2].loss_clean_val = -std::log(0.4);
  noisy[1].loss_noise_train = -std::log(0.01);
  noisy[2].loss_noise_train = -std::log(0.015);
  const auto rows = hs::k_series(clean, noisy, 10);
  ASSERT_EQ(rows.size(), 1u);
  ASSERT_TRUE(rows[0].estimate);
  EXPECT_NEAR(rows[0].estimate->k, 20.0, 1e-9);

  noisy[2].loss_clean_val = clean[2].loss_clean_val;  // no clean damage: ill-posed, reported
  const auto ill = hs::k_series(clean, noisy, 10);
  EXPECT_FALSE(ill[0].estimate);
  EXPECT_NE(ill[0].status.find("epsilon"), std::string::npos);
}
