#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "noisetrap/corpus.hpp"
#include "noisetrap/harness.hpp"
#include "noisetrap/lgm.hpp"
#include "noisetrap/lm/checkpoint.hpp"
#include "noisetrap/lm/train.hpp"
#include "noisetrap/text_source.hpp"
#include "noisetrap/theory.hpp"

namespace nt = noisetrap;
namespace hs = noisetrap::harness;
namespace lg = noisetrap::lgm;
using nlohmann::json;

namespace {

void log_line(const std::string& s) { std::cerr << "[noisetrap] " << s << std::endl; }

// ---------------------------------------------------------------------------
// corpus

struct CorpusGenArgs {
  std::string kind = "uniform";
  std::uint64_t count = 1'000'000;
  std::uint32_t vocab = 256;
  std::uint64_t seed = 0;
  std::optional<double> mu, sigma;
  std::string input;
  std::string out;
};

int corpus_gen(const CorpusGenArgs& a) {
  nt::corpus::TokenCorpus c;
  if (a.kind == "uniform") {
    c = nt::corpus::gen_uniform_noise(a.vocab, a.count, a.seed);
  } else if (a.kind == "gaussian") {
    const auto d = nt::corpus::NoiseSpec::gaussian_for(a.vocab, 0.0, a.seed);
    c = nt::corpus::gen_gaussian_noise(a.vocab, a.count, a.mu.value_or(d.mu), a.sigma.value_or(d.sigma), a.seed);
  } else if (a.kind == "text") {
    if (!a.input.empty()) {
      std::ifstream in(a.input, std::ios::binary);
      if (!in) throw nt::invalid_argument("cannot open input text " + a.input);
      std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      c = nt::corpus::from_bytes(bytes);
    } else {
      c = nt::corpus::SyntheticText().corpus(a.count, a.seed);
    }
    if (a.vocab < 256) throw nt::invalid_argument("text corpora need --vocab >= 256");
    c.vocab_size = a.vocab;
  } else {
    throw nt::invalid_argument("--kind must be uniform, gaussian or text");
  }
  nt::corpus::write_token_file(c, a.out);
  std::cout << json{{"out", a.out}, {"tokens", c.size()}, {"origin", nt::corpus::to_string(c.origin)}}.dump() << "\n";
  return 0;
}

struct CorpusMixArgs {
  std::string clean, noise, out;
  std::uint32_t vocab = 256;
  std::optional<double> alpha;
  std::string kind = "uniform";
  std::uint64_t seed = 0;
};

int corpus_mix(const CorpusMixArgs& a) {
  const auto clean = nt::corpus::read_token_file(a.clean, a.vocab);
  nt::corpus::TokenCorpus mixed;
  if (!a.noise.empty()) {
    if (a.alpha) throw nt::invalid_argument("give either --noise or --alpha, not both");
    mixed = nt::corpus::mix_corpora(clean, nt::corpus::read_token_file(a.noise, a.vocab));
  } else if (a.alpha) {
    const auto kind = nt::corpus::parse_noise_kind(a.kind);
    const auto spec = kind == nt::corpus::NoiseKind::uniform
                          ? nt::corpus::NoiseSpec{kind, *a.alpha, 0.0, 1.0, a.seed}
                          : nt::corpus::NoiseSpec::gaussian_for(a.vocab, *a.alpha, a.seed);
    mixed = nt::corpus::make_mixed(clean, spec);
  } else {
    throw nt::invalid_argument("corpus mix needs --noise <file> or --alpha <a>");
  }
  nt::corpus::write_token_file(mixed, a.out);
  const auto [b, e] = mixed.noise_range();
  std::cout << json{{"out", a.out}, {"tokens", mixed.size()}, {"noise_begin", b}, {"noise_tokens", e - b},
                    {"noise_fraction", nt::corpus::noise_fraction(b, e - b)}}
                   .dump()
            << "\n";
  return 0;
}

int corpus_inspect(const std::string& file, std::uint32_t vocab) {
  const auto c = nt::corpus::read_token_file(file, vocab);
  const auto [b, e] = c.noise_range();
  json j = {{"file", file},
            {"tokens", c.size()},
            {"vocab_size", c.vocab_size},
            {"origin", nt::corpus::to_string(c.origin)},
            {"unigram_entropy_nats", nt::corpus::unigram_entropy(c)},
            {"noise_begin", b},
            {"noise_tokens", e - b}};
  if (c.meta.alpha) j["alpha"] = *c.meta.alpha;
  if (c.meta.mu) j["mu"] = *c.meta.mu;
  if (c.meta.sigma) j["sigma"] = *c.meta.sigma;
  if (c.meta.seed) j["seed"] = *c.meta.seed;
  if (!c.meta.prng_name.empty()) j["prng"] = c.meta.prng_name;
  std::cout << j.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  double alpha = 0.0;
  std::string noise = "uniform";
  std::uint64_t seed = 1;
  std::string out;
  std::vector<std::string> overrides;
};

int train(const TrainArgs& a) {
  auto cfg = a.config.empty() ? hs::Config{} : hs::Config::load(a.config);
  for (const auto& o : a.overrides) cfg.apply_override(o);
  const auto setup = hs::LmSetup::from(cfg);
  cfg.reject_unused("train");
  if (!(a.alpha >= 0.0 && a.alpha < 1.0)) throw nt::invalid_argument("--alpha must lie in [0, 1)");
  const auto kind = nt::corpus::parse_noise_kind(a.noise);
  const auto out_dir = a.out.empty() ? hs::output_root() / "train" /
                                           ("alpha-" + hs::fmt_num(a.alpha) + "_" + a.noise + "_seed-" +
                                            std::to_string(a.seed))
                                     : std::filesystem::path(a.out);
  hs::RunDir dir(out_dir);
  hs::RunManifest m;
  m.experiment = "train";
  m.seed = a.seed;
  m.config = cfg.serialize();
  m.started_at = hs::utc_timestamp();
  dir.write_text("config.ini", m.config);

  const auto [clean, val] = setup.clean_split();
  const auto mixed = nt::corpus::make_mixed(clean, setup.noise(kind, a.alpha));
  auto recipe = setup.recipe;
  recipe.seed = a.seed;
  const auto curve_path = dir.path_for("curve.csv");
  std::ofstream curve(curve_path);
  curve << nt::lm::kEvalCsvHeader << "\n";
  int rc = 0;
  try {
    const auto res = nt::lm::train(setup.model, recipe, mixed, val, nt::lm::NoiseRegion::of(mixed),
                                   [&](const nt::lm::EvalReport& r, const auto&) {
                                     nt::lm::write_eval_row(curve, r);
                                     curve.flush();
                                     log_line("iter " + std::to_string(r.iter) + " clean_val " +
                                              hs::fmt_num(r.loss_clean_val) + " noise " +
                                              hs::fmt_opt(r.loss_noise_train));
                                   });
    nt::lm::save_checkpoint(dir.path_for("model.ckpt"), res.params, recipe, res.iters_done);
    m.status = "ok";
    m.summary = {{"alpha", a.alpha}, {"noise", a.noise}, {"final", res.reports.back().loss_clean_val}};
  } catch (const nt::divergence& e) {
    m.status = "failed";
    m.error = e.what();
    rc = 1;
  }
  curve.close();
  m.files = dir.hash_all();
  m.finished_at = hs::utc_timestamp();
  m.save(out_dir);
  std::cout << json{{"out", out_dir.string()}, {"status", m.status}, {"error", m.error}}.dump() << "\n";
  return rc;
}

// ---------------------------------------------------------------------------
// theory

int theory_verify(const std::string& which, std::uint64_t draws, std::uint64_t grid, std::uint64_t seed) {
  using nt::theory::CaseId;
  std::vector<CaseId> cases;
  if (which == "1" || which == "all") cases.push_back(CaseId::one);
  if (which == "2" || which == "all") cases.push_back(CaseId::two);
  if (which == "3" || which == "all") {
    cases.push_back(CaseId::three_a);
    cases.push_back(CaseId::three_b);
  }
  if (cases.empty()) throw nt::invalid_argument("--case must be 1, 2, 3 or all");
  json per = json::array(), ces = json::array();
  double max_residual = -INFINITY;
  std::size_t n_draws = 0;
  for (auto c : cases) {
    const auto rep = nt::theory::verify_cases(c, draws, grid, seed);
    auto j = nt::theory::to_json(rep);
    for (const auto& x : j["counterexamples"]) {
      auto y = x;
      y["case"] = rep.case_name;
      ces.push_back(y);
    }
    max_residual = std::max(max_residual, rep.max_residual);
    n_draws += rep.draws;
    per.push_back(j);
  }
  json out = {{"case", which}, {"draws", n_draws}, {"counterexamples", ces}, {"max_residual", max_residual},
              {"grid", grid}, {"seed", seed}, {"cases", per}};
  std::cout << out.dump(2) << "\n";
  return ces.empty() ? 0 : 2;
}

// ---------------------------------------------------------------------------
// probe heads

struct ProbeArgs {
  std::string features;
  std::string head = "linear";
  double gamma = 0.01;
  double lambda = 0.15;
  std::uint64_t seed = 0;
  std::size_t epochs = 10;
  double lr = 6e-4;
  std::size_t batch = 8;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  double feature_noise = 2.0;  // synthetic blobs only

  void add_to(CLI::App* app) {
    app->add_option("--features", features, "feature file (header d=.. C=.. n=..); synthetic blobs if omitted");
    app->add_option("--head", head, "linear|mlp")->check(CLI::IsMember({"linear", "mlp"}));
    app->add_option("--gamma", gamma, "perturbation scale");
    app->add_option("--lambda", lambda, "gradient-matching weight");
    app->add_option("--seed", seed);
    app->add_option("--epochs", epochs);
    app->add_option("--lr", lr);
    app->add_option("--batch", batch);
    app->add_option("--val-fraction", val_fraction);
    app->add_option("--test-fraction", test_fraction);
    app->add_option("--feature-noise", feature_noise, "corruption std for synthetic blobs");
  }

  lg::SplitDataset data() const {
    if (!features.empty()) {
      return lg::split(lg::from_table(nt::read_feature_file(features)), val_fraction, test_fraction, seed);
    }
    lg::BlobSpec b;
    b.feature_noise = feature_noise;
    b.seed = seed;
    return lg::make_blobs(b);
  }

  lg::LgmConfig config() const {
    lg::LgmConfig c;
    c.gamma = gamma;
    c.lambda = lambda;
    c.seed = seed;
    c.epochs = epochs;
    c.lr = lr;
    c.batch_size = batch;
    c.validate();
    return c;
  }
};

json metrics_json(const lg::ProbeMetrics& m) {
  json epochs = json::array();
  for (const auto& e : m.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"loss", e.train_loss}, {"ce", e.train_ce}, {"lgm", e.train_lgm},
                      {"val_accuracy", e.val_accuracy}});
  }
  return {{"train_accuracy", m.train_accuracy}, {"val_accuracy", m.val_accuracy}, {"test_accuracy", m.test_accuracy},
          {"final_ce", m.final_ce},             {"final_lgm", m.final_lgm},       {"steps", m.steps},
          {"epochs", epochs}};
}

int probe(const ProbeArgs& a) {
  const auto data = a.data();
  const auto res = lg::train_probe(data, lg::parse_head_kind(a.head), a.config());
  json j = metrics_json(res.metrics);
  j["head"] = a.head;
  j["gamma"] = a.gamma;
  j["lambda"] = a.lambda;
  j["seed"] = a.seed;
  std::cout << j.dump(2) << "\n";
  return 0;
}

int flatness(const ProbeArgs& a, std::size_t n_pairs, std::size_t n_dirs) {
  const auto data = a.data();
  const auto cfg = a.config();
  const auto res = lg::train_probe(data, lg::parse_head_kind(a.head), cfg);
  const auto r = lg::flatness_report(res.head, data.test.size() ? data.test : data.train, cfg, n_pairs, n_dirs, a.seed);
  std::cout << json{{"head", a.head},          {"lambda", a.lambda},       {"gamma", a.gamma},
                    {"lgm_value", r.lgm_value}, {"ce_value", r.ce_value},   {"beta_hat", r.beta_hat},
                    {"r_rho_hat", r.r_rho_hat}, {"rho", r.rho},             {"bound_rhs", r.bound_rhs},
                    {"bound_holds", r.bound_holds}, {"test_accuracy", res.metrics.test_accuracy}}
                   .dump(2)
            << "\n";
  return 0;
}

int sensmap(const ProbeArgs& a, std::size_t index, double half_width, std::size_t grid, const std::string& out) {
  const auto data = a.data();
  const auto res = lg::train_probe(data, lg::parse_head_kind(a.head), a.config());
  const auto& test = data.test;
  if (index >= test.size()) throw nt::invalid_argument("--index beyond the test split");
  auto planes = lg::sample_planes(test, 1, a.seed);
  const lg::RowVector t = test.features.row(static_cast<Eigen::Index>(index));
  const auto m = lg::sensitivity_map(res.head, t, test.labels[index], planes[0].u, planes[0].v, half_width, grid);
  const auto csv = hs::sensmap_csv(m, test.labels[index], half_width);
  if (out.empty() || out == "-") {
    std::cout << csv;
  } else {
    std::ofstream f(out);
    if (!f) throw nt::invalid_argument("cannot write " + out);
    f << csv;
  }
  log_line("correct fraction " + hs::fmt_num(m.correct_fraction));
  return 0;
}

// ---------------------------------------------------------------------------
// run / compare

int run(const std::string& config, std::optional<std::uint64_t> seed, const std::string& out,
        const std::vector<std::string>& overrides) {
  auto cfg = hs::Config::load(config);
  for (const auto& o : overrides) cfg.apply_override(o);
  if (seed) cfg.set("experiment", "seed", std::to_string(*seed));
  const auto spec = hs::ExperimentSpec::from_config(cfg, out);
  const auto m = hs::run_experiment(spec, log_line);
  std::cout << json{{"experiment", m.experiment}, {"out", spec.out_dir.string()}, {"status", m.status},
                    {"error", m.error},           {"checks", m.checks},            {"summary", m.summary},
                    {"content_digest", m.content_digest()}}
                   .dump(2)
            << "\n";
  if (m.status == "failed") return 1;
  return m.ok() ? 0 : 2;
}

int compare(const std::string& a, const std::string& b, const std::string& metric, const std::string& out) {
  const auto rep = hs::compare_runs(a, b, metric);
  json series = json::array();
  for (const auto& s : rep.series) {
    series.push_back({{"file", s.file}, {"group", s.group}, {"points", s.iters.size()},
                      {"final_delta", s.final_delta}, {"max_abs_delta", s.max_abs_delta}});
  }
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw nt::invalid_argument("cannot write " + out);
    f << hs::compare_csv(rep);
  }
  std::cout << json{{"metric", metric}, {"series", series}}.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"noisetrap: noisy pretraining, its theory, and gradient-matching probes"};
  app.require_subcommand(1);
  int rc = 0;

  auto* corpus = app.add_subcommand("corpus", "generate, mix and inspect token corpora");
  corpus->require_subcommand(1);
  CorpusGenArgs gen;
  auto* gen_cmd = corpus->add_subcommand("gen", "generate a noise or clean-text corpus");
  gen_cmd->add_option("--kind", gen.kind, "uniform|gaussian|text")->check(CLI::IsMember({"uniform", "gaussian", "text"}));
  gen_cmd->add_option("--count", gen.count, "tokens (bytes for synthetic text)");
  gen_cmd->add_option("--vocab", gen.vocab);
  gen_cmd->add_option("--seed", gen.seed);
  gen_cmd->add_option("--mu", gen.mu, "gaussian mean (default (V-1)/2)");
  gen_cmd->add_option("--sigma", gen.sigma, "gaussian std (default V/100)");
  gen_cmd->add_option("--input", gen.input, "raw text file for --kind text")->check(CLI::ExistingFile);
  gen_cmd->add_option("--out", gen.out)->required();
  gen_cmd->callback([&] { rc = corpus_gen(gen); });

  CorpusMixArgs mix;
  auto* mix_cmd = corpus->add_subcommand("mix", "append noise to a clean corpus");
  mix_cmd->add_option("--clean", mix.clean)->required()->check(CLI::ExistingFile);
  mix_cmd->add_option("--noise", mix.noise, "noise token file")->check(CLI::ExistingFile);
  mix_cmd->add_option("--alpha", mix.alpha, "generate noise so it is this fraction of the result");
  mix_cmd->add_option("--kind", mix.kind, "uniform|gaussian (with --alpha)");
  mix_cmd->add_option("--seed", mix.seed);
  mix_cmd->add_option("--vocab", mix.vocab);
  mix_cmd->add_option("--out", mix.out)->required();
  mix_cmd->callback([&] { rc = corpus_mix(mix); });

  std::string inspect_file;
  std::uint32_t inspect_vocab = 256;
  auto* inspect_cmd = corpus->add_subcommand("inspect", "print corpus statistics and metadata");
  inspect_cmd->add_option("file", inspect_file)->required()->check(CLI::ExistingFile);
  inspect_cmd->add_option("--vocab", inspect_vocab);
  inspect_cmd->callback([&] { rc = corpus_inspect(inspect_file, inspect_vocab); });

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "pretrain the byte-level model on a clean+noise mixture");
  train_cmd->add_option("--config", tr.config, "config file with [model] [train] [corpus]")->check(CLI::ExistingFile);
  train_cmd->add_option("--alpha", tr.alpha, "noise fraction");
  train_cmd->add_option("--noise", tr.noise, "uniform|gaussian")->check(CLI::IsMember({"uniform", "gaussian"}));
  train_cmd->add_option("--seed", tr.seed);
  train_cmd->add_option("--out", tr.out, "run directory");
  train_cmd->add_option("--set", tr.overrides, "section.key=value override");
  train_cmd->callback([&] { rc = train(tr); });

  auto* theory = app.add_subcommand("theory", "exact checks of the mixture-loss results");
  theory->require_subcommand(1);
  std::string which = "all";
  std::uint64_t draws = 1000, grid = 10000, tseed = 0;
  auto* verify = theory->add_subcommand("verify", "randomized check of the three cases");
  verify->add_option("--case", which, "1|2|3|all")->check(CLI::IsMember({"1", "2", "3", "all"}));
  verify->add_option("--draws", draws);
  verify->add_option("--grid", grid);
  verify->add_option("--seed", tseed);
  verify->callback([&] { rc = theory_verify(which, draws, grid, tseed); });

  ProbeArgs pa;
  auto* probe_cmd = app.add_subcommand("probe", "train a linear/MLP head with the gradient-matching loss");
  pa.add_to(probe_cmd);
  probe_cmd->callback([&] { rc = probe(pa); });

  ProbeArgs fa;
  std::size_t n_pairs = 64, n_dirs = 16;
  auto* flat_cmd = app.add_subcommand("flatness", "smoothness/flatness bound diagnostics of a trained head");
  fa.add_to(flat_cmd);
  flat_cmd->add_option("--n-pairs", n_pairs);
  flat_cmd->add_option("--n-dirs", n_dirs);
  flat_cmd->callback([&] { rc = flatness(fa, n_pairs, n_dirs); });

  ProbeArgs sa;
  std::size_t index = 0, sgrid = 41;
  double half_width = 2.0;
  std::string sout;
  auto* sens_cmd = app.add_subcommand("sensmap", "label grid over a random plane around a test sample (CSV)");
  sa.add_to(sens_cmd);
  sens_cmd->add_option("--index", index, "test sample index");
  sens_cmd->add_option("--half-width", half_width);
  sens_cmd->add_option("--grid", sgrid, "odd grid size");
  sens_cmd->add_option("--out", sout, "CSV path (stdout if omitted)");
  sens_cmd->callback([&] { rc = sensmap(sa, index, half_width, sgrid, sout); });

  std::string run_config, run_out;
  std::optional<std::uint64_t> run_seed;
  std::vector<std::string> run_overrides;
  auto* run_cmd = app.add_subcommand("run", "run a registered experiment from a config file");
  run_cmd->add_option("--config", run_config)->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--seed", run_seed);
  run_cmd->add_option("--out", run_out, "run directory (default $NOISETRAP_OUT/<name>/seed-<seed>)");
  run_cmd->add_option("--set", run_overrides, "section.key=value override");
  run_cmd->callback([&] { rc = run(run_config, run_seed, run_out, run_overrides); });

  std::string ca, cb, metric = "loss_clean_val", cout_path;
  auto* cmp_cmd = app.add_subcommand("compare", "iteration-aligned metric deltas between two runs");
  cmp_cmd->add_option("run_a", ca)->required();
  cmp_cmd->add_option("run_b", cb)->required();
  cmp_cmd->add_option("--metric", metric);
  cmp_cmd->add_option("--out", cout_path, "write per-point deltas as CSV");
  cmp_cmd->callback([&] { rc = compare(ca, cb, metric, cout_path); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const nt::alignment_error& e) {
    std::cerr << "alignment error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
