#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "noisetrap/corpus.hpp"
#include "noisetrap/harness/config.hpp"
#include "noisetrap/harness/csv.hpp"
#include "noisetrap/harness/manifest.hpp"
#include "noisetrap/lgm.hpp"
#include "noisetrap/lm/train.hpp"
#include "noisetrap/text_source.hpp"
#include "noisetrap/theory.hpp"

namespace noisetrap::harness {

inline constexpr const char* kOutputRootEnv = "NOISETRAP_OUT";

/// Root for run directories: $NOISETRAP_OUT, else ./noisetrap-runs.
inline std::filesystem::path output_root() {
  const char* v = std::getenv(kOutputRootEnv);
  return (v && *v) ? std::filesystem::path(v) : std::filesystem::path("noisetrap-runs");
}

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names = {"noise-sweep", "gaussian-vs-uniform", "theory-verify",
                                                 "lgm-probe",   "flatness",            "sensmap"};
  return names;
}

struct ExperimentSpec {
  std::string name;
  Config config;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;

  /// Reads [experiment] name/seed; the run directory defaults to
  /// <output root>/<name>/seed-<seed>.
  static ExperimentSpec from_config(Config c, std::filesystem::path out_dir = {}) {
    ExperimentSpec s;
    s.name = c.get("experiment", "name", "");
    s.seed = c.get_u64("experiment", "seed", 0);
    s.config = std::move(c);
    s.out_dir = out_dir.empty() ? output_root() / s.name / ("seed-" + std::to_string(s.seed)) : std::move(out_dir);
    return s;
  }

  void validate() const {
    const auto& n = experiment_names();
    if (std::find(n.begin(), n.end(), name) == n.end()) {
      std::string all;
      for (const auto& x : n) all += (all.empty() ? "" : ", ") + x;
      throw invalid_argument("unknown experiment '" + name + "' (expected one of: " + all + ")");
    }
    if (out_dir.empty()) throw invalid_argument("experiment output directory is empty");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir)) {
      throw invalid_argument("output directory " + out_dir.string() + " is not writable");
    }
  }
};

struct Outcome {
  nlohmann::json summary = nlohmann::json::object();
  std::map<std::string, bool> checks;
};

using Logger = std::function<void(const std::string&)>;
using Runner = std::function<Outcome(RunDir&, const Logger&)>;

// ---------------------------------------------------------------------------
// Language-model pipelines

/// Model, optimizer and clean-corpus settings shared by the LM experiments.
struct LmSetup {
  lm::LmConfig model;
  lm::TrainRecipe recipe;
  std::uint64_t clean_bytes = 10'500'000;
  double val_fraction = 0.05;
  std::uint64_t text_seed = 7;
  std::string clean_file;  // raw bytes; empty means the synthetic generator
  std::uint64_t noise_seed = 11;

  static LmSetup from(const Config& c) {
    LmSetup s;
    auto u32 = [&](const char* sec, const char* key, std::uint32_t fb) {
      const auto v = c.get_u64(sec, key, fb);
      if (v > 0xFFFFFFFFull) throw invalid_argument(std::string(sec) + "." + key + " is too large");
      return static_cast<std::uint32_t>(v);
    };
    s.model.n_layers = u32("model", "n_layers", s.model.n_layers);
    s.model.n_heads = u32("model", "n_heads", s.model.n_heads);
    s.model.d_model = u32("model", "d_model", s.model.d_model);
    s.model.context_len = u32("model", "context_len", s.model.context_len);
    s.model.vocab_size = u32("model", "vocab_size", s.model.vocab_size);
    s.model.dropout = c.get_double("model", "dropout", s.model.dropout);

    auto& r = s.recipe;
    r.lr_max = c.get_double("train", "lr_max", 1e-3);
    r.lr_min = c.get_double("train", "lr_min", r.lr_max / 10.0);
    r.weight_decay = c.get_double("train", "weight_decay", r.weight_decay);
    r.beta1 = c.get_double("train", "beta1", r.beta1);
    r.beta2 = c.get_double("train", "beta2", r.beta2);
    r.grad_clip = c.get_double("train", "grad_clip", r.grad_clip);
    r.batch_size = u32("train", "batch_size", 8);
    r.grad_accum_steps = u32("train", "grad_accum_steps", r.grad_accum_steps);
    r.total_iters = u32("train", "iters", 1500);
    if (c.has("train", "warmup_iters")) r.warmup_iters = u32("train", "warmup_iters", 0);
    r.eval_interval = u32("train", "eval_interval", 100);
    r.eval_windows = u32("train", "eval_windows", 64);

    s.clean_bytes = c.get_u64("corpus", "clean_bytes", s.clean_bytes);
    s.val_fraction = c.get_double("corpus", "val_fraction", s.val_fraction);
    s.text_seed = c.get_u64("corpus", "text_seed", s.text_seed);
    s.clean_file = c.get("corpus", "clean_file", "");
    s.noise_seed = c.get_u64("corpus", "noise_seed", s.noise_seed);
    s.validate();
    return s;
  }

  void validate() const {
    model.validate();
    recipe.validate();
    noisetrap::detail::require(model.vocab_size >= 256, "byte-level corpora need vocab_size >= 256");
    noisetrap::detail::require(val_fraction > 0.0 && val_fraction < 0.5, "corpus.val_fraction must lie in (0, 0.5)");
    if (clean_file.empty()) {
      noisetrap::detail::require(clean_bytes > 4u * model.context_len, "corpus.clean_bytes too small");
    } else if (!std::filesystem::exists(clean_file)) {
      throw invalid_argument("corpus.clean_file " + clean_file + " does not exist");
    }
  }

  std::pair<corpus::TokenCorpus, corpus::TokenCorpus> clean_split() const {
    corpus::TokenCorpus clean;
    if (clean_file.empty()) {
      clean = corpus::SyntheticText().corpus(clean_bytes, text_seed);
    } else {
      std::ifstream in(clean_file, std::ios::binary);
      std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      clean = corpus::from_bytes(bytes);
    }
    clean.vocab_size = model.vocab_size;
    return corpus::split_tail(clean, val_fraction);
  }

  corpus::NoiseSpec noise(corpus::NoiseKind kind, double alpha) const {
    if (kind == corpus::NoiseKind::uniform) return {kind, alpha, 0.0, 1.0, noise_seed};
    return corpus::NoiseSpec::gaussian_for(model.vocab_size, alpha, noise_seed);
  }

  std::vector<lm::EvalReport> run(const corpus::TokenCorpus& train, const corpus::TokenCorpus& val,
                                  std::uint64_t seed) const {
    lm::TrainRecipe r = recipe;
    r.seed = seed;
    return lm::train(model, r, train, val, lm::NoiseRegion::of(train)).reports;
  }
};

namespace detail {

inline std::string eval_csv(const std::vector<lm::EvalReport>& reports) {
  std::ostringstream out;
  lm::write_eval_csv(out, reports);
  return out.str();
}

/// Point-wise mean over seeds; all runs must share the same evaluation grid.
inline std::vector<lm::EvalReport> mean_curve(const std::vector<std::vector<lm::EvalReport>>& runs) {
  if (runs.empty()) throw invalid_argument("mean_curve: no runs");
  std::vector<lm::EvalReport> out = runs.front();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double c = 0, m = 0, n = 0;
    bool has_noise = true;
    for (const auto& r : runs) {
      if (r.size() != out.size() || r[i].iter != out[i].iter) throw alignment_error("seed runs use different grids");
      c += r[i].loss_clean_val;
      m += r[i].loss_mixed_train;
      if (r[i].loss_noise_train) n += *r[i].loss_noise_train; else has_noise = false;
    }
    const double k = static_cast<double>(runs.size());
    out[i].loss_clean_val = c / k;
    out[i].loss_mixed_train = m / k;
    out[i].loss_noise_train = has_noise ? std::optional<double>(n / k) : std::nullopt;
  }
  return out;
}

/// Linear interpolation of y(x) on a sorted grid; NaN outside it.
inline double interp(const std::vector<double>& xs, const std::vector<double>& ys, double x) {
  if (xs.empty() || x < xs.front() || x > xs.back()) return std::numeric_limits<double>::quiet_NaN();
  auto it = std::lower_bound(xs.begin(), xs.end(), x);
  const auto j = static_cast<std::size_t>(it - xs.begin());
  if (xs[j] == x || j == 0) return ys[j];
  const double t = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
  return ys[j - 1] + t * (ys[j] - ys[j - 1]);
}

inline std::uint32_t first_eval_at_or_after(const std::vector<lm::EvalReport>& curve, std::uint32_t iter) {
  for (const auto& r : curve) {
    if (r.iter >= iter && r.iter > 0) return r.iter;
  }
  throw invalid_argument("no evaluation at or after iteration " + std::to_string(iter));
}

}  // namespace detail

/// One k estimate per checkpoint of the noisy run. The reference noise loss
/// comes from an early checkpoint of the same noisy run; the clean reference
/// from the clean run at the same iteration.
struct KRow {
  std::uint32_t iter = 0;
  double lc_hstar = 0, lc_h = 0, ln_ref = 0, ln_h = 0;
  std::optional<theory::KEstimate> estimate;
  std::string status;  // "ok" or the ill-posed reason
};

inline std::vector<KRow> k_series(const std::vector<lm::EvalReport>& clean_run,
                                  const std::vector<lm::EvalReport>& noisy_run, std::uint32_t reference_iter) {
  const lm::EvalReport* ref = nullptr;
  for (const auto& r : noisy_run) {
    if (r.iter == reference_iter) ref = &r;
  }
  if (!ref || !ref->loss_noise_train) throw invalid_argument("k reference checkpoint has no noise loss");
  std::vector<KRow> out;
  for (std::size_t i = 0; i < noisy_run.size(); ++i) {
    const auto& h = noisy_run[i];
    if (h.iter <= reference_iter) continue;
    if (i >= clean_run.size() || clean_run[i].iter != h.iter) throw alignment_error("k_series: grids differ");
    KRow row{h.iter, clean_run[i].loss_clean_val, h.loss_clean_val, *ref->loss_noise_train,
             h.loss_noise_train.value_or(std::numeric_limits<double>::quiet_NaN()), std::nullopt, "ok"};
    try {
      row.estimate = theory::k_from_losses(row.lc_hstar, row.lc_h, row.ln_ref, row.ln_h);
    } catch (const ill_posed& e) {
      row.status = e.what();
    }
    out.push_back(row);
  }
  return out;
}

inline std::string csv_safe(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  return s;
}

inline Runner prepare_noise_sweep(const Config& c, std::uint64_t seed) {
  const LmSetup setup = LmSetup::from(c);
  auto alphas = c.get_doubles("sweep", "alphas", {0.0, 0.01, 0.05, 0.20});
  const auto seeds = c.get_u64s("sweep", "seeds", {seed});
  const auto kind = corpus::parse_noise_kind(c.get("sweep", "noise", "uniform"));
  const auto ref_iter_cfg = c.get_u64("k", "reference_iter", 0);
  const double k_threshold = c.get_double("k", "threshold", 10.0);
  const double check_alpha = c.get_double("checks", "disproportion_alpha", 0.05);
  const double max_rel = c.get_double("checks", "max_relative_increase", 0.05);
  std::sort(alphas.begin(), alphas.end());
  alphas.erase(std::unique(alphas.begin(), alphas.end()), alphas.end());
  for (double a : alphas) noisetrap::detail::require(a >= 0.0 && a < 1.0, "sweep.alphas must lie in [0, 1)");

  return [=](RunDir& dir, const Logger& log) {
    Outcome out;
    const auto [train_clean, val] = setup.clean_split();
    std::map<double, std::vector<lm::EvalReport>> means;
    for (double a : alphas) {
      const auto mixed = corpus::make_mixed(train_clean, setup.noise(kind, a));
      std::vector<std::vector<lm::EvalReport>> runs;
      for (auto s : seeds) {
        log("noise-sweep: alpha=" + fmt_num(a) + " seed=" + std::to_string(s));
        runs.push_back(setup.run(mixed, val, s));
        dir.write_text("curves/noise-" + std::string(corpus::to_string(kind)) + "_alpha-" + fmt_num(a) +
                           "_seed-" + std::to_string(s) + ".csv",
                       detail::eval_csv(runs.back()));
      }
      means[a] = detail::mean_curve(runs);
    }

    CsvTable mean_csv({"alpha", "iter", "tokens_seen", "loss_clean_val", "loss_noise_train", "loss_mixed_train"});
    for (const auto& [a, curve] : means) {
      for (const auto& r : curve) {
        mean_csv.row({fmt_num(a), std::to_string(r.iter), std::to_string(r.tokens_seen), fmt_num(r.loss_clean_val),
                      fmt_opt(r.loss_noise_train), fmt_num(r.loss_mixed_train)});
      }
    }
    dir.write_text("mean_curves.csv", mean_csv.str());

    nlohmann::json finals = nlohmann::json::array();
    const bool has_clean = means.count(0.0) > 0;
    if (has_clean) {
      // Matching by iteration, and by expected clean tokens seen ((1 - alpha) of all tokens).
      const auto& base = means.at(0.0);
      std::vector<double> base_tokens, base_loss;
      for (const auto& r : base) {
        base_tokens.push_back(static_cast<double>(r.tokens_seen));
        base_loss.push_back(r.loss_clean_val);
      }
      CsvTable deltas({"alpha", "iter", "loss_clean_val", "delta_iter", "rel_delta_iter", "clean_tokens_seen",
                       "delta_clean_tokens", "rel_delta_clean_tokens"});
      for (const auto& [a, curve] : means) {
        for (std::size_t i = 0; i < curve.size(); ++i) {
          if (base[i].iter != curve[i].iter) throw alignment_error("noise-sweep: grids differ across alpha");
          const double d = curve[i].loss_clean_val - base[i].loss_clean_val;
          const double clean_tokens = (1.0 - a) * static_cast<double>(curve[i].tokens_seen);
          const double ref = detail::interp(base_tokens, base_loss, clean_tokens);
          const double dt = curve[i].loss_clean_val - ref;
          deltas.row({fmt_num(a), std::to_string(curve[i].iter), fmt_num(curve[i].loss_clean_val), fmt_num(d),
                      fmt_num(d / base[i].loss_clean_val), fmt_num(clean_tokens), fmt_num(dt), fmt_num(dt / ref)});
        }
      }
      dir.write_text("deltas.csv", deltas.str());
    }

    double prev = -INFINITY;
    bool monotone = true;
    for (const auto& [a, curve] : means) {
      const double f = curve.back().loss_clean_val;
      monotone = monotone && f >= prev;
      prev = f;
      nlohmann::json j = {{"alpha", a}, {"iter", curve.back().iter}, {"loss_clean_val", f}};
      if (has_clean) j["rel_increase"] = f / means.at(0.0).back().loss_clean_val - 1.0;
      if (curve.back().loss_noise_train) j["loss_noise_train"] = *curve.back().loss_noise_train;
      finals.push_back(j);
    }
    out.summary["seeds"] = seeds;
    out.summary["final"] = finals;
    out.summary["monotone"] = monotone;
    out.checks["monotone_clean_val"] = monotone;
    if (has_clean && means.count(check_alpha) && check_alpha > 0.0) {
      const double rel = means.at(check_alpha).back().loss_clean_val / means.at(0.0).back().loss_clean_val - 1.0;
      out.summary["disproportion"] = {{"alpha", check_alpha}, {"rel_increase", rel}, {"limit", max_rel}};
      out.checks["disproportionate_increase"] = rel < max_rel;
    }

    if (has_clean) {
      CsvTable kcsv({"alpha", "iter", "lc_hstar", "lc_h", "ln_ref", "ln_h", "epsilon", "eps_over_k", "k", "status", "reason"});
      nlohmann::json kj = nlohmann::json::array();
      bool all_above = true;
      std::size_t n_ok = 0;
      for (const auto& [a, curve] : means) {
        if (a == 0.0) continue;
        const std::uint32_t total = curve.back().iter;
        const auto ref_iter = ref_iter_cfg ? static_cast<std::uint32_t>(ref_iter_cfg)
                                           : detail::first_eval_at_or_after(curve, (total + 29) / 30);
        std::size_t ok = 0, ill = 0;
        double k_min = INFINITY;
        for (const auto& row : k_series(means.at(0.0), curve, ref_iter)) {
          const auto& e = row.estimate;
          kcsv.row({fmt_num(a), std::to_string(row.iter), fmt_num(row.lc_hstar), fmt_num(row.lc_h), fmt_num(row.ln_ref),
                    fmt_num(row.ln_h), e ? fmt_num(e->epsilon) : "", e ? fmt_num(e->eps_over_k) : "",
                    e ? fmt_num(e->k) : "", e ? "ok" : "ill_posed", csv_safe(e ? "" : row.status)});
          if (e) {
            ++ok;
            k_min = std::min(k_min, e->k);
            if (a == check_alpha) all_above = all_above && e->k > k_threshold;
          } else {
            ++ill;
          }
        }
        if (a == check_alpha) n_ok = ok;
        kj.push_back({{"alpha", a}, {"reference_iter", ref_iter}, {"ok", ok}, {"ill_posed", ill},
                      {"k_min", ok ? nlohmann::json(k_min) : nlohmann::json()}});
      }
      dir.write_text("k.csv", kcsv.str());
      out.summary["k"] = kj;
      if (means.count(check_alpha) && check_alpha > 0.0) out.checks["k_above_threshold"] = n_ok > 0 && all_above;
    }
    return out;
  };
}

/// First checkpoint whose clean-val loss is at least `drop` below the initial one.
inline std::optional<std::size_t> drop_checkpoint(const std::vector<lm::EvalReport>& curve, double drop) {
  for (std::size_t i = 0; i < curve.size(); ++i) {
    if (curve[i].loss_clean_val <= curve.front().loss_clean_val - drop) return i;
  }
  return std::nullopt;
}

inline Runner prepare_gaussian_vs_uniform(const Config& c, std::uint64_t seed) {
  const LmSetup setup = LmSetup::from(c);
  const double alpha = c.get_double("sweep", "alpha", 0.05);
  const auto seeds = c.get_u64s("sweep", "seeds", {seed});
  const double drop = c.get_double("checks", "clean_drop", 2.0);
  const double tol = c.get_double("checks", "noise_tolerance", 0.5);
  noisetrap::detail::require(alpha > 0.0 && alpha < 1.0, "sweep.alpha must lie in (0, 1)");

  return [=](RunDir& dir, const Logger& log) {
    Outcome out;
    const auto [train_clean, val] = setup.clean_split();
    const double log_v = std::log(static_cast<double>(setup.model.vocab_size));
    CsvTable cmp({"seed", "iter", "loss_clean_val_uniform", "loss_noise_uniform", "loss_clean_val_gaussian",
                  "loss_noise_gaussian"});
    bool slow = true, lower = true;
    nlohmann::json per_seed = nlohmann::json::array();
    std::map<corpus::NoiseKind, corpus::TokenCorpus> mixed;
    for (auto kind : {corpus::NoiseKind::uniform, corpus::NoiseKind::gaussian}) {
      mixed[kind] = corpus::make_mixed(train_clean, setup.noise(kind, alpha));
    }
    for (auto s : seeds) {
      std::map<corpus::NoiseKind, std::vector<lm::EvalReport>> runs;
      for (auto kind : {corpus::NoiseKind::uniform, corpus::NoiseKind::gaussian}) {
        log("gaussian-vs-uniform: " + std::string(corpus::to_string(kind)) + " seed=" + std::to_string(s));
        runs[kind] = setup.run(mixed[kind], val, s);
        dir.write_text("curves/noise-" + std::string(corpus::to_string(kind)) + "_alpha-" + fmt_num(alpha) +
                           "_seed-" + std::to_string(s) + ".csv",
                       detail::eval_csv(runs[kind]));
      }
      const auto& u = runs[corpus::NoiseKind::uniform];
      const auto& g = runs[corpus::NoiseKind::gaussian];
      for (std::size_t i = 0; i < u.size(); ++i) {
        cmp.row({std::to_string(s), std::to_string(u[i].iter), fmt_num(u[i].loss_clean_val),
                 fmt_opt(u[i].loss_noise_train), fmt_num(g[i].loss_clean_val), fmt_opt(g[i].loss_noise_train)});
      }
      nlohmann::json js = {{"seed", s}};
      const auto at = drop_checkpoint(u, drop);
      if (!at || !u[*at].loss_noise_train || !g[*at].loss_noise_train) {
        slow = lower = false;
        js["drop_checkpoint"] = nullptr;
      } else {
        const double nu = *u[*at].loss_noise_train, ng = *g[*at].loss_noise_train;
        const double nu_final = u.back().loss_noise_train.value_or(NAN);
        const double ng_final = g.back().loss_noise_train.value_or(NAN);
        js["drop_checkpoint"] = u[*at].iter;
        js["noise_uniform"] = nu;
        js["noise_gaussian"] = ng;
        js["gap_to_log_v"] = nu - log_v;
        js["noise_uniform_final"] = nu_final;
        js["noise_gaussian_final"] = ng_final;
        slow = slow && std::abs(nu - log_v) <= tol;
        lower = lower && ng < nu && ng_final < nu_final;
      }
      per_seed.push_back(js);
    }
    dir.write_text("comparison.csv", cmp.str());
    out.summary = {{"alpha", alpha}, {"log_vocab", log_v}, {"seeds", per_seed}};
    out.checks["uniform_noise_slow"] = slow;
    out.checks["gaussian_noise_lower"] = lower;
    return out;
  };
}

// ---------------------------------------------------------------------------
// Theory

inline Runner prepare_theory_verify(const Config& c, std::uint64_t seed) {
  const auto instances = c.get_u64("theory", "linearity_instances", 100);
  const auto draws = c.get_u64("theory", "draws", 1000);
  const auto grid = c.get_u64("theory", "grid", 10000);
  const std::string which = c.get("theory", "cases", "all");
  const double lin_tol = c.get_double("checks", "linearity_tolerance", 1e-12);
  std::vector<theory::CaseId> cases;
  if (which == "all" || which == "1") cases.push_back(theory::CaseId::one);
  if (which == "all" || which == "2") cases.push_back(theory::CaseId::two);
  if (which == "all" || which == "3") {
    cases.push_back(theory::CaseId::three_a);
    cases.push_back(theory::CaseId::three_b);
  }
  if (cases.empty()) throw invalid_argument("theory.cases must be 1, 2, 3 or all, got '" + which + "'");
  noisetrap::detail::require(grid >= 1 && draws >= 1, "theory.grid and theory.draws must be positive");

  return [=](RunDir& dir, const Logger& log) {
    Outcome out;
    nlohmann::json report;
    if (instances > 0) {
      log("theory-verify: linearity over " + std::to_string(instances) + " instances");
      const auto lem = theory::verify_linearity(instances, seed);
      report["linearity"] = {{"instances", lem.instances}, {"max_residual", lem.max_residual}};
      out.checks["linearity_residual"] = lem.max_residual <= lin_tol;
    }
    CsvTable csv({"case", "draws", "checked", "skipped", "counterexamples", "max_residual"});
    report["grid"] = grid;
    report["cases"] = nlohmann::json::array();
    for (auto k : cases) {
      log("theory-verify: case " + theory::to_string(k));
      const auto rep = theory::verify_cases(k, draws, grid, seed);
      report["cases"].push_back(theory::to_json(rep));
      csv.row({rep.case_name, std::to_string(rep.draws), std::to_string(rep.checked), std::to_string(rep.skipped),
               std::to_string(rep.counterexamples.size()), fmt_num(rep.max_residual)});
      out.checks["case_" + rep.case_name] = rep.counterexamples.empty() && rep.checked > 0;
    }
    dir.write_text("theory.json", report.dump(2) + "\n");
    dir.write_text("theory.csv", csv.str());
    out.summary = report;
    return out;
  };
}

// ---------------------------------------------------------------------------
// Probe heads

/// Downstream data: synthetic blobs, or a feature file split by fractions.
struct ProbeData {
  std::string source = "blobs";
  std::string features_file;
  lgm::BlobSpec blobs;
  double val_fraction = 0.1;
  double test_fraction = 0.2;

  static ProbeData from(const Config& c) {
    ProbeData d;
    d.source = c.get("data", "source", "blobs");
    d.features_file = c.get("data", "features", "");
    auto& b = d.blobs;
    b.dim = c.get_u64("data", "dim", b.dim);
    b.num_classes = c.get_u64("data", "classes", b.num_classes);
    b.n_train = c.get_u64("data", "n_train", b.n_train);
    b.n_val = c.get_u64("data", "n_val", b.n_val);
    b.n_test = c.get_u64("data", "n_test", b.n_test);
    b.separation = c.get_double("data", "separation", b.separation);
    b.within_std = c.get_double("data", "within_std", b.within_std);
    b.feature_noise = c.get_double("data", "feature_noise", 2.0);
    d.val_fraction = c.get_double("data", "val_fraction", d.val_fraction);
    d.test_fraction = c.get_double("data", "test_fraction", d.test_fraction);
    if (d.source == "file") {
      if (d.features_file.empty() || !std::filesystem::exists(d.features_file)) {
        throw invalid_argument("data.features must name an existing feature file");
      }
    } else if (d.source != "blobs") {
      throw invalid_argument("data.source must be blobs or file, got '" + d.source + "'");
    }
    noisetrap::detail::require(b.n_train > 0 && b.n_val > 0 && b.n_test > 0, "blob split sizes must be positive");
    return d;
  }

  lgm::SplitDataset make(std::uint64_t seed) const {
    if (source == "file") {
      return lgm::split(lgm::from_table(read_feature_file(features_file)), val_fraction, test_fraction, seed);
    }
    auto spec = blobs;
    spec.seed = seed;
    return lgm::make_blobs(spec);
  }
};

inline lgm::LgmConfig probe_config(const Config& c) {
  lgm::LgmConfig cfg;
  cfg.gamma = c.get_double("probe", "gamma", cfg.gamma);
  cfg.lambda = c.get_double("probe", "lambda", cfg.lambda);
  if (c.has("probe", "rho")) cfg.rho = c.get_double("probe", "rho", 0.0);
  cfg.m_draws = c.get_u64("probe", "m_draws", cfg.m_draws);
  cfg.epochs = c.get_u64("probe", "epochs", cfg.epochs);
  cfg.weight_decay = c.get_double("probe", "weight_decay", cfg.weight_decay);
  cfg.lr = c.get_double("probe", "lr", cfg.lr);
  cfg.batch_size = c.get_u64("probe", "batch_size", cfg.batch_size);
  cfg.validate();
  return cfg;
}

struct ProbeChoice {
  double lr = 0;
  std::size_t batch = 0;
  lgm::ProbeResult result;
};

/// Grid search over (lr, batch) by validation accuracy; ties keep the earlier point.
inline ProbeChoice grid_search(const lgm::SplitDataset& data, lgm::HeadKind head, lgm::LgmConfig cfg,
                               const std::vector<double>& lrs, const std::vector<std::uint64_t>& batches,
                               CsvTable* log_csv = nullptr) {
  std::optional<ProbeChoice> best;
  for (double lr : lrs) {
    for (auto b : batches) {
      cfg.lr = lr;
      cfg.batch_size = b;
      auto r = lgm::train_probe(data, head, cfg);
      if (log_csv) {
        log_csv->row({std::to_string(cfg.seed), fmt_num(cfg.lambda), fmt_num(lr), std::to_string(b),
                      fmt_num(r.metrics.val_accuracy), fmt_num(r.metrics.test_accuracy)});
      }
      if (!best || r.metrics.val_accuracy > best->result.metrics.val_accuracy) best = ProbeChoice{lr, b, std::move(r)};
    }
  }
  return std::move(*best);
}

inline Runner prepare_lgm_probe(const Config& c, std::uint64_t seed) {
  const ProbeData data = ProbeData::from(c);
  const lgm::LgmConfig base = probe_config(c);
  const auto head = lgm::parse_head_kind(c.get("probe", "head", "mlp"));
  const auto seeds = c.get_u64s("probe", "seeds", {seed});
  const auto lrs = c.get_doubles("probe", "lrs", {3e-4, 6e-4});
  const auto batches = c.get_u64s("probe", "batches", {8, 12, 16, 32});
  const auto n_planes = c.get_u64("eval", "planes", 20);
  const double half_width = c.get_double("eval", "half_width", 1.0);
  const auto grid_n = c.get_u64("eval", "grid", 21);
  const auto n_dirs = c.get_u64("eval", "n_dirs", 16);
  const auto n_pairs = c.get_u64("eval", "n_pairs", 64);
  const double acc_tol = c.get_double("checks", "accuracy_tolerance", 0.002);
  noisetrap::detail::require(grid_n % 2 == 1, "eval.grid must be odd");
  noisetrap::detail::require(n_planes >= 1 && n_dirs >= 1 && n_pairs >= 1, "eval counts must be positive");
  for (auto b : batches) noisetrap::detail::require(b >= 1, "probe.batches must be positive");

  return [=](RunDir& dir, const Logger& log) {
    Outcome out;
    CsvTable grid({"seed", "lambda", "lr", "batch_size", "val_accuracy", "test_accuracy"});
    CsvTable rows({"seed", "lambda", "lr", "batch_size", "val_accuracy", "test_accuracy", "r_rho", "correct_fraction",
                   "ce", "lgm"});
    std::map<double, std::array<double, 3>> sums;  // lambda -> (r_rho, correct, acc)
    const std::vector<double> lambdas = {0.0, base.lambda};
    for (auto s : seeds) {
      const auto split = data.make(s);
      const auto planes = lgm::sample_planes(split.test, n_planes, s);
      for (double lam : lambdas) {
        log("lgm-probe: seed=" + std::to_string(s) + " lambda=" + fmt_num(lam));
        auto cfg = base;
        cfg.lambda = lam;
        cfg.seed = s;
        const auto choice = grid_search(split, head, cfg, lrs, batches, &grid);
        const auto& h = choice.result.head;
        const auto flat = lgm::flatness_report(h, split.test, cfg, n_pairs, n_dirs, s);
        const double cf = lgm::mean_correct_fraction(h, split.test, planes, half_width, grid_n);
        const double acc = choice.result.metrics.test_accuracy;
        rows.row({std::to_string(s), fmt_num(lam), fmt_num(choice.lr), std::to_string(choice.batch),
                  fmt_num(choice.result.metrics.val_accuracy), fmt_num(acc), fmt_num(flat.r_rho_hat), fmt_num(cf),
                  fmt_num(flat.ce_value), fmt_num(flat.lgm_value)});
        auto& acc3 = sums[lam];
        acc3[0] += flat.r_rho_hat;
        acc3[1] += cf;
        acc3[2] += acc;
      }
    }
    dir.write_text("grid_search.csv", grid.str());
    dir.write_text("probe.csv", rows.str());
    const double n = static_cast<double>(seeds.size());
    CsvTable summary({"lambda", "mean_r_rho", "mean_correct_fraction", "mean_test_accuracy"});
    nlohmann::json means = nlohmann::json::array();
    for (const auto& [lam, v] : sums) {
      summary.row({fmt_num(lam), fmt_num(v[0] / n), fmt_num(v[1] / n), fmt_num(v[2] / n)});
      means.push_back({{"lambda", lam}, {"r_rho", v[0] / n}, {"correct_fraction", v[1] / n}, {"test_accuracy", v[2] / n}});
    }
    dir.write_text("summary.csv", summary.str());
    out.summary = {{"head", lgm::to_string(head)}, {"seeds", seeds}, {"means", means}};
    if (base.lambda != 0.0) {
      const auto& a = sums.at(0.0);
      const auto& b = sums.at(base.lambda);
      out.checks["flatness_no_larger"] = b[0] <= a[0];
      out.checks["correct_fraction_no_smaller"] = b[1] >= a[1];
      out.checks["accuracy_within_tolerance"] = b[2] / n >= a[2] / n - acc_tol;
    }
    return out;
  };
}

/// Random linear heads on random blob data; checks lgm <= 2 beta + 2 ce + R_rho.
inline Runner prepare_flatness(const Config& c, std::uint64_t seed) {
  const auto configs = c.get_u64("flatness", "configs", 100);
  const auto n_dirs = c.get_u64("flatness", "n_dirs", 16);
  const auto max_dim = c.get_u64("flatness", "max_dim", 32);
  const auto max_classes = c.get_u64("flatness", "max_classes", 8);
  const auto head = lgm::parse_head_kind(c.get("flatness", "head", "linear"));
  noisetrap::detail::require(configs >= 1 && n_dirs >= 1, "flatness.configs and flatness.n_dirs must be positive");
  noisetrap::detail::require(max_dim >= 2 && max_classes >= 2, "flatness.max_dim and max_classes must be >= 2");

  return [=](RunDir& dir, const Logger& log) {
    Outcome out;
    log("flatness: " + std::to_string(configs) + " random configurations");
    CsvTable csv({"config", "head", "dim", "classes", "n", "gamma", "lgm", "ce", "beta_hat", "r_rho", "bound_rhs",
                  "bound_holds"});
    std::size_t violations = 0;
    double min_slack = INFINITY;
    for (std::uint64_t i = 0; i < configs; ++i) {
      Rng rng(derive_seed(seed, 0xF1A7 + i));
      lgm::BlobSpec b;
      b.dim = 2 + rng.uniform_index(max_dim - 1);
      b.num_classes = 2 + rng.uniform_index(max_classes - 1);
      b.n_train = 8 + rng.uniform_index(121);
      b.n_val = b.n_test = 1;
      b.separation = rng.uniform(0.5, 5.0);
      b.feature_noise = rng.uniform(0.0, 2.0);
      b.seed = rng.next();
      const auto data = lgm::make_blobs(b).train;
      auto h = lgm::ProbeHead::init(head, b.dim, b.num_classes, rng);
      h.theta *= std::exp(rng.uniform(std::log(0.1), std::log(10.0)));
      lgm::LgmConfig cfg;
      cfg.gamma = std::exp(rng.uniform(std::log(1e-3), std::log(1.0)));
      const auto r = lgm::flatness_report(h, data, cfg, 16, n_dirs, rng.next());
      violations += !r.bound_holds;
      min_slack = std::min(min_slack, r.bound_rhs - r.lgm_value);
      csv.row({std::to_string(i), std::string(lgm::to_string(head)), std::to_string(b.dim),
               std::to_string(b.num_classes), std::to_string(b.n_train), fmt_num(cfg.gamma), fmt_num(r.lgm_value),
               fmt_num(r.ce_value), fmt_num(r.beta_hat), fmt_num(r.r_rho_hat), fmt_num(r.bound_rhs),
               r.bound_holds ? "1" : "0"});
    }
    dir.write_text("flatness.csv", csv.str());
    out.summary = {{"configs", configs}, {"violations", violations}, {"min_slack", min_slack}};
    out.checks["bound_holds"] = violations == 0;
    return out;
  };
}

inline std::string sensmap_csv(const lgm::SensitivityMap& m, std::uint32_t y, double half_width) {
  CsvTable csv({"i", "j", "a", "b", "label", "correct"});
  const double step = m.grid_n > 1 ? 2.0 * half_width / static_cast<double>(m.grid_n - 1) : 0.0;
  for (std::size_t i = 0; i < m.grid_n; ++i) {
    for (std::size_t j = 0; j < m.grid_n; ++j) {
      const auto l = m.at(i, j);
      csv.row({std::to_string(i), std::to_string(j), fmt_num(-half_width + step * static_cast<double>(i)),
               fmt_num(-half_width + step * static_cast<double>(j)), std::to_string(l), l == y ? "1" : "0"});
    }
  }
  return csv.str();
}

inline Runner prepare_sensmap(const Config& c, std::uint64_t seed) {
  const ProbeData data = ProbeData::from(c);
  const lgm::LgmConfig base = probe_config(c);
  const auto head = lgm::parse_head_kind(c.get("probe", "head", "mlp"));
  const auto index = c.get_u64("sensmap", "index", 0);
  const auto planes = c.get_u64("sensmap", "planes", 1);
  const double half_width = c.get_double("sensmap", "half_width", 2.0);
  const auto grid_n = c.get_u64("sensmap", "grid", 41);
  noisetrap::detail::require(grid_n % 2 == 1, "sensmap.grid must be odd");
  noisetrap::detail::require(planes >= 1, "sensmap.planes must be positive");

  return [=](RunDir& dir, const Logger& log) {
    Outcome out;
    const auto split = data.make(seed);
    if (index >= split.test.size()) throw invalid_argument("sensmap.index beyond the test split");
    auto ps = lgm::sample_planes(split.test, planes, seed);
    for (auto& p : ps) p.index = index;
    nlohmann::json per = nlohmann::json::array();
    for (double lam : {0.0, base.lambda}) {
      log("sensmap: lambda=" + fmt_num(lam));
      auto cfg = base;
      cfg.lambda = lam;
      cfg.seed = seed;
      const auto res = lgm::train_probe(split, head, cfg);
      const lgm::RowVector t = split.test.features.row(static_cast<Eigen::Index>(index));
      const auto y = split.test.labels[index];
      double sum = 0.0;
      for (std::size_t k = 0; k < ps.size(); ++k) {
        const auto m = lgm::sensitivity_map(res.head, t, y, ps[k].u, ps[k].v, half_width, grid_n);
        sum += m.correct_fraction;
        dir.write_text("sensmap_lambda-" + fmt_num(lam) + "_plane-" + std::to_string(k) + ".csv",
                       sensmap_csv(m, y, half_width));
      }
      per.push_back({{"lambda", lam}, {"mean_correct_fraction", sum / static_cast<double>(ps.size())},
                     {"test_accuracy", res.metrics.test_accuracy}});
      if (lam == base.lambda) break;  // lambda = 0 configured: one map set only
    }
    out.summary = {{"index", index}, {"maps", per}};
    return out;
  };
}

// ---------------------------------------------------------------------------
// Runner

inline Runner prepare(const ExperimentSpec& spec) {
  const auto& c = spec.config;
  const std::uint64_t s = spec.seed;
  Runner r;
  if (spec.name == "noise-sweep") r = prepare_noise_sweep(c, s);
  else if (spec.name == "gaussian-vs-uniform") r = prepare_gaussian_vs_uniform(c, s);
  else if (spec.name == "theory-verify") r = prepare_theory_verify(c, s);
  else if (spec.name == "lgm-probe") r = prepare_lgm_probe(c, s);
  else if (spec.name == "flatness") r = prepare_flatness(c, s);
  else r = prepare_sensmap(c, s);
  c.reject_unused(spec.name);
  return r;
}

/// Validates the whole config before any compute, runs the pipeline, and
/// writes manifest.json. A failure mid-run keeps partial outputs and is
/// recorded in the manifest rather than thrown.
inline RunManifest run_experiment(const ExperimentSpec& spec, const Logger& log = {}) {
  spec.validate();
  const Runner runner = prepare(spec);
  RunDir dir(spec.out_dir);
  RunManifest m;
  m.experiment = spec.name;
  m.seed = spec.seed;
  m.config = spec.config.serialize();
  m.started_at = utc_timestamp();
  dir.write_text("config.ini", m.config);
  const Logger quiet = log ? log : Logger([](const std::string&) {});
  try {
    Outcome o = runner(dir, quiet);
    m.summary = std::move(o.summary);
    m.checks = std::move(o.checks);
    const bool all = std::all_of(m.checks.begin(), m.checks.end(), [](const auto& kv) { return kv.second; });
    m.status = all ? "ok" : "checks_failed";
  } catch (const std::exception& e) {
    m.status = "failed";
    m.error = e.what();
  }
  m.files = dir.hash_all();
  m.finished_at = utc_timestamp();
  m.save(spec.out_dir);
  return m;
}

// ---------------------------------------------------------------------------
// Comparison

struct SeriesDelta {
  std::string file;
  std::string group;  // values of grouping columns, e.g. "alpha=0.05"
  std::vector<double> iters, a, b, delta;
  double final_delta = 0.0;
  double max_abs_delta = 0.0;
};

struct CompareReport {
  std::string metric;
  std::vector<SeriesDelta> series;
};

namespace detail {

inline std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> series_of(const CsvData& d,
                                                                                            std::size_t iter_col,
                                                                                            std::size_t metric_col) {
  static const std::vector<std::string> group_cols = {"alpha", "seed", "lambda", "kind"};
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> out;
  for (const auto& row : d.rows) {
    std::string g;
    for (const auto& name : group_cols) {
      if (auto c = d.column(name)) g += (g.empty() ? "" : ";") + name + "=" + row[*c];
    }
    auto& s = out[g];
    s.first.push_back(CsvData::number(row[iter_col]));
    s.second.push_back(CsvData::number(row[metric_col]));
  }
  return out;
}

}  // namespace detail

/// Iteration-aligned differences (b - a) of `metric` for every CSV that
/// carries both an `iter` column and the metric in both runs.
inline CompareReport compare_runs(const std::filesystem::path& run_a, const std::filesystem::path& run_b,
                                  const std::string& metric) {
  const auto dir_a = std::filesystem::is_directory(run_a) ? run_a : run_a.parent_path();
  const auto dir_b = std::filesystem::is_directory(run_b) ? run_b : run_b.parent_path();
  const auto ma = RunManifest::load(run_a), mb = RunManifest::load(run_b);
  CompareReport rep{metric, {}};
  for (const auto& fa : ma.files) {
    if (fa.path.size() < 4 || fa.path.substr(fa.path.size() - 4) != ".csv") continue;
    const auto da = read_csv(dir_a / fa.path);
    const auto ia = da.column("iter"), ca = da.column(metric);
    if (!ia || !ca) continue;
    if (!mb.find(fa.path)) throw alignment_error("run B has no " + fa.path + " to compare " + metric);
    const auto db = read_csv(dir_b / fa.path);
    const auto ib = db.column("iter"), cb = db.column(metric);
    if (!ib || !cb) throw alignment_error(fa.path + " in run B lacks iter/" + metric + " columns");
    const auto sa = detail::series_of(da, *ia, *ca), sb = detail::series_of(db, *ib, *cb);
    for (const auto& [group, xa] : sa) {
      auto it = sb.find(group);
      if (it == sb.end()) throw alignment_error(fa.path + ": series '" + group + "' missing in run B");
      if (xa.first != it->second.first) {
        throw alignment_error(fa.path + (group.empty() ? "" : " [" + group + "]") +
                              ": evaluation iterations differ between runs");
      }
      SeriesDelta s{fa.path, group, xa.first, xa.second, it->second.second, {}, 0.0, 0.0};
      for (std::size_t i = 0; i < s.iters.size(); ++i) {
        const double d = s.b[i] - s.a[i];
        s.delta.push_back(d);
        if (!std::isnan(d)) s.max_abs_delta = std::max(s.max_abs_delta, std::abs(d));
      }
      s.final_delta = s.delta.empty() ? 0.0 : s.delta.back();
      rep.series.push_back(std::move(s));
    }
    if (sb.size() != sa.size()) throw alignment_error(fa.path + ": run B has extra series");
  }
  if (rep.series.empty()) throw alignment_error("no CSV with iter and " + metric + " columns in run A");
  return rep;
}

inline std::string compare_csv(const CompareReport& r) {
  CsvTable csv({"file", "group", "iter", "a", "b", "delta"});
  for (const auto& s : r.series) {
    for (std::size_t i = 0; i < s.iters.size(); ++i) {
      csv.row({s.file, s.group, fmt_num(s.iters[i]), fmt_num(s.a[i]), fmt_num(s.b[i]), fmt_num(s.delta[i])});
    }
  }
  return csv.str();
}

}  // namespace noisetrap::harness
