#pragma once

#include <cmath>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <utility>
#include <vector>

#include "noisetrap/corpus.hpp"
#include "noisetrap/lm/config.hpp"
#include "noisetrap/lm/model.hpp"
#include "noisetrap/lm/optim.hpp"
#include "noisetrap/rng.hpp"

namespace noisetrap::lm {

/// Half-open token range of the noise segment inside the training corpus.
struct NoiseRegion {
  std::size_t begin = 0;
  std::size_t end = 0;

  static NoiseRegion of(const corpus::TokenCorpus& c) {
    auto [b, e] = c.noise_range();
    return {b, e};
  }
};

/// Fixed evaluation windows, chosen once per run so every checkpoint is
/// scored on the same tokens. Validation windows tile the validation corpus
/// and do not depend on the seed, so runs with different seeds or noise
/// levels are compared on identical text.
struct EvalPlan {
  std::vector<std::size_t> clean_val;
  std::vector<std::size_t> noise_train;  // fully inside the noise region
  std::vector<std::size_t> mixed_train;

  static EvalPlan make(const corpus::TokenCorpus& train, const corpus::TokenCorpus& val, const NoiseRegion& region,
                       std::size_t L, std::size_t n_windows) {
    EvalPlan plan;
    const std::size_t tiles = val.size() > L ? (val.size() - 1) / L : 0;
    if (tiles == 0) throw invalid_argument("validation corpus shorter than one window");
    // Spread the chosen tiles evenly over the validation corpus.
    const std::size_t take = std::min(tiles, n_windows);
    for (std::size_t i = 0; i < take; ++i) plan.clean_val.push_back((i * tiles / take) * L);
    Rng noise_rng(0x4E015E);
    plan.noise_train = corpus::windows_inside(region.begin, region.end, L, n_windows, noise_rng);
    Rng mixed_rng(0x313ED);
    plan.mixed_train = corpus::windows_inside(0, train.size(), L, n_windows, mixed_rng);
    return plan;
  }
};

template <class T>
EvalReport evaluate(const LmParams<T>& params, const corpus::TokenCorpus& train, const corpus::TokenCorpus& val,
                    const EvalPlan& plan, std::size_t L, std::uint32_t iter, std::uint64_t tokens_seen) {
  EvalReport r;
  r.iter = iter;
  r.tokens_seen = tokens_seen;
  r.loss_clean_val = windows_loss(params, val, L, plan.clean_val);
  if (!plan.noise_train.empty()) r.loss_noise_train = windows_loss(params, train, L, plan.noise_train);
  r.loss_mixed_train = windows_loss(params, train, L, plan.mixed_train);
  return r;
}

struct TrainResult {
  LmParams<float> params;
  std::vector<EvalReport> reports;
  std::uint32_t iters_done = 0;
};

using EvalCallback = std::function<void(const EvalReport&, const LmParams<float>&)>;

/// Pretrain with the next-token objective on `train_corpus` (typically D_m).
/// Reports are emitted at iteration 0, every eval_interval, and at total_iters.
/// A non-finite loss or parameter aborts with `divergence` carrying the last reports.
inline TrainResult train(const LmConfig& config, const TrainRecipe& recipe, const corpus::TokenCorpus& train_corpus,
                         const corpus::TokenCorpus& clean_val, const NoiseRegion& region,
                         const EvalCallback& on_eval = {}) {
  config.validate();
  recipe.validate();
  train_corpus.validate();
  clean_val.validate();
  if (train_corpus.vocab_size != config.vocab_size || clean_val.vocab_size != config.vocab_size) {
    throw invalid_argument("train: corpus vocabulary does not match the model");
  }
  const std::size_t L = config.context_len;
  if (train_corpus.size() < L + 1) throw invalid_argument("train: training corpus shorter than one window");

  TrainResult result{init_params<float>(config, derive_seed(recipe.seed, 1)), {}, 0};
  AdamW<float> opt(result.params.layout, recipe);
  Rng batch_rng(derive_seed(recipe.seed, 2));
  Rng dropout_rng(derive_seed(recipe.seed, 3));
  const EvalPlan plan = EvalPlan::make(train_corpus, clean_val, region, L, recipe.eval_windows);

  auto emit = [&](std::uint32_t iter) {
    const std::uint64_t tokens = static_cast<std::uint64_t>(iter) * recipe.batch_size * recipe.grad_accum_steps * L;
    EvalReport r = evaluate(result.params, train_corpus, clean_val, plan, L, iter, tokens);
    result.reports.push_back(r);
    if (on_eval) on_eval(r, result.params);
  };
  auto fail = [&](std::uint32_t iter, double loss, double lr) {
    std::ostringstream msg;
    msg << "training diverged at iter " << iter << " (loss=" << loss << ", lr=" << lr << ")";
    if (!result.reports.empty()) {
      const auto& last = result.reports.back();
      msg << "; last eval at iter " << last.iter << ": clean_val=" << last.loss_clean_val
          << " mixed_train=" << last.loss_mixed_train;
    }
    throw divergence(msg.str());
  };

  aligned_vector<float> grad, micro;
  emit(0);
  for (std::uint32_t iter = 0; iter < recipe.total_iters; ++iter) {
    grad.assign(result.params.layout.total(), 0.0f);
    double loss = 0.0;
    for (std::uint32_t a = 0; a < recipe.grad_accum_steps; ++a) {
      const corpus::Batch batch = corpus::sample_batch(train_corpus, L, recipe.batch_size, batch_rng);
      loss += loss_and_grad(result.params, batch, micro, config.dropout > 0.0 ? &dropout_rng : nullptr);
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += micro[i];
    }
    loss /= recipe.grad_accum_steps;
    if (recipe.grad_accum_steps > 1) {
      const float s = 1.0f / static_cast<float>(recipe.grad_accum_steps);
      for (float& g : grad) g *= s;
    }
    const double lr = learning_rate(recipe, iter);
    if (!std::isfinite(loss)) fail(iter, loss, lr);
    clip_grad_norm<float>(grad, recipe.grad_clip);
    opt.step(result.params.data, grad, lr);
    if (!result.params.all_finite()) fail(iter, loss, lr);
    result.iters_done = iter + 1;
    if ((iter + 1) % recipe.eval_interval == 0 || iter + 1 == recipe.total_iters) emit(iter + 1);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Metrics CSV: fixed header, one row per EvalReport; an absent noise loss is
// written as an empty field.

inline constexpr const char* kEvalCsvHeader = "iter,tokens_seen,loss_clean_val,loss_noise_train,loss_mixed_train";

inline void write_eval_row(std::ostream& out, const EvalReport& r) {
  out << r.iter << ',' << r.tokens_seen << ',' << std::setprecision(9) << r.loss_clean_val << ',';
  if (r.loss_noise_train) out << *r.loss_noise_train;
  out << ',' << r.loss_mixed_train << '\n';
}

inline void write_eval_csv(std::ostream& out, const std::vector<EvalReport>& reports) {
  out << kEvalCsvHeader << '\n';
  for (const auto& r : reports) write_eval_row(out, r);
}

inline std::vector<EvalReport> read_eval_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kEvalCsvHeader) throw corrupt_file("metrics CSV has an unexpected header");
  std::vector<EvalReport> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() == 4 && line.back() == ',') f.emplace_back();
    if (f.size() != 5) throw corrupt_file("metrics CSV row has " + std::to_string(f.size()) + " fields");
    EvalReport r;
    r.iter = static_cast<std::uint32_t>(std::stoul(f[0]));
    r.tokens_seen = std::stoull(f[1]);
    r.loss_clean_val = std::stod(f[2]);
    if (!f[3].empty()) r.loss_noise_train = std::stod(f[3]);
    r.loss_mixed_train = std::stod(f[4]);
    out.push_back(r);
  }
  return out;
}

}  // namespace noisetrap::lm
