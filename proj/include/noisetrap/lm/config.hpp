#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "noisetrap/error.hpp"

namespace noisetrap::lm {

/// Decoder-only transformer shape.
struct LmConfig {
  std::uint32_t n_layers = 4;
  std::uint32_t n_heads = 4;
  std::uint32_t d_model = 128;
  std::uint32_t context_len = 128;
  std::uint32_t vocab_size = 256;
  double dropout = 0.0;

  void validate() const {
    detail::require(n_layers >= 1, "n_layers must be positive");
    detail::require(n_heads >= 1, "n_heads must be positive");
    detail::require(d_model >= 1, "d_model must be positive");
    detail::require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
    detail::require(context_len >= 2, "context_len must be >= 2");
    detail::require(vocab_size >= 1, "vocab_size must be positive");
    detail::require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  }

  std::uint32_t head_dim() const { return d_model / n_heads; }

  bool operator==(const LmConfig&) const = default;
};

/// Optimizer and schedule. Defaults are the GPT-2 pretraining values
/// (AdamW, lr 6e-4 cosine-annealed to 6e-5, weight decay 0.1, betas 0.9/0.95).
struct TrainRecipe {
  double lr_max = 6e-4;
  double lr_min = 6e-5;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  std::uint32_t batch_size = 16;
  std::uint32_t grad_accum_steps = 1;
  // Linear warmup length; unset means 2% of total_iters.
  std::optional<std::uint32_t> warmup_iters;
  std::uint32_t total_iters = 2000;
  std::uint32_t eval_interval = 100;
  std::uint32_t eval_windows = 64;
  std::uint64_t seed = 1337;

  std::uint32_t effective_warmup() const {
    return warmup_iters.value_or(static_cast<std::uint32_t>(total_iters / 50));
  }

  void validate() const {
    detail::require(lr_min > 0.0 && lr_min <= lr_max, "require 0 < lr_min <= lr_max");
    detail::require(beta1 >= 0.0 && beta1 < 1.0, "beta1 must lie in [0, 1)");
    detail::require(beta2 >= 0.0 && beta2 < 1.0, "beta2 must lie in [0, 1)");
    detail::require(weight_decay >= 0.0, "weight_decay must be non-negative");
    detail::require(batch_size >= 1 && grad_accum_steps >= 1, "batch_size and grad_accum_steps must be positive");
    detail::require(total_iters >= 1, "total_iters must be positive");
    detail::require(eval_interval >= 1, "eval_interval must be positive");
    detail::require(eval_windows >= 1, "eval_windows must be positive");
    detail::require(effective_warmup() <= total_iters, "warmup longer than training");
  }
};

/// Segment-wise losses (nats/token) at one evaluation point. The noise loss
/// is absent when the training corpus has no noise segment long enough for a window.
struct EvalReport {
  std::uint32_t iter = 0;
  std::uint64_t tokens_seen = 0;
  double loss_clean_val = 0.0;
  std::optional<double> loss_noise_train;
  double loss_mixed_train = 0.0;

  bool operator==(const EvalReport&) const = default;
};

}  // namespace noisetrap::lm
