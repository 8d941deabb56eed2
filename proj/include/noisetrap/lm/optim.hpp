#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "noisetrap/lm/config.hpp"
#include "noisetrap/lm/model.hpp"

namespace noisetrap::lm {

/// Linear warmup to lr_max, then cosine decay to lr_min at total_iters.
inline double learning_rate(const TrainRecipe& r, std::uint32_t iter) {
  const std::uint32_t warmup = r.effective_warmup();
  if (iter < warmup) {
    return r.lr_max * static_cast<double>(iter + 1) / static_cast<double>(warmup + 1);
  }
  if (iter >= r.total_iters) return r.lr_min;
  const double span = static_cast<double>(r.total_iters - warmup);
  const double ratio = span > 0 ? static_cast<double>(iter - warmup) / span : 1.0;
  const double coeff = 0.5 * (1.0 + std::cos(std::numbers::pi * ratio));
  return r.lr_min + coeff * (r.lr_max - r.lr_min);
}

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;

  static AdamHyper of(const TrainRecipe& r) { return {r.beta1, r.beta2, r.adam_eps, r.weight_decay}; }
};

inline std::vector<unsigned char> decay_mask(const ParamLayout& layout) {
  std::vector<unsigned char> mask(layout.total(), 0);
  for (const auto& b : layout.blocks()) {
    if (!b.decay) continue;
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(b.offset), b.size(), 1);
  }
  return mask;
}

/// Adam with decoupled weight decay applied only where the mask is set.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<unsigned char> mask, const AdamHyper& hyper)
      : hyper_(hyper), m_(mask.size(), T(0)), v_(mask.size(), T(0)), decay_mask_(std::move(mask)) {}

  AdamW(const ParamLayout& layout, const TrainRecipe& recipe) : AdamW(decay_mask(layout), AdamHyper::of(recipe)) {}

  void step(std::span<T> params, std::span<const T> grad, double lr) {
    if (params.size() != m_.size() || grad.size() != m_.size()) throw invalid_argument("AdamW: size mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(hyper_.beta1), b2 = static_cast<T>(hyper_.beta2);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(hyper_.eps);
    const T decay = static_cast<T>(1.0 - lr * hyper_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (decay_mask_[i]) params[i] *= decay;
      m_[i] = b1 * m_[i] + (T(1) - b1) * grad[i];
      v_[i] = b2 * v_[i] + (T(1) - b2) * grad[i] * grad[i];
      params[i] -= step_size * m_[i] / (std::sqrt(v_[i]) * inv_sqrt_bc2 + eps);
    }
  }

  std::uint64_t steps() const { return t_; }

 private:
  AdamHyper hyper_;
  aligned_vector<T> m_, v_;
  std::vector<unsigned char> decay_mask_;
  std::uint64_t t_ = 0;
};

/// Scales grad in place so its global L2 norm is at most max_norm; returns the pre-clip norm.
template <class T>
double clip_grad_norm(std::span<T> grad, double max_norm) {
  double sq = 0.0;
  for (T g : grad) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / (norm + 1e-6));
    for (T& g : grad) g *= s;
  }
  return norm;
}

}  // namespace noisetrap::lm
