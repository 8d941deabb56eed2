#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "noisetrap/error.hpp"
#include "noisetrap/feature_file.hpp"
#include "noisetrap/lm/optim.hpp"
#include "noisetrap/rng.hpp"

namespace noisetrap::lgm {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Labels = std::vector<std::uint32_t>;

// ---------------------------------------------------------------------------
// Data

struct FeatureDataset {
  Matrix features;  // n x d
  Labels labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }

  void validate() const {
    noisetrap::detail::require(num_classes >= 2, "dataset needs at least two classes");
    if (static_cast<std::size_t>(features.rows()) != labels.size()) {
      throw invalid_argument("dataset has " + std::to_string(features.rows()) + " feature rows but " +
                             std::to_string(labels.size()) + " labels");
    }
    for (auto y : labels) {
      if (y >= num_classes) throw invalid_argument("label " + std::to_string(y) + " outside class count");
    }
    if (!features.allFinite()) throw invalid_argument("dataset contains non-finite features");
  }

  FeatureDataset subset(const std::vector<std::size_t>& idx) const {
    FeatureDataset out;
    out.num_classes = num_classes;
    out.features.resize(static_cast<Eigen::Index>(idx.size()), features.cols());
    out.labels.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(idx[i]));
      out.labels[i] = labels[idx[i]];
    }
    return out;
  }
};

struct SplitDataset {
  FeatureDataset train, val, test;
};

inline FeatureDataset from_table(const FeatureTable& t) {
  FeatureDataset d;
  d.num_classes = t.num_classes;
  d.features.resize(static_cast<Eigen::Index>(t.features.size()), static_cast<Eigen::Index>(t.dim));
  for (std::size_t i = 0; i < t.features.size(); ++i) {
    for (std::size_t j = 0; j < t.dim; ++j) {
      d.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t.features[i][j];
    }
  }
  d.labels = t.labels;
  return d;
}

inline FeatureTable to_table(const FeatureDataset& d) {
  FeatureTable t;
  t.dim = d.dim();
  t.num_classes = d.num_classes;
  t.labels = d.labels;
  t.features.resize(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto r = d.features.row(static_cast<Eigen::Index>(i));
    t.features[i].assign(r.data(), r.data() + r.size());
  }
  return t;
}

/// Deterministic shuffled split into train/val/test by fractions.
inline SplitDataset split(const FeatureDataset& all, double val_fraction, double test_fraction, std::uint64_t seed) {
  noisetrap::detail::require(val_fraction >= 0 && test_fraction >= 0 && val_fraction + test_fraction < 1.0,
                  "split fractions must leave a training part");
  std::vector<std::size_t> idx(all.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::round(val_fraction * all.size()));
  const auto n_test = static_cast<std::size_t>(std::round(test_fraction * all.size()));
  const std::size_t n_train = all.size() - n_val - n_test;
  auto part = [&](std::size_t b, std::size_t e) {
    return all.subset(std::vector<std::size_t>(idx.begin() + static_cast<std::ptrdiff_t>(b),
                                               idx.begin() + static_cast<std::ptrdiff_t>(e)));
  };
  return {part(0, n_train), part(n_train, n_train + n_val), part(n_train + n_val, all.size())};
}

/// Gaussian class blobs in R^d. Class means have norm close to `separation`;
/// each point gets within-class noise plus an extra `feature_noise` corruption.
struct BlobSpec {
  std::size_t dim = 32;
  std::size_t num_classes = 4;
  std::size_t n_train = 2000;
  std::size_t n_val = 500;
  std::size_t n_test = 2000;
  double separation = 3.0;
  double within_std = 1.0;
  double feature_noise = 0.0;
  std::uint64_t seed = 0;
};

inline SplitDataset make_blobs(const BlobSpec& s) {
  noisetrap::detail::require(s.dim >= 1 && s.num_classes >= 2, "blobs need d >= 1 and C >= 2");
  Rng rng(derive_seed(s.seed, 0xb10b));
  Matrix means(static_cast<Eigen::Index>(s.num_classes), static_cast<Eigen::Index>(s.dim));
  for (Eigen::Index c = 0; c < means.rows(); ++c) {
    for (Eigen::Index j = 0; j < means.cols(); ++j) means(c, j) = rng.normal();
    means.row(c) *= s.separation / means.row(c).norm();
  }
  auto draw = [&](std::size_t n) {
    FeatureDataset d;
    d.num_classes = s.num_classes;
    d.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(s.dim));
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto y = static_cast<std::uint32_t>(rng.uniform_index(s.num_classes));
      d.labels[i] = y;
      for (std::size_t j = 0; j < s.dim; ++j) {
        const double within = s.within_std * rng.normal();
        const double corrupt = s.feature_noise > 0.0 ? s.feature_noise * rng.normal() : 0.0;
        d.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            means(y, static_cast<Eigen::Index>(j)) + within + corrupt;
      }
    }
    return d;
  };
  SplitDataset out;
  out.train = draw(s.n_train);
  out.val = draw(s.n_val);
  out.test = draw(s.n_test);
  return out;
}

// ---------------------------------------------------------------------------
// Heads

enum class HeadKind { linear, mlp };

inline std::string_view to_string(HeadKind k) { return k == HeadKind::linear ? "linear" : "mlp"; }

inline HeadKind parse_head_kind(std::string_view s) {
  if (s == "linear") return HeadKind::linear;
  if (s == "mlp") return HeadKind::mlp;
  throw invalid_argument("unknown head kind '" + std::string(s) + "' (expected linear|mlp)");
}

/// Parameter order in theta:
///   linear: W (C x d, row-major), b (C)
///   mlp:    W1 (d x d, row-major), b1 (d), W2 (C x d, row-major), b2 (C)
struct ProbeHead {
  HeadKind kind = HeadKind::linear;
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  Vector theta;

  static std::size_t param_count(HeadKind kind, std::size_t d, std::size_t C) {
    return kind == HeadKind::linear ? C * d + C : d * d + d + C * d + C;
  }

  static ProbeHead zeros(HeadKind kind, std::size_t d, std::size_t C) {
    noisetrap::detail::require(d >= 1 && C >= 2, "probe head needs d >= 1 and C >= 2");
    return {kind, d, C, Vector::Zero(static_cast<Eigen::Index>(param_count(kind, d, C)))};
  }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  static ProbeHead init(HeadKind kind, std::size_t d, std::size_t C, Rng& rng) {
    ProbeHead h = zeros(kind, d, C);
    const double a = 1.0 / std::sqrt(static_cast<double>(d));
    for (Eigen::Index i = 0; i < h.theta.size(); ++i) h.theta(i) = rng.uniform(-a, a);
    return h;
  }

  std::size_t size() const { return static_cast<std::size_t>(theta.size()); }
  bool finite() const { return theta.allFinite(); }

  /// Decay applies to weight matrices only.
  std::vector<unsigned char> decay_mask() const {
    std::vector<unsigned char> m(size(), 0);
    const std::size_t d = dim, C = num_classes;
    if (kind == HeadKind::linear) {
      std::fill_n(m.begin(), C * d, 1);
    } else {
      std::fill_n(m.begin(), d * d, 1);
      std::fill_n(m.begin() + static_cast<std::ptrdiff_t>(d * d + d), C * d, 1);
    }
    return m;
  }
};

namespace detail {

using ConstMatMap = Eigen::Map<const Matrix>;
using ConstVecMap = Eigen::Map<const RowVector>;
using MatMap = Eigen::Map<Matrix>;
using VecMap = Eigen::Map<RowVector>;

// Views of one layer's (weight, bias) inside a flat parameter vector.
struct LayerSpan {
  std::size_t offset, out, in;
  std::size_t w_size() const { return out * in; }
  std::size_t size() const { return out * in + out; }
};

inline std::vector<LayerSpan> layers_of(const ProbeHead& h) {
  if (h.kind == HeadKind::linear) return {{0, h.num_classes, h.dim}};
  return {{0, h.dim, h.dim}, {h.dim * h.dim + h.dim, h.num_classes, h.dim}};
}

inline ConstMatMap W(const Vector& v, const LayerSpan& l) {
  return {v.data() + l.offset, static_cast<Eigen::Index>(l.out), static_cast<Eigen::Index>(l.in)};
}
inline ConstVecMap bvec(const Vector& v, const LayerSpan& l) {
  return {v.data() + l.offset + l.w_size(), static_cast<Eigen::Index>(l.out)};
}
inline MatMap W(Vector& v, const LayerSpan& l) {
  return {v.data() + l.offset, static_cast<Eigen::Index>(l.out), static_cast<Eigen::Index>(l.in)};
}
inline VecMap bvec(Vector& v, const LayerSpan& l) {
  return {v.data() + l.offset + l.w_size(), static_cast<Eigen::Index>(l.out)};
}

inline void check_batch(const ProbeHead& h, const Matrix& X, const Labels& y) {
  if (static_cast<std::size_t>(X.cols()) != h.dim) {
    throw invalid_argument("feature dimension " + std::to_string(X.cols()) + " does not match head dimension " +
                           std::to_string(h.dim));
  }
  if (static_cast<std::size_t>(X.rows()) != y.size()) throw invalid_argument("features and labels disagree in count");
  if (y.empty()) throw invalid_argument("empty batch");
  for (auto c : y) {
    if (c >= h.num_classes) throw invalid_argument("label outside the head's classes");
  }
  if (h.size() != ProbeHead::param_count(h.kind, h.dim, h.num_classes)) {
    throw invalid_argument("head parameter vector has the wrong size");
  }
}

inline void softmax_rows(const Matrix& Z, Matrix& P, Vector* lse = nullptr) {
  P.resize(Z.rows(), Z.cols());
  if (lse) lse->resize(Z.rows());
  for (Eigen::Index i = 0; i < Z.rows(); ++i) {
    const double m = Z.row(i).maxCoeff();
    P.row(i) = (Z.row(i).array() - m).exp();
    const double s = P.row(i).sum();
    P.row(i) /= s;
    if (lse) (*lse)(i) = m + std::log(s);
  }
}

/// Mean softmax cross-entropy of the head on (X, y). Optionally returns the
/// mean parameter gradient and, given a direction `dir`, the Hessian-vector
/// product of that mean loss (forward-mode R-operator over the backward pass).
inline double ce_core(const ProbeHead& h, const Matrix& X, const Labels& y, Vector* grad, const Vector* dir,
                      Vector* hvp) {
  const auto layers = layers_of(h);
  const auto n = X.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  const bool mlp = h.kind == HeadKind::mlp;
  const auto& out = layers.back();

  Matrix A, H, RA, RH;
  const Matrix* last_in = &X;
  if (mlp) {
    const auto& l1 = layers[0];
    A.noalias() = X * W(h.theta, l1).transpose();
    A.rowwise() += bvec(h.theta, l1);
    H = A.cwiseMax(0.0);
    last_in = &H;
  }
  Matrix Z = *last_in * W(h.theta, out).transpose();
  Z.rowwise() += bvec(h.theta, out);
  Matrix P;
  Vector lse;
  softmax_rows(Z, P, &lse);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) loss += lse(i) - Z(i, static_cast<Eigen::Index>(y[static_cast<std::size_t>(i)]));
  loss *= inv_n;
  if (!grad && !hvp) return loss;

  Matrix GZ = P;
  for (Eigen::Index i = 0; i < n; ++i) GZ(i, static_cast<Eigen::Index>(y[static_cast<std::size_t>(i)])) -= 1.0;
  GZ *= inv_n;

  if (grad) {
    grad->setZero(static_cast<Eigen::Index>(h.size()));
    W(*grad, out).noalias() = GZ.transpose() * *last_in;
    bvec(*grad, out) = GZ.colwise().sum();
    if (mlp) {
      const auto& l1 = layers[0];
      Matrix GA = (GZ * W(h.theta, out)).cwiseProduct((A.array() > 0.0).cast<double>().matrix());
      W(*grad, l1).noalias() = GA.transpose() * X;
      bvec(*grad, l1) = GA.colwise().sum();
    }
  }

  if (hvp) {
    if (!dir || static_cast<std::size_t>(dir->size()) != h.size()) throw invalid_argument("HVP direction has wrong size");
    hvp->setZero(static_cast<Eigen::Index>(h.size()));
    const Matrix* r_last_in = nullptr;
    Matrix mask;
    if (mlp) {
      const auto& l1 = layers[0];
      mask = (A.array() > 0.0).cast<double>().matrix();
      RA.noalias() = X * W(*dir, l1).transpose();
      RA.rowwise() += bvec(*dir, l1);
      RH = RA.cwiseProduct(mask);
      r_last_in = &RH;
    }
    Matrix RZ = *last_in * W(*dir, out).transpose();
    RZ.rowwise() += bvec(*dir, out);
    if (r_last_in) RZ.noalias() += *r_last_in * W(h.theta, out).transpose();
    // R(P) = P .* (RZ - <P, RZ>) row-wise; R(GZ) = R(P) / n
    Matrix RGZ = P.cwiseProduct(RZ);
    const Vector dots = RGZ.rowwise().sum();
    RGZ = P.cwiseProduct(RZ - dots.replicate(1, RZ.cols()));
    RGZ *= inv_n;
    W(*hvp, out).noalias() = RGZ.transpose() * *last_in;
    if (r_last_in) W(*hvp, out).noalias() += GZ.transpose() * *r_last_in;
    bvec(*hvp, out) = RGZ.colwise().sum();
    if (mlp) {
      const auto& l1 = layers[0];
      Matrix RGA = (RGZ * W(h.theta, out) + GZ * W(*dir, out)).cwiseProduct(mask);
      W(*hvp, l1).noalias() = RGA.transpose() * X;
      bvec(*hvp, l1) = RGA.colwise().sum();
    }
  }
  return loss;
}

}  // namespace detail

inline Matrix logits(const ProbeHead& h, const Matrix& X) {
  if (static_cast<std::size_t>(X.cols()) != h.dim) throw invalid_argument("feature dimension does not match head");
  const auto layers = detail::layers_of(h);
  Matrix in = X;
  if (h.kind == HeadKind::mlp) {
    Matrix A = X * detail::W(h.theta, layers[0]).transpose();
    A.rowwise() += detail::bvec(h.theta, layers[0]);
    in = A.cwiseMax(0.0);
  }
  Matrix Z = in * detail::W(h.theta, layers.back()).transpose();
  Z.rowwise() += detail::bvec(h.theta, layers.back());
  return Z;
}

inline std::uint32_t predict_one(const ProbeHead& h, const RowVector& t) {
  Matrix X = t;
  Eigen::Index arg = 0;
  logits(h, X).row(0).maxCoeff(&arg);
  return static_cast<std::uint32_t>(arg);
}

inline double accuracy(const ProbeHead& h, const FeatureDataset& d) {
  if (d.size() == 0) return 0.0;
  const Matrix Z = logits(h, d.features);
  std::size_t hit = 0;
  for (Eigen::Index i = 0; i < Z.rows(); ++i) {
    Eigen::Index arg = 0;
    Z.row(i).maxCoeff(&arg);
    hit += static_cast<std::uint32_t>(arg) == d.labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(hit) / static_cast<double>(d.size());
}

/// Mean softmax cross-entropy over the batch.
inline double ce_loss(const ProbeHead& h, const Matrix& X, const Labels& y) {
  detail::check_batch(h, X, y);
  return detail::ce_core(h, X, y, nullptr, nullptr, nullptr);
}

/// Exact mean gradient of ce_loss with respect to theta.
inline Vector batch_param_grad(const ProbeHead& h, const Matrix& X, const Labels& y) {
  detail::check_batch(h, X, y);
  Vector g;
  detail::ce_core(h, X, y, &g, nullptr, nullptr);
  return g;
}

/// Hessian of the mean batch loss times `dir`.
inline Vector batch_hvp(const ProbeHead& h, const Matrix& X, const Labels& y, const Vector& dir) {
  detail::check_batch(h, X, y);
  Vector hv;
  detail::ce_core(h, X, y, nullptr, &dir, &hv);
  return hv;
}

// ---------------------------------------------------------------------------
// Perturbations and the gradient-matching loss

/// Standard-normal draws: one n x d matrix per perturbation resample.
struct PerturbationDraws {
  std::vector<Matrix> deltas;

  static PerturbationDraws sample(std::size_t n, std::size_t d, std::size_t m_draws, Rng& rng) {
    noisetrap::detail::require(m_draws >= 1, "m_draws must be >= 1");
    PerturbationDraws p;
    p.deltas.resize(m_draws);
    for (auto& D : p.deltas) {
      D.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
      for (Eigen::Index i = 0; i < D.size(); ++i) D.data()[i] = rng.normal();
    }
    return p;
  }
};

/// t_hat = t + gamma * delta with delta ~ N(0, I_d).
inline RowVector perturb(const RowVector& t, double gamma, Rng& rng) {
  noisetrap::detail::require(gamma >= 0.0, "gamma must be non-negative");
  RowVector out = t;
  for (Eigen::Index j = 0; j < out.size(); ++j) out(j) += gamma * rng.normal();
  return out;
}

inline Matrix perturb(const Matrix& X, double gamma, const Matrix& delta) {
  if (delta.rows() != X.rows() || delta.cols() != X.cols()) throw invalid_argument("perturbation shape mismatch");
  if (gamma == 0.0) return X;
  return X + gamma * delta;
}

struct LgmConfig {
  double gamma = 0.01;
  double lambda = 0.15;
  std::optional<double> rho;  // default gamma * (sqrt(d) + 3)
  std::size_t m_draws = 1;
  double lr = 6e-4;
  double weight_decay = 0.0;
  std::size_t batch_size = 8;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;

  double rho_for(std::size_t d) const { return rho ? *rho : gamma * (std::sqrt(static_cast<double>(d)) + 3.0); }

  void validate() const {
    noisetrap::detail::require(gamma >= 0.0 && std::isfinite(gamma), "gamma must be >= 0");
    noisetrap::detail::require(lambda >= 0.0 && std::isfinite(lambda), "lambda must be >= 0");
    noisetrap::detail::require(!rho || *rho > 0.0, "rho must be > 0");
    noisetrap::detail::require(m_draws >= 1, "m_draws must be >= 1");
    noisetrap::detail::require(lr > 0.0, "lr must be > 0");
    noisetrap::detail::require(weight_decay >= 0.0, "weight_decay must be >= 0");
    noisetrap::detail::require(batch_size >= 1, "batch_size must be >= 1");
    noisetrap::detail::require(epochs >= 1, "epochs must be >= 1");
  }
};

/// Below this norm the gradient-matching term contributes a zero subgradient.
inline constexpr double kLgmZeroNorm = 1e-12;

struct LgmParts {
  Vector g_clean;    // mean gradient on the clean batch
  Vector g_perturb;  // mean over draws of the mean gradient on perturbed batches
  std::vector<Matrix> perturbed;
  double value = 0.0;
};

inline LgmParts lgm_parts(const ProbeHead& h, const Matrix& X, const Labels& y, double gamma,
                          const PerturbationDraws& draws) {
  noisetrap::detail::require(gamma >= 0.0, "gamma must be non-negative");
  if (draws.deltas.empty()) throw invalid_argument("at least one perturbation draw is required");
  LgmParts p;
  p.g_clean = batch_param_grad(h, X, y);
  p.g_perturb = Vector::Zero(p.g_clean.size());
  for (const auto& D : draws.deltas) {
    p.perturbed.push_back(perturb(X, gamma, D));
    p.g_perturb += batch_param_grad(h, p.perturbed.back(), y);
  }
  p.g_perturb /= static_cast<double>(draws.deltas.size());
  p.value = gamma == 0.0 ? 0.0 : (p.g_clean - p.g_perturb).norm();
  return p;
}

/// || mean grad(clean) - mean grad(perturbed) ||_2 for frozen draws.
inline double lgm_loss(const ProbeHead& h, const Matrix& X, const Labels& y, double gamma,
                       const PerturbationDraws& draws) {
  return lgm_parts(h, X, y, gamma, draws).value;
}

inline double lgm_loss(const ProbeHead& h, const Matrix& X, const Labels& y, double gamma, std::size_t m_draws,
                       Rng& rng) {
  return lgm_loss(h, X, y, gamma,
                  PerturbationDraws::sample(static_cast<std::size_t>(X.rows()), h.dim, m_draws, rng));
}

struct LossAndGrad {
  double loss = 0.0;
  double ce = 0.0;
  double lgm = 0.0;
  Vector grad;
};

/// ce + lambda * lgm and its exact gradient, with the draws held fixed.
/// grad(lgm) = (H_clean - mean H_perturbed) u, u = (g_clean - g_perturb) / lgm.
inline LossAndGrad total_loss_and_grad(const ProbeHead& h, const Matrix& X, const Labels& y, const LgmConfig& cfg,
                                       const PerturbationDraws& draws) {
  LossAndGrad out;
  out.ce = ce_loss(h, X, y);
  const LgmParts p = lgm_parts(h, X, y, cfg.gamma, draws);
  out.lgm = p.value;
  out.loss = out.ce + cfg.lambda * out.lgm;
  out.grad = p.g_clean;
  if (cfg.lambda == 0.0 || out.lgm < kLgmZeroNorm) return out;
  const Vector u = (p.g_clean - p.g_perturb) / out.lgm;
  Vector hu = batch_hvp(h, X, y, u);
  for (const auto& Xp : p.perturbed) hu -= batch_hvp(h, Xp, y, u) / static_cast<double>(p.perturbed.size());
  out.grad += cfg.lambda * hu;
  return out;
}

inline LossAndGrad total_loss_and_grad(const ProbeHead& h, const Matrix& X, const Labels& y, const LgmConfig& cfg,
                                       Rng& rng) {
  return total_loss_and_grad(
      h, X, y, cfg, PerturbationDraws::sample(static_cast<std::size_t>(X.rows()), h.dim, cfg.m_draws, rng));
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_ce = 0.0;
  double train_lgm = 0.0;
  double val_accuracy = 0.0;
};

struct ProbeMetrics {
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  double final_ce = 0.0;
  double final_lgm = 0.0;
  std::size_t steps = 0;
  std::vector<EpochLog> epochs;
};

struct ProbeResult {
  ProbeHead head;
  ProbeMetrics metrics;
};

/// Mini-batch AdamW on ce + lambda * lgm for a fixed number of epochs.
/// Streams: head init (1), shuffling (2), perturbation draws (3), final metrics (4).
inline ProbeResult train_probe(const SplitDataset& data, HeadKind kind, const LgmConfig& cfg) {
  cfg.validate();
  data.train.validate();
  if (data.train.size() == 0) throw invalid_argument("train_probe: empty training split");
  const std::size_t d = data.train.dim(), C = data.train.num_classes;
  for (const auto* part : {&data.val, &data.test}) {
    if (part->size() > 0 && (part->dim() != d || part->num_classes != C)) {
      throw invalid_argument("train_probe: splits disagree in dimension or class count");
    }
  }

  Rng init_rng(derive_seed(cfg.seed, 1)), order_rng(derive_seed(cfg.seed, 2)), draw_rng(derive_seed(cfg.seed, 3));
  ProbeResult res{ProbeHead::init(kind, d, C, init_rng), {}};
  lm::AdamW<double> opt(res.head.decay_mask(), {0.9, 0.999, 1e-8, cfg.weight_decay});

  const std::size_t n = data.train.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Matrix Xb;
  Labels yb;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    EpochLog log{epoch + 1, 0, 0, 0, 0};
    std::size_t batches = 0;
    for (std::size_t s = 0; s < n; s += cfg.batch_size) {
      const std::size_t e = std::min(n, s + cfg.batch_size);
      Xb.resize(static_cast<Eigen::Index>(e - s), static_cast<Eigen::Index>(d));
      yb.resize(e - s);
      for (std::size_t i = s; i < e; ++i) {
        Xb.row(static_cast<Eigen::Index>(i - s)) = data.train.features.row(static_cast<Eigen::Index>(order[i]));
        yb[i - s] = data.train.labels[order[i]];
      }
      const LossAndGrad lg = total_loss_and_grad(res.head, Xb, yb, cfg, draw_rng);
      if (!std::isfinite(lg.loss) || !lg.grad.allFinite()) {
        throw divergence("train_probe diverged at epoch " + std::to_string(epoch + 1) + ", step " +
                         std::to_string(res.metrics.steps) + " (loss=" + std::to_string(lg.loss) +
                         ", ce=" + std::to_string(lg.ce) + ", lgm=" + std::to_string(lg.lgm) + ")");
      }
      opt.step(std::span<double>(res.head.theta.data(), res.head.size()),
               std::span<const double>(lg.grad.data(), res.head.size()), cfg.lr);
      if (!res.head.finite()) {
        throw divergence("train_probe produced non-finite parameters at step " + std::to_string(res.metrics.steps));
      }
      log.train_loss += lg.loss;
      log.train_ce += lg.ce;
      log.train_lgm += lg.lgm;
      ++batches;
      ++res.metrics.steps;
    }
    log.train_loss /= static_cast<double>(batches);
    log.train_ce /= static_cast<double>(batches);
    log.train_lgm /= static_cast<double>(batches);
    log.val_accuracy = data.val.size() ? accuracy(res.head, data.val) : 0.0;
    res.metrics.epochs.push_back(log);
  }
  Rng eval_rng(derive_seed(cfg.seed, 4));
  res.metrics.train_accuracy = accuracy(res.head, data.train);
  res.metrics.val_accuracy = data.val.size() ? accuracy(res.head, data.val) : 0.0;
  res.metrics.test_accuracy = data.test.size() ? accuracy(res.head, data.test) : 0.0;
  res.metrics.final_ce = ce_loss(res.head, data.train.features, data.train.labels);
  res.metrics.final_lgm = lgm_loss(res.head, data.train.features, data.train.labels, cfg.gamma, cfg.m_draws, eval_rng);
  return res;
}

// ---------------------------------------------------------------------------
// Flatness diagnostics

struct FlatnessReport {
  double lgm_value = 0.0;
  double ce_value = 0.0;
  double beta_hat = 0.0;
  double r_rho_hat = 0.0;
  double rho = 0.0;
  double bound_rhs = 0.0;
  bool bound_holds = false;
};

/// Per-sample loss under n_dirs random perturbations on the radius-rho sphere,
/// maximized and averaged over the dataset, minus the clean loss.
inline double r_rho_estimate(const ProbeHead& h, const FeatureDataset& d, double rho, std::size_t n_dirs, Rng& rng) {
  noisetrap::detail::require(n_dirs >= 1, "n_dirs must be >= 1");
  const auto n = static_cast<Eigen::Index>(d.size());
  const auto dim = static_cast<Eigen::Index>(d.dim());
  const Matrix Z0 = logits(h, d.features);
  auto sample_loss = [](const Matrix& Z, Eigen::Index i, std::uint32_t y) {
    const double m = Z.row(i).maxCoeff();
    return m + std::log((Z.row(i).array() - m).exp().sum()) - Z(i, static_cast<Eigen::Index>(y));
  };
  Vector best(n);
  for (Eigen::Index i = 0; i < n; ++i) best(i) = sample_loss(Z0, i, d.labels[static_cast<std::size_t>(i)]);
  const Vector base = best;
  // stay strictly inside the open ball
  const double radius = rho * (1.0 - 1e-9);
  Matrix Xp(n, dim);
  for (std::size_t k = 0; k < n_dirs; ++k) {
    for (Eigen::Index i = 0; i < n; ++i) {
      RowVector u(dim);
      for (Eigen::Index j = 0; j < dim; ++j) u(j) = rng.normal();
      Xp.row(i) = d.features.row(i) + (radius / u.norm()) * u;
    }
    const Matrix Z = logits(h, Xp);
    for (Eigen::Index i = 0; i < n; ++i) {
      best(i) = std::max(best(i), sample_loss(Z, i, d.labels[static_cast<std::size_t>(i)]));
    }
  }
  return (best - base).mean();
}

/// Linear heads: the softmax-CE Hessian in theta is (diag p - p p^T) kron [t;1][t;1]^T,
/// whose spectral norm is at most ||[t;1]||^2 / 2.
inline double beta_linear(const Matrix& X) {
  double b = 0.0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) b = std::max(b, 0.5 * (X.row(i).squaredNorm() + 1.0));
  return b;
}

/// Sampled sup of ||grad l(theta) - grad l(theta')|| / ||theta - theta'|| over random
/// per-sample parameter pairs around the current head.
inline double beta_sampled(const ProbeHead& h, const FeatureDataset& d, std::size_t n_pairs, Rng& rng,
                           double radius = 1e-2) {
  noisetrap::detail::require(n_pairs >= 1, "n_pairs must be >= 1");
  double best = 0.0;
  for (std::size_t k = 0; k < n_pairs; ++k) {
    const auto i = static_cast<Eigen::Index>(rng.uniform_index(d.size()));
    Matrix x = d.features.row(i);
    Labels y{d.labels[static_cast<std::size_t>(i)]};
    ProbeHead b = h;
    Vector dir(h.theta.size());
    for (Eigen::Index j = 0; j < dir.size(); ++j) dir(j) = rng.normal();
    dir *= radius / dir.norm();
    b.theta += dir;
    const double ratio = (batch_param_grad(h, x, y) - batch_param_grad(b, x, y)).norm() / dir.norm();
    best = std::max(best, ratio);
  }
  return best;
}

/// Right-hand side 2 beta + 2 CE + R_rho against the gradient-matching value,
/// all on the same dataset. Streams: draws (1), directions (2), pairs (3).
inline FlatnessReport flatness_report(const ProbeHead& h, const FeatureDataset& d, const LgmConfig& cfg,
                                      std::size_t n_pairs, std::size_t n_dirs, std::uint64_t seed) {
  noisetrap::detail::require(n_pairs >= 1 && n_dirs >= 1, "n_pairs and n_dirs must be >= 1");
  detail::check_batch(h, d.features, d.labels);
  FlatnessReport r;
  Rng draw_rng(derive_seed(seed, 1)), dir_rng(derive_seed(seed, 2)), pair_rng(derive_seed(seed, 3));
  const auto draws = PerturbationDraws::sample(d.size(), d.dim(), cfg.m_draws, draw_rng);
  const LgmParts parts = lgm_parts(h, d.features, d.labels, cfg.gamma, draws);
  r.lgm_value = parts.value;
  r.ce_value = ce_loss(h, d.features, d.labels);
  if (h.kind == HeadKind::linear) {
    r.beta_hat = beta_linear(d.features);
    for (const auto& Xp : parts.perturbed) r.beta_hat = std::max(r.beta_hat, beta_linear(Xp));
  } else {
    r.beta_hat = beta_sampled(h, d, n_pairs, pair_rng);
  }
  r.rho = cfg.rho_for(d.dim());
  r.r_rho_hat = r_rho_estimate(h, d, r.rho, n_dirs, dir_rng);
  r.bound_rhs = 2.0 * r.beta_hat + 2.0 * r.ce_value + r.r_rho_hat;
  r.bound_holds = r.lgm_value <= r.bound_rhs;
  return r;
}

// ---------------------------------------------------------------------------
// Sensitivity maps

struct SensitivityMap {
  std::size_t grid_n = 0;
  std::vector<std::uint32_t> labels;  // row i (offset a_i along u), column j (offset b_j along v)
  double correct_fraction = 0.0;

  std::uint32_t at(std::size_t i, std::size_t j) const { return labels[i * grid_n + j]; }
};

/// Orthonormalizes (u, v) by Gram-Schmidt; throws when they span less than a plane.
inline std::pair<RowVector, RowVector> orthonormal_plane(const RowVector& u, const RowVector& v) {
  const double nu = u.norm(), nv = v.norm();
  if (!(nu > 0.0) || !(nv > 0.0)) throw domain_error("degenerate plane: zero direction");
  RowVector e1 = u / nu;
  RowVector w = v - v.dot(e1) * e1;
  if (w.norm() <= 1e-10 * nv) throw domain_error("degenerate plane: u and v are parallel");
  return {e1, w / w.norm()};
}

/// Predicted labels over t + a u + b v for a, b on an odd grid spanning [-half_width, half_width].
inline SensitivityMap sensitivity_map(const ProbeHead& h, const RowVector& t, std::uint32_t y, const RowVector& u,
                                      const RowVector& v, double half_width, std::size_t grid_n) {
  if (grid_n == 0 || grid_n % 2 == 0) throw invalid_argument("grid_n must be odd so the centre is on the grid");
  if (half_width < 0.0) throw invalid_argument("half_width must be >= 0");
  if (static_cast<std::size_t>(t.size()) != h.dim || u.size() != t.size() || v.size() != t.size()) {
    throw invalid_argument("sensitivity_map: vector dimension does not match the head");
  }
  const auto [e1, e2] = orthonormal_plane(u, v);
  const auto g = static_cast<Eigen::Index>(grid_n);
  Matrix X(g * g, t.size());
  const double step = grid_n > 1 ? 2.0 * half_width / static_cast<double>(grid_n - 1) : 0.0;
  for (Eigen::Index i = 0; i < g; ++i) {
    const double a = -half_width + step * static_cast<double>(i);
    for (Eigen::Index j = 0; j < g; ++j) {
      const double b = -half_width + step * static_cast<double>(j);
      X.row(i * g + j) = t + a * e1 + b * e2;
    }
  }
  if (grid_n > 1) X.row((g / 2) * g + g / 2) = t;  // exact centre
  const Matrix Z = logits(h, X);
  SensitivityMap m;
  m.grid_n = grid_n;
  m.labels.resize(grid_n * grid_n);
  std::size_t hit = 0;
  for (Eigen::Index r = 0; r < Z.rows(); ++r) {
    Eigen::Index arg = 0;
    Z.row(r).maxCoeff(&arg);
    m.labels[static_cast<std::size_t>(r)] = static_cast<std::uint32_t>(arg);
    hit += static_cast<std::uint32_t>(arg) == y;
  }
  m.correct_fraction = static_cast<double>(hit) / static_cast<double>(m.labels.size());
  return m;
}

/// A sampled plane: the sample it is centred on and its two spanning directions.
struct Plane {
  std::size_t index = 0;
  RowVector u, v;
};

inline std::vector<Plane> sample_planes(const FeatureDataset& d, std::size_t n_planes, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x91a7e));
  std::vector<Plane> out(n_planes);
  const auto dim = static_cast<Eigen::Index>(d.dim());
  for (auto& p : out) {
    p.index = static_cast<std::size_t>(rng.uniform_index(d.size()));
    p.u.resize(dim);
    p.v.resize(dim);
    for (Eigen::Index j = 0; j < dim; ++j) p.u(j) = rng.normal();
    for (Eigen::Index j = 0; j < dim; ++j) p.v(j) = rng.normal();
  }
  return out;
}

inline double mean_correct_fraction(const ProbeHead& h, const FeatureDataset& d, const std::vector<Plane>& planes,
                                    double half_width, std::size_t grid_n) {
  if (planes.empty()) return 0.0;
  double s = 0.0;
  for (const auto& p : planes) {
    const RowVector t = d.features.row(static_cast<Eigen::Index>(p.index));
    s += sensitivity_map(h, t, d.labels[p.index], p.u, p.v, half_width, grid_n).correct_fraction;
  }
  return s / static_cast<double>(planes.size());
}

}  // namespace noisetrap::lgm
