#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "noisetrap/corpus.hpp"
#include "noisetrap/error.hpp"
#include "noisetrap/lm/config.hpp"
#include "noisetrap/rng.hpp"

namespace noisetrap::lm {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<Mat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <class T>
using RowVecMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;
template <class T>
using ConstRowVecMap = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

// Vectorised reductions peel differently depending on the base address, so
// every buffer that Eigen maps must share the same alignment for bit-identical reruns.
template <class T>
using aligned_vector = std::vector<T, Eigen::aligned_allocator<T>>;

/// One named parameter block inside the flat parameter vector.
struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool decay = false;  // weight decay applies to matrices, not to gains/biases

  std::size_t size() const { return rows * cols; }
};

/// Fixed parameter order:
///   wte[V,d] wpe[L,d]
///   per layer: ln1_g ln1_b attn_w[d,3d] attn_b proj_w[d,d] proj_b
///              ln2_g ln2_b fc_w[d,4d] fc_b fc2_w[4d,d] fc2_b
///   lnf_g lnf_b
/// The output projection is tied to wte.
class ParamLayout {
 public:
  enum Layer : std::size_t {
    ln1_g, ln1_b, attn_w, attn_b, proj_w, proj_b,
    ln2_g, ln2_b, fc_w, fc_b, fc2_w, fc2_b, per_layer
  };

  explicit ParamLayout(const LmConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.d_model;
    add("wte", cfg.vocab_size, d, true);
    add("wpe", cfg.context_len, d, true);
    for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "h" + std::to_string(l) + ".";
      add(p + "ln1_g", 1, d, false);
      add(p + "ln1_b", 1, d, false);
      add(p + "attn_w", d, 3 * d, true);
      add(p + "attn_b", 1, 3 * d, false);
      add(p + "proj_w", d, d, true);
      add(p + "proj_b", 1, d, false);
      add(p + "ln2_g", 1, d, false);
      add(p + "ln2_b", 1, d, false);
      add(p + "fc_w", d, 4 * d, true);
      add(p + "fc_b", 1, 4 * d, false);
      add(p + "fc2_w", 4 * d, d, true);
      add(p + "fc2_b", 1, d, false);
    }
    add("lnf_g", 1, d, false);
    add("lnf_b", 1, d, false);
  }

  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  std::size_t total() const { return total_; }

  const ParamBlock& wte() const { return blocks_[0]; }
  const ParamBlock& wpe() const { return blocks_[1]; }
  const ParamBlock& layer(std::size_t l, Layer which) const { return blocks_[2 + l * per_layer + which]; }
  const ParamBlock& lnf_g() const { return blocks_[blocks_.size() - 2]; }
  const ParamBlock& lnf_b() const { return blocks_[blocks_.size() - 1]; }

 private:
  void add(std::string name, std::size_t rows, std::size_t cols, bool decay) {
    blocks_.push_back({std::move(name), total_, rows, cols, decay});
    total_ += rows * cols;
  }

  std::vector<ParamBlock> blocks_;
  std::size_t total_ = 0;
};

/// Parameters of the decoder-only transformer as one flat buffer.
template <class T>
struct LmParams {
  LmConfig config;
  ParamLayout layout;
  aligned_vector<T> data;

  explicit LmParams(const LmConfig& cfg) : config(cfg), layout(cfg), data(layout.total(), T(0)) {}

  MatMap<T> mat(const ParamBlock& b) {
    return MatMap<T>(data.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols));
  }
  ConstMatMap<T> mat(const ParamBlock& b) const {
    return ConstMatMap<T>(data.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols));
  }
  ConstRowVecMap<T> vec(const ParamBlock& b) const {
    return ConstRowVecMap<T>(data.data() + b.offset, static_cast<Eigen::Index>(b.size()));
  }

  bool all_finite() const {
    for (const T& v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <class U>
  LmParams<U> cast() const {
    LmParams<U> out(config);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

/// GPT-2 initialisation: N(0, 0.02) weights, residual projections scaled by
/// 1/sqrt(2 n_layers), zero biases, unit layer-norm gains.
template <class T>
LmParams<T> init_params(const LmConfig& cfg, std::uint64_t seed) {
  LmParams<T> p(cfg);
  Rng rng(seed);
  const double resid_std = 0.02 / std::sqrt(2.0 * cfg.n_layers);
  for (const auto& b : p.layout.blocks()) {
    const bool is_gain = b.name.ends_with("_g");
    const bool is_resid = b.name.ends_with("proj_w") || b.name.ends_with("fc2_w");
    for (std::size_t i = 0; i < b.size(); ++i) {
      T v = T(0);
      if (is_gain) {
        v = T(1);
      } else if (b.decay) {
        v = static_cast<T>(rng.normal() * (is_resid ? resid_std : 0.02));
      }
      p.data[b.offset + i] = v;
    }
  }
  return p;
}

namespace detail {

template <class T>
struct LayerNormCache {
  Mat<T> xhat;
  std::vector<T> rstd;
};

template <class T>
void layernorm_forward(const Mat<T>& x, ConstRowVecMap<T> g, ConstRowVecMap<T> b, LayerNormCache<T>& cache,
                       Mat<T>& y) {
  const auto n = x.rows();
  const auto d = x.cols();
  cache.xhat.resize(n, d);
  cache.rstd.resize(static_cast<std::size_t>(n));
  y.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T rstd = T(1) / std::sqrt(var + T(1e-5));
    cache.rstd[static_cast<std::size_t>(i)] = rstd;
    cache.xhat.row(i) = (x.row(i).array() - mean) * rstd;
    y.row(i) = cache.xhat.row(i).cwiseProduct(g) + b;
  }
}

// Accumulates dx (+=), dg, db.
template <class T>
void layernorm_backward(const Mat<T>& dy, ConstRowVecMap<T> g, const LayerNormCache<T>& cache, Mat<T>& dx,
                        RowVecMap<T> dg, RowVecMap<T> db) {
  const auto n = dy.rows();
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    dg += dy.row(i).cwiseProduct(cache.xhat.row(i));
    db += dy.row(i);
    const auto dxhat = (dy.row(i).cwiseProduct(g)).eval();
    const T mean_dxhat = dxhat.sum() * inv_d;
    const T mean_dxhat_xhat = dxhat.dot(cache.xhat.row(i)) * inv_d;
    dx.row(i) += cache.rstd[static_cast<std::size_t>(i)] *
                 (dxhat.array() - mean_dxhat - cache.xhat.row(i).array() * mean_dxhat_xhat).matrix();
  }
}

template <class T>
T gelu(T x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(T(c) * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
  constexpr double c = 0.7978845608028654;
  const T inner = T(c) * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(inner);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * T(c) * (T(1) + T(3 * 0.044715) * x * x);
}

template <class T>
void gelu_forward(const Mat<T>& x, Mat<T>& y) {
  constexpr T c = T(0.7978845608028654);
  const auto a = x.array();
  y = (T(0.5) * a * (T(1) + (c * (a + T(0.044715) * a.cube())).tanh())).matrix();
}

// dy *= gelu'(x)
template <class T>
void gelu_backward(const Mat<T>& x, Mat<T>& dy) {
  constexpr T c = T(0.7978845608028654);
  const auto a = x.array();
  const Mat<T> t = (c * (a + T(0.044715) * a.cube())).tanh().matrix();
  const auto ta = t.array();
  dy.array() *= T(0.5) * (T(1) + ta) + T(0.5) * a * (T(1) - ta.square()) * c * (T(1) + T(3 * 0.044715) * a.square());
}

template <class T>
void apply_dropout(Mat<T>& x, Mat<T>& mask, double p, Rng* rng) {
  if (p <= 0.0 || rng == nullptr) {
    mask.resize(0, 0);
    return;
  }
  mask.resize(x.rows(), x.cols());
  const T keep_scale = T(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < x.size(); ++i) mask.data()[i] = rng->uniform01() < p ? T(0) : keep_scale;
  x.array() *= mask.array();
}

}  // namespace detail

/// Per-layer activations retained by the forward pass for backpropagation.
template <class T>
struct LayerCache {
  Mat<T> x_in;
  detail::LayerNormCache<T> ln1;
  Mat<T> a1;
  Mat<T> qkv;
  std::vector<Mat<T>> probs;  // [batch * heads], each L x L, causal
  Mat<T> y;                   // concatenated head outputs before projection
  Mat<T> attn_drop;
  Mat<T> x_mid;
  detail::LayerNormCache<T> ln2;
  Mat<T> a2;
  Mat<T> h_pre;
  Mat<T> h_act;
  Mat<T> mlp_drop;
};

template <class T>
struct ForwardCache {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<corpus::token_t> tokens;
  Mat<T> emb_drop;
  std::vector<LayerCache<T>> layers;
  Mat<T> x_final;
  detail::LayerNormCache<T> lnf;
  Mat<T> hf;  // post final layer-norm hidden states, (B*L) x d
};

/// Logits for a B x L token grid, returned as (B*L) x V with row b*L + j.
/// Position j attends to positions <= j of its own row only. If `cache` is
/// non-null the activations needed by `backward` are retained; if `dropout_rng`
/// is non-null and config.dropout > 0, dropout masks are sampled.
template <class T>
Mat<T> forward(const LmParams<T>& params, std::span<const corpus::token_t> tokens, std::size_t B, std::size_t L,
               ForwardCache<T>* cache = nullptr, Rng* dropout_rng = nullptr) {
  const LmConfig& cfg = params.config;
  const auto& lay = params.layout;
  if (tokens.size() != B * L) throw invalid_argument("forward: token grid size mismatch");
  if (L == 0 || L > cfg.context_len) throw invalid_argument("forward: sequence length exceeds context_len");
  for (auto t : tokens) {
    if (t >= cfg.vocab_size) throw invalid_argument("forward: token " + std::to_string(t) + " out of range");
  }
  const auto N = static_cast<Eigen::Index>(B * L);
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto H = static_cast<Eigen::Index>(cfg.n_heads);
  const auto hd = static_cast<Eigen::Index>(cfg.head_dim());
  const auto Li = static_cast<Eigen::Index>(L);
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  c.batch = B;
  c.seq_len = L;
  c.tokens.assign(tokens.begin(), tokens.end());
  c.layers.resize(cfg.n_layers);

  const auto wte = params.mat(lay.wte());
  const auto wpe = params.mat(lay.wpe());
  Mat<T> x(N, d);
  for (Eigen::Index r = 0; r < N; ++r) {
    x.row(r) = wte.row(static_cast<Eigen::Index>(tokens[static_cast<std::size_t>(r)])) + wpe.row(r % Li);
  }
  detail::apply_dropout(x, c.emb_drop, cfg.dropout, dropout_rng);

  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    using PL = ParamLayout;
    LayerCache<T>& lc = c.layers[l];
    lc.x_in = x;
    detail::layernorm_forward(x, params.vec(lay.layer(l, PL::ln1_g)), params.vec(lay.layer(l, PL::ln1_b)), lc.ln1,
                              lc.a1);
    lc.qkv.noalias() = lc.a1 * params.mat(lay.layer(l, PL::attn_w));
    lc.qkv.rowwise() += params.vec(lay.layer(l, PL::attn_b));

    lc.y.setZero(N, d);
    lc.probs.resize(B * static_cast<std::size_t>(H));
    for (std::size_t b = 0; b < B; ++b) {
      const auto r0 = static_cast<Eigen::Index>(b) * Li;
      for (Eigen::Index h = 0; h < H; ++h) {
        const auto q = lc.qkv.block(r0, h * hd, Li, hd);
        const auto k = lc.qkv.block(r0, d + h * hd, Li, hd);
        const auto v = lc.qkv.block(r0, 2 * d + h * hd, Li, hd);
        Mat<T>& p = lc.probs[b * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
        p.noalias() = (q * k.transpose()) * scale;
        for (Eigen::Index i = 0; i < Li; ++i) {
          const T m = p.row(i).head(i + 1).maxCoeff();
          auto row = p.row(i).head(i + 1).array();
          row = (row - m).exp();
          row /= row.sum();
          p.row(i).tail(Li - i - 1).setZero();
        }
        lc.y.block(r0, h * hd, Li, hd).noalias() = p * v;
      }
    }
    Mat<T> attn_out = lc.y * params.mat(lay.layer(l, PL::proj_w));
    attn_out.rowwise() += params.vec(lay.layer(l, PL::proj_b));
    detail::apply_dropout(attn_out, lc.attn_drop, cfg.dropout, dropout_rng);
    lc.x_mid = x + attn_out;

    detail::layernorm_forward(lc.x_mid, params.vec(lay.layer(l, PL::ln2_g)), params.vec(lay.layer(l, PL::ln2_b)),
                              lc.ln2, lc.a2);
    lc.h_pre.noalias() = lc.a2 * params.mat(lay.layer(l, PL::fc_w));
    lc.h_pre.rowwise() += params.vec(lay.layer(l, PL::fc_b));
    detail::gelu_forward(lc.h_pre, lc.h_act);
    Mat<T> mlp_out = lc.h_act * params.mat(lay.layer(l, PL::fc2_w));
    mlp_out.rowwise() += params.vec(lay.layer(l, PL::fc2_b));
    detail::apply_dropout(mlp_out, lc.mlp_drop, cfg.dropout, dropout_rng);
    x = lc.x_mid + mlp_out;
  }
  c.x_final = x;
  detail::layernorm_forward(x, params.vec(lay.lnf_g()), params.vec(lay.lnf_b()), c.lnf, c.hf);
  Mat<T> logits = c.hf * wte.transpose();
  return logits;
}

/// Mean next-token cross-entropy (nats/token) over all rows of `logits`.
/// If `dlogits` is non-null it receives d(loss)/d(logits).
template <class T>
double ntp_loss(const Mat<T>& logits, std::span<const corpus::token_t> targets, Mat<T>* dlogits = nullptr) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size()) {
    throw invalid_argument("ntp_loss: logits rows and targets disagree");
  }
  const auto n = logits.rows();
  const auto V = logits.cols();
  if (dlogits) dlogits->resize(n, V);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto t = static_cast<Eigen::Index>(targets[static_cast<std::size_t>(i)]);
    if (t >= V) throw invalid_argument("ntp_loss: target outside vocabulary");
    const T m = logits.row(i).maxCoeff();
    const double lse = static_cast<double>(m) +
                       std::log(static_cast<double>((logits.row(i).array() - m).exp().sum()));
    total += lse - static_cast<double>(logits(i, t));
    if (dlogits) {
      dlogits->row(i) = (logits.row(i).array() - static_cast<T>(lse)).exp() / static_cast<T>(n);
      (*dlogits)(i, t) -= T(1) / static_cast<T>(n);
    }
  }
  return total / static_cast<double>(n);
}

/// Gradient of the loss w.r.t. all parameters, given d(loss)/d(logits) and the
/// cache of the matching forward pass. Accumulates into `grad` (size = layout.total()).
template <class T>
void backward(const LmParams<T>& params, const ForwardCache<T>& c, const Mat<T>& dlogits, std::span<T> grad) {
  const LmConfig& cfg = params.config;
  const auto& lay = params.layout;
  if (grad.size() != lay.total()) throw invalid_argument("backward: gradient buffer size mismatch");
  const auto N = static_cast<Eigen::Index>(c.batch * c.seq_len);
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto H = static_cast<Eigen::Index>(cfg.n_heads);
  const auto hd = static_cast<Eigen::Index>(cfg.head_dim());
  const auto Li = static_cast<Eigen::Index>(c.seq_len);
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  auto gmat = [&](const ParamBlock& b) {
    return MatMap<T>(grad.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols));
  };
  auto gvec = [&](const ParamBlock& b) {
    return RowVecMap<T>(grad.data() + b.offset, static_cast<Eigen::Index>(b.size()));
  };

  const auto wte = params.mat(lay.wte());
  gmat(lay.wte()).noalias() += dlogits.transpose() * c.hf;
  Mat<T> dhf = dlogits * wte;
  Mat<T> dx = Mat<T>::Zero(N, d);
  detail::layernorm_backward(dhf, params.vec(lay.lnf_g()), c.lnf, dx, gvec(lay.lnf_g()), gvec(lay.lnf_b()));

  for (std::uint32_t li = cfg.n_layers; li-- > 0;) {
    using PL = ParamLayout;
    const LayerCache<T>& lc = c.layers[li];

    // MLP branch: x = x_mid + drop(gelu(ln2(x_mid) W1 + b1) W2 + b2)
    Mat<T> dmlp = dx;
    if (lc.mlp_drop.size() > 0) dmlp.array() *= lc.mlp_drop.array();
    gmat(lay.layer(li, PL::fc2_w)).noalias() += lc.h_act.transpose() * dmlp;
    gvec(lay.layer(li, PL::fc2_b)) += dmlp.colwise().sum();
    Mat<T> dh = dmlp * params.mat(lay.layer(li, PL::fc2_w)).transpose();
    detail::gelu_backward(lc.h_pre, dh);
    gmat(lay.layer(li, PL::fc_w)).noalias() += lc.a2.transpose() * dh;
    gvec(lay.layer(li, PL::fc_b)) += dh.colwise().sum();
    Mat<T> da2 = dh * params.mat(lay.layer(li, PL::fc_w)).transpose();
    Mat<T> dx_mid = dx;
    detail::layernorm_backward(da2, params.vec(lay.layer(li, PL::ln2_g)), lc.ln2, dx_mid,
                               gvec(lay.layer(li, PL::ln2_g)), gvec(lay.layer(li, PL::ln2_b)));

    // Attention branch: x_mid = x_in + drop(attn(ln1(x_in)) Wp + bp)
    Mat<T> dattn = dx_mid;
    if (lc.attn_drop.size() > 0) dattn.array() *= lc.attn_drop.array();
    gmat(lay.layer(li, PL::proj_w)).noalias() += lc.y.transpose() * dattn;
    gvec(lay.layer(li, PL::proj_b)) += dattn.colwise().sum();
    Mat<T> dy = dattn * params.mat(lay.layer(li, PL::proj_w)).transpose();

    Mat<T> dqkv = Mat<T>::Zero(N, 3 * d);
    Mat<T> dp, ds;
    for (std::size_t b = 0; b < c.batch; ++b) {
      const auto r0 = static_cast<Eigen::Index>(b) * Li;
      for (Eigen::Index h = 0; h < H; ++h) {
        const Mat<T>& p = lc.probs[b * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
        const auto q = lc.qkv.block(r0, h * hd, Li, hd);
        const auto k = lc.qkv.block(r0, d + h * hd, Li, hd);
        const auto v = lc.qkv.block(r0, 2 * d + h * hd, Li, hd);
        const auto dout = dy.block(r0, h * hd, Li, hd);
        dp.noalias() = dout * v.transpose();
        dqkv.block(r0, 2 * d + h * hd, Li, hd).noalias() += p.transpose() * dout;
        ds.resize(Li, Li);
        for (Eigen::Index i = 0; i < Li; ++i) {
          const T dot = p.row(i).dot(dp.row(i));
          ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
        }
        ds *= scale;
        dqkv.block(r0, h * hd, Li, hd).noalias() += ds * k;
        dqkv.block(r0, d + h * hd, Li, hd).noalias() += ds.transpose() * q;
      }
    }
    gmat(lay.layer(li, PL::attn_w)).noalias() += lc.a1.transpose() * dqkv;
    gvec(lay.layer(li, PL::attn_b)) += dqkv.colwise().sum();
    Mat<T> da1 = dqkv * params.mat(lay.layer(li, PL::attn_w)).transpose();
    dx = dx_mid;
    detail::layernorm_backward(da1, params.vec(lay.layer(li, PL::ln1_g)), lc.ln1, dx, gvec(lay.layer(li, PL::ln1_g)),
                               gvec(lay.layer(li, PL::ln1_b)));
  }

  if (c.emb_drop.size() > 0) dx.array() *= c.emb_drop.array();
  auto gwte = gmat(lay.wte());
  auto gwpe = gmat(lay.wpe());
  for (Eigen::Index r = 0; r < N; ++r) {
    gwte.row(static_cast<Eigen::Index>(c.tokens[static_cast<std::size_t>(r)])) += dx.row(r);
    gwpe.row(r % Li) += dx.row(r);
  }
}

/// Loss and gradient on one batch (grad is overwritten).
template <class T>
double loss_and_grad(const LmParams<T>& params, const corpus::Batch& batch, aligned_vector<T>& grad,
                     Rng* dropout_rng = nullptr) {
  ForwardCache<T> cache;
  const Mat<T> logits = forward(params, batch.inputs, batch.batch_size, batch.context_len, &cache, dropout_rng);
  Mat<T> dlogits;
  const double loss = ntp_loss<T>(logits, batch.targets, &dlogits);
  grad.assign(params.layout.total(), T(0));
  backward(params, cache, dlogits, std::span<T>(grad));
  return loss;
}

/// Convenience: logits for a batch without caching.
template <class T>
Mat<T> forward_logits(const LmParams<T>& params, const corpus::Batch& batch) {
  return forward<T>(params, std::span<const corpus::token_t>(batch.inputs), batch.batch_size, batch.context_len);
}

/// Mean NTP loss of the model over the given windows of a corpus, evaluated
/// in fixed-size chunks in a fixed order.
template <class T>
double windows_loss(const LmParams<T>& params, const corpus::TokenCorpus& corpus, std::size_t L,
                    const std::vector<std::size_t>& offsets, std::size_t chunk = 16) {
  if (offsets.empty()) throw invalid_argument("windows_loss: no windows");
  double total = 0.0;
  for (std::size_t i = 0; i < offsets.size(); i += chunk) {
    std::vector<std::size_t> part(offsets.begin() + static_cast<std::ptrdiff_t>(i),
                                  offsets.begin() + static_cast<std::ptrdiff_t>(std::min(offsets.size(), i + chunk)));
    const auto batch = corpus::batch_from_offsets(corpus, L, part);
    const Mat<T> logits = forward_logits(params, batch);
    total += ntp_loss<T>(logits, batch.targets) * static_cast<double>(part.size());
  }
  return total / static_cast<double>(offsets.size());
}

/// Final-layer (post layer-norm) hidden state at the last position of each window.
template <class T>
std::vector<std::vector<double>> extract_features(const LmParams<T>& params,
                                                  const std::vector<std::vector<corpus::token_t>>& windows) {
  std::vector<std::vector<double>> out;
  out.reserve(windows.size());
  for (const auto& w : windows) {
    if (w.empty()) throw invalid_argument("extract_features: empty window");
    if (w.size() > params.config.context_len) throw invalid_argument("extract_features: window exceeds context_len");
    ForwardCache<T> cache;
    forward(params, std::span<const corpus::token_t>(w), 1, w.size(), &cache);
    const auto last = static_cast<Eigen::Index>(w.size() - 1);
    std::vector<double> f(params.config.d_model);
    for (std::size_t j = 0; j < f.size(); ++j) f[j] = static_cast<double>(cache.hf(last, static_cast<Eigen::Index>(j)));
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace noisetrap::lm
