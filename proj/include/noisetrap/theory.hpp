#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "json.hpp"
#include "noisetrap/error.hpp"
#include "noisetrap/rng.hpp"

namespace noisetrap::theory {

using Rational = boost::multiprecision::cpp_rational;

template <class S>
double to_double(const S& v) {
  if constexpr (std::is_floating_point_v<S>) {
    return static_cast<double>(v);
  } else {
    return v.template convert_to<double>();
  }
}

/// Joint table P(x, w) over prefixes x in [0, n_prefixes) and tokens w in [0, V).
template <class S = double>
struct DiscreteJoint {
  std::size_t n_prefixes = 0;
  std::uint32_t vocab_size = 0;
  std::vector<S> prob;  // row-major, prefix-major

  DiscreteJoint() = default;
  DiscreteJoint(std::size_t nx, std::uint32_t V) : n_prefixes(nx), vocab_size(V), prob(nx * V, S(0)) {}

  S& at(std::size_t x, std::size_t w) { return prob[x * vocab_size + w]; }
  const S& at(std::size_t x, std::size_t w) const { return prob[x * vocab_size + w]; }

  S marginal(std::size_t x) const {
    S m(0);
    for (std::size_t w = 0; w < vocab_size; ++w) m += at(x, w);
    return m;
  }

  S total() const {
    S t(0);
    for (const auto& p : prob) t += p;
    return t;
  }

  bool in_support(std::size_t x, std::size_t w) const { return at(x, w) > S(0); }

  void validate() const {
    detail::require(n_prefixes >= 1 && vocab_size >= 1, "joint table must be non-empty");
    detail::require(prob.size() == n_prefixes * vocab_size, "joint table has the wrong number of cells");
    for (const auto& p : prob) {
      if (p < S(0)) throw invalid_argument("joint table has a negative cell");
    }
    if (std::abs(to_double(total()) - 1.0) > 1e-12) throw invalid_argument("joint table does not sum to 1");
  }
};

template <class S>
DiscreteJoint<double> to_double(const DiscreteJoint<S>& p) {
  DiscreteJoint<double> out(p.n_prefixes, p.vocab_size);
  for (std::size_t i = 0; i < p.prob.size(); ++i) out.prob[i] = to_double(p.prob[i]);
  return out;
}

/// Conditional model h(w|x): one strictly positive probability row per prefix.
struct ModelTable {
  std::size_t n_prefixes = 0;
  std::uint32_t vocab_size = 0;
  std::vector<double> cond;

  ModelTable() = default;
  ModelTable(std::size_t nx, std::uint32_t V) : n_prefixes(nx), vocab_size(V), cond(nx * V, 0.0) {}

  double& at(std::size_t x, std::size_t w) { return cond[x * vocab_size + w]; }
  double at(std::size_t x, std::size_t w) const { return cond[x * vocab_size + w]; }

  static ModelTable uniform(std::size_t nx, std::uint32_t V) {
    ModelTable h(nx, V);
    std::fill(h.cond.begin(), h.cond.end(), 1.0 / V);
    return h;
  }

  void validate() const {
    detail::require(cond.size() == n_prefixes * vocab_size, "model table has the wrong number of cells");
    for (std::size_t x = 0; x < n_prefixes; ++x) {
      double s = 0.0;
      for (std::size_t w = 0; w < vocab_size; ++w) {
        if (!(at(x, w) > 0.0)) throw invalid_argument("model table row " + std::to_string(x) + " is not positive");
        s += at(x, w);
      }
      if (std::abs(s - 1.0) > 1e-9) throw invalid_argument("model table row " + std::to_string(x) + " is not normalized");
    }
  }
};

/// Throws assumption_violated when some (x, w) cell carries mass under both tables.
template <class S>
void require_disjoint(const DiscreteJoint<S>& pc, const DiscreteJoint<S>& pn) {
  if (pc.n_prefixes != pn.n_prefixes || pc.vocab_size != pn.vocab_size) {
    throw invalid_argument("joint tables live on different prefix/token universes");
  }
  for (std::size_t x = 0; x < pc.n_prefixes; ++x) {
    for (std::size_t w = 0; w < pc.vocab_size; ++w) {
      if (pc.in_support(x, w) && pn.in_support(x, w)) {
        throw assumption_violated("clean and noise supports overlap at (x=" + std::to_string(x) +
                                  ", w=" + std::to_string(w) + ")");
      }
    }
  }
}

/// P^m = alpha P^n + (1 - alpha) P^c, cell by cell. Exact when S is Rational.
template <class S>
DiscreteJoint<S> mix_joint(const DiscreteJoint<S>& pc, const DiscreteJoint<S>& pn, const S& alpha) {
  require_disjoint(pc, pn);
  if (alpha < S(0) || alpha > S(1)) throw invalid_argument("alpha must lie in [0, 1]");
  DiscreteJoint<S> m(pc.n_prefixes, pc.vocab_size);
  const S beta = S(1) - alpha;
  for (std::size_t i = 0; i < m.prob.size(); ++i) m.prob[i] = alpha * pn.prob[i] + beta * pc.prob[i];
  return m;
}

/// Expected next-token loss sum_x P_X(x) sum_w P(w|x) (-log h(w|x)), by enumeration.
template <class S>
double exact_ntp_loss(const DiscreteJoint<S>& p, const ModelTable& h) {
  if (h.n_prefixes != p.n_prefixes || h.vocab_size != p.vocab_size) {
    throw invalid_argument("model table lacks conditional rows for the joint's prefixes");
  }
  double loss = 0.0;
  for (std::size_t x = 0; x < p.n_prefixes; ++x) {
    const double px = to_double(p.marginal(x));
    if (px <= 0.0) continue;
    double row = 0.0;
    for (std::size_t w = 0; w < p.vocab_size; ++w) {
      const double pw = to_double(p.at(x, w));
      if (pw <= 0.0) continue;
      if (!(h.at(x, w) > 0.0)) throw invalid_argument("model assigns zero mass to a supported token");
      row += (pw / px) * -std::log(h.at(x, w));
    }
    loss += px * row;
  }
  return loss;
}

/// |L(P^m,h) - alpha L(P^n,h) - (1-alpha) L(P^c,h)| with P^m mixed exactly.
inline double linearity_residual(const DiscreteJoint<Rational>& pc, const DiscreteJoint<Rational>& pn,
                           const Rational& alpha, const ModelTable& h) {
  const auto pm = mix_joint(pc, pn, alpha);
  const double a = to_double(alpha);
  const double lhs = exact_ntp_loss(pm, h);
  const double rhs = a * exact_ntp_loss(pn, h) + (1.0 - a) * exact_ntp_loss(pc, h);
  return std::abs(lhs - rhs);
}

inline double linearity_residual(const DiscreteJoint<double>& pc, const DiscreteJoint<double>& pn, double alpha,
                           const ModelTable& h) {
  const auto pm = mix_joint(pc, pn, alpha);
  const double lhs = exact_ntp_loss(pm, h);
  const double rhs = alpha * exact_ntp_loss(pn, h) + (1.0 - alpha) * exact_ntp_loss(pc, h);
  return std::abs(lhs - rhs);
}

inline constexpr double kSmoothingFloor = 1e-12;

/// Row-normalized conditionals of P; zero cells are raised to `floor` before
/// renormalizing. Rows with no mass become uniform.
template <class S>
ModelTable optimal_model(const DiscreteJoint<S>& p, double floor = kSmoothingFloor) {
  ModelTable h(p.n_prefixes, p.vocab_size);
  for (std::size_t x = 0; x < p.n_prefixes; ++x) {
    const double px = to_double(p.marginal(x));
    if (px <= 0.0) {
      for (std::size_t w = 0; w < p.vocab_size; ++w) h.at(x, w) = 1.0 / p.vocab_size;
      continue;
    }
    double s = 0.0;
    for (std::size_t w = 0; w < p.vocab_size; ++w) {
      h.at(x, w) = std::max(to_double(p.at(x, w)) / px, floor);
      s += h.at(x, w);
    }
    for (std::size_t w = 0; w < p.vocab_size; ++w) h.at(x, w) /= s;
  }
  return h;
}

/// Random joint over nx prefixes and V tokens whose support is the given cell mask.
inline DiscreteJoint<Rational> random_joint_on(const std::vector<bool>& mask, std::size_t nx, std::uint32_t V,
                                               Rng& rng) {
  DiscreteJoint<Rational> p(nx, V);
  std::int64_t total = 0;
  std::vector<std::int64_t> weights(mask.size(), 0);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    weights[i] = 1 + static_cast<std::int64_t>(rng.uniform_index(1000));
    total += weights[i];
  }
  if (total == 0) throw invalid_argument("random_joint_on: empty support mask");
  for (std::size_t i = 0; i < mask.size(); ++i) p.prob[i] = Rational(weights[i], total);
  return p;
}

inline ModelTable random_model(std::size_t nx, std::uint32_t V, Rng& rng) {
  ModelTable h(nx, V);
  for (std::size_t x = 0; x < nx; ++x) {
    double s = 0.0;
    for (std::size_t w = 0; w < V; ++w) s += (h.at(x, w) = 0.01 + rng.uniform01());
    for (std::size_t w = 0; w < V; ++w) h.at(x, w) /= s;
  }
  return h;
}

struct LinearityInstance {
  DiscreteJoint<Rational> pc, pn;
  Rational alpha;
  ModelTable h;
};

/// Disjoint-support instance with nx <= max_prefixes and V <= max_vocab; every
/// cell goes to the clean support, the noise support, or neither.
inline LinearityInstance random_linearity_instance(Rng& rng, std::size_t max_prefixes = 6, std::uint32_t max_vocab = 8) {
  const std::size_t nx = 1 + rng.uniform_index(max_prefixes);
  const auto V = static_cast<std::uint32_t>(2 + rng.uniform_index(max_vocab - 1));
  const std::size_t cells = nx * V;
  std::vector<bool> clean(cells, false), noise(cells, false);
  for (std::size_t i = 0; i < cells; ++i) {
    const auto r = rng.uniform_index(3);
    clean[i] = r == 0;
    noise[i] = r == 1;
  }
  // guarantee both supports are non-empty and still disjoint
  const std::size_t a = rng.uniform_index(cells);
  std::size_t b = rng.uniform_index(cells - 1);
  if (b >= a) ++b;
  clean[a] = true, noise[a] = false;
  noise[b] = true, clean[b] = false;
  LinearityInstance inst{random_joint_on(clean, nx, V, rng), random_joint_on(noise, nx, V, rng),
                      Rational(static_cast<std::int64_t>(rng.uniform_index(1001)), 1000), random_model(nx, V, rng)};
  return inst;
}

// ---------------------------------------------------------------------------
// Scalar machinery of the three-case mixture-loss result.

/// eta = alpha p_c - (1 - alpha) k p_n.
template <class S>
S eta(const S& alpha, const S& p_c, const S& p_n, const S& k) {
  return alpha * p_c - (S(1) - alpha) * k * p_n;
}

/// alpha at which eta changes sign: k p_n / (p_c + k p_n).
inline double alpha_threshold(double p_c, double p_n, double k) { return k * p_n / (p_c + k * p_n); }

struct CaseParams {
  double alpha = 0.0;
  double p_c = 1.0;
  double p_n = 1.0;
  double k = 1.0;
  double epsilon = 0.0;
  double eta = 0.0;

  static CaseParams make(double alpha, double p_c, double p_n, double k, double epsilon = 0.0) {
    CaseParams pp{alpha, p_c, p_n, k, epsilon, theory::eta(alpha, p_c, p_n, k)};
    pp.validate();
    return pp;
  }

  CaseParams at(double eps) const {
    CaseParams q = *this;
    q.epsilon = eps;
    return q;
  }

  void validate() const {
    detail::require(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    detail::require(p_c > 0.0 && p_c <= 1.0, "p_c must lie in (0, 1]");
    detail::require(p_n > 0.0 && p_n <= 1.0, "p_n must lie in (0, 1]");
    detail::require(k > 0.0 && std::isfinite(k), "k must be positive");
  }
};

/// f(eps) = (1-alpha) log((p_c-eps)/p_c) + alpha log((p_n+eps/k)/p_n), the
/// mixed-loss gap L(P^m,h*) - L(P^m,h).
inline double f_epsilon(const CaseParams& pp) {
  if (pp.epsilon >= pp.p_c) throw domain_error("f_epsilon: epsilon must be below p_c");
  if (pp.epsilon < 0.0) throw domain_error("f_epsilon: epsilon must be non-negative");
  return (1.0 - pp.alpha) * std::log1p(-pp.epsilon / pp.p_c) + pp.alpha * std::log1p(pp.epsilon / (pp.k * pp.p_n));
}

/// f'(eps) = (eta - eps) / ((p_c - eps)(k p_n + eps)).
inline double f_prime(const CaseParams& pp) {
  if (pp.epsilon >= pp.p_c) throw domain_error("f_prime: epsilon must be below p_c");
  return (pp.eta - pp.epsilon) / ((pp.p_c - pp.epsilon) * (pp.k * pp.p_n + pp.epsilon));
}

/// f(3 eta) in the variable t = p_c / (k p_n).
inline double g3(double alpha, double t) {
  return (1.0 - alpha) * std::log(1.0 - 3.0 * alpha + 3.0 * (1.0 - alpha) / t) +
         alpha * std::log(3.0 * alpha - 2.0 + 3.0 * alpha * t);
}

/// f(2 eta) in the variable t = p_c / (k p_n).
inline double g2(double alpha, double t) {
  return (1.0 - alpha) * std::log(1.0 - 2.0 * alpha + 2.0 * (1.0 - alpha) / t) +
         alpha * std::log(2.0 * alpha - 1.0 + 2.0 * alpha * t);
}

/// Lower bound on k for the f(3 eta) < 0 statement (alpha < 1/3).
inline double k_bound_3eta(double alpha, double p_c, double p_n) {
  return alpha * (1.0 - 3.0 * alpha) * p_c / ((1.0 - alpha) * (2.0 - 3.0 * alpha) * p_n);
}

/// Lower bound on k for the f(2 eta) < 0 statement (alpha > 1/2).
inline double k_bound_2eta(double alpha, double p_c, double p_n) {
  return (2.0 * alpha - 1.0) * p_c / (2.0 * (1.0 - alpha) * p_n);
}

struct KEstimate {
  double epsilon = 0.0;
  double eps_over_k = 0.0;
  double k = 0.0;
};

/// eps = e^{-Lc*} - e^{-Lc_h}, eps/k = e^{-Ln_h} - e^{-Ln*}. Non-positive
/// eps or eps/k means the parameterization does not apply.
inline KEstimate k_from_losses(double lc_hstar, double lc_h, double ln_hstar, double ln_h) {
  KEstimate e;
  e.epsilon = std::exp(-lc_hstar) - std::exp(-lc_h);
  e.eps_over_k = std::exp(-ln_h) - std::exp(-ln_hstar);
  if (!(e.epsilon > 0.0)) {
    throw ill_posed("k_from_losses: epsilon = " + std::to_string(e.epsilon) + " is not positive (clean loss not hurt)");
  }
  if (!(e.eps_over_k > 0.0)) {
    throw ill_posed("k_from_losses: epsilon/k = " + std::to_string(e.eps_over_k) +
                    " is not positive (noise not fitted)");
  }
  e.k = e.epsilon / e.eps_over_k;
  return e;
}

// ---------------------------------------------------------------------------
// Randomized verification of the three cases.

enum class CaseId { one = 1, two = 2, three_a = 3, three_b = 4 };

inline std::string to_string(CaseId c) {
  switch (c) {
    case CaseId::one: return "1";
    case CaseId::two: return "2";
    case CaseId::three_a: return "3a";
    case CaseId::three_b: return "3b";
  }
  return "?";
}

struct Counterexample {
  CaseId which = CaseId::one;
  CaseParams params;  // epsilon holds the offending grid point
  double f_value = 0.0;
};

struct CaseOutcome {
  bool checked = false;
  std::string skip_reason;
  // Largest signed amount by which the claim is missed (<= 0 when it holds).
  double residual = -INFINITY;
  std::optional<Counterexample> counterexample;
};

/// Values within this band of zero are treated as satisfying strict sign claims.
inline constexpr double kSignTolerance = 1e-12;

/// Checks one parameter draw against one case. Hypotheses are tested first;
/// a draw that fails them is skipped with a reason.
inline CaseOutcome check_case(CaseId which, const CaseParams& pp, std::size_t grid) {
  CaseOutcome out;
  const double thr = alpha_threshold(pp.p_c, pp.p_n, pp.k);
  auto note = [&](double residual, double eps, double f) {
    out.residual = std::max(out.residual, residual);
    if (residual > kSignTolerance && !out.counterexample) out.counterexample = Counterexample{which, pp.at(eps), f};
  };
  switch (which) {
    case CaseId::one: {
      if (pp.alpha > thr) {
        out.skip_reason = "alpha exceeds k p_n/(p_c + k p_n)";
        return out;
      }
      for (std::size_t i = 1; i <= grid; ++i) {
        const double eps = pp.p_c * static_cast<double>(i) / static_cast<double>(grid + 1);
        const double f = f_epsilon(pp.at(eps));
        note(f, eps, f);  // claim: f <= 0
      }
      break;
    }
    case CaseId::two: {
      if (pp.alpha <= thr || pp.eta <= 0.0) {
        out.skip_reason = "alpha does not exceed k p_n/(p_c + k p_n)";
        return out;
      }
      for (std::size_t i = 1; i <= grid; ++i) {
        const double eps = pp.eta * static_cast<double>(i) / static_cast<double>(grid + 1);
        const double f = f_epsilon(pp.at(eps));
        note(-f, eps, f);  // claim: f > 0
      }
      break;
    }
    case CaseId::three_a: {
      if (pp.eta <= 0.0) {
        out.skip_reason = "eta is not positive";
        return out;
      }
      if (!(pp.alpha < 1.0 / 3.0)) {
        out.skip_reason = "alpha is not below 1/3";
        return out;
      }
      if (!(pp.k > k_bound_3eta(pp.alpha, pp.p_c, pp.p_n))) {
        out.skip_reason = "k does not exceed the 3-eta bound";
        return out;
      }
      const double f = f_epsilon(pp.at(3.0 * pp.eta));
      note(f, 3.0 * pp.eta, f);  // claim: f(3 eta) < 0
      break;
    }
    case CaseId::three_b: {
      if (pp.eta <= 0.0 || !(pp.alpha > std::max(thr, 0.5))) {
        out.skip_reason = "alpha does not exceed max(k p_n/(p_c + k p_n), 1/2)";
        return out;
      }
      if (!(pp.k > k_bound_2eta(pp.alpha, pp.p_c, pp.p_n))) {
        out.skip_reason = "k does not exceed the 2-eta bound";
        return out;
      }
      const double f = f_epsilon(pp.at(2.0 * pp.eta));
      note(f, 2.0 * pp.eta, f);  // claim: f(2 eta) < 0
      break;
    }
  }
  out.checked = true;
  return out;
}

inline double log_uniform(Rng& rng, double lo, double hi) {
  return std::exp(rng.uniform(std::log(lo), std::log(hi)));
}

/// A random parameter draw satisfying the hypotheses of `which`.
inline CaseParams draw_for_case(CaseId which, Rng& rng) {
  const double p_c = rng.uniform(0.01, 1.0);
  const double p_n = log_uniform(rng, 1e-5, 1.0);
  switch (which) {
    case CaseId::one: {
      const double k = log_uniform(rng, 0.1, 1e3);
      const double thr = alpha_threshold(p_c, p_n, k);
      // one draw in ten sits exactly on the closed boundary
      const double alpha = rng.uniform_index(10) == 0 ? thr : thr * rng.uniform(1e-3, 1.0);
      return CaseParams::make(std::min(alpha, 1.0 - 1e-9), p_c, p_n, k);
    }
    case CaseId::two: {
      const double k = log_uniform(rng, 0.1, 1e3);
      const double thr = alpha_threshold(p_c, p_n, k);
      const double alpha = thr + (1.0 - thr) * rng.uniform(1e-3, 1.0 - 1e-3);
      return CaseParams::make(alpha, p_c, p_n, k);
    }
    case CaseId::three_a: {
      const double alpha = rng.uniform(1e-3, 1.0 / 3.0 - 1e-3);
      const double lo = k_bound_3eta(alpha, p_c, p_n);
      const double hi = alpha * p_c / ((1.0 - alpha) * p_n);  // eta > 0
      return CaseParams::make(alpha, p_c, p_n, log_uniform(rng, lo, hi));
    }
    case CaseId::three_b: {
      const double alpha = rng.uniform(0.5 + 1e-3, 1.0 - 1e-3);
      const double lo = k_bound_2eta(alpha, p_c, p_n);
      const double hi = alpha * p_c / ((1.0 - alpha) * p_n);
      return CaseParams::make(alpha, p_c, p_n, log_uniform(rng, lo, hi));
    }
  }
  throw invalid_argument("draw_for_case: unknown case");
}

struct CaseReport {
  std::string case_name;
  std::size_t draws = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::vector<Counterexample> counterexamples;
  double max_residual = -INFINITY;
  std::vector<std::string> skip_reasons;
};

/// Runs check_case over an explicit family of parameter draws.
inline CaseReport verify_cases(CaseId which, const std::vector<CaseParams>& family, std::size_t grid) {
  CaseReport rep;
  rep.case_name = to_string(which);
  rep.draws = family.size();
  for (const auto& pp : family) {
    const CaseOutcome o = check_case(which, pp, grid);
    if (!o.checked) {
      ++rep.skipped;
      if (std::find(rep.skip_reasons.begin(), rep.skip_reasons.end(), o.skip_reason) == rep.skip_reasons.end()) {
        rep.skip_reasons.push_back(o.skip_reason);
      }
      continue;
    }
    ++rep.checked;
    rep.max_residual = std::max(rep.max_residual, o.residual);
    if (o.counterexample) rep.counterexamples.push_back(*o.counterexample);
  }
  return rep;
}

/// Random family of `draws` hypothesis-satisfying parameters, then verify.
inline CaseReport verify_cases(CaseId which, std::size_t draws, std::size_t grid, std::uint64_t seed) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(which)));
  std::vector<CaseParams> family;
  family.reserve(draws);
  for (std::size_t i = 0; i < draws; ++i) family.push_back(draw_for_case(which, rng));
  return verify_cases(which, family, grid);
}

/// Linearity residuals over random disjoint-support instances.
struct LinearityReport {
  std::size_t instances = 0;
  double max_residual = 0.0;
};

inline LinearityReport verify_linearity(std::size_t instances, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x1e33a1));
  LinearityReport rep;
  rep.instances = instances;
  for (std::size_t i = 0; i < instances; ++i) {
    const auto inst = random_linearity_instance(rng);
    rep.max_residual = std::max(rep.max_residual, linearity_residual(inst.pc, inst.pn, inst.alpha, inst.h));
  }
  return rep;
}

inline nlohmann::json to_json(const CaseParams& pp) {
  return {{"alpha", pp.alpha}, {"p_c", pp.p_c}, {"p_n", pp.p_n}, {"k", pp.k}, {"epsilon", pp.epsilon}, {"eta", pp.eta}};
}

inline nlohmann::json to_json(const CaseReport& r) {
  nlohmann::json ces = nlohmann::json::array();
  for (const auto& c : r.counterexamples) {
    auto j = to_json(c.params);
    j["f"] = c.f_value;
    ces.push_back(j);
  }
  return {{"case", r.case_name},
          {"draws", r.draws},
          {"checked", r.checked},
          {"skipped", r.skipped},
          {"skip_reasons", r.skip_reasons},
          {"counterexamples", ces},
          {"max_residual", std::isfinite(r.max_residual) ? nlohmann::json(r.max_residual) : nlohmann::json(nullptr)}};
}

}  // namespace noisetrap::theory
