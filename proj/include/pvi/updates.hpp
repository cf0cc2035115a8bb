#pragma once

// Particle update rules and the objectives behind them.
//
// A direction phi_i is an ascent direction on the log posterior, applied as
// theta_i <- theta_i + eta * phi_i. Objective-based rules (var, pac2e, dpp)
// define F to be minimized and use phi_i = -N dF/dtheta_i, so every rule
// reduces to the MAP gradient of the log joint when N = 1.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "pvi/dataset.hpp"
#include "pvi/ensemble.hpp"
#include "pvi/errors.hpp"
#include "pvi/jensen.hpp"
#include "pvi/models.hpp"
#include "pvi/numerics.hpp"
#include "pvi/pacbayes.hpp"

namespace pvi {

enum class RuleTag { map, svgd, wsgld, gfsd, gfsf, f_svgd, f_wsgld, f_gfsd, f_gfsf, dpp, pac2e, var, var_svgd };

inline const std::vector<std::pair<RuleTag, std::string>>& rule_names() {
  static const std::vector<std::pair<RuleTag, std::string>> names{
      {RuleTag::map, "map"},       {RuleTag::svgd, "svgd"},       {RuleTag::wsgld, "wsgld"},
      {RuleTag::gfsd, "gfsd"},     {RuleTag::gfsf, "gfsf"},       {RuleTag::f_svgd, "f_svgd"},
      {RuleTag::f_wsgld, "f_wsgld"}, {RuleTag::f_gfsd, "f_gfsd"}, {RuleTag::f_gfsf, "f_gfsf"},
      {RuleTag::dpp, "dpp"},       {RuleTag::pac2e, "pac2e"},     {RuleTag::var, "var"},
      {RuleTag::var_svgd, "var_svgd"}};
  return names;
}

inline std::string rule_name(RuleTag t) {
  for (const auto& [tag, name] : rule_names()) {
    if (tag == t) return name;
  }
  return "map";
}

inline RuleTag parse_rule(const std::string& s) {
  for (const auto& [tag, name] : rule_names()) {
    if (name == s) return tag;
  }
  throw Error("unknown update rule '" + s + "'");
}

inline bool is_function_space(RuleTag t) {
  return t == RuleTag::f_svgd || t == RuleTag::f_wsgld || t == RuleTag::f_gfsd || t == RuleTag::f_gfsf;
}

/// Gaussian kernel bandwidth: the median trick, or a fixed h^2.
struct KernelPolicy {
  bool median_trick = true;
  double fixed_h2 = 1.0;
};

struct OptimizerConfig {
  bool adaptive = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct UpdateRule {
  RuleTag tag = RuleTag::var;
  BandwidthKind bandwidth = BandwidthKind::h();
  KernelPolicy kernel;
  double step_size = 1e-3;
  OptimizerConfig optimizer;
  double gfsf_ridge = 1e-2;
  double dpp_delta = 1e-8;
  std::size_t function_prior_samples = 100;

  void validate() const {
    if (!(step_size >= 0.0)) throw std::invalid_argument("UpdateRule: step size must be non-negative");
    if (optimizer.adaptive) {
      if (!(optimizer.beta1 > 0.0 && optimizer.beta1 < 1.0) || !(optimizer.beta2 > 0.0 && optimizer.beta2 < 1.0)) {
        throw std::invalid_argument("UpdateRule: betas must lie in (0,1)");
      }
    }
    if (!kernel.median_trick && !(kernel.fixed_h2 > 0.0)) throw std::invalid_argument("UpdateRule: fixed h^2 must be positive");
  }
};

struct StepReport {
  double objective_value = 0.0;
  Vector grad_norms;
  Vector repulsion_magnitudes;
};

// ---------------------------------------------------------------------------
// Kernels

/// Pairwise squared Euclidean distances between rows.
inline Matrix pairwise_sq_dists(const std::vector<Vector>& pts) {
  const std::size_t n = pts.size();
  Matrix d(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) d(i, j) = d(j, i) = squared_distance(pts[i], pts[j]);
  }
  return d;
}

/// h^2 = median of the off-diagonal squared distances / ln N, floored at 1e-12.
inline double median_trick_bandwidth(const Matrix& sq_dists) {
  const std::size_t n = sq_dists.rows();
  if (n < 2) throw std::invalid_argument("median_trick_bandwidth: need N >= 2");
  Vector off;
  off.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) off.push_back(sq_dists(i, j));
  }
  return std::max(median(off) / std::log(static_cast<double>(n)), 1e-12);
}

struct GaussianKernel {
  Matrix K;      // K_ij = exp(-|x_i - x_j|^2 / (2 h^2))
  double h2 = 1.0;
};

inline GaussianKernel gaussian_kernel(const std::vector<Vector>& pts, const KernelPolicy& policy) {
  const std::size_t n = pts.size();
  const Matrix d = pairwise_sq_dists(pts);
  GaussianKernel k;
  k.h2 = policy.median_trick ? (n >= 2 ? median_trick_bandwidth(d) : 1.0) : policy.fixed_h2;
  k.K = Matrix(n, n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) k.K(i, j) = k.K(j, i) = std::exp(-d(i, j) / (2.0 * k.h2));
  }
  return k;
}

/// out_i = sum_j coeff(i, j) * d/dx_j K(x_i, x_j) = sum_j coeff(i, j) (x_i - x_j) K_ij / h^2.
inline std::vector<Vector> kernel_repulsion(const std::vector<Vector>& pts, const GaussianKernel& k, const Matrix& coeff) {
  const std::size_t n = pts.size();
  std::vector<Vector> out(n, Vector(n ? pts[0].size() : 0, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double w = coeff(i, j) * k.K(i, j) / k.h2;
      if (w == 0.0) continue;
      for (std::size_t c = 0; c < out[i].size(); ++c) out[i][c] += w * (pts[i][c] - pts[j][c]);
    }
  }
  return out;
}

/// out_i = sum_j weights(i, j) v_j.
inline std::vector<Vector> smooth(const Matrix& weights, const std::vector<Vector>& v) {
  const std::size_t n = v.size();
  std::vector<Vector> out(n, Vector(n ? v[0].size() : 0, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) axpy(weights(i, j), v[j], out[i]);
  }
  return out;
}

enum class KernelRule { svgd, wsgld, gfsd, gfsf };

/// The shared kernel algebra of the parameter-space and function-space rules,
/// given points x_i and per-point log-posterior gradients g_i in that space.
inline std::vector<Vector> kernel_rule_direction(KernelRule rule, const std::vector<Vector>& pts,
                                                 const std::vector<Vector>& grads, const KernelPolicy& policy,
                                                 double gfsf_ridge = 1e-2) {
  const std::size_t n = pts.size();
  const auto dn = static_cast<double>(n);
  const GaussianKernel k = gaussian_kernel(pts, policy);

  auto svgd = [&] {
    Matrix w = k.K;
    for (double& v : w.data()) v /= dn;
    auto out = smooth(w, grads);
    Matrix coeff(n, n, 1.0 / dn);
    const auto rep = kernel_repulsion(pts, k, coeff);
    for (std::size_t i = 0; i < n; ++i) axpy(1.0, rep[i], out[i]);
    return out;
  };
  auto wsgld = [&] {
    Vector S(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) S[i] += k.K(i, j);
    }
    Matrix coeff(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) coeff(i, j) = 1.0 / S[j] + 1.0 / S[i];
    }
    auto out = kernel_repulsion(pts, k, coeff);
    for (std::size_t i = 0; i < n; ++i) axpy(1.0, grads[i], out[i]);
    return out;
  };

  switch (rule) {
    case KernelRule::svgd: return svgd();
    case KernelRule::wsgld: return wsgld();
    case KernelRule::gfsd: {
      auto out = svgd();
      const auto w = wsgld();
      for (std::size_t i = 0; i < n; ++i) {
        axpy(1.0, w[i], out[i]);
        axpy(-1.0, grads[i], out[i]);
      }
      return out;
    }
    case KernelRule::gfsf: {
      Matrix A = k.K;
      for (std::size_t i = 0; i < n; ++i) A(i, i) += gfsf_ridge;
      Matrix coeff = spd_inverse(A, 0.0);
      for (double& v : coeff.data()) v /= dn;
      auto out = kernel_repulsion(pts, k, coeff);
      for (std::size_t i = 0; i < n; ++i) axpy(1.0, grads[i], out[i]);
      return out;
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Likelihood and prior gradients

/// sum_d weights(d) * grad log p(y_d | x_d, theta).
inline ParamVector weighted_loglik_grad(const ModelSpec& spec, const ParamVector& theta, const Dataset& data,
                                        std::span<const double> weights) {
  ParamVector g(spec.num_params(), 0.0);
  for (std::size_t d = 0; d < data.size(); ++d) {
    if (weights[d] != 0.0) accumulate_grad_log_lik(spec, theta, data.x(d), data.y(d), g, weights[d]);
  }
  return g;
}

/// lik_scale * sum_d grad log p(y_d | x_d, theta_i) + grad log pi(theta_i), per particle.
inline std::vector<ParamVector> map_direction(const ParticleEnsemble& ens, const Dataset& data, const Prior& prior,
                                              double lik_scale = 1.0) {
  std::vector<ParamVector> out;
  out.reserve(ens.size());
  const Vector w(data.size(), lik_scale);
  for (const auto& p : ens.particles) {
    ParamVector g = weighted_loglik_grad(ens.spec, p, data, w);
    accumulate_grad_log_prior(prior, p, g);
    out.push_back(std::move(g));
  }
  return out;
}

/// Mean over particles of the negative log joint.
inline double map_objective(const ParticleEnsemble& ens, const Dataset& data, const Prior& prior,
                            double lik_scale = 1.0) {
  const Matrix L = loglik_matrix(ens, data);
  double s = 0.0;
  for (std::size_t i = 0; i < ens.size(); ++i) {
    double li = 0.0;
    for (std::size_t d = 0; d < data.size(); ++d) li += L(i, d);
    s += -lik_scale * li - log_prior(prior, ens.particles[i]);
  }
  return s / static_cast<double>(ens.size());
}

inline std::vector<ParamVector> svgd_direction(const ParticleEnsemble& ens, const Dataset& data, const Prior& prior,
                                               const KernelPolicy& kernel, double lik_scale = 1.0) {
  return kernel_rule_direction(KernelRule::svgd, ens.particles, map_direction(ens, data, prior, lik_scale), kernel);
}

inline std::vector<ParamVector> wsgld_direction(const ParticleEnsemble& ens, const Dataset& data, const Prior& prior,
                                                const KernelPolicy& kernel, double lik_scale = 1.0) {
  return kernel_rule_direction(KernelRule::wsgld, ens.particles, map_direction(ens, data, prior, lik_scale), kernel);
}

/// svgd + wsgld - map: the sum of the two rules with the drift counted once.
inline std::vector<ParamVector> gfsd_direction(const ParticleEnsemble& ens, const Dataset& data, const Prior& prior,
                                               const KernelPolicy& kernel, double lik_scale = 1.0) {
  return kernel_rule_direction(KernelRule::gfsd, ens.particles, map_direction(ens, data, prior, lik_scale), kernel);
}

inline std::vector<ParamVector> gfsf_direction(const ParticleEnsemble& ens, const Dataset& data, const Prior& prior,
                                               const KernelPolicy& kernel, double ridge = 1e-2,
                                               double lik_scale = 1.0) {
  return kernel_rule_direction(KernelRule::gfsf, ens.particles, map_direction(ens, data, prior, lik_scale), kernel,
                               ridge);
}

// ---------------------------------------------------------------------------
// Function space

struct FunctionSpaceState {
  std::vector<Vector> outputs;   // f_i over the batch, datum-major
  std::vector<Vector> scores;    // output-space log-posterior gradient
  std::vector<ParamVector> direct;  // parameter gradient not flowing through f
  std::vector<std::vector<OutputGrad>> per_datum;
};

inline FunctionSpaceState function_space_state(const ParticleEnsemble& ens, const Dataset& batch,
                                               const FunctionPriorApprox* fprior, double lik_scale) {
  FunctionSpaceState st;
  const std::size_t c = ens.spec.output_dim;
  for (const auto& p : ens.particles) {
    Vector f, s;
    ParamVector direct(ens.spec.num_params(), 0.0);
    std::vector<OutputGrad> grads;
    for (std::size_t d = 0; d < batch.size(); ++d) {
      auto og = grad_output(ens.spec, p, batch.x(d), batch.y(d));
      f.insert(f.end(), og.output.begin(), og.output.end());
      for (double v : og.d_log_lik_d_output) s.push_back(lik_scale * v);
      axpy(lik_scale, og.direct, direct);
      grads.push_back(std::move(og));
    }
    if (fprior) {
      if (fprior->mean.size() != batch.size() * c) throw DimensionMismatch("function prior does not match the batch");
      const Vector sc = fprior->score(f);
      axpy(1.0, sc, s);
    }
    st.outputs.push_back(std::move(f));
    st.scores.push_back(std::move(s));
    st.direct.push_back(std::move(direct));
    st.per_datum.push_back(std::move(grads));
  }
  return st;
}

inline std::vector<ParamVector> contract_outputs(const ParticleEnsemble& ens, const FunctionSpaceState& st,
                                                 const std::vector<Vector>& v) {
  const std::size_t c = ens.spec.output_dim;
  std::vector<ParamVector> out;
  for (std::size_t i = 0; i < ens.size(); ++i) {
    ParamVector g = st.direct[i];
    for (std::size_t d = 0; d < st.per_datum[i].size(); ++d) {
      const ParamVector part =
          st.per_datum[i][d].jacobian_transpose_apply(std::span<const double>(v[i].data() + d * c, c));
      axpy(1.0, part, g);
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// J_i^T s_i: the function-space MAP gradient each f-rule reduces to at N = 1.
inline std::vector<ParamVector> function_space_map_direction(const ParticleEnsemble& ens, const Dataset& batch,
                                                             const FunctionPriorApprox* fprior, double lik_scale) {
  const auto st = function_space_state(ens, batch, fprior, lik_scale);
  return contract_outputs(ens, st, st.scores);
}

/// Runs the kernel rule on the batch outputs and pulls the result back
/// through each particle's output Jacobian.
inline std::vector<ParamVector> function_space_direction(RuleTag rule, const ParticleEnsemble& ens,
                                                         const Dataset& batch, const FunctionPriorApprox* fprior,
                                                         const KernelPolicy& kernel, double lik_scale = 1.0,
                                                         double gfsf_ridge = 1e-2) {
  if (batch.empty()) throw std::invalid_argument("function_space_direction: empty minibatch");
  KernelRule kr{};
  switch (rule) {
    case RuleTag::f_svgd: kr = KernelRule::svgd; break;
    case RuleTag::f_wsgld: kr = KernelRule::wsgld; break;
    case RuleTag::f_gfsd: kr = KernelRule::gfsd; break;
    case RuleTag::f_gfsf: kr = KernelRule::gfsf; break;
    default: throw std::invalid_argument("function_space_direction: not a function-space rule");
  }
  const auto st = function_space_state(ens, batch, fprior, lik_scale);
  const auto v = kernel_rule_direction(kr, st.outputs, st.scores, kernel, gfsf_ridge);
  return contract_outputs(ens, st, v);
}

// ---------------------------------------------------------------------------
// Loss-repulsion objective (VAR) and the predictive-variance baseline (PAC2E)

/// dR/dL_k for R = (1/(4N)) sum_i exp(e_i) (L_i - mean L)^2.
inline Vector repulsion_R_grad(const BandwidthKind& kind, std::span<const double> L) {
  const std::size_t n = L.size();
  const auto dn = static_cast<double>(n);
  const Vector w = bandwidth_inv_sq(kind, L);
  const Matrix J = bandwidth_exponent_jacobian(kind, L);
  const double m = mean(L);
  double wsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) wsum += w[i] * (L[i] - m);
  Vector g(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += w[i] * J(i, k) * (L[i] - m) * (L[i] - m);
    s += 2.0 * w[k] * (L[k] - m) - 2.0 / dn * wsum;
    g[k] = s / (4.0 * dn);
  }
  return g;
}

/// dV/dL_k for V = Var(q) / 2, q_i = exp(L_i - max L).
inline Vector predictive_variance_V_grad(std::span<const double> L) {
  const std::size_t n = L.size();
  const auto dn = static_cast<double>(n);
  const double mx = *std::max_element(L.begin(), L.end());
  const std::size_t a = detail::argmax(L);
  Vector q(n);
  double sq = 0.0, s1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    q[i] = std::exp(L[i] - mx);
    sq += q[i] * q[i];
    s1 += q[i];
  }
  const double qbar = s1 / dn;
  Vector g(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double da = (k == a) ? 1.0 : 0.0;
    g[k] = (q[k] * q[k] - da * sq - qbar * q[k] + qbar * da * s1) / dn;
  }
  return g;
}

namespace detail {

/// Objective of the form -s sum_d [mean_i L_id + T(L_.d)] + KL together with
/// the per-particle gradients, where T is a per-column term with gradient dT.
template <class Term, class TermGrad>
double column_term_objective(const ParticleEnsemble& ens, const Dataset& data, const Prior& prior, double lik_scale,
                             Term term, TermGrad term_grad, std::vector<ParamVector>* grads) {
  const Matrix L = loglik_matrix(ens, data);
  const std::size_t n = ens.size();
  const auto dn = static_cast<double>(n);
  double F = 0.0;
  Matrix coef(n, data.size());
  for (std::size_t d = 0; d < data.size(); ++d) {
    const Vector col = L.column(d);
    F -= lik_scale * (mean(col) + term(col));
    if (grads) {
      const Vector dT = term_grad(col);
      for (std::size_t i = 0; i < n; ++i) coef(i, d) = -lik_scale * (1.0 / dn + dT[i]);
    }
  }
  F += kl_ensemble_prior(ens, prior);
  if (grads) {
    grads->clear();
    for (std::size_t i = 0; i < n; ++i) {
      ParamVector g = weighted_loglik_grad(ens.spec, ens.particles[i], data, coef.row(i));
      accumulate_grad_log_prior(prior, ens.particles[i], g, -1.0 / dn);
      grads->push_back(std::move(g));
    }
  }
  return F;
}

inline std::vector<ParamVector> scaled(std::vector<ParamVector> v, double s) {
  for (auto& p : v) {
    for (double& x : p) x *= s;
  }
  return v;
}

}  // namespace detail

/// F = -s sum_d [mean_i L_id + R(L_.d)] + KL(rho_E, pi).
inline double var_objective(const ParticleEnsemble& ens, const Dataset& data, const Prior& prior,
                            const BandwidthKind& kind, double lik_scale = 1.0) {
  if (data.empty()) throw std::invalid_argument("var_objective: empty dataset");
  return detail::column_term_objective(
      ens, data, prior, lik_scale, [&](std::span<const double> c) { return repulsion_R(kind, c); },
      [&](std::span<const double> c) { return repulsion_R_grad(kind, c); }, nullptr);
}

/// dF/dtheta_i of var_objective.
inline std::vector<ParamVector> var_grad(const ParticleEnsemble& ens, const Dataset& data, const Prior& prior,
                                         const BandwidthKind& kind, double lik_scale = 1.0) {
  if (data.empty()) throw std::invalid_argument("var_grad: empty dataset");
  std::vector<ParamVector> g;
  detail::column_term_objective(
      ens, data, prior, lik_scale, [&](std::span<const double> c) { return repulsion_R(kind, c); },
      [&](std::span<const double> c) { return repulsion_R_grad(kind, c); }, &g);
  return g;
}

inline std::vector<ParamVector> var_direction(const ParticleEnsemble& ens, const Dataset& data, const Prior& prior,
                                              const BandwidthKind& kind, double lik_scale = 1.0) {
  return detail::scaled(var_grad(ens, data, prior, kind, lik_scale), -static_cast<double>(ens.size()));
}

/// (1/N) sum_j K_ij v_j + d/dtheta_j K_ij with v_j = -N dF/dtheta_j of var_objective.
inline std::vector<ParamVector> var_svgd_direction(const ParticleEnsemble& ens, const Dataset& data,
                                                   const Prior& prior, const BandwidthKind& kind,
                                                   const KernelPolicy& kernel, double lik_scale = 1.0) {
  return kernel_rule_direction(KernelRule::svgd, ens.particles, var_direction(ens, data, prior, kind, lik_scale),
                               kernel);
}

/// F = -s sum_d [mean_i L_id + V(L_.d)] + KL(rho_E, pi).
inline double pac2e_objective(const ParticleEnsemble& ens, const Dataset& data, const Prior& prior,
                              double lik_scale = 1.0) {
  if (data.empty()) throw std::invalid_argument("pac2e_objective: empty dataset");
  return detail::column_term_objective(
      ens, data, prior, lik_scale, [](std::span<const double> c) { return predictive_variance_V_log(c); },
      [](std::span<const double> c) { return predictive_variance_V_grad(c); }, nullptr);
}

inline std::vector<ParamVector> pac2e_grad(const ParticleEnsemble& ens, const Dataset& data, const Prior& prior,
                                           double lik_scale = 1.0) {
  if (data.empty()) throw std::invalid_argument("pac2e_grad: empty dataset");
  std::vector<ParamVector> g;
  detail::column_term_objective(
      ens, data, prior, lik_scale, [](std::span<const double> c) { return predictive_variance_V_log(c); },
      [](std::span<const double> c) { return predictive_variance_V_grad(c); }, &g);
  return g;
}

/// F = -(1/N) sum_i [s sum_d L_id + ln pi(theta_i)] - ln det(K + delta I), with
/// the parameter-space gaussian Gram K at a fixed h^2.
inline double dpp_objective(const ParticleEnsemble& ens, const Dataset& data, const Prior& prior, double h2,
                            double delta = 1e-8, double lik_scale = 1.0) {
  if (data.empty()) throw std::invalid_argument("dpp_objective: empty dataset");
  GaussianKernel k = gaussian_kernel(ens.particles, KernelPolicy{false, h2});
  for (std::size_t i = 0; i < ens.size(); ++i) k.K(i, i) += delta;
  return map_objective(ens, data, prior, lik_scale) - logdet_psd(k.K, 0.0);
}

inline std::vector<ParamVector> dpp_grad(const ParticleEnsemble& ens, const Dataset& data, const Prior& prior,
                                         double h2, double delta = 1e-8, double lik_scale = 1.0) {
  const std::size_t n = ens.size();
  const auto dn = static_cast<double>(n);
  const GaussianKernel k = gaussian_kernel(ens.particles, KernelPolicy{false, h2});
  Matrix A = k.K;
  for (std::size_t i = 0; i < n; ++i) A(i, i) += delta;
  const Matrix Ainv = spd_inverse(A, 0.0);
  auto g = detail::scaled(map_direction(ens, data, prior, lik_scale), -1.0 / dn);
  // d/dtheta_i ln det A = 2 sum_j Ainv_ij dK_ij/dtheta_i, dK_ij/dtheta_i = -(theta_i - theta_j) K_ij / h^2.
  Matrix coeff(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) coeff(i, j) = 2.0 * Ainv(i, j);
  }
  const auto rep = kernel_repulsion(ens.particles, k, coeff);
  for (std::size_t i = 0; i < n; ++i) axpy(1.0, rep[i], g[i]);
  return g;
}

// ---------------------------------------------------------------------------
// Loss-space forms of the w-SGLD and GFSF repulsions

/// mean(L) + R_w(L) with h_w^{-2} held at the given value.
inline double wsgld_loss_term(std::span<const double> L, double hw_inv_sq_frozen) {
  const std::size_t n = L.size();
  const auto dn = static_cast<double>(n);
  double s = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    double row = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const double d = L[a] - L[b];
      row += std::exp(-hw_inv_sq_frozen * d * d / 8.0);
    }
    s += std::log(row / dn);
  }
  return mean(L) - s / dn;
}

/// d/dL_i of wsgld_loss_term: 1/N - (1/N)[sum_b dG_ib/dL_i / S_i + sum_a dG_ai/dL_i / S_a],
/// the two normalized kernel sums of w-SGLD written on losses.
inline Vector wsgld_loss_term_grad(std::span<const double> L, double hw_inv_sq_frozen) {
  const std::size_t n = L.size();
  const auto dn = static_cast<double>(n);
  const double c = hw_inv_sq_frozen / 8.0;
  Matrix G(n, n);
  Vector S(n, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      const double d = L[a] - L[b];
      G(a, b) = std::exp(-c * d * d);
      S[a] += G(a, b);
    }
  }
  Vector g(n, 1.0 / dn);
  for (std::size_t i = 0; i < n; ++i) {
    double own = 0.0, other = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double dG = -2.0 * c * (L[i] - L[j]) * G(i, j);  // dG_ij/dL_i = dG_ji/dL_i
      own += dG;
      other += dG / S[j];
    }
    g[i] -= (own / S[i] + other) / dn;
  }
  return g;
}

/// ln det(eps I + K) with K_ij = exp(-c (L_i - L_j)^2), c = tilde_h ln N h_w^{-2} / 16 held fixed.
inline double gfsf_logdet_term(std::span<const double> L, double c, double eps) {
  const std::size_t n = L.size();
  Matrix A(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double d = L[i] - L[j];
      A(i, j) = std::exp(-c * d * d) + (i == j ? eps : 0.0);
    }
  }
  return logdet_psd(A, 0.0);
}

/// d/dL_i ln det(eps I + K) = 2 sum_j ((eps I + K)^{-1})_ij dK_ij/dL_i.
inline Vector gfsf_logdet_term_grad(std::span<const double> L, double c, double eps) {
  const std::size_t n = L.size();
  Matrix K(n, n), A(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double d = L[i] - L[j];
      K(i, j) = std::exp(-c * d * d);
      A(i, j) = K(i, j) + (i == j ? eps : 0.0);
    }
  }
  const Matrix Ainv = spd_inverse(A, 0.0);
  Vector g(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) g[i] += 2.0 * Ainv(i, j) * (-2.0 * c * (L[i] - L[j]) * K(i, j));
  }
  return g;
}

/// Pulls a loss-space gradient back to parameters for a single datum:
/// out_i = dT/dL_i * grad_theta ln p(y | x, theta_i).
inline std::vector<ParamVector> pull_back_single_datum(const ParticleEnsemble& ens, std::span<const double> x,
                                                       std::span<const double> y, std::span<const double> dT) {
  std::vector<ParamVector> out;
  for (std::size_t i = 0; i < ens.size(); ++i) {
    ParamVector g(ens.spec.num_params(), 0.0);
    accumulate_grad_log_lik(ens.spec, ens.particles[i], x, y, g, dT[i]);
    out.push_back(std::move(g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dispatch and training

struct DirectionResult {
  std::vector<ParamVector> directions;
  double objective = 0.0;
  std::vector<ParamVector> map;  // plain MAP gradients, for repulsion magnitudes
};

inline DirectionResult compute_directions(const UpdateRule& rule, const ParticleEnsemble& ens, const Dataset& batch,
                                          const Prior& prior, double lik_scale,
                                          const FunctionPriorApprox* fprior = nullptr) {
  DirectionResult r;
  const auto n = static_cast<double>(ens.size());
  if (is_function_space(rule.tag)) {
    r.map = function_space_map_direction(ens, batch, fprior, lik_scale);
    r.directions = function_space_direction(rule.tag, ens, batch, fprior, rule.kernel, lik_scale, rule.gfsf_ridge);
    r.objective = map_objective(ens, batch, prior, lik_scale);
    return r;
  }
  r.map = map_direction(ens, batch, prior, lik_scale);
  switch (rule.tag) {
    case RuleTag::map:
      r.directions = r.map;
      r.objective = map_objective(ens, batch, prior, lik_scale);
      break;
    case RuleTag::svgd:
    case RuleTag::wsgld:
    case RuleTag::gfsd:
    case RuleTag::gfsf: {
      const KernelRule kr = rule.tag == RuleTag::svgd    ? KernelRule::svgd
                            : rule.tag == RuleTag::wsgld ? KernelRule::wsgld
                            : rule.tag == RuleTag::gfsd  ? KernelRule::gfsd
                                                         : KernelRule::gfsf;
      r.directions = kernel_rule_direction(kr, ens.particles, r.map, rule.kernel, rule.gfsf_ridge);
      r.objective = map_objective(ens, batch, prior, lik_scale);
      break;
    }
    case RuleTag::var:
      r.directions = detail::scaled(var_grad(ens, batch, prior, rule.bandwidth, lik_scale), -n);
      r.objective = var_objective(ens, batch, prior, rule.bandwidth, lik_scale);
      break;
    case RuleTag::var_svgd:
      r.directions = var_svgd_direction(ens, batch, prior, rule.bandwidth, rule.kernel, lik_scale);
      r.objective = var_objective(ens, batch, prior, rule.bandwidth, lik_scale);
      break;
    case RuleTag::pac2e:
      r.directions = detail::scaled(pac2e_grad(ens, batch, prior, lik_scale), -n);
      r.objective = pac2e_objective(ens, batch, prior, lik_scale);
      break;
    case RuleTag::dpp: {
      const double h2 = gaussian_kernel(ens.particles, rule.kernel).h2;
      r.directions = detail::scaled(dpp_grad(ens, batch, prior, h2, rule.dpp_delta, lik_scale), -n);
      r.objective = dpp_objective(ens, batch, prior, h2, rule.dpp_delta, lik_scale);
      break;
    }
    default: break;
  }
  return r;
}

struct TrainResult {
  ParticleEnsemble ensemble;
  std::vector<StepReport> trajectory;
};

/// Full batch when batch_size is 0 and D <= 2000; otherwise minibatches of
/// batch_size (256 when 0) with the likelihood rescaled by D/b.
inline std::size_t effective_batch_size(std::size_t D, std::size_t batch_size) {
  if (batch_size == 0) return D <= 2000 ? D : 256;
  return std::min(batch_size, D);
}

inline TrainResult train(const UpdateRule& rule, ParticleEnsemble ens, const Dataset& data, const Prior& prior,
                         std::size_t epochs, std::size_t batch_size, Rng& rng) {
  rule.validate();
  ens.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  const std::size_t D = data.size();
  const std::size_t b = effective_batch_size(D, batch_size);
  const std::size_t n = ens.size();
  const std::size_t P = ens.spec.num_params();
  std::vector<Vector> m1(n, Vector(P, 0.0)), m2(n, Vector(P, 0.0));
  std::size_t t = 0;
  TrainResult res;
  std::vector<std::size_t> order(D);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    if (b < D) std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t start = 0; start < D; start += b) {
      const std::size_t end = std::min(start + b, D);
      const Dataset batch = b == D ? data : data.subset(std::span<const std::size_t>(order.data() + start, end - start));
      const double scale = b == D ? 1.0 : static_cast<double>(D) / static_cast<double>(end - start);
      std::optional<FunctionPriorApprox> fprior;
      if (is_function_space(rule.tag)) {
        fprior = fit_function_prior(ens.spec, prior, batch.inputs, rng, rule.function_prior_samples);
      }
      const auto dr = compute_directions(rule, ens, batch, prior, scale, fprior ? &*fprior : nullptr);
      if (!std::isfinite(dr.objective)) throw Diverged("train: objective became non-finite at step " + std::to_string(t));
      StepReport rep;
      rep.objective_value = dr.objective;
      ++t;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& phi = dr.directions[i];
        rep.grad_norms.push_back(norm2(phi));
        double r2 = 0.0;
        for (std::size_t k = 0; k < P; ++k) r2 += (phi[k] - dr.map[i][k]) * (phi[k] - dr.map[i][k]);
        rep.repulsion_magnitudes.push_back(std::sqrt(r2));
        auto& theta = ens.particles[i];
        if (rule.optimizer.adaptive) {
          const auto& o = rule.optimizer;
          const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(t));
          const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(t));
          for (std::size_t k = 0; k < P; ++k) {
            m1[i][k] = o.beta1 * m1[i][k] + (1.0 - o.beta1) * phi[k];
            m2[i][k] = o.beta2 * m2[i][k] + (1.0 - o.beta2) * phi[k] * phi[k];
            theta[k] += rule.step_size * (m1[i][k] / c1) / (std::sqrt(m2[i][k] / c2) + o.eps);
          }
        } else {
          axpy(rule.step_size, phi, theta);
        }
        for (double v : theta) {
          if (!std::isfinite(v)) throw Diverged("train: parameters became non-finite at step " + std::to_string(t));
        }
      }
      res.trajectory.push_back(std::move(rep));
    }
  }
  res.ensemble = std::move(ens);
  return res;
}

/// step, objective, mean grad norm, mean repulsion magnitude.
inline void write_trajectory_csv(const std::vector<StepReport>& traj, std::ostream& os) {
  os << "step,objective,mean_grad_norm,mean_repulsion\n";
  for (std::size_t s = 0; s < traj.size(); ++s) {
    const auto& r = traj[s];
    os << s << ',' << format_real(r.objective_value) << ',' << format_real(mean(r.grad_norms)) << ','
       << format_real(mean(r.repulsion_magnitudes)) << '\n';
  }
}

}  // namespace pvi
