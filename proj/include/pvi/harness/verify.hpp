#pragma once

// Randomized property suites over the inequalities, identities, gradients
// and update rules. Failures are collected as readable counterexamples.

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "pvi/ensemble.hpp"
#include "pvi/jensen.hpp"
#include "pvi/models.hpp"
#include "pvi/pacbayes.hpp"
#include "pvi/updates.hpp"

namespace pvi::harness {

struct SuiteReport {
  std::string suite;
  std::size_t trials = 0;
  std::size_t checks = 0;
  std::size_t violations = 0;
  double max_rel_error = 0.0;   // gradient and identity suites
  double min_slack = std::numeric_limits<double>::infinity();  // inequality suites
  std::vector<std::string> counterexamples;

  bool passed() const { return violations == 0; }

  void record(bool ok, const std::string& what) {
    ++checks;
    if (ok) return;
    ++violations;
    if (counterexamples.size() < 20) counterexamples.push_back(what);
  }
};

inline std::string describe(std::span<const double> v) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << format_real(v[i]);
  os << ']';
  return os.str();
}

/// N in [nmin, nmax], entries uniform in [lo, hi].
inline Vector random_column(Rng& rng, std::size_t nmin, std::size_t nmax, double lo = -10.0, double hi = 0.0) {
  const std::size_t n = nmin + rng.index(nmax - nmin + 1);
  Vector L(n);
  for (double& v : L) v = rng.uniform(lo, hi);
  return L;
}

// ---------------------------------------------------------------------------
// Inequality checks on one column. Each returns the slack (>= 0 when the
// ordering holds) of the tightest inequality involved.

/// mean <= mean + R(h) <= ln E p.
inline double theorem3_slack(std::span<const double> L) {
  const double m = mean(L), b = bma_log_predictive(L), R = repulsion_R(BandwidthKind::h(), L);
  return std::min(R, b - (m + R));
}

/// mean <= mean + R_w <= ln E p, and R_w <= R_c.
inline double wsgld_slack(std::span<const double> L) {
  const double m = mean(L), b = bma_log_predictive(L), Rw = repulsion_Rw(L), Rc = repulsion_Rc(L);
  return std::min({Rw, b - (m + Rw), Rc - Rw});
}

/// mean <= mean + R_g <= ln E p with the automatic tilde_h.
inline double gfsf_slack(std::span<const double> L) {
  const double m = mean(L), b = bma_log_predictive(L);
  const double Rg = repulsion_Rg(L).value;
  return std::min(Rg, b - (m + Rg));
}

/// The orderings the log-det forms provably satisfy: ln E p >= mean + upper,
/// mean >= mean + lower and ln E p >= mean + lower.
inline double dpp_slack(std::span<const double> L) {
  const double m = mean(L), b = bma_log_predictive(L);
  const auto d = repulsion_Rd(L);
  double s = std::min(-d.lower, b - (m + d.lower));
  if (d.upper) s = std::min(s, b - (m + *d.upper));
  return s;
}

inline SuiteReport verify_jensen(Rng& rng, std::size_t trials) {
  SuiteReport rep;
  rep.suite = "jensen";
  rep.trials = trials;
  auto check = [&](const char* name, double slack, std::span<const double> L) {
    rep.min_slack = std::min(rep.min_slack, slack);
    std::ostringstream os;
    os << name << ": L=" << describe(L) << " slack=" << format_real(slack);
    rep.record(slack >= -kChainTolerance, os.str());
  };
  for (std::size_t t = 0; t < trials; ++t) {
    const Vector L = random_column(rng, 2, 50);
    check("theorem3 chain", theorem3_slack(L), L);
    check("h_m below h", repulsion_R(BandwidthKind::h(), L) - repulsion_R(BandwidthKind::h_m(), L), L);
    check("w-sgld chain", wsgld_slack(L), L);
    check("gfsf chain", gfsf_slack(L), L);
    check("dpp ordering", dpp_slack(L), L);
    const auto w = second_order_equality_witness(L);
    std::ostringstream os;
    os << "witness: L=" << describe(L) << " gap=" << format_real(w.gap) << " bracket=[" << format_real(w.at_upper_g)
       << ", " << format_real(w.at_lower_g) << "]";
    rep.record(w.bracketed, os.str());
  }
  return rep;
}

inline SuiteReport verify_identities(Rng& rng, std::size_t trials) {
  SuiteReport rep;
  rep.suite = "identities";
  rep.trials = trials;
  for (std::size_t t = 0; t < trials; ++t) {
    const Vector L = random_column(rng, 1, 50, -10.0, 10.0);
    const auto [lhs, rhs] = covariance_identity_check(L);
    const double rel = std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs));
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    std::ostringstream os;
    os << "covariance identity: L=" << describe(L) << " lhs=" << format_real(lhs) << " rhs=" << format_real(rhs);
    rep.record(rel <= 1e-10, os.str());
  }
  for (std::size_t t = 0; t < 10 * trials; ++t) {
    const double a = std::exp(rng.uniform(-5.0, 5.0)), b = std::exp(rng.uniform(-5.0, 5.0));
    std::ostringstream os;
    os << "lemma: a=" << format_real(a) << " b=" << format_real(b);
    rep.record(lemma_sqrt_check(a, b), os.str());
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Random problems for gradient and update checks

struct Problem {
  ParticleEnsemble ens;
  Dataset data;
  Prior prior;
};

inline Problem random_problem(LikelihoodFamily family, std::size_t N, std::size_t D, Rng& rng,
                              bool learnable_sigma = false, Activation act = Activation::tanh,
                              std::vector<std::size_t> hidden = {3}) {
  Problem p;
  ModelSpec& s = p.ens.spec;
  s.input_dim = 2;
  s.hidden = std::move(hidden);
  s.activation = act;
  if (family == LikelihoodFamily::gaussian) {
    s.output_dim = 1;
    s.likelihood = Likelihood::gaussian(0.5 + rng.uniform(), learnable_sigma);
  } else {
    s.output_dim = 3;
    s.likelihood = Likelihood::categorical(3);
  }
  s.validate();
  for (std::size_t i = 0; i < N; ++i) {
    ParamVector theta(s.num_params());
    for (double& v : theta) v = rng.normal(0.0, 0.8);
    p.ens.particles.push_back(std::move(theta));
  }
  Matrix x(D, 2), y(D, 1);
  for (double& v : x.data()) v = rng.normal();
  for (std::size_t d = 0; d < D; ++d) {
    y(d, 0) = family == LikelihoodFamily::gaussian ? rng.normal() : static_cast<double>(rng.index(3));
  }
  p.data = Dataset(std::move(x), std::move(y));
  p.prior = Prior{rng.uniform(-0.2, 0.2), 0.5 + rng.uniform()};
  return p;
}

inline Vector flatten(const std::vector<ParamVector>& v) {
  Vector out;
  for (const auto& p : v) out.insert(out.end(), p.begin(), p.end());
  return out;
}

inline ParticleEnsemble with_flat(const ParticleEnsemble& ens, std::span<const double> flat) {
  ParticleEnsemble e{ens.spec, ens.particles};
  std::size_t k = 0;
  for (auto& p : e.particles) {
    for (double& v : p) v = flat[k++];
  }
  return e;
}

/// ||a - b|| / max(||b||, 1e-8).
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double num = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) num += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(num) / std::max(norm2(b), 1e-8);
}

/// Relative error between an analytic ensemble gradient and central
/// differences of the objective over all particle coordinates.
inline double ensemble_gradient_error(const ParticleEnsemble& ens,
                                      const std::function<double(const ParticleEnsemble&)>& objective,
                                      const std::vector<ParamVector>& analytic, double step = 1e-6) {
  const Vector flat = flatten(ens.particles);
  const Vector fd = finite_diff_grad([&](std::span<const double> x) { return objective(with_flat(ens, x)); }, flat, step);
  return relative_error(flatten(analytic), fd);
}

struct ObjectiveGradientErrors {
  double var = 0.0;
  double pac2e = 0.0;
  double dpp = 0.0;
};

/// Gradient errors of the three objectives on one random configuration.
inline ObjectiveGradientErrors objective_gradient_errors(const Problem& p, const BandwidthKind& kind) {
  ObjectiveGradientErrors e;
  e.var = ensemble_gradient_error(
      p.ens, [&](const ParticleEnsemble& x) { return var_objective(x, p.data, p.prior, kind); },
      var_grad(p.ens, p.data, p.prior, kind));
  e.pac2e = ensemble_gradient_error(
      p.ens, [&](const ParticleEnsemble& x) { return pac2e_objective(x, p.data, p.prior); },
      pac2e_grad(p.ens, p.data, p.prior));
  const double h2 = gaussian_kernel(p.ens.particles, KernelPolicy{}).h2;
  e.dpp = ensemble_gradient_error(
      p.ens, [&](const ParticleEnsemble& x) { return dpp_objective(x, p.data, p.prior, h2); },
      dpp_grad(p.ens, p.data, p.prior, h2));
  return e;
}

struct DerivationErrors {
  double wsgld = 0.0;
  double gfsf = 0.0;
};

/// Loss-space w-SGLD and GFSF terms on a single datum, with their bandwidth
/// constants frozen at the starting point: analytic pull-back through the
/// log-likelihood gradients versus central differences in the parameters.
inline DerivationErrors derivation_errors(const Problem& p) {
  DerivationErrors e;
  const auto x = p.data.x(0);
  const auto y = p.data.y(0);
  auto column = [&](const ParticleEnsemble& ens) {
    Vector L(ens.size());
    for (std::size_t i = 0; i < ens.size(); ++i) L[i] = log_lik(ens.spec, ens.particles[i], x, y);
    return L;
  };
  const Vector L0 = column(p.ens);
  const double hw = hw_inv_sq(L0);
  e.wsgld = ensemble_gradient_error(
      p.ens, [&](const ParticleEnsemble& ens) { return wsgld_loss_term(column(ens), hw); },
      pull_back_single_datum(p.ens, x, y, wsgld_loss_term_grad(L0, hw)), 1e-6);
  // The automatic tilde_h when it exists; columns spread too widely for any
  // tilde_h <= 2^60 fall back to a constant matched to the spread.
  double c = 0.0;
  try {
    const auto sel = select_tilde_h(L0);
    c = sel.tilde_h * std::log(static_cast<double>(L0.size())) * hw / 16.0;
  } catch (const Degenerate&) {
    const auto [lo, hi] = std::minmax_element(L0.begin(), L0.end());
    c = 1.0 / ((*hi - *lo) * (*hi - *lo));
  }
  const double eps = default_gfsf_eps(L0.size());
  e.gfsf = ensemble_gradient_error(
      p.ens, [&](const ParticleEnsemble& ens) { return gfsf_logdet_term(column(ens), c, eps); },
      pull_back_single_datum(p.ens, x, y, gfsf_logdet_term_grad(L0, c, eps)), 1e-6);
  return e;
}

inline SuiteReport verify_gradients(Rng& rng, std::size_t trials, double tol = 1e-4) {
  SuiteReport rep;
  rep.suite = "gradients";
  rep.trials = trials;
  const BandwidthKind kinds[] = {BandwidthKind::h(), BandwidthKind::h_m(), BandwidthKind::h_median(),
                                 BandwidthKind::h_w()};
  for (auto family : {LikelihoodFamily::gaussian, LikelihoodFamily::categorical}) {
    const char* fam = family == LikelihoodFamily::gaussian ? "gaussian" : "categorical";
    for (std::size_t t = 0; t < trials; ++t) {
      const std::size_t N = 2 + rng.index(3);
      const Problem p = random_problem(family, N, 3, rng, t % 2 == 1);
      const auto& kind = kinds[t % 4];
      // Model gradients.
      for (std::size_t i = 0; i < N; ++i) {
        const auto& th = p.ens.particles[i];
        const Vector fd = finite_diff_grad(
            [&](std::span<const double> q) { return log_lik(p.ens.spec, q, p.data.x(0), p.data.y(0)); }, th, 1e-6);
        const double err = relative_error(grad_log_lik(p.ens.spec, th, p.data.x(0), p.data.y(0)), fd);
        rep.max_rel_error = std::max(rep.max_rel_error, err);
        rep.record(err < tol, std::string(fam) + " grad_log_lik rel err " + format_real(err));
      }
      const auto e = objective_gradient_errors(p, kind);
      for (auto [name, err] : {std::pair{"var(" + bandwidth_name(kind.tag) + ")", e.var}, std::pair{std::string("pac2e"), e.pac2e},
                               std::pair{std::string("dpp"), e.dpp}}) {
        rep.max_rel_error = std::max(rep.max_rel_error, err);
        rep.record(err < tol, std::string(fam) + " " + name + " rel err " + format_real(err) + " (trial " +
                                  std::to_string(t) + ")");
      }
      const auto d = derivation_errors(p);
      for (auto [name, err] : {std::pair{"w-sgld loss term", d.wsgld}, std::pair{"gfsf log-det term", d.gfsf}}) {
        rep.max_rel_error = std::max(rep.max_rel_error, err);
        rep.record(err < 1e-5, std::string(fam) + " " + name + " rel err " + format_real(err));
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Update-rule properties

inline const std::vector<RuleTag>& all_rules() {
  static const std::vector<RuleTag> r{RuleTag::map,     RuleTag::svgd,    RuleTag::wsgld,  RuleTag::gfsd,
                                      RuleTag::gfsf,    RuleTag::f_svgd,  RuleTag::f_wsgld, RuleTag::f_gfsd,
                                      RuleTag::f_gfsf,  RuleTag::dpp,     RuleTag::pac2e,  RuleTag::var,
                                      RuleTag::var_svgd};
  return r;
}

/// Direction of `tag` next to the MAP gradient it should reduce to (the
/// function-space MAP gradient for the f-rules).
inline std::pair<std::vector<ParamVector>, std::vector<ParamVector>> direction_and_map(RuleTag tag, const Problem& p,
                                                                                       const FunctionPriorApprox* fp) {
  UpdateRule rule;
  rule.tag = tag;
  const auto r = compute_directions(rule, p.ens, p.data, p.prior, 1.0, fp);
  return {r.directions, r.map};
}

inline SuiteReport verify_updates(Rng& rng, std::size_t trials) {
  SuiteReport rep;
  rep.suite = "updates";
  rep.trials = trials;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto family = t % 2 == 0 ? LikelihoodFamily::gaussian : LikelihoodFamily::categorical;
    // Single-particle collapse.
    Problem one = random_problem(family, 1, 3, rng);
    Rng fp_rng = rng.split(t);
    const auto fp = fit_function_prior(one.ens.spec, one.prior, one.data.inputs, fp_rng, 50);
    for (RuleTag tag : all_rules()) {
      const auto [dir, map] = direction_and_map(tag, one, &fp);
      const double err = relative_error(dir[0], map[0]);
      rep.max_rel_error = std::max(rep.max_rel_error, err);
      rep.record(err <= 1e-10, "N=1 collapse " + rule_name(tag) + " rel err " + format_real(err));
    }
    // Coincident particles: every direction equals the MAP gradient of the
    // shared point (no repulsion survives).
    Problem same = random_problem(family, 3, 3, rng);
    same.ens.particles[1] = same.ens.particles[0];
    same.ens.particles[2] = same.ens.particles[0];
    for (RuleTag tag : all_rules()) {
      if (tag == RuleTag::dpp) continue;  // the log-det of a singular Gram is not a repulsion-free limit
      const auto [dir, map] = direction_and_map(tag, same, &fp);
      double worst = 0.0;
      for (std::size_t i = 0; i < 3; ++i) worst = std::max(worst, relative_error(dir[i], map[i]));
      rep.record(worst <= 1e-9, "coincident particles " + rule_name(tag) + " rel err " + format_real(worst));
    }
    // Permutation equivariance.
    Problem p = random_problem(family, 4, 3, rng);
    Problem q = p;
    const std::size_t perm[] = {2, 0, 3, 1};
    for (std::size_t i = 0; i < 4; ++i) q.ens.particles[i] = p.ens.particles[perm[i]];
    for (RuleTag tag : all_rules()) {
      const auto a = direction_and_map(tag, p, &fp).first;
      const auto b = direction_and_map(tag, q, &fp).first;
      double worst = 0.0;
      for (std::size_t i = 0; i < 4; ++i) worst = std::max(worst, relative_error(b[i], a[perm[i]]));
      rep.record(worst <= 1e-9, "permutation " + rule_name(tag) + " rel err " + format_real(worst));
    }
  }
  return rep;
}

inline SuiteReport verify(const std::string& suite, Rng& rng, std::size_t trials) {
  if (trials == 0) throw std::invalid_argument("verify: trials must be at least 1");
  if (suite == "jensen") return verify_jensen(rng, trials);
  if (suite == "identities") return verify_identities(rng, trials);
  if (suite == "gradients") return verify_gradients(rng, trials);
  if (suite == "updates") return verify_updates(rng, trials);
  throw Error("unknown verify suite '" + suite + "'");
}

}  // namespace pvi::harness
