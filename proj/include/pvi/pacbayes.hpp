#pragma once

// Empirical right-hand sides of the PAC-Bayesian bounds for particle
// ensembles. The moment constants of the bounds cannot be estimated from data
// and enter as a single user-supplied constant.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "pvi/dataset.hpp"
#include "pvi/ensemble.hpp"
#include "pvi/jensen.hpp"
#include "pvi/models.hpp"

namespace pvi {

/// KL between the uniform particle measure and the prior, with the prior
/// density standing in for its mass at each atom. Exactly equal particles are
/// merged into one atom of weight m_a, so the value is
/// sum_a m_a (ln m_a - ln pi(theta_a)); for distinct particles this is
/// -(1/N) sum_i ln pi(theta_i) - ln N.
inline double kl_ensemble_prior(const ParticleEnsemble& ens, const Prior& prior) {
  std::map<ParamVector, std::size_t> atoms;
  for (const auto& p : ens.particles) ++atoms[p];
  const auto n = static_cast<double>(ens.size());
  double kl = 0.0;
  for (const auto& [theta, count] : atoms) {
    const double m = static_cast<double>(count) / n;
    kl += m * (std::log(m) - log_prior(prior, theta));
  }
  return kl;
}

enum class BoundVariant { theorem1, theorem4, ensemble_Rc, ensemble_Rw, ensemble_Rd, ensemble_Rg };

inline std::string variant_name(BoundVariant v) {
  switch (v) {
    case BoundVariant::theorem1: return "theorem1";
    case BoundVariant::theorem4: return "theorem4";
    case BoundVariant::ensemble_Rc: return "ensemble_Rc";
    case BoundVariant::ensemble_Rw: return "ensemble_Rw";
    case BoundVariant::ensemble_Rd: return "ensemble_Rd";
    case BoundVariant::ensemble_Rg: return "ensemble_Rg";
  }
  return "theorem1";
}

struct BoundConfig {
  double xi = 0.05;
  double c = 1.0;
  double psi_constant = 0.0;
  BandwidthTag bandwidth = BandwidthTag::h_m;  // theorem4 only

  void validate() const {
    if (!(xi > 0.0 && xi < 1.0)) throw std::invalid_argument("BoundConfig: xi must lie in (0,1)");
    if (!(c > 0.0)) throw std::invalid_argument("BoundConfig: c must be positive");
  }
};

struct BoundReport {
  BoundVariant variant = BoundVariant::theorem1;
  double empirical_term = 0.0;  // already includes the repulsion
  double repulsion_term = 0.0;  // mean per-datum repulsion, reported separately
  double kl_term = 0.0;
  double confidence_term = 0.0;
  double total = 0.0;
  bool psi_excluded = true;
  bool certified = true;
  std::string note;
};

namespace detail {

inline double confidence_divisor(BoundVariant v) {
  switch (v) {
    case BoundVariant::theorem1: return 1.0;
    case BoundVariant::theorem4: return 3.0;
    default: return 2.0;
  }
}

inline double column_repulsion(BoundVariant v, const BandwidthKind& kind, std::span<const double> L) {
  switch (v) {
    case BoundVariant::theorem1: return 0.0;
    case BoundVariant::theorem4: return repulsion_R(kind, L);
    case BoundVariant::ensemble_Rc: return repulsion_Rc(L);
    case BoundVariant::ensemble_Rw: return repulsion_Rw(L);
    case BoundVariant::ensemble_Rd: return repulsion_Rd(L).lower;
    case BoundVariant::ensemble_Rg: return repulsion_Rg(L).value;
  }
  return 0.0;
}

}  // namespace detail

/// Assembles a bound from a precomputed log-likelihood matrix.
inline BoundReport assemble_bound(BoundVariant variant, const Matrix& L, double kl, const BoundConfig& cfg) {
  cfg.validate();
  const std::size_t D = L.cols();
  if (D == 0) throw std::invalid_argument("assemble_bound: no data");
  const BandwidthKind kind{cfg.bandwidth, std::nullopt};
  BoundReport r;
  r.variant = variant;
  double nll = 0.0, rep = 0.0;
  for (std::size_t d = 0; d < D; ++d) {
    const Vector col = L.column(d);
    nll -= mean(col);
    rep += detail::column_repulsion(variant, kind, col);
  }
  const auto dD = static_cast<double>(D);
  r.repulsion_term = rep / dD;
  r.empirical_term = (nll - rep) / dD;
  r.kl_term = kl / (cfg.c * dD);
  r.confidence_term = (std::log(1.0 / cfg.xi) + cfg.psi_constant) / (detail::confidence_divisor(variant) * cfg.c * dD);
  r.total = r.empirical_term + r.kl_term + r.confidence_term;
  r.psi_excluded = cfg.psi_constant == 0.0;
  if (variant == BoundVariant::theorem4 && cfg.bandwidth != BandwidthTag::h_m) {
    r.certified = false;
    r.note = "oracle-bandwidth, not a certified bound";
  }
  return r;
}

inline BoundReport bound_theorem1(const ParticleEnsemble& ens, const Dataset& data, const Prior& prior,
                                  const BoundConfig& cfg) {
  return assemble_bound(BoundVariant::theorem1, loglik_matrix(ens, data), kl_ensemble_prior(ens, prior), cfg);
}

inline BoundReport bound_theorem4(const ParticleEnsemble& ens, const Dataset& data, const Prior& prior,
                                  const BoundConfig& cfg) {
  return assemble_bound(BoundVariant::theorem4, loglik_matrix(ens, data), kl_ensemble_prior(ens, prior), cfg);
}

inline BoundReport bound_ensemble(BoundVariant variant, const ParticleEnsemble& ens, const Dataset& data,
                                  const Prior& prior, const BoundConfig& cfg) {
  if (variant == BoundVariant::theorem1 || variant == BoundVariant::theorem4) {
    throw std::invalid_argument("bound_ensemble: expects one of the ensemble variants");
  }
  return assemble_bound(variant, loglik_matrix(ens, data), kl_ensemble_prior(ens, prior), cfg);
}

}  // namespace pvi
