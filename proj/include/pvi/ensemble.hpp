#pragma once

// The empirical particle distribution, its model-averaged predictive, and
// log-likelihood bookkeeping.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pvi/dataset.hpp"
#include "pvi/errors.hpp"
#include "pvi/models.hpp"
#include "pvi/numerics.hpp"

namespace pvi {

struct ParticleEnsemble {
  ModelSpec spec;
  std::vector<ParamVector> particles;

  std::size_t size() const noexcept { return particles.size(); }

  void validate() const {
    spec.validate();
    if (particles.empty()) throw std::invalid_argument("ParticleEnsemble: need at least one particle");
    for (const auto& p : particles) {
      if (p.size() != spec.num_params()) throw DimensionMismatch("ParticleEnsemble: particle size mismatch");
    }
  }

  static ParticleEnsemble initialize(const ModelSpec& spec, std::size_t n, Rng& rng) {
    ParticleEnsemble e{spec, {}};
    for (std::size_t i = 0; i < n; ++i) e.particles.push_back(init_params(spec, rng));
    e.validate();
    return e;
  }
};

/// N x D matrix with entry (i, d) = ln p(y_d | x_d, theta_i).
inline Matrix loglik_matrix(const ParticleEnsemble& ens, const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("loglik_matrix: empty dataset");
  Matrix L(ens.size(), data.size());
  for (std::size_t i = 0; i < ens.size(); ++i) {
    for (std::size_t d = 0; d < data.size(); ++d) L(i, d) = log_lik(ens.spec, ens.particles[i], data.x(d), data.y(d));
  }
  return L;
}

/// ln((1/N) sum_i exp(L_i)).
inline double bma_log_predictive(std::span<const double> column) {
  if (column.empty()) throw std::invalid_argument("bma_log_predictive: empty column");
  return logsumexp(column) - std::log(static_cast<double>(column.size()));
}

struct Metrics {
  double test_nll = 0.0;
  double rmse = std::numeric_limits<double>::quiet_NaN();
  double accuracy = std::numeric_limits<double>::quiet_NaN();
};

/// Test NLL of the model average, plus RMSE (regression) or accuracy
/// (classification). Regression values are reported on the original target
/// scale using the dataset's stored normalization.
inline Metrics metrics(const ParticleEnsemble& ens, const Dataset& data) {
  const Matrix L = loglik_matrix(ens, data);
  Metrics m;
  double nll = 0.0;
  for (std::size_t d = 0; d < data.size(); ++d) nll -= bma_log_predictive(L.column(d));
  m.test_nll = nll / static_cast<double>(data.size());
  const auto n = static_cast<double>(ens.size());
  if (ens.spec.likelihood.family == LikelihoodFamily::gaussian) {
    double se = 0.0;
    for (std::size_t d = 0; d < data.size(); ++d) {
      double mean = 0.0;
      for (const auto& p : ens.particles) mean += forward(ens.spec, p, data.x(d))[0];
      mean /= n;
      const double r = (data.y(d)[0] - mean) * data.target_scale;
      se += r * r;
    }
    m.rmse = std::sqrt(se / static_cast<double>(data.size()));
    m.test_nll += std::log(data.target_scale);
  } else {
    std::size_t correct = 0;
    for (std::size_t d = 0; d < data.size(); ++d) {
      Vector avg(ens.spec.output_dim, 0.0);
      for (const auto& p : ens.particles) {
        const Vector f = forward(ens.spec, p, data.x(d));
        const double lse = logsumexp(f);
        for (std::size_t c = 0; c < f.size(); ++c) avg[c] += std::exp(f[c] - lse) / n;
      }
      const auto pred = static_cast<std::size_t>(std::max_element(avg.begin(), avg.end()) - avg.begin());
      if (static_cast<double>(pred) == data.y(d)[0]) ++correct;
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  }
  return m;
}

inline double regression_rmse(const ParticleEnsemble& ens, const Dataset& data) {
  if (ens.spec.likelihood.family != LikelihoodFamily::gaussian) {
    throw WrongLikelihoodFamily("rmse applies to gaussian regression only");
  }
  return metrics(ens, data).rmse;
}

inline double classification_accuracy(const ParticleEnsemble& ens, const Dataset& data) {
  if (ens.spec.likelihood.family != LikelihoodFamily::categorical) {
    throw WrongLikelihoodFamily("accuracy applies to categorical models only");
  }
  return metrics(ens, data).accuracy;
}

// Checkpoint format (text, one token group per line):
//   pvi-ensemble/1
//   input_dim <n>
//   hidden <k> <w1> ... <wk>
//   output_dim <n>
//   activation relu|tanh|identity
//   likelihood gaussian <sigma> <learnable 0|1> | categorical <classes>
//   particles <N> <P>
//   <P values, %.17g>            (N lines)

inline std::string activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "relu";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw Error("unknown activation '" + s + "'");
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void save_checkpoint(const ParticleEnsemble& ens, std::ostream& os) {
  os << "pvi-ensemble/1\n";
  os << "input_dim " << ens.spec.input_dim << "\n";
  os << "hidden " << ens.spec.hidden.size();
  for (auto h : ens.spec.hidden) os << ' ' << h;
  os << "\noutput_dim " << ens.spec.output_dim << "\n";
  os << "activation " << activation_name(ens.spec.activation) << "\n";
  if (ens.spec.likelihood.family == LikelihoodFamily::gaussian) {
    os << "likelihood gaussian " << format_real(ens.spec.likelihood.sigma) << ' '
       << (ens.spec.likelihood.learnable_sigma ? 1 : 0) << "\n";
  } else {
    os << "likelihood categorical " << ens.spec.likelihood.num_classes << "\n";
  }
  os << "particles " << ens.size() << ' ' << ens.spec.num_params() << "\n";
  for (const auto& p : ens.particles) {
    for (std::size_t k = 0; k < p.size(); ++k) os << (k ? " " : "") << format_real(p[k]);
    os << "\n";
  }
}

inline ParticleEnsemble load_checkpoint(std::istream& is) {
  auto expect = [&](const std::string& key) {
    std::string tok;
    if (!(is >> tok) || tok != key) throw Error("checkpoint: expected '" + key + "'");
  };
  std::string magic;
  is >> magic;
  if (magic != "pvi-ensemble/1") throw Error("checkpoint: unsupported format '" + magic + "'");
  ParticleEnsemble ens;
  expect("input_dim");
  is >> ens.spec.input_dim;
  expect("hidden");
  std::size_t k = 0;
  is >> k;
  ens.spec.hidden.resize(k);
  for (auto& h : ens.spec.hidden) is >> h;
  expect("output_dim");
  is >> ens.spec.output_dim;
  expect("activation");
  std::string act;
  is >> act;
  ens.spec.activation = parse_activation(act);
  expect("likelihood");
  std::string fam;
  is >> fam;
  if (fam == "gaussian") {
    int learn = 0;
    is >> ens.spec.likelihood.sigma >> learn;
    ens.spec.likelihood.family = LikelihoodFamily::gaussian;
    ens.spec.likelihood.learnable_sigma = learn != 0;
  } else if (fam == "categorical") {
    ens.spec.likelihood.family = LikelihoodFamily::categorical;
    is >> ens.spec.likelihood.num_classes;
  } else {
    throw Error("checkpoint: unknown likelihood '" + fam + "'");
  }
  expect("particles");
  std::size_t n = 0, p = 0;
  is >> n >> p;
  if (!is) throw Error("checkpoint: truncated header");
  ens.particles.assign(n, ParamVector(p));
  for (auto& part : ens.particles) {
    for (auto& v : part) {
      if (!(is >> v)) throw Error("checkpoint: truncated particle data");
    }
  }
  ens.validate();
  return ens;
}

}  // namespace pvi
