#pragma once

// Feed-forward networks p(y | f(x; theta)) with gaussian or categorical
// likelihoods, isotropic gaussian priors and hand-written reverse-mode
// gradients.

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "pvi/errors.hpp"
#include "pvi/numerics.hpp"

namespace pvi {

enum class Activation { relu, tanh, identity };

enum class LikelihoodFamily { gaussian, categorical };

struct Likelihood {
  LikelihoodFamily family = LikelihoodFamily::gaussian;
  double sigma = 1.0;          // gaussian: fixed noise scale, or initial value when learnable
  bool learnable_sigma = false;
  std::size_t num_classes = 0;  // categorical only

  static Likelihood gaussian(double sigma, bool learnable = false) {
    return {LikelihoodFamily::gaussian, sigma, learnable, 0};
  }
  static Likelihood categorical(std::size_t classes) { return {LikelihoodFamily::categorical, 1.0, false, classes}; }
};

/// Architecture plus likelihood. `hidden` lists the hidden-layer widths; the
/// output layer is linear.
struct ModelSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden;
  std::size_t output_dim = 1;
  Activation activation = Activation::relu;
  Likelihood likelihood;

  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w{input_dim};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(output_dim);
    return w;
  }

  std::size_t num_layers() const { return hidden.size() + 1; }

  std::size_t network_param_count() const {
    const auto w = widths();
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) n += w[l + 1] * w[l] + w[l + 1];
    return n;
  }

  bool has_log_sigma() const {
    return likelihood.family == LikelihoodFamily::gaussian && likelihood.learnable_sigma;
  }

  std::size_t num_params() const { return network_param_count() + (has_log_sigma() ? 1 : 0); }

  /// Number of target entries a datum carries (1 for both families; the
  /// categorical target is a class index stored as a real).
  std::size_t target_dim() const { return 1; }

  void validate() const {
    if (input_dim == 0 || output_dim == 0) throw DimensionMismatch("ModelSpec: zero input or output width");
    for (auto h : hidden) {
      if (h == 0) throw DimensionMismatch("ModelSpec: zero hidden width");
    }
    if (likelihood.family == LikelihoodFamily::gaussian) {
      if (output_dim != 1) throw DimensionMismatch("ModelSpec: gaussian regression needs output_dim = 1");
      if (!(likelihood.sigma > 0.0)) throw std::invalid_argument("ModelSpec: sigma must be positive");
    } else {
      if (likelihood.num_classes < 2 || output_dim != likelihood.num_classes) {
        throw DimensionMismatch("ModelSpec: categorical needs output_dim = num_classes >= 2");
      }
    }
  }
};

using ParamVector = Vector;

struct Prior {
  double mean = 0.0;
  double variance = 1.0;
};

/// Per-call activations kept for the backward pass.
struct Tape {
  std::vector<Vector> activations;  // activations[0] = x, last = output
  std::vector<Vector> preacts;      // one per layer
};

namespace detail {

inline double activate(Activation a, double z) {
  switch (a) {
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::tanh: return std::tanh(z);
    case Activation::identity: return z;
  }
  return z;
}

inline double activate_deriv(Activation a, double z, double out) {
  switch (a) {
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: return 1.0 - out * out;
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

inline void check_params(const ModelSpec& spec, std::span<const double> params) {
  if (params.size() != spec.num_params()) {
    throw DimensionMismatch("parameter vector has " + std::to_string(params.size()) + " entries, spec needs " +
                            std::to_string(spec.num_params()));
  }
}

}  // namespace detail

inline Tape forward_tape(const ModelSpec& spec, std::span<const double> params, std::span<const double> x) {
  detail::check_params(spec, params);
  if (x.size() != spec.input_dim) throw DimensionMismatch("input has wrong dimension");
  const auto w = spec.widths();
  Tape tape;
  tape.activations.emplace_back(x.begin(), x.end());
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    const std::size_t nin = w[l], nout = w[l + 1];
    const double* W = params.data() + off;
    const double* b = W + nout * nin;
    off += nout * nin + nout;
    const Vector& a = tape.activations.back();
    Vector z(nout);
    for (std::size_t r = 0; r < nout; ++r) {
      double s = b[r];
      const double* wr = W + r * nin;
      for (std::size_t c = 0; c < nin; ++c) s += wr[c] * a[c];
      z[r] = s;
    }
    const bool last = (l + 2 == w.size());
    Vector out(nout);
    for (std::size_t r = 0; r < nout; ++r) out[r] = last ? z[r] : detail::activate(spec.activation, z[r]);
    tape.preacts.push_back(std::move(z));
    tape.activations.push_back(std::move(out));
  }
  return tape;
}

inline Vector forward(const ModelSpec& spec, std::span<const double> params, std::span<const double> x) {
  return forward_tape(spec, params, x).activations.back();
}

/// Adds scale * J^T v to grad, where J = d f(x; theta) / d theta.
inline void backprop(const ModelSpec& spec, std::span<const double> params, const Tape& tape,
                     std::span<const double> cotangent, std::span<double> grad, double scale = 1.0) {
  const auto w = spec.widths();
  if (cotangent.size() != spec.output_dim) throw DimensionMismatch("cotangent has wrong dimension");
  Vector delta(cotangent.begin(), cotangent.end());
  for (double& d : delta) d *= scale;
  std::vector<std::size_t> offsets(w.size() - 1);
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    offsets[l] = off;
    off += w[l + 1] * w[l] + w[l + 1];
  }
  for (std::size_t l = w.size() - 1; l-- > 0;) {
    const std::size_t nin = w[l], nout = w[l + 1];
    const double* W = params.data() + offsets[l];
    double* gW = grad.data() + offsets[l];
    double* gb = gW + nout * nin;
    const Vector& a = tape.activations[l];
    for (std::size_t r = 0; r < nout; ++r) {
      const double dr = delta[r];
      if (dr == 0.0) continue;
      gb[r] += dr;
      double* gwr = gW + r * nin;
      for (std::size_t c = 0; c < nin; ++c) gwr[c] += dr * a[c];
    }
    if (l == 0) break;
    Vector prev(nin, 0.0);
    for (std::size_t r = 0; r < nout; ++r) {
      const double dr = delta[r];
      if (dr == 0.0) continue;
      const double* wr = W + r * nin;
      for (std::size_t c = 0; c < nin; ++c) prev[c] += wr[c] * dr;
    }
    const Vector& z = tape.preacts[l - 1];
    for (std::size_t c = 0; c < nin; ++c) prev[c] *= detail::activate_deriv(spec.activation, z[c], a[c]);
    delta = std::move(prev);
  }
}

/// Log-likelihood of one target given the network output, with its
/// derivative with respect to the output and (when sigma is learnable) with
/// respect to log sigma.
struct OutputLogLik {
  double value = 0.0;
  Vector d_output;
  double d_log_sigma = 0.0;
};

inline double noise_sigma(const ModelSpec& spec, std::span<const double> params) {
  return spec.has_log_sigma() ? std::exp(params.back()) : spec.likelihood.sigma;
}

inline OutputLogLik output_log_lik(const ModelSpec& spec, std::span<const double> f, std::span<const double> y,
                                   double sigma) {
  if (y.size() != spec.target_dim()) throw DimensionMismatch("target has wrong dimension");
  for (double v : f) {
    if (!std::isfinite(v)) throw NonFiniteOutput("network output is not finite");
  }
  OutputLogLik out;
  out.d_output.assign(f.size(), 0.0);
  if (spec.likelihood.family == LikelihoodFamily::gaussian) {
    const double r = y[0] - f[0];
    const double s2 = sigma * sigma;
    out.value = -0.5 * std::log(2.0 * std::numbers::pi * s2) - r * r / (2.0 * s2);
    out.d_output[0] = r / s2;
    out.d_log_sigma = -1.0 + r * r / s2;
  } else {
    const double cls = y[0];
    if (!(cls >= 0.0) || cls != std::floor(cls) || cls >= static_cast<double>(f.size())) {
      throw DimensionMismatch("class index out of range");
    }
    const auto k = static_cast<std::size_t>(cls);
    const double lse = logsumexp(f);
    out.value = f[k] - lse;
    for (std::size_t c = 0; c < f.size(); ++c) out.d_output[c] = -std::exp(f[c] - lse);
    out.d_output[k] += 1.0;
  }
  if (!std::isfinite(out.value)) throw NonFiniteOutput("log-likelihood is not finite");
  return out;
}

inline double log_lik(const ModelSpec& spec, std::span<const double> params, std::span<const double> x,
                      std::span<const double> y) {
  const Vector f = forward(spec, params, x);
  return output_log_lik(spec, f, y, noise_sigma(spec, params)).value;
}

/// Adds scale * d log p(y | x, theta) / d theta into grad and returns the log-likelihood.
inline double accumulate_grad_log_lik(const ModelSpec& spec, std::span<const double> params,
                                      std::span<const double> x, std::span<const double> y, std::span<double> grad,
                                      double scale = 1.0) {
  const Tape tape = forward_tape(spec, params, x);
  const auto ol = output_log_lik(spec, tape.activations.back(), y, noise_sigma(spec, params));
  if (scale != 0.0) {
    backprop(spec, params, tape, ol.d_output, grad, scale);
    if (spec.has_log_sigma()) grad.back() += scale * ol.d_log_sigma;
  }
  return ol.value;
}

inline ParamVector grad_log_lik(const ModelSpec& spec, std::span<const double> params, std::span<const double> x,
                                std::span<const double> y) {
  ParamVector g(spec.num_params(), 0.0);
  accumulate_grad_log_lik(spec, params, x, y, g);
  return g;
}

/// The pieces f-PVI needs: the output, d log p / d f, and a map applying the
/// transposed output Jacobian to any output-space cotangent. `direct` holds
/// the part of the gradient that does not flow through f (log sigma).
struct OutputGrad {
  Vector output;
  Vector d_log_lik_d_output;
  ParamVector direct;
  std::function<ParamVector(std::span<const double>)> jacobian_transpose_apply;
};

inline OutputGrad grad_output(const ModelSpec& spec, std::span<const double> params, std::span<const double> x,
                              std::span<const double> y) {
  auto tape = std::make_shared<Tape>(forward_tape(spec, params, x));
  const auto ol = output_log_lik(spec, tape->activations.back(), y, noise_sigma(spec, params));
  OutputGrad g;
  g.output = tape->activations.back();
  g.d_log_lik_d_output = ol.d_output;
  g.direct.assign(spec.num_params(), 0.0);
  if (spec.has_log_sigma()) g.direct.back() = ol.d_log_sigma;
  ParamVector theta(params.begin(), params.end());
  g.jacobian_transpose_apply = [spec, theta = std::move(theta), tape](std::span<const double> v) {
    ParamVector out(spec.num_params(), 0.0);
    backprop(spec, theta, *tape, v, out);
    return out;
  };
  return g;
}

inline double log_prior(const Prior& prior, std::span<const double> params) {
  const double c = -0.5 * std::log(2.0 * std::numbers::pi * prior.variance);
  double s = 0.0;
  for (double t : params) {
    const double d = t - prior.mean;
    s += c - d * d / (2.0 * prior.variance);
  }
  return s;
}

inline void accumulate_grad_log_prior(const Prior& prior, std::span<const double> params, std::span<double> grad,
                                      double scale = 1.0) {
  for (std::size_t i = 0; i < params.size(); ++i) grad[i] -= scale * (params[i] - prior.mean) / prior.variance;
}

inline ParamVector grad_log_prior(const Prior& prior, std::span<const double> params) {
  ParamVector g(params.size(), 0.0);
  accumulate_grad_log_prior(prior, params, g);
  return g;
}

/// Weights ~ N(0, 2/fan_in), biases 0, log sigma at the spec's initial value.
inline ParamVector init_params(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  const auto w = spec.widths();
  ParamVector p;
  p.reserve(spec.num_params());
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    const double sd = std::sqrt(2.0 / static_cast<double>(w[l]));
    for (std::size_t k = 0; k < w[l + 1] * w[l]; ++k) p.push_back(rng.normal(0.0, sd));
    for (std::size_t k = 0; k < w[l + 1]; ++k) p.push_back(0.0);
  }
  if (spec.has_log_sigma()) p.push_back(std::log(spec.likelihood.sigma));
  return p;
}

inline ParamVector sample_prior(const ModelSpec& spec, const Prior& prior, Rng& rng) {
  ParamVector p(spec.num_params());
  const double sd = std::sqrt(prior.variance);
  for (double& v : p) v = rng.normal(prior.mean, sd);
  return p;
}

/// Gaussian stand-in for the implicit function-space prior over the outputs
/// of a minibatch (outputs concatenated datum-major).
struct FunctionPriorApprox {
  Vector mean;
  Matrix covariance;
  Matrix precision;
  std::size_t num_prior_samples = 0;
  double jitter = 0.0;

  /// d/df log N(f; mean, covariance) = -covariance^{-1} (f - mean).
  Vector score(std::span<const double> f) const {
    const std::size_t n = mean.size();
    if (f.size() != n) throw DimensionMismatch("function prior score: wrong dimension");
    Vector out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += precision(i, j) * (f[j] - mean[j]);
      out[i] = -s;
    }
    return out;
  }
};

/// Builds the approximation from function samples (one row per prior draw).
/// The jitter is 1e-6 times the mean diagonal, floored at 1e-6 so an all-zero
/// covariance stays invertible.
inline FunctionPriorApprox fit_function_prior_from_samples(const Matrix& samples) {
  const std::size_t s = samples.rows(), n = samples.cols();
  if (s < 2) throw std::invalid_argument("fit_function_prior: need at least two samples");
  FunctionPriorApprox fp;
  fp.num_prior_samples = s;
  fp.mean.assign(n, 0.0);
  for (std::size_t r = 0; r < s; ++r) {
    for (std::size_t c = 0; c < n; ++c) fp.mean[c] += samples(r, c);
  }
  for (double& m : fp.mean) m /= static_cast<double>(s);
  fp.covariance = Matrix(n, n);
  for (std::size_t r = 0; r < s; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      const double di = samples(r, i) - fp.mean[i];
      for (std::size_t j = i; j < n; ++j) fp.covariance(i, j) += di * (samples(r, j) - fp.mean[j]);
    }
  }
  double diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      fp.covariance(i, j) /= static_cast<double>(s - 1);
      fp.covariance(j, i) = fp.covariance(i, j);
    }
    diag += fp.covariance(i, i);
  }
  diag /= static_cast<double>(n);
  fp.jitter = diag > 0.0 ? 1e-6 * diag : 1e-6;
  for (std::size_t i = 0; i < n; ++i) fp.covariance(i, i) += fp.jitter;
  fp.precision = spd_inverse(fp.covariance, 0.0);
  return fp;
}

/// Draws num_samples parameter vectors from the prior and fits a gaussian to
/// the resulting outputs on xs (one input per row).
inline FunctionPriorApprox fit_function_prior(const ModelSpec& spec, const Prior& prior, const Matrix& xs, Rng& rng,
                                              std::size_t num_samples) {
  if (num_samples < 2) throw std::invalid_argument("fit_function_prior: need at least two samples");
  const std::size_t n = xs.rows() * spec.output_dim;
  Matrix samples(num_samples, n);
  for (std::size_t s = 0; s < num_samples; ++s) {
    const ParamVector theta = sample_prior(spec, prior, rng);
    for (std::size_t b = 0; b < xs.rows(); ++b) {
      const Vector f = forward(spec, theta, xs.row(b));
      for (std::size_t c = 0; c < spec.output_dim; ++c) samples(s, b * spec.output_dim + c) = f[c];
    }
  }
  return fit_function_prior_from_samples(samples);
}

}  // namespace pvi
