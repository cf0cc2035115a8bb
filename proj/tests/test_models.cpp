#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "pvi/harness/data_io.hpp"
#include "pvi/models.hpp"

using namespace pvi;

namespace {

ModelSpec linear_scalar() {
  ModelSpec s;
  s.input_dim = 1;
  s.output_dim = 1;
  s.activation = Activation::identity;
  s.likelihood = Likelihood::gaussian(1.0);
  return s;
}

ModelSpec two_layer(Activation act, Likelihood lik, std::size_t out = 1) {
  ModelSpec s;
  s.input_dim = 3;
  s.hidden = {4, 5};
  s.output_dim = out;
  s.activation = act;
  s.likelihood = lik;
  return s;
}

ParamVector random_params(const ModelSpec& s, Rng& rng, double sd = 0.7) {
  ParamVector p(s.num_params());
  for (double& v : p) v = rng.normal(0.0, sd);
  return p;
}

double rel_err(std::span<const double> a, std::span<const double> b) {
  double num = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) num += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(num) / std::max(norm2(b), 1e-12);
}

}  // namespace

TEST(Forward, ZeroParamsGiveZeroOutput) {
  const auto s = two_layer(Activation::relu, Likelihood::gaussian(1.0));
  const ParamVector p(s.num_params(), 0.0);
  const Vector x{1.0, -2.0, 3.0};
  EXPECT_EQ(forward(s, p, x)[0], 0.0);
}

TEST(Forward, SingleLinearLayer) {
  const auto s = linear_scalar();
  const ParamVector p{2.0, 1.0};
  const Vector x{3.0};
  EXPECT_EQ(forward(s, p, x)[0], 7.0);
}

TEST(Forward, MatchesLayerByLayerOracle) {
  Rng rng(1);
  const auto s = two_layer(Activation::tanh, Likelihood::categorical(2), 2);
  const auto p = random_params(s, rng);
  const Vector x{0.3, -1.2, 0.8};
  // Independent evaluation with explicit Matrix products.
  const auto w = s.widths();
  std::size_t off = 0;
  Matrix a(w[0], 1, x);
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    Matrix W(w[l + 1], w[l], Vector(p.begin() + static_cast<std::ptrdiff_t>(off),
                                    p.begin() + static_cast<std::ptrdiff_t>(off + w[l + 1] * w[l])));
    off += w[l + 1] * w[l];
    Matrix z = matmul(W, a);
    for (std::size_t r = 0; r < w[l + 1]; ++r) {
      z(r, 0) += p[off + r];
      if (l + 2 < w.size()) z(r, 0) = std::tanh(z(r, 0));
    }
    off += w[l + 1];
    a = z;
  }
  const Vector f = forward(s, p, x);
  for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(f[c], a(c, 0), 1e-12);
}

TEST(Forward, WrongInputDimensionThrows) {
  const auto s = linear_scalar();
  const ParamVector p{1.0, 0.0};
  const Vector x{1.0, 2.0};
  EXPECT_THROW(forward(s, p, x), DimensionMismatch);
}

TEST(Forward, WrongParamCountThrows) {
  const auto s = linear_scalar();
  const ParamVector p{1.0};
  const Vector x{1.0};
  EXPECT_THROW(forward(s, p, x), DimensionMismatch);
}

TEST(LogLik, GaussianZeroResidual) {
  const auto s = linear_scalar();
  const ParamVector p{1.0, 0.0};
  const Vector x{2.0}, y{2.0};
  EXPECT_NEAR(log_lik(s, p, x, y), -0.5 * std::log(2.0 * std::numbers::pi), 1e-15);
  EXPECT_NEAR(log_lik(s, p, x, y), -0.91893853320467267, 1e-15);
}

TEST(LogLik, CategoricalSymmetricLogits) {
  ModelSpec s;
  s.input_dim = 1;
  s.output_dim = 2;
  s.activation = Activation::identity;
  s.likelihood = Likelihood::categorical(2);
  const ParamVector p(s.num_params(), 0.0);
  const Vector x{5.0}, y{0.0};
  EXPECT_NEAR(log_lik(s, p, x, y), -std::numbers::ln2, 1e-15);
}

TEST(LogLik, ToySigmaMatchesDensityFormula) {
  // sigma fixed at 0.2, residual 0.1; the constant is the 50-digit value of
  // ln N(0.1; 0, 0.04).
  auto s = linear_scalar();
  s.likelihood = Likelihood::gaussian(0.2);
  Rng rng(11);
  const Dataset d = harness::toy_regression(rng, 20);
  const double x = d.inputs(0, 0);
  const ParamVector p{0.0, d.targets(0, 0) - 0.1};
  const Vector xv{x}, yv{d.targets(0, 0)};
  EXPECT_NEAR(log_lik(s, p, xv, yv), 0.56549937922942763, 1e-12);
}

TEST(LogLik, CategoricalProbabilitiesSumToOne) {
  Rng rng(2);
  const auto s = two_layer(Activation::relu, Likelihood::categorical(4), 4);
  const auto p = random_params(s, rng);
  const Vector x{0.1, 0.2, -0.4};
  double total = 0.0;
  for (int k = 0; k < 4; ++k) {
    const Vector y{static_cast<double>(k)};
    total += std::exp(log_lik(s, p, x, y));
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(LogLik, ClassOutOfRangeThrows) {
  ModelSpec s;
  s.input_dim = 1;
  s.output_dim = 2;
  s.likelihood = Likelihood::categorical(2);
  const ParamVector p(s.num_params(), 0.0);
  const Vector x{0.0}, y{2.0};
  EXPECT_THROW(log_lik(s, p, x, y), DimensionMismatch);
}

TEST(LogLik, NonFiniteOutputThrows) {
  const auto s = linear_scalar();
  const ParamVector p{std::numeric_limits<double>::infinity(), 0.0};
  const Vector x{1.0}, y{0.0};
  EXPECT_THROW(log_lik(s, p, x, y), NonFiniteOutput);
}

TEST(GradLogLik, ZeroResidualGivesZeroOutputLayerGradient) {
  Rng rng(3);
  const auto s = two_layer(Activation::relu, Likelihood::gaussian(0.5));
  const auto p = random_params(s, rng);
  const Vector x{0.5, 0.1, -0.3};
  const Vector y{forward(s, p, x)[0]};
  const auto g = grad_log_lik(s, p, x, y);
  for (double v : g) EXPECT_NEAR(v, 0.0, 1e-14);
}

TEST(GradLogLik, HandDerivativeOfLinearModel) {
  const auto s = linear_scalar();
  const ParamVector p{0.0, 0.0};
  const Vector x{2.0}, y{1.0};
  EXPECT_DOUBLE_EQ(grad_log_lik(s, p, x, y)[0], 2.0);
}

TEST(GradLogLik, MatchesFiniteDifferences) {
  Rng rng(4);
  for (auto lik : {Likelihood::gaussian(0.3, true), Likelihood::gaussian(0.8, false), Likelihood::categorical(3)}) {
    const std::size_t out = lik.family == LikelihoodFamily::gaussian ? 1 : 3;
    const auto s = two_layer(Activation::tanh, lik, out);
    for (int t = 0; t < 100; ++t) {
      const auto p = random_params(s, rng);
      const Vector x{rng.normal(), rng.normal(), rng.normal()};
      const Vector y{out == 1 ? rng.normal() : static_cast<double>(rng.index(3))};
      const auto fd = finite_diff_grad([&](std::span<const double> q) { return log_lik(s, q, x, y); }, p, 1e-5);
      EXPECT_LT(rel_err(grad_log_lik(s, p, x, y), fd), 1e-4);
    }
  }
}

TEST(GradOutput, GaussianScoreIsResidual) {
  const auto s = linear_scalar();
  const ParamVector p{0.0, 0.0};
  const Vector x{1.0}, y{1.0};
  EXPECT_DOUBLE_EQ(grad_output(s, p, x, y).d_log_lik_d_output[0], 1.0);
}

TEST(GradOutput, ZeroCotangentGivesZero) {
  Rng rng(5);
  const auto s = two_layer(Activation::relu, Likelihood::gaussian(1.0));
  const auto p = random_params(s, rng);
  const Vector x{1.0, 2.0, 3.0}, y{0.0};
  const Vector v{0.0};
  for (double g : grad_output(s, p, x, y).jacobian_transpose_apply(v)) EXPECT_EQ(g, 0.0);
}

TEST(GradOutput, ContractionMatchesFiniteDifferences) {
  Rng rng(6);
  const auto s = two_layer(Activation::tanh, Likelihood::categorical(3), 3);
  for (int t = 0; t < 20; ++t) {
    const auto p = random_params(s, rng);
    const Vector x{rng.normal(), rng.normal(), rng.normal()}, y{1.0};
    const Vector v{rng.normal(), rng.normal(), rng.normal()};
    const auto fd = finite_diff_grad(
        [&](std::span<const double> q) {
          const Vector f = forward(s, q, x);
          return v[0] * f[0] + v[1] * f[1] + v[2] * f[2];
        },
        p, 1e-5);
    EXPECT_LT(rel_err(grad_output(s, p, x, y).jacobian_transpose_apply(v), fd), 1e-5);
  }
}

TEST(GradOutput, ChainConsistency) {
  Rng rng(7);
  const auto s = two_layer(Activation::relu, Likelihood::gaussian(0.4, true));
  for (int t = 0; t < 20; ++t) {
    const auto p = random_params(s, rng);
    const Vector x{rng.normal(), rng.normal(), rng.normal()}, y{rng.normal()};
    const auto og = grad_output(s, p, x, y);
    ParamVector chained = og.jacobian_transpose_apply(og.d_log_lik_d_output);
    axpy(1.0, og.direct, chained);
    const auto direct = grad_log_lik(s, p, x, y);
    for (std::size_t k = 0; k < direct.size(); ++k) EXPECT_NEAR(chained[k], direct[k], 1e-10);
  }
}

TEST(LogPrior, AtMeanIsNormalizer) {
  const Prior prior{0.5, 2.0};
  const ParamVector p(4, 0.5);
  EXPECT_NEAR(log_prior(prior, p), 4.0 * (-0.5 * std::log(2.0 * std::numbers::pi * 2.0)), 1e-14);
  for (double g : grad_log_prior(prior, p)) EXPECT_EQ(g, 0.0);
}

TEST(LogPrior, UnitPriorHandCase) {
  const Prior prior;
  const ParamVector p{1.0, 0.0};
  EXPECT_NEAR(log_prior(prior, p), -std::log(2.0 * std::numbers::pi) - 0.5, 1e-15);
  const auto g = grad_log_prior(prior, p);
  EXPECT_EQ(g[0], -1.0);
  EXPECT_EQ(g[1], 0.0);
}

TEST(LogPrior, MatchesDensityOracleAndFiniteDifferences) {
  Rng rng(8);
  const Prior prior{0.0, 2.0};
  for (int t = 0; t < 100; ++t) {
    ParamVector p(6);
    for (double& v : p) v = rng.normal(0.0, 2.0);
    double oracle = 0.0;
    for (double v : p) oracle += std::log(std::exp(-v * v / 4.0) / std::sqrt(4.0 * std::numbers::pi));
    EXPECT_NEAR(log_prior(prior, p), oracle, 1e-12);
    const auto fd = finite_diff_grad([&](std::span<const double> q) { return log_prior(prior, q); }, p, 1e-5);
    EXPECT_LT(rel_err(grad_log_prior(prior, p), fd), 1e-4);
  }
}

TEST(FunctionPrior, ZeroOutputArchitecture) {
  // A rectifier layer whose pre-activations are all negative outputs zero
  // for every draw, so the samples are identically zero.
  const Matrix samples(5, 2, 0.0);
  const auto fp = fit_function_prior_from_samples(samples);
  for (double m : fp.mean) EXPECT_EQ(m, 0.0);
  EXPECT_EQ(fp.covariance(0, 1), 0.0);
  EXPECT_EQ(fp.covariance(0, 0), fp.jitter);
  EXPECT_GT(fp.jitter, 0.0);
}

TEST(FunctionPrior, LinearModelCovarianceOfWx) {
  // f = w x with w ~ N(0,1): covariance on xs = (1,2) is [[1,2],[2,4]].
  Rng rng(10);
  const std::size_t S = 10000;
  Matrix samples(S, 2);
  for (std::size_t s = 0; s < S; ++s) {
    const double w = rng.normal();
    samples(s, 0) = w * 1.0;
    samples(s, 1) = w * 2.0;
  }
  const auto fp = fit_function_prior_from_samples(samples);
  const double expect[2][2] = {{1.0, 2.0}, {2.0, 4.0}};
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) EXPECT_NEAR(fp.covariance(i, j), expect[i][j], 0.1 * expect[i][j]);
  }
}

TEST(FunctionPrior, AffineModelCovariance) {
  // The network layer carries a bias: f = w x + b with w, b ~ N(0,1) gives
  // [[2,3],[3,5]] on xs = (1,2).
  const auto s = linear_scalar();
  Rng rng(12);
  const Matrix xs(2, 1, Vector{1.0, 2.0});
  const auto fp = fit_function_prior(s, Prior{}, xs, rng, 10000);
  const double expect[2][2] = {{2.0, 3.0}, {3.0, 5.0}};
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(fp.covariance(i, j), expect[i][j], 0.1 * expect[i][j]);
  }
}

TEST(FunctionPrior, EqualDrawsGiveJitterOnly) {
  const Matrix samples(2, 3, 1.5);
  const auto fp = fit_function_prior_from_samples(samples);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(fp.covariance(i, i), fp.jitter);
    EXPECT_EQ(fp.mean[i], 1.5);
  }
}

TEST(FunctionPrior, NeedsTwoSamples) {
  const auto s = linear_scalar();
  Rng rng(1);
  EXPECT_THROW(fit_function_prior(s, Prior{}, Matrix(1, 1), rng, 1), std::invalid_argument);
}

TEST(ModelSpec, GaussianNeedsScalarOutput) {
  ModelSpec s;
  s.output_dim = 2;
  s.likelihood = Likelihood::gaussian(1.0);
  EXPECT_THROW(s.validate(), DimensionMismatch);
}

TEST(InitParams, LearnableSigmaAppendedAtInitialValue) {
  auto s = linear_scalar();
  s.likelihood = Likelihood::gaussian(0.2, true);
  Rng rng(1);
  const auto p = init_params(s, rng);
  ASSERT_EQ(p.size(), 3u);
  EXPECT_DOUBLE_EQ(std::exp(p.back()), 0.2);
}
