#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "pvi/harness/data_io.hpp"
#include "pvi/harness/verify.hpp"
#include "pvi/updates.hpp"

using namespace pvi;
using harness::Problem;
using harness::random_problem;
using harness::relative_error;

namespace {

/// f = w . x + b with a gaussian likelihood.
Problem linear_problem(std::size_t N, std::size_t D, Rng& rng, double sigma = 0.8) {
  Problem p;
  p.ens.spec.input_dim = 2;
  p.ens.spec.activation = Activation::identity;
  p.ens.spec.likelihood = Likelihood::gaussian(sigma);
  for (std::size_t i = 0; i < N; ++i) {
    ParamVector th(3);
    for (double& v : th) v = rng.normal();
    p.ens.particles.push_back(th);
  }
  Matrix x(D, 2), y(D, 1);
  for (double& v : x.data()) v = rng.normal();
  for (std::size_t d = 0; d < D; ++d) y(d, 0) = 0.7 * x(d, 0) - 1.1 * x(d, 1) + 0.3 + 0.2 * rng.normal();
  p.data = Dataset(std::move(x), std::move(y));
  p.prior = Prior{0.0, 1.0};
  return p;
}

/// Per-particle grad of the log joint, assembled from the model primitives.
std::vector<ParamVector> log_joint_grads(const Problem& p) {
  std::vector<ParamVector> g;
  for (const auto& th : p.ens.particles) {
    ParamVector gi = grad_log_prior(p.prior, th);
    for (std::size_t d = 0; d < p.data.size(); ++d) axpy(1.0, grad_log_lik(p.ens.spec, th, p.data.x(d), p.data.y(d)), gi);
    g.push_back(gi);
  }
  return g;
}

struct Kern {
  Matrix K;
  double h2;
};

Kern median_kernel(const std::vector<ParamVector>& pts) {
  const std::size_t n = pts.size();
  Vector d2;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) d2.push_back(squared_distance(pts[i], pts[j]));
  }
  std::sort(d2.begin(), d2.end());
  const double med = d2.size() % 2 ? d2[d2.size() / 2] : 0.5 * (d2[d2.size() / 2 - 1] + d2[d2.size() / 2]);
  Kern k{Matrix(n, n), med / std::log(static_cast<double>(n))};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) k.K(i, j) = std::exp(-squared_distance(pts[i], pts[j]) / (2.0 * k.h2));
  }
  return k;
}

Matrix inverse3(const Matrix& a) {
  const double det = a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) -
                     a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
                     a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
  Matrix inv(3, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      const std::size_t r0 = (j + 1) % 3, r1 = (j + 2) % 3, c0 = (i + 1) % 3, c1 = (i + 2) % 3;
      inv(i, j) = (a(r0, c0) * a(r1, c1) - a(r0, c1) * a(r1, c0)) / det;
    }
  }
  return inv;
}

double max_rel_error(const std::vector<ParamVector>& a, const std::vector<ParamVector>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], b[i]));
  return worst;
}

}  // namespace

TEST(MedianTrick, EqualDistances) {
  Matrix d(3, 3, 2.5);
  for (std::size_t i = 0; i < 3; ++i) d(i, i) = 0.0;
  EXPECT_NEAR(median_trick_bandwidth(d), 2.5 / std::log(3.0), 1e-15);
}

TEST(MedianTrick, TwoParticles) {
  const Matrix d = pairwise_sq_dists({Vector{0.0, 0.0}, Vector{2.0, 0.0}});
  EXPECT_NEAR(median_trick_bandwidth(d), 5.7707801635558536, 1e-14);
}

TEST(MedianTrick, PermutationInvariant) {
  Rng rng(41);
  std::vector<Vector> pts(5, Vector(3));
  for (auto& p : pts) {
    for (double& v : p) v = rng.normal();
  }
  const double a = median_trick_bandwidth(pairwise_sq_dists(pts));
  std::swap(pts[0], pts[3]);
  std::swap(pts[1], pts[4]);
  EXPECT_EQ(median_trick_bandwidth(pairwise_sq_dists(pts)), a);
}

TEST(MedianTrick, NeedsTwoParticles) { EXPECT_THROW(median_trick_bandwidth(Matrix(1, 1)), std::invalid_argument); }

TEST(KernelRules, SvgdMatchesAssemblyOracle) {
  Rng rng(42);
  const auto p = linear_problem(3, 5, rng);
  const auto g = log_joint_grads(p);
  const auto k = median_kernel(p.ens.particles);
  std::vector<ParamVector> oracle(3, ParamVector(3, 0.0));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t c = 0; c < 3; ++c) {
        oracle[i][c] += (k.K(i, j) * g[j][c] + (p.ens.particles[i][c] - p.ens.particles[j][c]) * k.K(i, j) / k.h2) / 3.0;
      }
    }
  }
  EXPECT_LT(max_rel_error(svgd_direction(p.ens, p.data, p.prior, KernelPolicy{}), oracle), 1e-10);
}

TEST(KernelRules, WsgldMatchesAssemblyOracle) {
  Rng rng(43);
  const auto p = linear_problem(3, 5, rng);
  const auto g = log_joint_grads(p);
  const auto k = median_kernel(p.ens.particles);
  Vector S(3, 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) S[i] += k.K(i, j);
  }
  auto oracle = g;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      const double w = (1.0 / S[i] + 1.0 / S[j]) * k.K(i, j) / k.h2;
      for (std::size_t c = 0; c < 3; ++c) oracle[i][c] += w * (p.ens.particles[i][c] - p.ens.particles[j][c]);
    }
  }
  EXPECT_LT(max_rel_error(wsgld_direction(p.ens, p.data, p.prior, KernelPolicy{}), oracle), 1e-10);
}

TEST(KernelRules, GfsdIsSvgdPlusWsgldMinusDrift) {
  Rng rng(44);
  const auto p = linear_problem(4, 6, rng);
  const auto a = svgd_direction(p.ens, p.data, p.prior, KernelPolicy{});
  const auto b = wsgld_direction(p.ens, p.data, p.prior, KernelPolicy{});
  const auto m = map_direction(p.ens, p.data, p.prior);
  const auto g = gfsd_direction(p.ens, p.data, p.prior, KernelPolicy{});
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(g[i][c], a[i][c] + b[i][c] - m[i][c], 1e-12);
  }
}

TEST(KernelRules, GfsfMatchesExplicitInverse) {
  Rng rng(45);
  const auto p = linear_problem(3, 5, rng);
  const auto g = log_joint_grads(p);
  const auto k = median_kernel(p.ens.particles);
  Matrix A = k.K;
  for (std::size_t i = 0; i < 3; ++i) A(i, i) += 1e-2;
  const Matrix inv = inverse3(A);
  auto oracle = g;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      const double w = inv(i, j) * k.K(i, j) / (k.h2 * 3.0);
      for (std::size_t c = 0; c < 3; ++c) oracle[i][c] += w * (p.ens.particles[i][c] - p.ens.particles[j][c]);
    }
  }
  EXPECT_LT(max_rel_error(gfsf_direction(p.ens, p.data, p.prior, KernelPolicy{}, 1e-2), oracle), 1e-8);
}

TEST(KernelRules, IdenticalParticlesShareTheMapGradient) {
  Rng rng(46);
  auto p = linear_problem(2, 4, rng);
  p.ens.particles[1] = p.ens.particles[0];
  const auto m = map_direction(p.ens, p.data, p.prior);
  for (auto dir : {svgd_direction(p.ens, p.data, p.prior, KernelPolicy{}),
                   wsgld_direction(p.ens, p.data, p.prior, KernelPolicy{}),
                   gfsd_direction(p.ens, p.data, p.prior, KernelPolicy{}),
                   gfsf_direction(p.ens, p.data, p.prior, KernelPolicy{})}) {
    EXPECT_LT(max_rel_error(dir, m), 1e-12);
    EXPECT_EQ(dir[0], dir[1]);
  }
}

TEST(KernelRules, SingleParticleCollapse) {
  Rng rng(47);
  const auto p = linear_problem(1, 4, rng);
  const auto m = map_direction(p.ens, p.data, p.prior);
  EXPECT_LT(max_rel_error(svgd_direction(p.ens, p.data, p.prior, KernelPolicy{}), m), 1e-14);
  EXPECT_LT(max_rel_error(wsgld_direction(p.ens, p.data, p.prior, KernelPolicy{}), m), 1e-14);
  EXPECT_LT(max_rel_error(gfsd_direction(p.ens, p.data, p.prior, KernelPolicy{}), m), 1e-14);
  EXPECT_LT(max_rel_error(gfsf_direction(p.ens, p.data, p.prior, KernelPolicy{}), m), 1e-14);
}

TEST(FunctionSpace, TwoParticleRepulsionMatchesHandForm) {
  // One datum and a scalar linear output: the output Jacobian is [x, 1], and
  // the f-SVGD direction of particle 0 is J^T [ (s_0 + K s_1)/2 + (f_0 - f_1) K / (2 h^2) ].
  ModelSpec s;
  s.input_dim = 1;
  s.activation = Activation::identity;
  s.likelihood = Likelihood::gaussian(0.5);
  const ParticleEnsemble ens{s, {ParamVector{1.2, -0.3}, ParamVector{-0.4, 0.5}}};
  const Dataset batch(Matrix(1, 1, 0.8), Matrix(1, 1, 0.1));
  const double x = 0.8, y = 0.1;
  const double f0 = 1.2 * x - 0.3, f1 = -0.4 * x + 0.5;
  const double s0 = (y - f0) / 0.25, s1 = (y - f1) / 0.25;
  const double h2 = (f0 - f1) * (f0 - f1) / std::numbers::ln2;
  const double K = std::exp(-(f0 - f1) * (f0 - f1) / (2.0 * h2));
  const double v0 = 0.5 * (s0 + K * s1) + 0.5 * (f0 - f1) * K / h2;
  const auto dir = function_space_direction(RuleTag::f_svgd, ens, batch, nullptr, KernelPolicy{});
  EXPECT_NEAR(dir[0][0], v0 * x, 1e-12);
  EXPECT_NEAR(dir[0][1], v0, 1e-12);
}

TEST(FunctionSpace, IdenticalParticlesHaveNoRepulsion) {
  Rng rng(48);
  auto p = random_problem(LikelihoodFamily::gaussian, 3, 4, rng);
  p.ens.particles[2] = p.ens.particles[1] = p.ens.particles[0];
  const auto fp = fit_function_prior(p.ens.spec, p.prior, p.data.inputs, rng, 50);
  const auto m = function_space_map_direction(p.ens, p.data, &fp, 1.0);
  for (auto tag : {RuleTag::f_svgd, RuleTag::f_wsgld, RuleTag::f_gfsd, RuleTag::f_gfsf}) {
    EXPECT_LT(max_rel_error(function_space_direction(tag, p.ens, p.data, &fp, KernelPolicy{}), m), 1e-9)
        << rule_name(tag);
  }
}

TEST(FunctionSpace, RejectsParameterSpaceRule) {
  Rng rng(49);
  const auto p = random_problem(LikelihoodFamily::gaussian, 2, 2, rng);
  EXPECT_THROW(function_space_direction(RuleTag::svgd, p.ens, p.data, nullptr, KernelPolicy{}),
               std::invalid_argument);
}

TEST(VarObjective, MatchesCompositionOracle) {
  Rng rng(50);
  const auto p = linear_problem(2, 3, rng);
  for (const auto& kind : {BandwidthKind::h(), BandwidthKind::h_m(), BandwidthKind::h_w()}) {
    double F = kl_ensemble_prior(p.ens, p.prior);
    for (std::size_t d = 0; d < 3; ++d) {
      Vector col(2);
      for (std::size_t i = 0; i < 2; ++i) col[i] = log_lik(p.ens.spec, p.ens.particles[i], p.data.x(d), p.data.y(d));
      F -= 0.5 * (col[0] + col[1]) + repulsion_R(kind, col);
    }
    EXPECT_NEAR(var_objective(p.ens, p.data, p.prior, kind), F, 1e-10);
  }
}

TEST(VarObjective, SingleParticleIsNegativeLogJoint) {
  Rng rng(51);
  const auto p = linear_problem(1, 4, rng);
  EXPECT_NEAR(var_objective(p.ens, p.data, p.prior, BandwidthKind::h()), map_objective(p.ens, p.data, p.prior), 1e-12);
}

TEST(VarObjective, IdenticalParticlesHaveNoRepulsion) {
  Rng rng(52);
  auto p = linear_problem(3, 4, rng);
  p.ens.particles[2] = p.ens.particles[1] = p.ens.particles[0];
  EXPECT_NEAR(var_objective(p.ens, p.data, p.prior, BandwidthKind::h()),
              map_objective(p.ens, p.data, p.prior) + kl_ensemble_prior(p.ens, p.prior) +
                  log_prior(p.prior, p.ens.particles[0]),
              1e-12);
}

TEST(VarGrad, SingleParticleIsMapGradient) {
  Rng rng(53);
  const auto p = linear_problem(1, 4, rng);
  EXPECT_LT(max_rel_error(var_direction(p.ens, p.data, p.prior, BandwidthKind::h()),
                          map_direction(p.ens, p.data, p.prior)),
            1e-12);
}

TEST(VarGrad, MatchesFiniteDifferences) {
  Rng rng(54);
  for (auto family : {LikelihoodFamily::gaussian, LikelihoodFamily::categorical}) {
    for (int t = 0; t < 10; ++t) {
      const auto p = random_problem(family, 3, 3, rng, t % 2 == 1);
      for (const auto& kind : {BandwidthKind::h(), BandwidthKind::h_m(), BandwidthKind::h_median(), BandwidthKind::h_w()}) {
        const double err = harness::ensemble_gradient_error(
            p.ens, [&](const ParticleEnsemble& e) { return var_objective(e, p.data, p.prior, kind); },
            var_grad(p.ens, p.data, p.prior, kind));
        EXPECT_LT(err, 1e-4) << bandwidth_name(kind.tag);
      }
    }
  }
}

TEST(VarGrad, EqualLossesLeaveOnlyTheDrift) {
  // Identical particles share every log-likelihood, so each column has zero
  // spread and R contributes nothing to the gradient.
  Rng rng(55);
  auto p = random_problem(LikelihoodFamily::gaussian, 3, 4, rng);
  p.ens.particles[2] = p.ens.particles[1] = p.ens.particles[0];
  EXPECT_LT(max_rel_error(var_direction(p.ens, p.data, p.prior, BandwidthKind::h()),
                          map_direction(p.ens, p.data, p.prior)),
            1e-12);
}

TEST(VarSvgd, MatchesAssemblyOracle) {
  Rng rng(56);
  const auto p = linear_problem(3, 4, rng);
  const auto v = var_direction(p.ens, p.data, p.prior, BandwidthKind::h());
  const auto k = median_kernel(p.ens.particles);
  std::vector<ParamVector> oracle(3, ParamVector(3, 0.0));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t c = 0; c < 3; ++c) {
        oracle[i][c] += (k.K(i, j) * v[j][c] + (p.ens.particles[i][c] - p.ens.particles[j][c]) * k.K(i, j) / k.h2) / 3.0;
      }
    }
  }
  EXPECT_LT(max_rel_error(var_svgd_direction(p.ens, p.data, p.prior, BandwidthKind::h(), KernelPolicy{}), oracle), 1e-8);
}

TEST(VarSvgd, SingleParticleIsVarDirection) {
  Rng rng(57);
  const auto p = linear_problem(1, 4, rng);
  EXPECT_LT(max_rel_error(var_svgd_direction(p.ens, p.data, p.prior, BandwidthKind::h(), KernelPolicy{}),
                          var_direction(p.ens, p.data, p.prior, BandwidthKind::h())),
            1e-14);
}

TEST(Pac2e, MatchesCompositionOracle) {
  Rng rng(58);
  const auto p = linear_problem(2, 3, rng);
  double F = kl_ensemble_prior(p.ens, p.prior);
  for (std::size_t d = 0; d < 3; ++d) {
    Vector lik(2), col(2);
    for (std::size_t i = 0; i < 2; ++i) {
      col[i] = log_lik(p.ens.spec, p.ens.particles[i], p.data.x(d), p.data.y(d));
      lik[i] = std::exp(col[i]);
    }
    F -= 0.5 * (col[0] + col[1]) + predictive_variance_V(lik);
  }
  EXPECT_NEAR(pac2e_objective(p.ens, p.data, p.prior), F, 1e-10);
}

TEST(Pac2e, IdenticalParticlesReduceToMapStyle) {
  Rng rng(59);
  auto p = linear_problem(2, 3, rng);
  p.ens.particles[1] = p.ens.particles[0];
  EXPECT_NEAR(pac2e_objective(p.ens, p.data, p.prior),
              var_objective(p.ens, p.data, p.prior, BandwidthKind::h()), 1e-12);
}

TEST(Pac2e, GradientMatchesFiniteDifferences) {
  Rng rng(60);
  for (int t = 0; t < 5; ++t) {
    const auto p = random_problem(LikelihoodFamily::categorical, 3, 3, rng);
    const double err = harness::ensemble_gradient_error(
        p.ens, [&](const ParticleEnsemble& e) { return pac2e_objective(e, p.data, p.prior); },
        pac2e_grad(p.ens, p.data, p.prior));
    EXPECT_LT(err, 1e-4);
  }
}

TEST(Dpp, SingleParticleIsMapObjective) {
  Rng rng(61);
  const auto p = linear_problem(1, 3, rng);
  EXPECT_NEAR(dpp_objective(p.ens, p.data, p.prior, 1.0, 0.0), map_objective(p.ens, p.data, p.prior), 1e-14);
}

TEST(Dpp, TwoParticleCompositionOracle) {
  Rng rng(62);
  const auto p = linear_problem(2, 3, rng);
  const double h2 = 0.7, delta = 1e-8;
  const double k = std::exp(-squared_distance(p.ens.particles[0], p.ens.particles[1]) / (2.0 * h2));
  const double logdet = std::log((1.0 + delta) * (1.0 + delta) - k * k);
  double joint = 0.0;
  for (const auto& th : p.ens.particles) {
    joint += log_prior(p.prior, th);
    for (std::size_t d = 0; d < 3; ++d) joint += log_lik(p.ens.spec, th, p.data.x(d), p.data.y(d));
  }
  EXPECT_NEAR(dpp_objective(p.ens, p.data, p.prior, h2, delta), -joint / 2.0 - logdet, 1e-10);
}

TEST(Dpp, GradientMatchesFiniteDifferences) {
  Rng rng(63);
  for (int t = 0; t < 5; ++t) {
    const auto p = random_problem(LikelihoodFamily::gaussian, 3, 3, rng);
    const double err = harness::ensemble_gradient_error(
        p.ens, [&](const ParticleEnsemble& e) { return dpp_objective(e, p.data, p.prior, 2.0); },
        dpp_grad(p.ens, p.data, p.prior, 2.0));
    EXPECT_LT(err, 1e-4);
  }
}

TEST(LossSpaceTerms, WsgldAndGfsfGradientsMatchFiniteDifferences) {
  Rng rng(64);
  for (int t = 0; t < 10; ++t) {
    const auto p = random_problem(t % 2 ? LikelihoodFamily::categorical : LikelihoodFamily::gaussian, 3, 2, rng);
    const auto e = harness::derivation_errors(p);
    EXPECT_LT(e.wsgld, 1e-5);
    EXPECT_LT(e.gfsf, 1e-5);
  }
}

TEST(Dispatch, EveryRuleCollapsesAtOneParticle) {
  Rng rng(65);
  const auto p = random_problem(LikelihoodFamily::gaussian, 1, 3, rng);
  const auto fp = fit_function_prior(p.ens.spec, p.prior, p.data.inputs, rng, 50);
  for (RuleTag tag : harness::all_rules()) {
    const auto [dir, map] = harness::direction_and_map(tag, p, &fp);
    EXPECT_LT(relative_error(dir[0], map[0]), 1e-10) << rule_name(tag);
  }
}

TEST(Dispatch, PermutationEquivariance) {
  Rng rng(66);
  const auto p = random_problem(LikelihoodFamily::categorical, 3, 3, rng);
  Problem q = p;
  std::swap(q.ens.particles[0], q.ens.particles[2]);
  const auto fp = fit_function_prior(p.ens.spec, p.prior, p.data.inputs, rng, 50);
  for (RuleTag tag : harness::all_rules()) {
    const auto a = harness::direction_and_map(tag, p, &fp).first;
    const auto b = harness::direction_and_map(tag, q, &fp).first;
    EXPECT_LT(relative_error(b[0], a[2]), 1e-9) << rule_name(tag);
    EXPECT_LT(relative_error(b[1], a[1]), 1e-9) << rule_name(tag);
  }
}

TEST(RuleNames, RoundTrip) {
  for (const auto& [tag, name] : rule_names()) EXPECT_EQ(parse_rule(name), tag);
  EXPECT_THROW(parse_rule("sgld"), Error);
}

TEST(Train, ZeroStepLeavesEnsembleUnchanged) {
  Rng rng(67);
  const auto p = linear_problem(3, 5, rng);
  UpdateRule rule;
  rule.step_size = 0.0;
  rule.optimizer.adaptive = false;
  Rng train_rng(1);
  const auto res = train(rule, p.ens, p.data, p.prior, 5, 0, train_rng);
  EXPECT_EQ(res.ensemble.particles, p.ens.particles);
  EXPECT_EQ(res.trajectory.size(), 5u);
}

TEST(Train, ZeroEpochsReturnsInput) {
  Rng rng(68);
  const auto p = linear_problem(2, 5, rng);
  Rng train_rng(1);
  const auto res = train(UpdateRule{}, p.ens, p.data, p.prior, 0, 0, train_rng);
  EXPECT_EQ(res.ensemble.particles, p.ens.particles);
  EXPECT_TRUE(res.trajectory.empty());
}

TEST(Train, MapConvergesToRidgeSolution) {
  Rng rng(69);
  const auto p = linear_problem(1, 20, rng, 1.0);
  // Normal equations (X^T X + I) theta = X^T y with X = [x, 1].
  double A[3][3] = {}, b[3] = {};
  for (std::size_t d = 0; d < 20; ++d) {
    const double row[3] = {p.data.x(d)[0], p.data.x(d)[1], 1.0};
    for (int i = 0; i < 3; ++i) {
      b[i] += row[i] * p.data.y(d)[0];
      for (int j = 0; j < 3; ++j) A[i][j] += row[i] * row[j];
    }
  }
  Matrix M(3, 3);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) M(i, j) = A[i][j] + (i == j ? 1.0 : 0.0);
  }
  const Matrix inv = inverse3(M);
  Vector ridge(3, 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) ridge[i] += inv(i, j) * b[j];
  }
  UpdateRule rule;
  rule.tag = RuleTag::map;
  rule.step_size = 0.02;
  rule.optimizer.adaptive = false;
  Rng train_rng(2);
  const auto res = train(rule, p.ens, p.data, p.prior, 1000, 0, train_rng);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(res.ensemble.particles[0][i], ridge[i], 1e-4);
}

TEST(Train, DeterministicForEqualSeeds) {
  Rng rng(70);
  const auto p = random_problem(LikelihoodFamily::gaussian, 4, 30, rng);
  UpdateRule rule;
  rule.tag = RuleTag::var_svgd;
  rule.step_size = 0.01;
  Rng a(5), b(5);
  const auto ra = train(rule, p.ens, p.data, p.prior, 5, 8, a);
  const auto rb = train(rule, p.ens, p.data, p.prior, 5, 8, b);
  EXPECT_EQ(ra.ensemble.particles, rb.ensemble.particles);
  std::ostringstream sa, sb;
  write_trajectory_csv(ra.trajectory, sa);
  write_trajectory_csv(rb.trajectory, sb);
  EXPECT_EQ(sa.str(), sb.str());
}

TEST(Train, MinibatchesCoverEveryEpoch) {
  Rng rng(71);
  const auto p = linear_problem(2, 10, rng);
  Rng train_rng(3);
  const auto res = train(UpdateRule{}, p.ens, p.data, p.prior, 2, 4, train_rng);
  EXPECT_EQ(res.trajectory.size(), 6u);
  EXPECT_EQ(effective_batch_size(10, 0), 10u);
  EXPECT_EQ(effective_batch_size(5000, 0), 256u);
  EXPECT_EQ(effective_batch_size(10, 50), 10u);
}

TEST(Train, VarKeepsParticlesApartAndChainHolds) {
  Rng data_rng(72);
  const Dataset data = harness::toy_regression(data_rng);
  ModelSpec s;
  s.input_dim = 1;
  s.hidden = {20};
  s.activation = Activation::tanh;
  s.likelihood = Likelihood::gaussian(0.2);
  Rng init_rng(73);
  const auto ens = ParticleEnsemble::initialize(s, 10, init_rng);
  UpdateRule rule;
  rule.tag = RuleTag::var;
  rule.step_size = 0.001;
  Rng train_rng(74);
  const auto res = train(rule, ens, data, Prior{}, 300, 0, train_rng);
  const auto report = repulsion_report(loglik_matrix(res.ensemble, data));
  EXPECT_TRUE(report.all_chains_ok());
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t j = i + 1; j < 10; ++j) EXPECT_GT(squared_distance(res.ensemble.particles[i], res.ensemble.particles[j]), 0.0);
  }
}

TEST(Train, RejectsInvalidRule) {
  Rng rng(75);
  const auto p = linear_problem(1, 2, rng);
  UpdateRule rule;
  rule.step_size = -1.0;
  Rng train_rng(1);
  EXPECT_THROW(train(rule, p.ens, p.data, p.prior, 1, 0, train_rng), std::invalid_argument);
}
