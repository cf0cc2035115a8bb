#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "pvi/numerics.hpp"

using namespace pvi;

namespace {

Matrix random_psd(std::size_t n, Rng& rng) {
  Matrix a(n, n);
  for (double& v : a.data()) v = rng.normal();
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += a(i, k) * a(j, k);
      m(i, j) = s;
    }
    m(i, i) += 0.1;
  }
  return m;
}

}  // namespace

TEST(LogdetPsd, IdentityIsZero) { EXPECT_DOUBLE_EQ(logdet_psd(Matrix::identity(3), 0.0), 0.0); }

TEST(LogdetPsd, DiagonalIsLogProduct) {
  Matrix m(2, 2);
  m(0, 0) = 2.0;
  m(1, 1) = 8.0;
  EXPECT_NEAR(logdet_psd(m, 0.0), std::log(16.0), 1e-15);
}

TEST(LogdetPsd, MatchesEigenvalueOracle) {
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix m = random_psd(5, rng);
    Eigen::MatrixXd e(5, 5);
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 5; ++j) e(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m(i, j);
    }
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(e);
    const double oracle = solver.eigenvalues().array().log().sum();
    EXPECT_NEAR(logdet_psd(m, 0.0), oracle, 1e-9);
  }
}

TEST(LogdetPsd, JitterIsAddedToDiagonal) {
  const Matrix z(2, 2, 0.0);
  EXPECT_NEAR(logdet_psd(z, 0.5), 2.0 * std::log(0.5), 1e-15);
}

TEST(LogdetPsd, DiagonalProductsAdd) {
  Matrix a(3, 3), b(3, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    a(i, i) = 1.5 + static_cast<double>(i);
    b(i, i) = 0.25 * static_cast<double>(i + 1);
  }
  EXPECT_NEAR(logdet_psd(a) + logdet_psd(b), logdet_psd(matmul(a, b)), 1e-10);
}

TEST(LogdetPsd, RejectsAsymmetricInput) {
  Matrix m = Matrix::identity(2);
  m(0, 1) = 0.5;
  EXPECT_THROW(logdet_psd(m), NotPositiveDefinite);
}

TEST(LogdetPsd, IndefiniteThrowsAfterLadder) {
  Matrix m = Matrix::identity(2);
  m(0, 0) = -1.0;
  EXPECT_THROW(logdet_psd(m, 1e-10), NotPositiveDefinite);
}

TEST(CholeskyJittered, LadderRescuesSingularMatrix) {
  const Matrix ones(3, 3, 1.0);
  const auto res = cholesky_jittered(ones, 1e-10);
  EXPECT_GE(res.jitter, 1e-10);
  EXPECT_TRUE(res.lower.all_finite());
}

TEST(SpdInverse, InverseTimesMatrixIsIdentity) {
  Rng rng(3);
  const Matrix m = random_psd(4, rng);
  const Matrix p = matmul(m, spd_inverse(m));
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(p(i, j), i == j ? 1.0 : 0.0, 1e-9);
  }
}

TEST(Logsumexp, PairOfZeros) {
  const Vector v{0.0, 0.0};
  EXPECT_NEAR(logsumexp(v), std::numbers::ln2, 1e-15);
}

TEST(Logsumexp, LargeNegativeEntries) {
  const Vector v{-1000.0, -1000.0};
  EXPECT_NEAR(logsumexp(v), -1000.0 + std::numbers::ln2, 1e-12);
}

TEST(Logsumexp, MatchesNaiveSum) {
  Rng rng(5);
  Vector v(10);
  for (double& x : v) x = rng.uniform(-5.0, 5.0);
  double s = 0.0;
  for (double x : v) s += std::exp(x);
  EXPECT_NEAR(logsumexp(v), std::log(s), 1e-12);
}

TEST(Logsumexp, ShiftInvariance) {
  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    Vector v(7);
    for (double& x : v) x = rng.uniform(-20.0, 20.0);
    const double c = rng.uniform(-50.0, 50.0);
    Vector w = v;
    for (double& x : w) x += c;
    EXPECT_NEAR(logsumexp(w) - c, logsumexp(v), 1e-12);
  }
}

TEST(Logsumexp, EmptyThrows) { EXPECT_THROW(logsumexp(Vector{}), std::invalid_argument); }

TEST(Median, OddLength) { EXPECT_EQ(median(Vector{3.0, 1.0, 2.0}), 2.0); }

TEST(Median, EvenLengthAveragesMiddle) { EXPECT_EQ(median(Vector{1.0, 2.0, 3.0, 4.0}), 2.5); }

TEST(Median, MatchesSortOracle) {
  Rng rng(7);
  Vector v(101);
  for (double& x : v) x = rng.uniform();
  Vector s = v;
  std::sort(s.begin(), s.end());
  EXPECT_EQ(median(v), s[50]);
}

TEST(Percentile, InterpolatesLinearly) {
  const Vector v{4.0, 1.0, 3.0, 2.0};
  EXPECT_DOUBLE_EQ(percentile(v, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(percentile(v, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(percentile(v, 0.5), 2.5);
}

TEST(FiniteDiffGrad, Square) {
  const Vector at{3.0};
  const auto g = finite_diff_grad([](std::span<const double> x) { return x[0] * x[0]; }, at, 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-6);
}

TEST(FiniteDiffGrad, ConstantIsZero) {
  const Vector at{1.0, -2.0, 0.5};
  const auto g = finite_diff_grad([](std::span<const double>) { return 4.0; }, at, 1e-3);
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDiffGrad, NonFiniteThrows) {
  const Vector at{0.0};
  EXPECT_THROW(finite_diff_grad([](std::span<const double> x) { return std::log(x[0]); }, at, 1e-3),
               NonFiniteEvaluation);
}

TEST(FiniteDiffGrad, RejectsNonPositiveStep) {
  const Vector at{0.0};
  EXPECT_THROW(finite_diff_grad([](std::span<const double>) { return 0.0; }, at, 0.0), std::invalid_argument);
}

TEST(Rng, EqualSeedsGiveEqualStreams) {
  Rng a(123), b(123);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(a.normal(), b.normal());
}

TEST(Rng, SplitStreamsDiffer) {
  const Rng root(9);
  Rng a = root.split(1), b = root.split(2), c = root.split(1);
  const double x = a.uniform();
  EXPECT_NE(x, b.uniform());
  EXPECT_EQ(x, c.uniform());
}

TEST(Matrix, RejectsWrongEntryCount) { EXPECT_THROW(Matrix(2, 2, Vector{1.0, 2.0, 3.0}), DimensionMismatch); }
