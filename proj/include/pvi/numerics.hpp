#pragma once

// Dense linear algebra, stable reductions and seeded randomness shared by all
// other headers. Everything is float64 and single-threaded.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pvi/errors.hpp"

namespace pvi {

using Vector = std::vector<double>;

/// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionMismatch("Matrix: entry count does not match rows*cols");
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  Vector column(std::size_t c) const {
    Vector out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }

  const std::vector<double>& data() const noexcept { return data_; }
  std::vector<double>& data() noexcept { return data_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw DimensionMismatch("matmul: inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  }
  return out;
}

/// 64-bit seeded generator. Equal seeds give bitwise identical streams; the
/// only way to share randomness is `split`, which derives an independent
/// child seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  Rng split(std::uint64_t stream) const { return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x9e3779b97f4a7c15ULL))); }

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double sd = 1.0) { return std::normal_distribution<double>(mean, sd)(engine_); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

  std::mt19937_64& engine() noexcept { return engine_; }

  static std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// Lower Cholesky factor of m + jitter*I, with the jitter that made it work.
struct CholeskyResult {
  Matrix lower;
  double jitter = 0.0;
};

namespace detail {

inline void require_symmetric(const Matrix& m, const char* who) {
  if (!m.square()) throw DimensionMismatch(std::string(who) + ": matrix is not square");
  double scale = 1.0;
  for (double v : m.data()) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = i + 1; j < m.cols(); ++j) {
      if (std::abs(m(i, j) - m(j, i)) > 1e-10 * scale) {
        throw NotPositiveDefinite(std::string(who) + ": matrix is not symmetric");
      }
    }
  }
}

inline bool try_cholesky(const Matrix& m, double jitter, Matrix& lower) {
  const std::size_t n = m.rows();
  lower = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = m(j, j) + jitter;
    for (std::size_t k = 0; k < j; ++k) d -= lower(j, k) * lower(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double ljj = std::sqrt(d);
    lower(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= lower(i, k) * lower(j, k);
      lower(i, j) = s / ljj;
    }
  }
  return true;
}

}  // namespace detail

/// Factor m + jitter*I, escalating the jitter to 10x and 100x before giving up.
inline CholeskyResult cholesky_jittered(const Matrix& m, double jitter = 0.0) {
  detail::require_symmetric(m, "cholesky");
  if (jitter < 0.0) throw std::invalid_argument("cholesky: negative jitter");
  CholeskyResult out;
  for (double scale : {1.0, 10.0, 100.0}) {
    const double j = jitter * scale;
    if (detail::try_cholesky(m, j, out.lower)) {
      out.jitter = j;
      return out;
    }
    if (jitter == 0.0) break;
  }
  throw NotPositiveDefinite("cholesky: matrix is not positive definite after jitter " + std::to_string(jitter * 100.0));
}

/// ln det(m + jitter*I) through a Cholesky factorization.
inline double logdet_psd(const Matrix& m, double jitter = 0.0) {
  const auto chol = cholesky_jittered(m, jitter);
  double s = 0.0;
  for (std::size_t i = 0; i < chol.lower.rows(); ++i) s += std::log(chol.lower(i, i));
  return 2.0 * s;
}

inline double logdet_from_cholesky(const Matrix& lower) {
  double s = 0.0;
  for (std::size_t i = 0; i < lower.rows(); ++i) s += std::log(lower(i, i));
  return 2.0 * s;
}

/// Solves (L L^T) x = b in place.
inline void cholesky_solve_inplace(const Matrix& lower, std::span<double> b) {
  const std::size_t n = lower.rows();
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= lower(i, k) * b[k];
    b[i] = s / lower(i, i);
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= lower(k, ii) * b[k];
    b[ii] = s / lower(ii, ii);
  }
}

inline Matrix inverse_from_cholesky(const Matrix& lower) {
  const std::size_t n = lower.rows();
  Matrix inv(n, n);
  Vector e(n);
  for (std::size_t c = 0; c < n; ++c) {
    std::fill(e.begin(), e.end(), 0.0);
    e[c] = 1.0;
    cholesky_solve_inplace(lower, e);
    for (std::size_t r = 0; r < n; ++r) inv(r, c) = e[r];
  }
  // Symmetrize round-off.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = 0.5 * (inv(i, j) + inv(j, i));
      inv(i, j) = v;
      inv(j, i) = v;
    }
  }
  return inv;
}

/// (m + jitter*I)^{-1} for symmetric positive definite m.
inline Matrix spd_inverse(const Matrix& m, double jitter = 0.0) {
  return inverse_from_cholesky(cholesky_jittered(m, jitter).lower);
}

inline double logsumexp(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("logsumexp: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

inline double mean(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("mean: empty input");
  // Summing offsets from v[0] keeps the mean of a constant vector exact.
  const double v0 = v[0];
  double s = 0.0;
  for (double x : v) s += x - v0;
  return v0 + s / static_cast<double>(v.size());
}

inline double median(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty input");
  Vector s(v.begin(), v.end());
  const std::size_t n = s.size();
  const std::size_t mid = n / 2;
  std::nth_element(s.begin(), s.begin() + mid, s.end());
  const double upper = s[mid];
  if (n % 2 == 1) return upper;
  const double lower = *std::max_element(s.begin(), s.begin() + mid);
  return 0.5 * (lower + upper);
}

/// Linear-interpolation percentile (q in [0,1]) of an unsorted sample.
inline double percentile(std::span<const double> v, double q) {
  if (v.empty()) throw std::invalid_argument("percentile: empty input");
  Vector s(v.begin(), v.end());
  std::sort(s.begin(), s.end());
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return s[lo] + frac * (s[hi] - s[lo]);
}

/// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
inline Vector finite_diff_grad(const std::function<double(std::span<const double>)>& f, std::span<const double> at,
                               double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  Vector x(at.begin(), at.end());
  Vector g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double fp = f(x);
    x[i] = orig - step;
    const double fm = f(x);
    x[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NonFiniteEvaluation("finite_diff_grad: non-finite evaluation at coordinate " + std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline double norm2(std::span<const double> v) { return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)); }

}  // namespace pvi
