#pragma once

// Loss-space bandwidths, repulsion terms, Gram matrices and the inequality
// chains they satisfy. Every function here acts on one column L of a
// log-likelihood matrix: L_i = ln p(x | theta_i) for a fixed datum x.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "pvi/ensemble.hpp"
#include "pvi/errors.hpp"
#include "pvi/numerics.hpp"

namespace pvi {

enum class BandwidthTag { h, h_m, h_median, h_w };

/// Which inverse-square bandwidth weights the loss variance. For h_median the
/// constant M may be given; when absent it is estimated per column as the
/// empirical second moment of L.
struct BandwidthKind {
  BandwidthTag tag = BandwidthTag::h;
  std::optional<double> median_M;

  static BandwidthKind h() { return {BandwidthTag::h, std::nullopt}; }
  static BandwidthKind h_m() { return {BandwidthTag::h_m, std::nullopt}; }
  static BandwidthKind h_w() { return {BandwidthTag::h_w, std::nullopt}; }
  static BandwidthKind h_median(std::optional<double> M = std::nullopt) {
    if (M && !(std::isfinite(*M) && *M > 0.0)) throw std::invalid_argument("h_median: M must be finite and positive");
    return {BandwidthTag::h_median, M};
  }
};

inline std::string bandwidth_name(BandwidthTag t) {
  switch (t) {
    case BandwidthTag::h: return "h";
    case BandwidthTag::h_m: return "h_m";
    case BandwidthTag::h_median: return "h_median";
    case BandwidthTag::h_w: return "h_w";
  }
  return "h";
}

inline BandwidthTag parse_bandwidth(const std::string& s) {
  if (s == "h") return BandwidthTag::h;
  if (s == "h_m") return BandwidthTag::h_m;
  if (s == "h_median") return BandwidthTag::h_median;
  if (s == "h_w") return BandwidthTag::h_w;
  throw Error("unknown bandwidth kind '" + s + "'");
}

namespace detail {

inline void require_column(std::span<const double> L) {
  if (L.empty()) throw std::invalid_argument("empty log-likelihood column");
  for (double v : L) {
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite log-likelihood");
  }
}

/// Index of the maximum (lowest index on ties).
inline std::size_t argmax(std::span<const double> L) {
  return static_cast<std::size_t>(std::max_element(L.begin(), L.end()) - L.begin());
}
inline std::size_t argmin(std::span<const double> L) {
  return static_cast<std::size_t>(std::min_element(L.begin(), L.end()) - L.begin());
}

/// Indices whose average is the median, with the weight each receives.
inline std::vector<std::pair<std::size_t, double>> median_selector(std::span<const double> L) {
  std::vector<std::size_t> idx(L.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return L[a] < L[b]; });
  const std::size_t n = L.size();
  if (n % 2 == 1) return {{idx[n / 2], 1.0}};
  return {{idx[n / 2 - 1], 0.5}, {idx[n / 2], 0.5}};
}

inline bool all_equal(std::span<const double> L) {
  return std::all_of(L.begin(), L.end(), [&](double v) { return v == L[0]; });
}

}  // namespace detail

inline double second_moment(std::span<const double> L) {
  double s = 0.0;
  for (double v : L) s += v * v;
  return s / static_cast<double>(L.size());
}

/// Exponent e_i of the inverse-square bandwidth, h_i^{-2} = exp(e_i).
inline Vector bandwidth_exponent(const BandwidthKind& kind, std::span<const double> L) {
  detail::require_column(L);
  const double mx = *std::max_element(L.begin(), L.end());
  const double mn = *std::min_element(L.begin(), L.end());
  const double avg = mean(L);
  Vector e(L.size());
  switch (kind.tag) {
    case BandwidthTag::h:
      for (std::size_t i = 0; i < L.size(); ++i) e[i] = L[i] + avg - 2.0 * mx;
      break;
    case BandwidthTag::h_m:
      for (std::size_t i = 0; i < L.size(); ++i) e[i] = L[i] + mn - 2.0 * mx;
      break;
    case BandwidthTag::h_median: {
      const double M = kind.median_M ? *kind.median_M : second_moment(L);
      const double base = median(L) - std::sqrt(M);
      for (std::size_t i = 0; i < L.size(); ++i) e[i] = L[i] + base - 2.0 * mx;
      break;
    }
    case BandwidthTag::h_w:
      std::fill(e.begin(), e.end(), mn + avg - 2.0 * mx);
      break;
  }
  return e;
}

/// J(i, k) = d e_i / d L_k, with max/min/median treated as fixed index
/// selections (lowest index on ties).
inline Matrix bandwidth_exponent_jacobian(const BandwidthKind& kind, std::span<const double> L) {
  detail::require_column(L);
  const std::size_t n = L.size();
  const auto dn = static_cast<double>(n);
  Vector dB(n, 0.0);  // derivative of the shared (non-L_i) part
  double self = 1.0;
  switch (kind.tag) {
    case BandwidthTag::h:
      for (auto& v : dB) v = 1.0 / dn;
      break;
    case BandwidthTag::h_m:
      dB[detail::argmin(L)] += 1.0;
      break;
    case BandwidthTag::h_median: {
      for (auto [k, w] : detail::median_selector(L)) dB[k] += w;
      if (!kind.median_M) {
        const double root = std::sqrt(second_moment(L));
        if (root > 0.0) {
          for (std::size_t k = 0; k < n; ++k) dB[k] -= L[k] / (dn * root);
        }
      }
      break;
    }
    case BandwidthTag::h_w:
      self = 0.0;
      for (auto& v : dB) v = 1.0 / dn;
      dB[detail::argmin(L)] += 1.0;
      break;
  }
  const std::size_t amax = detail::argmax(L);
  Matrix J(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < n; ++k) J(i, k) = dB[k];
    J(i, i) += self;
    J(i, amax) -= 2.0;
  }
  return J;
}

/// Per-particle inverse-square bandwidths (h_w returns its scalar repeated).
inline Vector bandwidth_inv_sq(const BandwidthKind& kind, std::span<const double> L) {
  Vector e = bandwidth_exponent(kind, L);
  for (double& v : e) v = std::exp(v);
  return e;
}

inline double hw_inv_sq(std::span<const double> L) { return bandwidth_inv_sq(BandwidthKind::h_w(), L)[0]; }

/// (1/(4N)) sum_i h_i^{-2} (L_i - mean L)^2.
inline double repulsion_R(const BandwidthKind& kind, std::span<const double> L) {
  const Vector w = bandwidth_inv_sq(kind, L);
  const double m = mean(L);
  double s = 0.0;
  for (std::size_t i = 0; i < L.size(); ++i) s += w[i] * (L[i] - m) * (L[i] - m);
  return s / (4.0 * static_cast<double>(L.size()));
}

/// Pairwise form h_w^{-2}/(8 N^2) sum_ij (L_i - L_j)^2.
inline double repulsion_Rc(std::span<const double> L) {
  const double w = hw_inv_sq(L);
  const auto n = static_cast<double>(L.size());
  double s = 0.0;
  for (std::size_t i = 0; i < L.size(); ++i) {
    for (std::size_t j = 0; j < L.size(); ++j) s += (L[i] - L[j]) * (L[i] - L[j]);
  }
  return w * s / (8.0 * n * n);
}

/// Both sides of (1/N) sum (L_i - mean)^2 = (1/(2N^2)) sum_ij (L_i - L_j)^2.
inline std::pair<double, double> covariance_identity_check(std::span<const double> L) {
  detail::require_column(L);
  const auto n = static_cast<double>(L.size());
  const double m = mean(L);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < L.size(); ++i) {
    lhs += (L[i] - m) * (L[i] - m);
    for (std::size_t j = 0; j < L.size(); ++j) rhs += (L[i] - L[j]) * (L[i] - L[j]);
  }
  return {lhs / n, rhs / (2.0 * n * n)};
}

/// G_ij = exp(-h_w^{-2} (L_i - L_j)^2 / 8).
inline Matrix gram_G(std::span<const double> L) {
  const double w = hw_inv_sq(L);
  const std::size_t n = L.size();
  Matrix G(n, n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = L[i] - L[j];
      G(i, j) = G(j, i) = std::exp(-w * d * d / 8.0);
    }
  }
  return G;
}

/// Variant with the data sum inside the exponent:
/// G_ij = exp(-sum_d h_{w,d}^{-2} (L_id - L_jd)^2 / 8) over an N x D matrix.
inline Matrix gram_G_summed(const Matrix& L) {
  const std::size_t n = L.rows();
  Vector w(L.cols());
  for (std::size_t d = 0; d < L.cols(); ++d) w[d] = hw_inv_sq(L.column(d));
  Matrix G(n, n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t d = 0; d < L.cols(); ++d) {
        const double diff = L(i, d) - L(j, d);
        s += w[d] * diff * diff;
      }
      G(i, j) = G(j, i) = std::exp(-s / 8.0);
    }
  }
  return G;
}

inline double repulsion_Rw_from_gram(const Matrix& G) {
  const std::size_t n = G.rows();
  const auto dn = static_cast<double>(n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) row += G(i, j);
    s += std::log(row / dn);
  }
  return -s / dn;
}

/// -(1/N) sum_i ln((1/N) sum_j G_ij).
inline double repulsion_Rw(std::span<const double> L) { return repulsion_Rw_from_gram(gram_G(L)); }

/// K_ij = exp(-tilde_h ln N h_w^{-2} (L_i - L_j)^2 / 16).
inline Matrix gram_K(std::span<const double> L, double tilde_h) {
  const double w = hw_inv_sq(L);
  const std::size_t n = L.size();
  const double c = tilde_h * std::log(static_cast<double>(n)) * w / 16.0;
  Matrix K(n, n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = L[i] - L[j];
      K(i, j) = K(j, i) = std::exp(-c * d * d);
    }
  }
  return K;
}

struct TildeHSelection {
  double tilde_h = 1.0;
  Matrix K;
  bool degenerate = false;
};

inline constexpr double kTildeHLimit = 1152921504606846976.0;  // 2^60

inline double max_row_sum(const Matrix& K) {
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < K.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < K.cols(); ++j) s += K(i, j);
    best = std::max(best, s);
  }
  return best;
}

/// Smallest power of two tilde_h >= 1 with every row sum of K below
/// N - eps_row. Identical particles (or N = 1) are flagged degenerate and
/// get the all-ones K.
inline TildeHSelection select_tilde_h(std::span<const double> L, double eps_row = 0.5) {
  detail::require_column(L);
  TildeHSelection sel;
  const auto n = static_cast<double>(L.size());
  if (detail::all_equal(L)) {
    sel.degenerate = true;
    sel.K = Matrix(L.size(), L.size(), 1.0);
    return sel;
  }
  if (!(eps_row > 0.0) || !(eps_row < n - 1.0)) {
    throw std::invalid_argument("select_tilde_h: eps_row must lie in (0, N-1)");
  }
  for (double th = 1.0; th <= kTildeHLimit; th *= 2.0) {
    Matrix K = gram_K(L, th);
    if (max_row_sum(K) < n - eps_row) {
      sel.tilde_h = th;
      sel.K = std::move(K);
      return sel;
    }
  }
  throw Degenerate("select_tilde_h: no tilde_h up to 2^60 satisfies the row-sum condition");
}

/// Default ridge for the GFSF log-det: N^{1/N} - 1, the largest value for
/// which the log-det repulsion is provably non-negative.
inline double default_gfsf_eps(std::size_t n) {
  const auto dn = static_cast<double>(n);
  return std::expm1(std::log(dn) / dn);
}

struct GfsfOptions {
  double eps_row = 0.5;
  std::optional<double> eps;  // ridge in ln det(eps I + K); default N^{1/N} - 1
  bool enforce_upper = true;  // keep doubling tilde_h until the value is <= R_c
};

struct GfsfRepulsion {
  double value = 0.0;
  double tilde_h = 1.0;
  double eps = 0.0;
  bool degenerate = false;
};

/// R_g = (2/(tilde_h N)) (ln N - ln det(eps I + K)). Starts from
/// select_tilde_h's constant; with enforce_upper it keeps doubling tilde_h
/// while R_g exceeds R_c, which is reachable because R_g is at most
/// (2/tilde_h)(ln N / N - ln eps).
inline GfsfRepulsion repulsion_Rg(std::span<const double> L, const GfsfOptions& opt = {}) {
  GfsfRepulsion out;
  const std::size_t n = L.size();
  out.eps = opt.eps ? *opt.eps : default_gfsf_eps(n);
  TildeHSelection sel;
  try {
    sel = select_tilde_h(L, opt.eps_row);
  } catch (const Degenerate&) {
    // h_w^{-2} underflowed, so K is all ones in double precision; this is the
    // identical-particle limit as far as the kernel can tell.
    sel.degenerate = true;
  }
  if (sel.degenerate) {
    out.degenerate = true;
    return out;
  }
  if (!(out.eps > 0.0)) throw std::invalid_argument("repulsion_Rg: eps must be positive");
  const auto dn = static_cast<double>(n);
  const double cap = opt.enforce_upper ? repulsion_Rc(L) : std::numeric_limits<double>::infinity();
  auto eval = [&](double th, const Matrix& K) {
    Matrix A = K;
    for (std::size_t i = 0; i < n; ++i) A(i, i) += out.eps;
    return 2.0 / (th * dn) * (std::log(dn) - logdet_psd(A, 0.0));
  };
  double th = sel.tilde_h;
  double v = eval(th, sel.K);
  while (v > cap) {
    th *= 2.0;
    if (th > kTildeHLimit) {
      // Only reachable when R_c itself underflowed to zero.
      out.degenerate = true;
      return out;
    }
    v = eval(th, gram_K(L, th));
  }
  out.tilde_h = th;
  out.value = v;
  return out;
}

inline Matrix gram_G_tilde(std::span<const double> L) {
  Matrix G = gram_G(L);
  for (double& v : G.data()) v = std::sqrt(v);
  return G;
}

struct DppForms {
  std::optional<double> upper;  // (1/N) ln det(I - G~/N), undefined for N = 1
  double lower = 0.0;           // (2/N) ln det G~ - ln N
  double jitter = 0.0;          // largest jitter the log-dets needed
};

namespace detail {

/// ln det with a zero-jitter attempt first, then the 1e-10 ladder.
inline std::pair<double, double> logdet_with_fallback(const Matrix& m) {
  try {
    return {logdet_psd(m, 0.0), 0.0};
  } catch (const NotPositiveDefinite&) {
    const auto chol = cholesky_jittered(m, 1e-10);
    return {logdet_from_cholesky(chol.lower), chol.jitter};
  }
}

}  // namespace detail

inline DppForms repulsion_Rd(std::span<const double> L) {
  detail::require_column(L);
  const std::size_t n = L.size();
  const auto dn = static_cast<double>(n);
  const Matrix Gt = gram_G_tilde(L);
  DppForms out;
  const auto [ld, j1] = detail::logdet_with_fallback(Gt);
  out.lower = 2.0 / dn * ld - std::log(dn);
  out.jitter = j1;
  if (n >= 2) {
    Matrix A = Matrix::identity(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) A(i, j) -= Gt(i, j) / dn;
    }
    const auto [lu, j2] = detail::logdet_with_fallback(A);
    out.upper = lu / dn;
    out.jitter = std::max(out.jitter, j2);
  }
  return out;
}

/// ln E p - E ln p.
inline double jensen_gap(std::span<const double> L) { return bma_log_predictive(L) - mean(L); }

struct WitnessCheck {
  double at_lower_g = 0.0;  // every g_i at the smaller endpoint (largest implied gap)
  double at_upper_g = 0.0;  // every g_i at the larger endpoint (smallest implied gap)
  double gap = 0.0;
  bool bracketed = false;
};

/// Evaluates ln(1 + E[(p_i - p_bar)^2 / (2 g_i^2)]) with p_bar = exp(mean L)
/// at both endpoints of g_i in [min(p_i, p_bar), max(p_i, p_bar)] and checks
/// that the true gap lies between them. Computed with p scaled by exp(-max L),
/// which leaves every ratio unchanged.
inline WitnessCheck second_order_equality_witness(std::span<const double> L) {
  detail::require_column(L);
  const double mx = *std::max_element(L.begin(), L.end());
  const double pbar = std::exp(mean(L) - mx);
  double s_lo = 0.0, s_hi = 0.0;
  for (double l : L) {
    const double p = std::exp(l - mx);
    const double d2 = (p - pbar) * (p - pbar);
    const double gmin = std::min(p, pbar), gmax = std::max(p, pbar);
    s_lo += d2 / (2.0 * gmin * gmin);
    s_hi += d2 / (2.0 * gmax * gmax);
  }
  const auto n = static_cast<double>(L.size());
  WitnessCheck w;
  w.at_lower_g = std::log1p(s_lo / n);
  w.at_upper_g = std::log1p(s_hi / n);
  w.gap = jensen_gap(L);
  const double tol = 1e-12 * std::max(1.0, w.gap);
  w.bracketed = w.at_upper_g - tol <= w.gap && w.gap <= w.at_lower_g + tol;
  return w;
}

/// (ln a - ln b)^2 a b <= (a - b)^2, the squared form of
/// sqrt(ab) <= (a - b)/(ln a - ln b).
inline bool lemma_sqrt_check(double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) throw std::invalid_argument("lemma_sqrt_check: arguments must be positive");
  const double d = std::log(a) - std::log(b);
  return d * d * a * b <= (a - b) * (a - b) + 1e-12;
}

/// Var(p) / (2 max p^2) over raw likelihoods.
inline double predictive_variance_V(std::span<const double> p) {
  if (p.empty()) throw std::invalid_argument("predictive_variance_V: empty input");
  for (double v : p) {
    if (!(v > 0.0)) throw std::invalid_argument("predictive_variance_V: entries must be positive");
  }
  const double mx = *std::max_element(p.begin(), p.end());
  const double m = mean(p);
  double s = 0.0;
  for (double v : p) s += (v - m) * (v - m);
  return s / static_cast<double>(p.size()) / (2.0 * mx * mx);
}

/// The same quantity from log-likelihoods, via q_i = exp(L_i - max L).
inline double predictive_variance_V_log(std::span<const double> L) {
  detail::require_column(L);
  const double mx = *std::max_element(L.begin(), L.end());
  Vector q(L.size());
  for (std::size_t i = 0; i < L.size(); ++i) q[i] = std::exp(L[i] - mx);
  return predictive_variance_V(q);
}

/// One row of the per-datum diagnostics.
struct RepulsionRow {
  std::size_t datum_index = 0;
  Vector h_inv_sq;
  Vector h_m_inv_sq;
  double h_w_inv_sq = 0.0;
  double median_M = 0.0;
  double mean_loglik = 0.0;
  double bma = 0.0;
  double gap = 0.0;
  double R_h = 0.0;
  double R_hm = 0.0;
  double R_c = 0.0;
  double R_w = 0.0;
  double R_g = 0.0;
  double tilde_h = 0.0;
  std::optional<double> R_d_upper;
  double R_d_lower = 0.0;
  bool chain_ok = false;
};

struct RepulsionReport {
  std::vector<RepulsionRow> rows;

  double average(double RepulsionRow::*field) const {
    double s = 0.0;
    for (const auto& r : rows) s += r.*field;
    return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
  }
  bool all_chains_ok() const {
    return std::all_of(rows.begin(), rows.end(), [](const RepulsionRow& r) { return r.chain_ok; });
  }
};

inline constexpr double kChainTolerance = 1e-9;

/// mean <= mean + R(h) <= ln E p, with 1e-9 slack.
inline bool second_order_chain_holds(std::span<const double> L, double R) {
  const double m = mean(L);
  const double b = bma_log_predictive(L);
  return R >= -kChainTolerance && m + R <= b + kChainTolerance;
}

inline RepulsionRow repulsion_row(std::span<const double> L, std::size_t datum_index = 0) {
  RepulsionRow r;
  r.datum_index = datum_index;
  r.h_inv_sq = bandwidth_inv_sq(BandwidthKind::h(), L);
  r.h_m_inv_sq = bandwidth_inv_sq(BandwidthKind::h_m(), L);
  r.h_w_inv_sq = hw_inv_sq(L);
  r.median_M = second_moment(L);
  r.mean_loglik = mean(L);
  r.bma = bma_log_predictive(L);
  r.gap = r.bma - r.mean_loglik;
  r.R_h = repulsion_R(BandwidthKind::h(), L);
  r.R_hm = repulsion_R(BandwidthKind::h_m(), L);
  r.R_c = repulsion_Rc(L);
  r.R_w = repulsion_Rw(L);
  const auto g = repulsion_Rg(L);
  r.R_g = g.value;
  r.tilde_h = g.degenerate ? 0.0 : g.tilde_h;
  const auto d = repulsion_Rd(L);
  r.R_d_upper = d.upper;
  r.R_d_lower = d.lower;
  r.chain_ok = second_order_chain_holds(L, r.R_h);
  return r;
}

inline RepulsionReport repulsion_report(const Matrix& L) {
  RepulsionReport rep;
  for (std::size_t d = 0; d < L.cols(); ++d) rep.rows.push_back(repulsion_row(L.column(d), d));
  return rep;
}

inline void write_repulsion_csv(const RepulsionReport& rep, std::ostream& os) {
  os << "datum_index,gap,R_h,R_hm,R_c,R_w,R_g,R_d_upper,R_d_lower,chain_ok\n";
  for (const auto& r : rep.rows) {
    os << r.datum_index << ',' << format_real(r.gap) << ',' << format_real(r.R_h) << ',' << format_real(r.R_hm) << ','
       << format_real(r.R_c) << ',' << format_real(r.R_w) << ',' << format_real(r.R_g) << ','
       << (r.R_d_upper ? format_real(*r.R_d_upper) : std::string("nan")) << ',' << format_real(r.R_d_lower) << ','
       << (r.chain_ok ? 1 : 0) << '\n';
  }
}

}  // namespace pvi
