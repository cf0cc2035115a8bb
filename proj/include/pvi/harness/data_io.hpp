#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pvi/dataset.hpp"
#include "pvi/errors.hpp"
#include "pvi/numerics.hpp"

namespace pvi::harness {

/// round(0.6 n) inputs from U(0, 0.6), the rest from U(0, 0.8);
/// y = x + sin(4(x+e)) + sin(13(x+e)) + e with e ~ N(0, 0.03^2).
/// For n = 20 this is 12 and 8 points.
inline Dataset toy_regression(Rng& rng, std::size_t n = 20) {
  const auto first = static_cast<std::size_t>(std::llround(0.6 * static_cast<double>(n)));
  Matrix x(n, 1), y(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double xi = i < first ? rng.uniform(0.0, 0.6) : rng.uniform(0.0, 0.8);
    const double e = rng.normal(0.0, 0.03);
    x(i, 0) = xi;
    y(i, 0) = xi + std::sin(4.0 * (xi + e)) + std::sin(13.0 * (xi + e)) + e;
  }
  return Dataset(std::move(x), std::move(y));
}

/// Offline stand-in for a 13-feature regression table: correlated gaussian
/// features, a nonlinear target and heteroscedastic noise.
inline Dataset synthetic_regression(Rng& rng, std::size_t n = 506, std::size_t features = 13) {
  Matrix x(n, features), y(n, 1);
  Vector w(features);
  for (std::size_t f = 0; f < features; ++f) w[f] = rng.normal(0.0, 1.0) / std::sqrt(static_cast<double>(features));
  for (std::size_t i = 0; i < n; ++i) {
    const double common = rng.normal();
    double lin = 0.0;
    for (std::size_t f = 0; f < features; ++f) {
      x(i, f) = 0.6 * common + 0.8 * rng.normal();
      lin += w[f] * x(i, f);
    }
    const double noise = (0.3 + 0.2 * std::abs(x(i, 0))) * rng.normal();
    y(i, 0) = 22.0 + 6.0 * lin + 3.0 * std::sin(2.0 * x(i, 1)) + 2.0 * x(i, 2) * x(i, 3) + 3.0 * noise;
  }
  return Dataset(std::move(x), std::move(y));
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    const auto a = s.find_first_not_of(" \t");
    const auto b = s.find_last_not_of(" \t");
    s = a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  }
  return out;
}

}  // namespace detail

/// Parses a numeric CSV with a header row. `target_column` names the target;
/// an empty name selects the last column. Rows and columns in errors are
/// 1-based, counting the header as row 1.
inline Dataset parse_csv_regression(std::istream& is, const std::string& target_column) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("csv: missing header", 1, 1);
  const auto header = detail::split_csv_line(line);
  std::size_t target = header.size() - 1;
  if (!target_column.empty()) {
    const auto it = std::find(header.begin(), header.end(), target_column);
    if (it == header.end()) throw MissingColumn("csv: no column named '" + target_column + "'");
    target = static_cast<std::size_t>(it - header.begin());
  }
  if (header.size() < 2) throw ParseError("csv: need at least one feature and a target", 1, header.size());
  std::vector<double> xs, ys;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw ParseError("csv: expected " + std::to_string(header.size()) + " fields", row, cells.size());
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      double v = 0.0;
      const auto& s = cells[c];
      const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
        throw ParseError("csv: non-numeric value '" + s + "'", row, c + 1);
      }
      (c == target ? ys : xs).push_back(v);
    }
  }
  const std::size_t n = ys.size();
  if (n == 0) throw ParseError("csv: no data rows", row, 1);
  return Dataset(Matrix(n, header.size() - 1, std::move(xs)), Matrix(n, 1, std::move(ys)));
}

inline Dataset load_csv_regression(const std::string& path, const std::string& target_column) {
  std::ifstream is(path);
  if (!is) throw Error("csv: cannot open '" + path + "'");
  return parse_csv_regression(is, target_column);
}

/// Train/test index partition: a seeded shuffle, the first
/// round(test_fraction * D) indices are the test set.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t D, double test_fraction,
                                                                                   Rng& rng) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw std::invalid_argument("split: test fraction in (0,1)");
  std::vector<std::size_t> idx(D);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(D)));
  n_test = std::clamp<std::size_t>(n_test, 1, D - 1);
  std::vector<std::size_t> test(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  return {train, test};
}

/// z-scores inputs and targets of both sets with the training statistics
/// (population standard deviation; constant columns keep scale 1).
inline void standardize_with_train(Dataset& train, Dataset& test) {
  const std::size_t D = train.size(), F = train.inputs.cols();
  Vector mu(F, 0.0), sd(F, 0.0);
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t f = 0; f < F; ++f) mu[f] += train.inputs(d, f);
  }
  for (auto& v : mu) v /= static_cast<double>(D);
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t f = 0; f < F; ++f) sd[f] += (train.inputs(d, f) - mu[f]) * (train.inputs(d, f) - mu[f]);
  }
  for (auto& v : sd) v = std::sqrt(v / static_cast<double>(D));
  for (auto& v : sd) {
    if (!(v > 0.0)) v = 1.0;
  }
  double ym = 0.0, ys = 0.0;
  for (std::size_t d = 0; d < D; ++d) ym += train.targets(d, 0);
  ym /= static_cast<double>(D);
  for (std::size_t d = 0; d < D; ++d) ys += (train.targets(d, 0) - ym) * (train.targets(d, 0) - ym);
  ys = std::sqrt(ys / static_cast<double>(D));
  if (!(ys > 0.0)) ys = 1.0;
  for (Dataset* ds : {&train, &test}) {
    for (std::size_t d = 0; d < ds->size(); ++d) {
      for (std::size_t f = 0; f < F; ++f) ds->inputs(d, f) = (ds->inputs(d, f) - mu[f]) / sd[f];
      ds->targets(d, 0) = (ds->targets(d, 0) - ym) / ys;
    }
    ds->input_mean = mu;
    ds->input_scale = sd;
    ds->target_mean = ym;
    ds->target_scale = ys;
  }
}

struct Split {
  Dataset train;
  Dataset test;
};

inline Split split_dataset(const Dataset& data, double test_fraction, bool standardize, Rng& rng) {
  const auto [tr, te] = split_indices(data.size(), test_fraction, rng);
  Split s{data.subset(tr), data.subset(te)};
  if (standardize) standardize_with_train(s.train, s.test);
  return s;
}

}  // namespace pvi::harness
