#pragma once

// Experiment drivers: the toy regression protocol with credible-interval
// grids, and the split-repeated regression benchmark.

#include <array>
#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "pvi/ensemble.hpp"
#include "pvi/harness/config.hpp"
#include "pvi/harness/data_io.hpp"
#include "pvi/jensen.hpp"
#include "pvi/pacbayes.hpp"
#include "pvi/updates.hpp"

namespace pvi::harness {

struct IntervalRow {
  double x = 0.0;
  double mean = 0.0;
  double predictive_lo = 0.0;
  double predictive_hi = 0.0;
  double mean_lo = 0.0;
  double mean_hi = 0.0;

  double epistemic_width() const { return mean_hi - mean_lo; }
  double total_width() const { return predictive_hi - predictive_lo; }
};

/// 95% intervals at a 1-d input. The mean-estimate interval spans the 2.5 and
/// 97.5 percentiles of the per-particle means. The predictive interval takes
/// the same percentiles of the mixture sampled with `draws` gaussian draws per
/// particle, widened to contain the mean-estimate interval.
inline IntervalRow interval_at(const ParticleEnsemble& ens, double x, std::size_t draws, Rng& rng) {
  if (ens.spec.likelihood.family != LikelihoodFamily::gaussian || ens.spec.input_dim != 1) {
    throw WrongLikelihoodFamily("interval grid needs a 1-d gaussian regression model");
  }
  const std::array<double, 1> in{x};
  Vector means, samples;
  for (const auto& p : ens.particles) {
    const double f = forward(ens.spec, p, in)[0];
    const double s = noise_sigma(ens.spec, p);
    means.push_back(f);
    for (std::size_t k = 0; k < draws; ++k) samples.push_back(f + s * rng.normal());
  }
  IntervalRow r;
  r.x = x;
  r.mean = mean(means);
  r.mean_lo = percentile(means, 0.025);
  r.mean_hi = percentile(means, 0.975);
  r.predictive_lo = std::min(percentile(samples, 0.025), r.mean_lo);
  r.predictive_hi = std::max(percentile(samples, 0.975), r.mean_hi);
  return r;
}

/// interval_at for every input in xs, in the given order.
inline std::vector<IntervalRow> interval_grid(const ParticleEnsemble& ens, const std::vector<double>& xs,
                                              std::size_t draws, Rng& rng) {
  std::vector<IntervalRow> rows;
  rows.reserve(xs.size());
  for (double x : xs) rows.push_back(interval_at(ens, x, draws, rng));
  return rows;
}

/// x = -0.5 + 0.01 k for k = 0..200, plus 0.3 and 1.2 exactly, ascending.
inline std::vector<double> toy_grid_points() {
  std::vector<double> xs;
  for (int k = 0; k <= 200; ++k) xs.push_back(-0.5 + 0.01 * k);
  for (double extra : {0.3, 1.2}) {
    if (std::none_of(xs.begin(), xs.end(), [&](double v) { return v == extra; })) xs.push_back(extra);
  }
  std::sort(xs.begin(), xs.end());
  return xs;
}

inline void write_interval_csv(const std::vector<IntervalRow>& rows, std::ostream& os) {
  os << "x,mean,predictive_lo,predictive_hi,mean_lo,mean_hi\n";
  for (const auto& r : rows) {
    os << format_real(r.x) << ',' << format_real(r.mean) << ',' << format_real(r.predictive_lo) << ','
       << format_real(r.predictive_hi) << ',' << format_real(r.mean_lo) << ',' << format_real(r.mean_hi) << '\n';
  }
}

struct ToyResult {
  Dataset data;
  TrainResult training;
  std::vector<IntervalRow> grid;
  RepulsionReport train_report;
  double min_pairwise_distance = 0.0;

  const IntervalRow& at(double x) const {
    for (const auto& r : grid) {
      if (r.x == x) return r;
    }
    throw std::out_of_range("toy grid has no row at the requested x");
  }
};

inline double min_pairwise_distance(const ParticleEnsemble& ens) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < ens.size(); ++i) {
    for (std::size_t j = i + 1; j < ens.size(); ++j) best = std::min(best, std::sqrt(squared_distance(ens.particles[i], ens.particles[j])));
  }
  return best;
}

/// Toy protocol: data, initialization, training and the interval grid each
/// draw from their own sub-stream of the seed.
inline ToyResult run_toy(const Config& cfg) {
  const Rng root(cfg.seed);
  Rng data_rng = root.split(1), init_rng = root.split(2), train_rng = root.split(3), grid_rng = root.split(4);
  ToyResult out;
  out.data = toy_regression(data_rng, cfg.data.toy_points);
  ModelSpec spec = cfg.model;
  spec.input_dim = 1;
  const auto ens = ParticleEnsemble::initialize(spec, cfg.training.particles, init_rng);
  out.training = train(cfg.rule, ens, out.data, cfg.prior, cfg.training.epochs, cfg.training.batch_size, train_rng);
  out.grid = interval_grid(out.training.ensemble, toy_grid_points(), 200, grid_rng);
  out.train_report = repulsion_report(loglik_matrix(out.training.ensemble, out.data));
  out.min_pairwise_distance = min_pairwise_distance(out.training.ensemble);
  return out;
}

struct RegressionRun {
  Metrics test;
  RepulsionReport train_report;
  BoundReport bound;
  TrainResult training;
  std::vector<IntervalRow> grid;
};

/// Trains on one split and evaluates on its test set.
inline RegressionRun run_regression_split(const Config& cfg, const Dataset& train_set, const Dataset& test_set,
                                          std::uint64_t stream) {
  const Rng root(cfg.seed);
  Rng init_rng = root.split(100 + 2 * stream), train_rng = root.split(101 + 2 * stream);
  ModelSpec spec = cfg.model;
  spec.input_dim = train_set.inputs.cols();
  const auto ens = ParticleEnsemble::initialize(spec, cfg.training.particles, init_rng);
  RegressionRun run;
  run.training = train(cfg.rule, ens, train_set, cfg.prior, cfg.training.epochs, cfg.training.batch_size, train_rng);
  run.test = metrics(run.training.ensemble, test_set);
  const Matrix L = loglik_matrix(run.training.ensemble, train_set);
  run.train_report = repulsion_report(L);
  run.bound = assemble_bound(BoundVariant::theorem4, L, kl_ensemble_prior(run.training.ensemble, cfg.prior), cfg.bound);
  if (spec.input_dim == 1 && spec.likelihood.family == LikelihoodFamily::gaussian) {
    Rng grid_rng = root.split(10'000 + stream);
    run.grid = interval_grid(run.training.ensemble, toy_grid_points(), 200, grid_rng);
  }
  return run;
}

inline Dataset load_configured_data(const Config& cfg) {
  const Rng root(cfg.seed);
  Rng rng = root.split(1);
  if (cfg.data.source == "csv") return load_csv_regression(cfg.data.path, cfg.data.target_column);
  if (cfg.data.source == "synthetic") return synthetic_regression(rng, cfg.data.synthetic_points);
  return toy_regression(rng, cfg.data.toy_points);
}

struct RegressionSummary {
  std::vector<RegressionRun> runs;
  double mean_rmse = 0.0;
  double mean_nll = 0.0;
  double std_rmse = 0.0;
  double std_nll = 0.0;
};

/// Repeats run_regression_split over cfg.data.splits seeded 90/10 splits.
inline RegressionSummary run_regression_experiment(const Config& cfg, const Dataset& data) {
  RegressionSummary s;
  const Rng root(cfg.seed);
  Vector rmse, nll;
  for (std::size_t k = 0; k < cfg.data.splits; ++k) {
    Rng split_rng = root.split(1000 + k);
    const auto sp = split_dataset(data, cfg.data.test_fraction, cfg.data.standardize, split_rng);
    s.runs.push_back(run_regression_split(cfg, sp.train, sp.test, k));
    rmse.push_back(s.runs.back().test.rmse);
    nll.push_back(s.runs.back().test.test_nll);
  }
  auto sd = [](const Vector& v) {
    const double m = mean(v);
    double q = 0.0;
    for (double x : v) q += (x - m) * (x - m);
    return v.size() > 1 ? std::sqrt(q / static_cast<double>(v.size() - 1)) : 0.0;
  };
  s.mean_rmse = mean(rmse);
  s.mean_nll = mean(nll);
  s.std_rmse = sd(rmse);
  s.std_nll = sd(nll);
  return s;
}

}  // namespace pvi::harness
