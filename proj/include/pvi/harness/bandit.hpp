#pragma once

// Contextual bandits with Thompson sampling over a particle ensemble.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "pvi/ensemble.hpp"
#include "pvi/harness/config.hpp"
#include "pvi/harness/data_io.hpp"
#include "pvi/updates.hpp"

namespace pvi::harness {

/// Linear-context environment: mean reward w_a . x + c_a for action a,
/// observed with gaussian noise. Contexts are standard gaussian.
struct LinearBanditEnv {
  std::size_t context_dim = 4;
  std::size_t num_actions = 4;
  double noise = 0.5;
  Matrix weights;  // num_actions x context_dim
  Vector offsets;  // num_actions

  static LinearBanditEnv make(std::size_t context_dim, std::size_t num_actions, double noise, Rng& rng) {
    LinearBanditEnv env;
    env.context_dim = context_dim;
    env.num_actions = num_actions;
    env.noise = noise;
    env.weights = Matrix(num_actions, context_dim);
    env.offsets.assign(num_actions, 0.0);
    for (double& w : env.weights.data()) w = rng.normal();
    for (double& c : env.offsets) c = 0.5 * rng.normal();
    return env;
  }

  double mean_reward(std::span<const double> ctx, std::size_t a) const {
    double s = offsets[a];
    for (std::size_t k = 0; k < context_dim; ++k) s += weights(a, k) * ctx[k];
    return s;
  }

  double optimal(std::span<const double> ctx) const {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < num_actions; ++a) best = std::max(best, mean_reward(ctx, a));
    return best;
  }
};

/// Pre-drawn contexts and per-action noise, so every policy run against the
/// stream sees exactly the same rewards for the same choices.
struct BanditStream {
  Matrix contexts;  // T x context_dim
  Matrix noise;     // T x num_actions

  static BanditStream draw(const LinearBanditEnv& env, std::size_t T, Rng& rng) {
    BanditStream s{Matrix(T, env.context_dim), Matrix(T, env.num_actions)};
    for (double& v : s.contexts.data()) v = rng.normal();
    for (double& v : s.noise.data()) v = env.noise * rng.normal();
    return s;
  }

  std::size_t steps() const { return contexts.rows(); }

  double reward(const LinearBanditEnv& env, std::size_t t, std::size_t a) const {
    return env.mean_reward(contexts.row(t), a) + noise(t, a);
  }
};

/// Everything a policy run needs, precomputed per step: the context, the
/// expected reward of every action and the noise added to an observed reward.
struct BanditTable {
  Matrix contexts;  // T x context_dim
  Matrix expected;  // T x num_actions
  Matrix noise;     // T x num_actions

  std::size_t steps() const { return contexts.rows(); }
  std::size_t context_dim() const { return contexts.cols(); }
  std::size_t num_actions() const { return expected.cols(); }

  double optimal(std::size_t t) const {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < num_actions(); ++a) best = std::max(best, expected(t, a));
    return best;
  }
  double reward(std::size_t t, std::size_t a) const { return expected(t, a) + noise(t, a); }

  static BanditTable from_env(const LinearBanditEnv& env, const BanditStream& stream) {
    BanditTable tab{stream.contexts, Matrix(stream.steps(), env.num_actions), stream.noise};
    for (std::size_t t = 0; t < stream.steps(); ++t) {
      for (std::size_t a = 0; a < env.num_actions; ++a) tab.expected(t, a) = env.mean_reward(stream.contexts.row(t), a);
    }
    return tab;
  }

  /// The rows in the given order (used to reshuffle a fixed table per seed).
  BanditTable reordered(std::span<const std::size_t> order) const {
    BanditTable tab{Matrix(order.size(), context_dim()), Matrix(order.size(), num_actions()),
                    Matrix(order.size(), num_actions())};
    for (std::size_t t = 0; t < order.size(); ++t) {
      for (std::size_t k = 0; k < context_dim(); ++k) tab.contexts(t, k) = contexts(order[t], k);
      for (std::size_t a = 0; a < num_actions(); ++a) {
        tab.expected(t, a) = expected(order[t], a);
        tab.noise(t, a) = noise(order[t], a);
      }
    }
    return tab;
  }
};

/// Contextual-bandit CSV: a header row, then one row per round. Columns named
/// reward_<a> hold the reward of action a (in order of appearance); every
/// other column is a context feature. Rewards are taken as observed, so the
/// noise table is zero and regret is measured against the best listed reward.
inline BanditTable parse_bandit_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("bandit csv: missing header", 1, 1);
  const auto header = detail::split_csv_line(line);
  std::vector<std::size_t> ctx_cols, reward_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    (header[c].rfind("reward_", 0) == 0 ? reward_cols : ctx_cols).push_back(c);
  }
  if (reward_cols.size() < 2) throw MissingColumn("bandit csv: need at least two reward_<a> columns");
  if (ctx_cols.empty()) throw MissingColumn("bandit csv: need at least one context column");
  std::vector<double> ctx, rew;
  std::size_t row = 1, n = 0;
  while (std::getline(is, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw ParseError("bandit csv: expected " + std::to_string(header.size()) + " fields", row, cells.size());
    }
    std::vector<double> vals(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto& s = cells[c];
      const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), vals[c]);
      if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(vals[c])) {
        throw ParseError("bandit csv: non-numeric value '" + s + "'", row, c + 1);
      }
    }
    for (std::size_t c : ctx_cols) ctx.push_back(vals[c]);
    for (std::size_t c : reward_cols) rew.push_back(vals[c]);
    ++n;
  }
  if (n == 0) throw ParseError("bandit csv: no data rows", row, 1);
  return BanditTable{Matrix(n, ctx_cols.size(), std::move(ctx)), Matrix(n, reward_cols.size(), std::move(rew)),
                     Matrix(n, reward_cols.size(), 0.0)};
}

inline BanditTable load_bandit_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("bandit csv: cannot open '" + path + "'");
  return parse_bandit_csv(is);
}

/// Per-action block features: the context (and a constant 1) placed in the
/// block of the chosen action, zeros elsewhere.
inline Vector bandit_features(std::span<const double> ctx, std::size_t a, std::size_t num_actions) {
  const std::size_t block = ctx.size() + 1;
  Vector f(block * num_actions, 0.0);
  std::copy(ctx.begin(), ctx.end(), f.begin() + static_cast<std::ptrdiff_t>(a * block));
  f[a * block + ctx.size()] = 1.0;
  return f;
}

inline ModelSpec bandit_model(const BanditConfig& cfg, std::size_t context_dim, std::size_t num_actions) {
  ModelSpec spec;
  spec.input_dim = (context_dim + 1) * num_actions;
  spec.hidden = cfg.hidden;
  spec.output_dim = 1;
  spec.activation = Activation::relu;
  spec.likelihood = Likelihood::gaussian(cfg.noise, false);
  return spec;
}

/// Samples one particle uniformly and returns the action its predicted
/// reward ranks highest (lowest index on ties).
inline std::size_t thompson_step(const ParticleEnsemble& ens, std::span<const double> ctx, std::size_t num_actions,
                                 Rng& rng) {
  const auto& theta = ens.particles[rng.index(ens.size())];
  std::size_t best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < num_actions; ++a) {
    const double v = forward(ens.spec, theta, bandit_features(ctx, a, num_actions))[0];
    if (v > best_v) {
      best_v = v;
      best = a;
    }
  }
  return best;
}

struct RegretTrace {
  std::vector<std::size_t> actions;
  Vector rewards;
  Vector optimal_rewards;
  Vector cumulative_regret;      // pseudo-regret, from expected rewards
  Vector uniform_cumulative_regret;
  double relative_regret = 0.0;  // final cumulative regret / uniform's

  double final_regret() const { return cumulative_regret.empty() ? 0.0 : cumulative_regret.back(); }
};

struct RetrainSchedule {
  std::size_t every = 50;
  std::size_t steps = 100;
};

/// Uniform-action baseline on the same table; returns its cumulative
/// pseudo-regret per step.
inline Vector uniform_baseline(const BanditTable& tab, Rng& rng) {
  Vector cum;
  double total = 0.0;
  for (std::size_t t = 0; t < tab.steps(); ++t) {
    const std::size_t a = rng.index(tab.num_actions());
    total += tab.optimal(t) - tab.expected(t, a);
    cum.push_back(total);
  }
  return cum;
}

/// Thompson sampling with periodic retraining on the replay buffer. The
/// ensemble starts from `ens`, is retrained every schedule.every steps for
/// schedule.steps full-batch updates, and the uniform baseline runs on the
/// same table for normalization.
inline RegretTrace bandit_loop(const UpdateRule& rule, ParticleEnsemble ens, const Prior& prior,
                               const BanditTable& tab, const RetrainSchedule& schedule, Rng& rng) {
  if (tab.steps() == 0) throw std::invalid_argument("bandit_loop: need at least one step");
  if (ens.spec.input_dim != (tab.context_dim() + 1) * tab.num_actions()) {
    throw DimensionMismatch("bandit_loop: model input does not match the block features");
  }
  Rng act_rng = rng.split(1), train_rng = rng.split(2), uniform_rng = rng.split(3);
  RegretTrace trace;
  std::vector<double> xs, ys;
  const std::size_t P = ens.spec.input_dim;
  double total = 0.0;
  for (std::size_t t = 0; t < tab.steps(); ++t) {
    if (t > 0 && schedule.every > 0 && t % schedule.every == 0 && schedule.steps > 0) {
      const std::size_t n = ys.size();
      Dataset buffer(Matrix(n, P, xs), Matrix(n, 1, ys));
      ens = train(rule, std::move(ens), buffer, prior, schedule.steps, 0, train_rng).ensemble;
    }
    const auto ctx = tab.contexts.row(t);
    const std::size_t a = thompson_step(ens, ctx, tab.num_actions(), act_rng);
    const double r = tab.reward(t, a);
    const double opt = tab.optimal(t);
    total += opt - tab.expected(t, a);
    trace.actions.push_back(a);
    trace.rewards.push_back(r);
    trace.optimal_rewards.push_back(opt);
    trace.cumulative_regret.push_back(total);
    const Vector f = bandit_features(ctx, a, tab.num_actions());
    xs.insert(xs.end(), f.begin(), f.end());
    ys.push_back(r);
  }
  trace.uniform_cumulative_regret = uniform_baseline(tab, uniform_rng);
  const double u = trace.uniform_cumulative_regret.back();
  trace.relative_regret = u > 0.0 ? trace.final_regret() / u : 0.0;
  return trace;
}

struct BanditComparison {
  std::vector<std::string> rules;
  Matrix relative;                       // seeds x rules
  std::vector<RegretTrace> first_seed;   // one trace per rule at seed cfg.seed
};

/// The table a seed plays: a fresh synthetic environment and stream, or the
/// configured CSV with its rows shuffled and truncated to cfg.bandit.steps.
inline BanditTable bandit_table_for_seed(const Config& cfg, const Rng& root, const BanditTable* csv) {
  Rng env_rng = root.split(1), stream_rng = root.split(2);
  if (csv) {
    std::vector<std::size_t> order(csv->steps());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), stream_rng.engine());
    order.resize(std::min(order.size(), cfg.bandit.steps));
    return csv->reordered(order);
  }
  const auto env = LinearBanditEnv::make(cfg.bandit.context_dim, cfg.bandit.num_actions, cfg.bandit.noise, env_rng);
  return BanditTable::from_env(env, BanditStream::draw(env, cfg.bandit.steps, stream_rng));
}

/// Runs each rule on the same table per seed. Seeds are cfg.seed + k; the
/// table and the initial ensemble are shared by all rules within a seed.
inline BanditComparison compare_bandit_rules(const Config& cfg, const std::vector<UpdateRule>& rules,
                                             const std::vector<std::string>& names, std::size_t particles) {
  BanditComparison cmp;
  cmp.rules = names;
  cmp.relative = Matrix(cfg.bandit.seeds, rules.size());
  std::optional<BanditTable> csv;
  if (cfg.bandit.source == "csv") csv = load_bandit_csv(cfg.bandit.path);
  for (std::size_t k = 0; k < cfg.bandit.seeds; ++k) {
    const Rng root(cfg.seed + k);
    const BanditTable tab = bandit_table_for_seed(cfg, root, csv ? &*csv : nullptr);
    const ModelSpec spec = bandit_model(cfg.bandit, tab.context_dim(), tab.num_actions());
    Rng init_rng = root.split(3);
    const auto ens = ParticleEnsemble::initialize(spec, particles, init_rng);
    for (std::size_t r = 0; r < rules.size(); ++r) {
      Rng loop_rng = root.split(4);
      const auto trace =
          bandit_loop(rules[r], ens, cfg.prior, tab, {cfg.bandit.retrain_every, cfg.bandit.retrain_steps}, loop_rng);
      cmp.relative(k, r) = trace.relative_regret;
      if (k == 0) cmp.first_seed.push_back(trace);
    }
  }
  return cmp;
}

inline void write_regret_csv(const RegretTrace& trace, std::ostream& os) {
  os << "step,action,reward,optimal_reward,cumulative_regret,uniform_cumulative_regret\n";
  for (std::size_t t = 0; t < trace.actions.size(); ++t) {
    os << t << ',' << trace.actions[t] << ',' << format_real(trace.rewards[t]) << ','
       << format_real(trace.optimal_rewards[t]) << ',' << format_real(trace.cumulative_regret[t]) << ','
       << format_real(trace.uniform_cumulative_regret[t]) << '\n';
  }
}

}  // namespace pvi::harness
