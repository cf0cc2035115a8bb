#pragma once

// Experiment configuration. The on-disk format is INI (key = value lines,
// [section] headers), versioned by a top-level `format` key:
//
//   format = pvi-config/1
//   seed = 1
//
//   [model]    input_dim, hidden (comma list), activation, likelihood
//              (gaussian|categorical), sigma, learnable_sigma, num_classes
//   [prior]    mean, variance
//   [rule]     name, bandwidth (h|h_m|h_median|h_w), median_M, kernel
//              (median|fixed), kernel_h2, step_size, optimizer (adam|plain),
//              beta1, beta2, adam_eps, gfsf_ridge, dpp_delta,
//              function_prior_samples
//   [training] particles, epochs, batch_size (0 = automatic)
//   [bound]    xi, c, psi, bandwidth
//   [data]     source (toy|csv|synthetic), path, target_column, standardize,
//              test_fraction, splits, toy_points, synthetic_points
//   [bandit]   source (synthetic|csv), path, context_dim, num_actions, steps,
//              retrain_every, retrain_steps, noise, seeds, particles,
//              step_size, hidden (comma list)
//   [verify]   trials
//
// Missing keys keep their defaults; unknown sections or keys are rejected.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "pvi/errors.hpp"
#include "pvi/jensen.hpp"
#include "pvi/models.hpp"
#include "pvi/pacbayes.hpp"
#include "pvi/updates.hpp"

namespace pvi::harness {

inline constexpr const char* kConfigFormat = "pvi-config/1";

struct DataConfig {
  std::string source = "toy";
  std::string path;
  std::string target_column;
  bool standardize = true;
  double test_fraction = 0.1;
  std::size_t splits = 1;
  std::size_t toy_points = 20;
  std::size_t synthetic_points = 506;
};

struct TrainingConfig {
  std::size_t particles = 50;
  std::size_t epochs = 2000;
  std::size_t batch_size = 0;
};

struct BanditConfig {
  std::string source = "synthetic";
  std::string path;
  std::size_t context_dim = 4;
  std::size_t num_actions = 4;
  std::size_t steps = 500;
  std::size_t retrain_every = 50;
  std::size_t retrain_steps = 100;
  double noise = 0.5;
  std::size_t seeds = 10;
  std::size_t particles = 10;
  double step_size = 0.01;
  std::vector<std::size_t> hidden;
};

struct Config {
  std::uint64_t seed = 1;
  ModelSpec model;
  Prior prior;
  UpdateRule rule;
  TrainingConfig training;
  BoundConfig bound;
  DataConfig data;
  BanditConfig bandit;
  std::size_t verify_trials = 1000;
};

/// The toy protocol: 1-50-50-1 rectifier net, sigma fixed at 0.2, VAR(h),
/// Adam with step 0.001, 50 particles.
inline Config default_config() {
  Config c;
  c.model.input_dim = 1;
  c.model.hidden = {50, 50};
  c.model.output_dim = 1;
  c.model.activation = Activation::relu;
  c.model.likelihood = Likelihood::gaussian(0.2, false);
  c.rule.tag = RuleTag::var;
  c.rule.bandwidth = BandwidthKind::h();
  c.rule.step_size = 0.001;
  return c;
}

namespace detail {

inline std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto a = tok.find_first_not_of(" \t");
    if (a == std::string::npos) continue;
    const auto b = tok.find_last_not_of(" \t");
    tok = tok.substr(a, b - a + 1);
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(tok, &pos);
      if (pos != tok.size()) throw std::invalid_argument(tok);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("expected a comma-separated list of counts, got '" + s + "'");
    }
  }
  return out;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("expected a boolean, got '" + s + "'");
}

inline const std::map<std::string, std::set<std::string>>& schema() {
  static const std::map<std::string, std::set<std::string>> s{
      {"", {"format", "seed"}},
      {"model", {"input_dim", "hidden", "activation", "likelihood", "sigma", "learnable_sigma", "num_classes"}},
      {"prior", {"mean", "variance"}},
      {"rule",
       {"name", "bandwidth", "median_M", "kernel", "kernel_h2", "step_size", "optimizer", "beta1", "beta2", "adam_eps",
        "gfsf_ridge", "dpp_delta", "function_prior_samples"}},
      {"training", {"particles", "epochs", "batch_size"}},
      {"bound", {"xi", "c", "psi", "bandwidth"}},
      {"data",
       {"source", "path", "target_column", "standardize", "test_fraction", "splits", "toy_points",
        "synthetic_points"}},
      {"bandit",
       {"source", "path", "context_dim", "num_actions", "steps", "retrain_every", "retrain_steps", "noise", "seeds", "particles", "step_size",
        "hidden"}},
      {"verify", {"trials"}}};
  return s;
}

}  // namespace detail

/// Parses a configuration from an INI stream on top of default_config().
inline Config parse_config(std::istream& is) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  const auto& sch = detail::schema();
  for (const auto& [key, node] : tree) {
    if (node.empty()) {
      if (!sch.at("").count(key)) throw ConfigError("config: unknown top-level key '" + key + "'");
      continue;
    }
    const auto it = sch.find(key);
    if (it == sch.end() || key.empty()) throw ConfigError("config: unknown section [" + key + "]");
    for (const auto& [sub, leaf] : node) {
      if (!it->second.count(sub)) throw ConfigError("config: unknown key '" + sub + "' in [" + key + "]");
    }
  }
  const auto format = tree.get<std::string>("format", kConfigFormat);
  if (format != kConfigFormat) throw ConfigError("config: unsupported format '" + format + "'");

  Config c = default_config();
  auto get = [&](const std::string& path, auto fallback) {
    using T = decltype(fallback);
    const auto child = tree.get_child_optional(path);
    if (!child) return fallback;
    const std::string raw = child->data();
    if (std::is_unsigned_v<T> && raw.find('-') != std::string::npos) {
      throw ConfigError("config: bad value for '" + path + "'");
    }
    try {
      return child->get_value<T>();
    } catch (const pt::ptree_bad_data&) {
      throw ConfigError("config: bad value for '" + path + "'");
    }
  };
  auto get_str = [&](const std::string& path, const std::string& fallback) {
    return tree.get<std::string>(path, fallback);
  };

  c.seed = get("seed", c.seed);

  c.model.input_dim = get("model.input_dim", c.model.input_dim);
  c.model.hidden = detail::parse_size_list(get_str("model.hidden", detail::join_sizes(c.model.hidden)));
  c.model.activation = parse_activation(get_str("model.activation", activation_name(c.model.activation)));
  const std::string lik = get_str("model.likelihood", "gaussian");
  if (lik == "gaussian") {
    c.model.likelihood = Likelihood::gaussian(get("model.sigma", c.model.likelihood.sigma),
                                              detail::parse_bool(get_str("model.learnable_sigma", "false")));
    c.model.output_dim = 1;
  } else if (lik == "categorical") {
    const auto k = get("model.num_classes", std::size_t{2});
    c.model.likelihood = Likelihood::categorical(k);
    c.model.output_dim = k;
  } else {
    throw ConfigError("config: unknown likelihood '" + lik + "'");
  }

  c.prior.mean = get("prior.mean", c.prior.mean);
  c.prior.variance = get("prior.variance", c.prior.variance);
  if (!(c.prior.variance > 0.0)) throw ConfigError("config: prior.variance must be positive");

  c.rule.tag = parse_rule(get_str("rule.name", rule_name(c.rule.tag)));
  const auto bw = parse_bandwidth(get_str("rule.bandwidth", bandwidth_name(c.rule.bandwidth.tag)));
  if (bw == BandwidthTag::h_median) {
    const double M = get("rule.median_M", 0.0);
    c.rule.bandwidth = BandwidthKind::h_median(M > 0.0 ? std::optional<double>(M) : std::nullopt);
  } else {
    c.rule.bandwidth = BandwidthKind{bw, std::nullopt};
  }
  const std::string kernel = get_str("rule.kernel", "median");
  if (kernel != "median" && kernel != "fixed") throw ConfigError("config: rule.kernel must be median or fixed");
  c.rule.kernel.median_trick = kernel == "median";
  c.rule.kernel.fixed_h2 = get("rule.kernel_h2", c.rule.kernel.fixed_h2);
  c.rule.step_size = get("rule.step_size", c.rule.step_size);
  const std::string opt = get_str("rule.optimizer", "adam");
  if (opt != "adam" && opt != "plain") throw ConfigError("config: rule.optimizer must be adam or plain");
  c.rule.optimizer.adaptive = opt == "adam";
  c.rule.optimizer.beta1 = get("rule.beta1", c.rule.optimizer.beta1);
  c.rule.optimizer.beta2 = get("rule.beta2", c.rule.optimizer.beta2);
  c.rule.optimizer.eps = get("rule.adam_eps", c.rule.optimizer.eps);
  c.rule.gfsf_ridge = get("rule.gfsf_ridge", c.rule.gfsf_ridge);
  c.rule.dpp_delta = get("rule.dpp_delta", c.rule.dpp_delta);
  c.rule.function_prior_samples = get("rule.function_prior_samples", c.rule.function_prior_samples);

  c.training.particles = get("training.particles", c.training.particles);
  c.training.epochs = get("training.epochs", c.training.epochs);
  c.training.batch_size = get("training.batch_size", c.training.batch_size);

  c.bound.xi = get("bound.xi", c.bound.xi);
  c.bound.c = get("bound.c", c.bound.c);
  c.bound.psi_constant = get("bound.psi", c.bound.psi_constant);
  c.bound.bandwidth = parse_bandwidth(get_str("bound.bandwidth", bandwidth_name(c.bound.bandwidth)));

  c.data.source = get_str("data.source", c.data.source);
  if (c.data.source != "toy" && c.data.source != "csv" && c.data.source != "synthetic") {
    throw ConfigError("config: data.source must be toy, csv or synthetic");
  }
  c.data.path = get_str("data.path", c.data.path);
  c.data.target_column = get_str("data.target_column", c.data.target_column);
  c.data.standardize = detail::parse_bool(get_str("data.standardize", c.data.standardize ? "true" : "false"));
  c.data.test_fraction = get("data.test_fraction", c.data.test_fraction);
  c.data.splits = get("data.splits", c.data.splits);
  c.data.toy_points = get("data.toy_points", c.data.toy_points);
  c.data.synthetic_points = get("data.synthetic_points", c.data.synthetic_points);

  c.bandit.source = get_str("bandit.source", c.bandit.source);
  if (c.bandit.source != "synthetic" && c.bandit.source != "csv") {
    throw ConfigError("config: bandit.source must be synthetic or csv");
  }
  c.bandit.path = get_str("bandit.path", c.bandit.path);
  c.bandit.context_dim = get("bandit.context_dim", c.bandit.context_dim);
  c.bandit.num_actions = get("bandit.num_actions", c.bandit.num_actions);
  c.bandit.steps = get("bandit.steps", c.bandit.steps);
  c.bandit.retrain_every = get("bandit.retrain_every", c.bandit.retrain_every);
  c.bandit.retrain_steps = get("bandit.retrain_steps", c.bandit.retrain_steps);
  c.bandit.noise = get("bandit.noise", c.bandit.noise);
  c.bandit.seeds = get("bandit.seeds", c.bandit.seeds);
  c.bandit.particles = get("bandit.particles", c.bandit.particles);
  c.bandit.step_size = get("bandit.step_size", c.bandit.step_size);
  c.bandit.hidden = detail::parse_size_list(get_str("bandit.hidden", detail::join_sizes(c.bandit.hidden)));

  c.verify_trials = get("verify.trials", c.verify_trials);

  try {
    c.model.validate();
    c.rule.validate();
    c.bound.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.training.particles == 0) throw ConfigError("config: training.particles must be at least 1");
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open '" + path + "'");
  return parse_config(is);
}

}  // namespace pvi::harness
