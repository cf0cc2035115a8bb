#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "pvi/pvi.hpp"

namespace fs = std::filesystem;
using namespace pvi;
using namespace pvi::harness;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitPropertyFailure = 2;

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string rule;
  std::optional<std::size_t> particles;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "INI configuration file (defaults apply when omitted)");
  cmd->add_option("--seed", o.seed, "Root seed, overrides the config");
  cmd->add_option("--out", o.out, "Output directory")->capture_default_str();
  cmd->add_option("--rule", o.rule, "Update rule name, overrides the config");
  cmd->add_option("--particles", o.particles, "Ensemble size, overrides the config");
}

Config resolve(const CommonOptions& o) {
  Config c = o.config.empty() ? default_config() : load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.rule.empty()) c.rule.tag = parse_rule(o.rule);
  if (o.particles) {
    if (*o.particles == 0) throw ConfigError("--particles must be at least 1");
    c.training.particles = *o.particles;
    c.bandit.particles = *o.particles;
  }
  return c;
}

std::ofstream open_out(const std::string& dir, const std::string& name) {
  fs::create_directories(dir);
  const auto path = fs::path(dir) / name;
  std::ofstream os(path);
  if (!os) throw Error("cannot write '" + path.string() + "'");
  return os;
}

void write_json_file(const std::string& dir, const std::string& name, const json& j) {
  auto os = open_out(dir, name);
  write_json(j, os);
}

int cmd_train(const CommonOptions& o) {
  const Config cfg = resolve(o);
  const Dataset data = load_configured_data(cfg);
  const auto summary = run_regression_experiment(cfg, data);
  json j;
  j["rule"] = rule_name(cfg.rule.tag);
  j["particles"] = cfg.training.particles;
  j["seed"] = cfg.seed;
  j["summary"] = to_json(summary);
  write_json_file(o.out, "metrics.json", j);
  const auto& first = summary.runs.front();
  {
    auto os = open_out(o.out, "trajectory.csv");
    write_trajectory_csv(first.training.trajectory, os);
  }
  {
    auto os = open_out(o.out, "checkpoint.txt");
    save_checkpoint(first.training.ensemble, os);
  }
  if (!first.grid.empty()) {
    auto os = open_out(o.out, "intervals.csv");
    write_interval_csv(first.grid, os);
  }
  std::cout << "rmse " << format_real(summary.mean_rmse) << " nll " << format_real(summary.mean_nll) << '\n';
  return kExitOk;
}

ParticleEnsemble read_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open checkpoint '" + path + "'");
  return load_checkpoint(is);
}

/// The first configured split, as used by `train` for its checkpoint.
Split first_split(const Config& cfg) {
  const Dataset data = load_configured_data(cfg);
  Rng split_rng = Rng(cfg.seed).split(1000);
  return split_dataset(data, cfg.data.test_fraction, cfg.data.standardize, split_rng);
}

int cmd_eval(const CommonOptions& o, const std::string& checkpoint) {
  const Config cfg = resolve(o);
  const auto ens = read_checkpoint(checkpoint);
  const auto sp = first_split(cfg);
  json j;
  j["test"] = to_json(metrics(ens, sp.test));
  const Matrix L = loglik_matrix(ens, sp.train);
  const double kl = kl_ensemble_prior(ens, cfg.prior);
  json bounds = json::array();
  for (auto v : {BoundVariant::theorem1, BoundVariant::theorem4, BoundVariant::ensemble_Rc, BoundVariant::ensemble_Rw,
                 BoundVariant::ensemble_Rd, BoundVariant::ensemble_Rg}) {
    bounds.push_back(to_json(assemble_bound(v, L, kl, cfg.bound)));
  }
  j["bounds"] = std::move(bounds);
  write_json_file(o.out, "eval.json", j);
  return kExitOk;
}

int cmd_diagnose(const CommonOptions& o, const std::string& checkpoint) {
  const Config cfg = resolve(o);
  const auto sp = first_split(cfg);
  ParticleEnsemble ens;
  if (!checkpoint.empty()) {
    ens = read_checkpoint(checkpoint);
  } else {
    ens = run_regression_split(cfg, sp.train, sp.test, 0).training.ensemble;
  }
  const auto report = repulsion_report(loglik_matrix(ens, sp.train));
  auto os = open_out(o.out, "repulsion.csv");
  write_repulsion_csv(report, os);
  std::cout << "rows " << report.rows.size() << " all_chains_ok " << (report.all_chains_ok() ? "true" : "false") << '\n';
  return kExitOk;
}

int cmd_toy(const CommonOptions& o) {
  const Config cfg = resolve(o);
  const auto res = run_toy(cfg);
  {
    auto os = open_out(o.out, "intervals.csv");
    write_interval_csv(res.grid, os);
  }
  {
    auto os = open_out(o.out, "trajectory.csv");
    write_trajectory_csv(res.training.trajectory, os);
  }
  json j;
  j["rule"] = rule_name(cfg.rule.tag);
  j["particles"] = cfg.training.particles;
  j["seed"] = cfg.seed;
  j["epistemic_width_at_0.3"] = res.at(0.3).epistemic_width();
  j["epistemic_width_at_1.2"] = res.at(1.2).epistemic_width();
  j["min_pairwise_distance"] = res.min_pairwise_distance;
  j["train_repulsion"] = to_json(res.train_report);
  write_json_file(o.out, "toy.json", j);
  return kExitOk;
}

int cmd_bandit(const CommonOptions& o) {
  const Config cfg = resolve(o);
  UpdateRule base = cfg.rule;
  base.step_size = cfg.bandit.step_size;
  UpdateRule map_rule = base;
  map_rule.tag = RuleTag::map;
  const std::vector<UpdateRule> rules{base, map_rule};
  const std::vector<std::string> names{rule_name(base.tag), "map"};
  const auto cmp = compare_bandit_rules(cfg, rules, names, cfg.bandit.particles);
  json j;
  j["seeds"] = cfg.bandit.seeds;
  json per_rule = json::object();
  for (std::size_t r = 0; r < names.size(); ++r) {
    Vector col;
    for (std::size_t k = 0; k < cmp.relative.rows(); ++k) col.push_back(cmp.relative(k, r));
    per_rule[names[r]] = {{"relative_regret", col}, {"mean", mean(col)}};
    auto os = open_out(o.out, "regret_" + names[r] + ".csv");
    write_regret_csv(cmp.first_seed[r], os);
  }
  j["rules"] = std::move(per_rule);
  std::size_t wins = 0;
  for (std::size_t k = 0; k < cmp.relative.rows(); ++k) wins += cmp.relative(k, 0) < cmp.relative(k, 1) ? 1 : 0;
  j["seeds_first_rule_better"] = wins;
  write_json_file(o.out, "bandit.json", j);
  std::cout << names[0] << " better than map on " << wins << " of " << cmp.relative.rows() << " seeds\n";
  return kExitOk;
}

int cmd_verify(const CommonOptions& o, const std::string& suite, std::optional<std::size_t> trials) {
  const Config cfg = resolve(o);
  const std::size_t n = trials.value_or(cfg.verify_trials);
  const std::vector<std::string> suites =
      suite == "all" ? std::vector<std::string>{"jensen", "identities", "gradients", "updates"}
                     : std::vector<std::string>{suite};
  json j = json::array();
  bool ok = true;
  for (std::size_t s = 0; s < suites.size(); ++s) {
    Rng rng = Rng(cfg.seed).split(s);
    const auto rep = verify(suites[s], rng, n);
    ok = ok && rep.passed();
    j.push_back(to_json(rep));
    std::cout << rep.suite << ": " << (rep.passed() ? "PASS" : "FAIL") << " (" << rep.checks << " checks, "
              << rep.violations << " violations)\n";
    for (const auto& c : rep.counterexamples) std::cout << "  " << c << '\n';
  }
  write_json_file(o.out, "verify.json", j);
  return ok ? kExitOk : kExitPropertyFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Particle variational inference toolkit"};
  app.require_subcommand(1);

  CommonOptions train_o, eval_o, bandit_o, verify_o, diagnose_o, toy_o;
  std::string eval_ckpt, diagnose_ckpt, suite = "all";
  std::optional<std::size_t> trials;

  auto* train_cmd = app.add_subcommand("train", "Train on the configured data and report test metrics");
  add_common(train_cmd, train_o);
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint: test metrics and bound reports");
  add_common(eval_cmd, eval_o);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint written by train")->required();
  auto* bandit_cmd = app.add_subcommand("bandit", "Thompson-sampling regret of a rule against MAP");
  add_common(bandit_cmd, bandit_o);
  auto* verify_cmd = app.add_subcommand("verify", "Run the property suites");
  add_common(verify_cmd, verify_o);
  verify_cmd->add_option("--suite", suite, "jensen, identities, gradients, updates or all")
      ->check(CLI::IsMember({"all", "jensen", "identities", "gradients", "updates"}))
      ->capture_default_str();
  verify_cmd->add_option("--trials", trials, "Trials per suite, overrides the config");
  auto* diagnose_cmd = app.add_subcommand("diagnose", "Per-datum repulsion report of a trained ensemble");
  add_common(diagnose_cmd, diagnose_o);
  diagnose_cmd->add_option("--checkpoint", diagnose_ckpt, "Checkpoint to diagnose (trains when omitted)");
  auto* toy_cmd = app.add_subcommand("toy", "Toy regression with credible-interval grid");
  add_common(toy_cmd, toy_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitError;
  }

  try {
    if (*train_cmd) return cmd_train(train_o);
    if (*eval_cmd) return cmd_eval(eval_o, eval_ckpt);
    if (*bandit_cmd) return cmd_bandit(bandit_o);
    if (*verify_cmd) return cmd_verify(verify_o, suite, trials);
    if (*diagnose_cmd) return cmd_diagnose(diagnose_o, diagnose_ckpt);
    if (*toy_cmd) return cmd_toy(toy_o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}
