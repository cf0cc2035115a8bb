#pragma once

// JSON serialization of reports. Non-finite reals are written as null.

#include <cmath>
#include <ostream>
#include <string>

#include <json.hpp>

#include "pvi/ensemble.hpp"
#include "pvi/harness/experiments.hpp"
#include "pvi/harness/verify.hpp"
#include "pvi/pacbayes.hpp"

namespace pvi::harness {

using json = nlohmann::ordered_json;

inline json real_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json to_json(const BoundReport& r) {
  json j;
  j["variant"] = variant_name(r.variant);
  j["empirical_term"] = real_or_null(r.empirical_term);
  j["repulsion_term"] = real_or_null(r.repulsion_term);
  j["kl_term"] = real_or_null(r.kl_term);
  j["confidence_term"] = real_or_null(r.confidence_term);
  j["total"] = real_or_null(r.total);
  j["psi_excluded"] = r.psi_excluded;
  j["certified"] = r.certified;
  j["note"] = r.note;
  return j;
}

inline json to_json(const Metrics& m) {
  json j;
  j["test_nll"] = real_or_null(m.test_nll);
  j["rmse"] = real_or_null(m.rmse);
  j["accuracy"] = real_or_null(m.accuracy);
  return j;
}

inline json to_json(const RepulsionReport& r) {
  json j;
  j["rows"] = r.rows.size();
  j["all_chains_ok"] = r.all_chains_ok();
  j["mean_gap"] = real_or_null(r.average(&RepulsionRow::gap));
  j["mean_R_h"] = real_or_null(r.average(&RepulsionRow::R_h));
  j["mean_R_w"] = real_or_null(r.average(&RepulsionRow::R_w));
  j["mean_R_g"] = real_or_null(r.average(&RepulsionRow::R_g));
  return j;
}

inline json to_json(const SuiteReport& r) {
  json j;
  j["suite"] = r.suite;
  j["trials"] = r.trials;
  j["checks"] = r.checks;
  j["violations"] = r.violations;
  j["max_rel_error"] = real_or_null(r.max_rel_error);
  j["min_slack"] = real_or_null(r.min_slack);
  j["passed"] = r.passed();
  j["counterexamples"] = r.counterexamples;
  return j;
}

inline json to_json(const RegressionSummary& s) {
  json j;
  j["mean_rmse"] = real_or_null(s.mean_rmse);
  j["std_rmse"] = real_or_null(s.std_rmse);
  j["mean_nll"] = real_or_null(s.mean_nll);
  j["std_nll"] = real_or_null(s.std_nll);
  json runs = json::array();
  for (const auto& r : s.runs) {
    json x;
    x["test"] = to_json(r.test);
    x["bound"] = to_json(r.bound);
    x["train_repulsion"] = to_json(r.train_report);
    runs.push_back(std::move(x));
  }
  j["splits"] = std::move(runs);
  return j;
}

/// Two-space indent, trailing newline.
inline void write_json(const json& j, std::ostream& os) { os << j.dump(2) << '\n'; }

}  // namespace pvi::harness
