#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <utility>
#include <vector>

#include "crowdfuse/harness/config.hpp"
#include "crowdfuse/harness/csv.hpp"
#include "crowdfuse/tuning.hpp"

namespace crowdfuse::harness {

struct SweepOptions {
  bool resume = false;
  std::size_t jobs = 1;
  /// Stop after this many newly computed units (0 = no limit). Used to
  /// simulate an interrupted run in tests.
  std::size_t max_new_units = 0;
};

struct SweepSummary {
  std::size_t units_total = 0;
  std::size_t units_computed = 0;
  std::size_t units_reused = 0;
  std::size_t pool_resamples = 0;
  bool complete = false;
};

/// Runs every (K, seed) unit, writing units/K<K>_seed<i>.csv as each one
/// finishes, then rebuilds results_<policy>_K<K>.csv and aggregate.csv from
/// the unit files. Policies with tuned hyperparameters are tuned first on the
/// tuning seed domain.
SweepSummary run_sweep(const ExperimentConfig& config, const SweepOptions& options, std::ostream& log);

/// PEW: tuned_pew.csv and tuning_audit_pew.csv. EM: tuned_em.csv and
/// tuning_audit_em.csv (t values from the config).
void run_tune(const ExperimentConfig& config, std::ostream& log);

/// fig2.csv (the matching table) with one row per (baseline K, policy).
void run_matching(const ExperimentConfig& config, std::ostream& log);

// Table builders, exposed for golden tests.

inline const std::vector<std::string> kResultsHeader{"policy", "K", "t", "seed", "clairvoyant_term", "excess_term",
                                                     "total_mse"};
inline const std::vector<std::string> kAggregateHeader{"policy", "K",   "t",   "n_seeds",
                                                       "mean_mse", "stderr_mse", "rmse", "rmse_stderr"};
inline const std::vector<std::string> kTunedPewHeader{"K", "lambda", "rho", "lambda_ell", "r"};
inline const std::vector<std::string> kTunedEmHeader{"K", "t", "sigma_bar_sq", "rho_bar", "c"};
inline const std::vector<std::string> kMatchingHeader{"baseline_k", "policy", "matching_k_lo", "matching_k",
                                                  "matching_k_hi"};

/// rmse = sqrt(mean_mse); rmse_stderr = stderr_mse / (2 rmse).
CsvTable aggregate_table(const std::vector<CsvTable>& results);
CsvTable audit_table(const std::vector<TuningAuditRow>& rows);
CsvTable tuned_pew_table(const std::vector<std::pair<std::size_t, PewHyperparams>>& rows);
CsvTable tuned_em_table(const std::vector<std::pair<std::size_t, std::pair<std::size_t, EmHyperparams>>>& rows);

}  // namespace crowdfuse::harness
