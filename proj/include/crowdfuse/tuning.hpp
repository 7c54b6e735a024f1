#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "crowdfuse/datagen.hpp"
#include "crowdfuse/evaluation.hpp"
#include "crowdfuse/policies.hpp"

namespace crowdfuse {

/// Grid values for the two PEW stages and for EM.
struct TuningGrid {
  std::vector<double> lambdas;
  std::vector<double> rhos;
  std::vector<double> ig_shapes;
  std::vector<double> reg_decays;
  std::vector<double> em_prior_vars;
  std::vector<double> em_prior_corrs;
  std::vector<double> em_concentrations;

  /// rho in {0, .2, .4, .6, .8}; lambda in {0, 2K/5, ..., 10K/5}; lambda_ell in
  /// {0, 2, 4, 6}; r in {2.5K, 5K, ..., 20K}; EM prior variance in {0.2, 2, 20},
  /// prior correlation in {0, 0.1}, concentration in {0.1, 1, 10}.
  static TuningGrid standard(std::size_t num_workers);

  void validate() const;
};

/// One audit line: a combo's mean metric at one t. Parameters with a NaN
/// value are written as empty cells.
struct TuningAuditRow {
  std::string stage;
  std::size_t combo_id = 0;
  std::size_t num_workers = 0;
  std::vector<std::pair<std::string, double>> params;
  std::size_t t = 0;
  MeanEstimate metric;
  bool selected = false;
};

/// SSL stage t values {1, K, 10K, 100K}; the last one is t*.
std::vector<std::size_t> ssl_stage_t_values(std::size_t num_workers);
/// Aggregation stage t values {1, K, 3K, 5K, 7K, 10K}; the last one is t*.
std::vector<std::size_t> aggregation_stage_t_values(std::size_t num_workers);

/// True when the means never increase from one t to the next.
bool is_monotone_non_increasing(std::span<const double> means);

/// Index of the selected combo: among combos that pass the monotonicity
/// filter and are `eligible`, the lowest final-t mean; ties go to the lower
/// index. When nothing passes, the filter is dropped and `fell_back` is set.
std::size_t select_combo(const std::vector<std::vector<double>>& means_by_combo, const std::vector<bool>& eligible,
                         bool& fell_back);

struct PewTuningResult {
  PewHyperparams selected;
  std::vector<TuningAuditRow> audit;
  bool ssl_fell_back = false;
  bool aggregation_fell_back = false;
};

/// Two-stage search. Stage one ranks (lambda, rho, lambda_ell) by the SSL
/// quality metric; stage two ranks r by closed-form MSE with the stage-one
/// winner. Combos with lambda = 0 are scored but never selected; a singular
/// fit or rejected model scores +inf.
PewTuningResult tune_pew(const DgpConfig& dgp, std::size_t num_workers, const TuningGrid& grid, const SeedPlan& seeds);

struct EmTuningResult {
  /// One selection per requested t, in the order given.
  std::vector<std::pair<std::size_t, EmHyperparams>> selected;
  std::vector<TuningAuditRow> audit;
};

/// For each t, the (prior variance, prior correlation, concentration) combo
/// with the lowest mean closed-form MSE. Failed fits score +inf.
EmTuningResult tune_em(const DgpConfig& dgp, std::size_t num_workers, std::span<const std::size_t> t_values,
                       const TuningGrid& grid, const SeedPlan& seeds);

}  // namespace crowdfuse
