#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "crowdfuse/datagen.hpp"
#include "crowdfuse/linalg.hpp"
#include "crowdfuse/policies.hpp"
#include "crowdfuse/rng.hpp"

namespace crowdfuse {

/// Conditional MSE of a linear policy given the noise covariance, split into
/// the irreducible clairvoyant part and the excess over the clairvoyant.
struct MseSample {
  double clairvoyant_term = 0.0;  // 1 / (1/vbar + 1^T Sigma^{-1} 1)
  double excess_term = 0.0;       // (nu* - nu)^T (Sigma + vbar 11^T) (nu* - nu)
  std::uint64_t seed_id = 0;

  double total() const { return clairvoyant_term + excess_term; }
};

MseSample mse_closed_form(const PdMatrix& noise_cov, const AggregationWeights& weights, double outcome_variance,
                          std::uint64_t seed_id = 0);

struct MeanEstimate {
  double mean = 0.0;
  double stderr = 0.0;  // sample sd / sqrt(n); 0 for n = 1
  std::size_t count = 0;
};

/// Any infinite value makes the mean infinite.
MeanEstimate summarize(std::span<const double> values);

/// The seeds an experiment draws from: indices [0, count) under one master seed
/// and domain. Seed index i always maps to the same pool and history.
struct SeedPlan {
  std::uint64_t master_seed = 0;
  SeedDomain domain = SeedDomain::evaluation;
  std::size_t count = 1;
};

/// One drawn noise covariance plus one history of past rows.
struct Scenario {
  WorkerPool pool;
  PdMatrix noise_cov;
  History history;
  std::size_t seed_index = 0;
  std::size_t resamples = 0;  // degenerate pools redrawn before this one
};

inline constexpr std::size_t kMaxPoolResamples = 64;

/// Pool stream: derive_seed(master, {domain, K, index, pool, attempt}).
/// History stream: derive_seed(master, {domain, K, index, history, attempt}).
/// A degenerate pool bumps `attempt`; the count is reported in `resamples`.
Scenario draw_scenario(const DgpConfig& dgp, std::size_t num_workers, std::size_t past_rows,
                       std::uint64_t master_seed, SeedDomain domain, std::size_t seed_index);

/// Policies to evaluate at round t (lets EM hyperparameters vary with t).
using PolicySchedule = std::function<std::vector<PolicySpec>(std::size_t t)>;

/// MSE samples for each t in `t_values` (ascending, each >= 1) and each policy.
/// result[i][j] is t_values[i], policy j. Rows of the scenario history are fed
/// once into running moments.
std::vector<std::vector<MseSample>> evaluate_scenario(const Scenario& scenario, std::span<const std::size_t> t_values,
                                                      const PolicySchedule& policies, double outcome_variance);

struct PolicyMseEstimate {
  MeanEstimate total;
  std::vector<MseSample> samples;  // ascending seed index
  std::size_t resamples = 0;
};

/// For each seed: draw a pool and t-1 past rows, compute the policy weights,
/// and evaluate the closed-form MSE.
PolicyMseEstimate estimate_policy_mse(const PolicySpec& policy, const DgpConfig& dgp, std::size_t num_workers,
                                      std::size_t t, const SeedPlan& seeds);

struct MatchResult {
  std::size_t matching_k_lo = 0;  // matches baseline mean + stderr
  std::size_t matching_k = 0;     // matches baseline mean
  std::size_t matching_k_hi = 0;  // matches baseline mean - stderr
  MeanEstimate baseline;
};

class SearchCapExceeded : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Smallest K' whose mean MSE under `policy` is at most the mean averaging
/// MSE with baseline_k workers. Pools are nested: each seed draws 4 *
/// baseline_k workers and every K' uses a prefix. Only the clairvoyant,
/// only-skills and averaging kinds are accepted; averaging matches itself.
MatchResult workers_to_match(PolicyKind policy, std::size_t baseline_k, const DgpConfig& dgp, const SeedPlan& seeds);

/// Projects leave-one-out models onto a covariance estimate.
///
/// P = precision_from_regression_params(models); if det(P) <= 0 the models
/// are rejected. Otherwise the symmetric part of P is eigendecomposed,
/// eigenvalues below 1e-8 are raised to 1e-8, all eigenvalues are scaled by a
/// common factor so the product equals det(P), and the inverse of the
/// reassembled precision is returned. This approximates the nearest
/// covariance with matched determinant rather than solving that program.
std::optional<PdMatrix> covariance_from_models(const SslModelSet& models);

/// KL(N(0, Sigma + vbar 11^T) || N(0, S-hat)); nullopt when the models are
/// rejected (tuning treats that as +inf).
std::optional<double> ssl_quality_metric(const SslModelSet& models, const PdMatrix& noise_cov, double outcome_variance);

/// Unbiased sample variance of the averaged estimates. Returns 0 when all
/// values are equal, which callers should treat as degenerate.
double estimate_outcome_variance(std::span<const double> averaged_estimates);

/// Fits models on `train_rows`, projects them with covariance_from_models,
/// and returns KL(N(0, S_train) || N(0, S_test)) where S_test is the
/// zero-mean sample covariance of `test_rows`. nullopt when the models are
/// rejected. Throws ContractError when the test split is too small or its
/// covariance is singular.
std::optional<double> train_test_ssl_score(const Matrix& train_rows, const Matrix& test_rows, const PewHyperparams& hp);

// ---------------------------------------------------------------------------
// Out-of-sample surrogate

/// Fresh evaluation rounds for a fixed pool; each round also carries the
/// estimate of a newly drawn out-of-sample worker.
struct EvalRounds {
  Vector outcomes;
  Matrix estimates;
  Vector out_of_sample;
};

EvalRounds sample_eval_rounds(const WorkerPool& pool, const DgpConfig& dgp, std::size_t rounds, Rng& rng);

/// Mean of (out_of_sample - estimate(round))^2 over the rounds.
double surrogate_from_rounds(const EvalRounds& rounds, const std::function<double(std::size_t)>& estimate);

struct SurrogateSeed {
  std::size_t seed_index = 0;
  std::vector<double> surrogate;  // per policy
  std::vector<MseSample> mse;     // per policy, closed form on the same weights
};

/// Paired study: per seed one pool, one history of t-1 rows, one set of
/// evaluation rounds shared by every policy.
std::vector<SurrogateSeed> surrogate_study(const std::vector<PolicySpec>& policies, const DgpConfig& dgp,
                                           std::size_t num_workers, std::size_t t, const SeedPlan& seeds,
                                           std::size_t eval_rounds);

MeanEstimate surrogate_mse(const PolicySpec& policy, const DgpConfig& dgp, std::size_t num_workers, std::size_t t,
                           const SeedPlan& seeds, std::size_t eval_rounds);

}  // namespace crowdfuse
