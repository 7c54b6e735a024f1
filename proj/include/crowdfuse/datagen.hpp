#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <stdexcept>

#include "crowdfuse/linalg.hpp"
#include "crowdfuse/rng.hpp"

namespace crowdfuse {

/// Gaussian factor-model settings. Factor n (1-based) has loading variance n^{-decay}.
struct DgpConfig {
  std::size_t num_factors = 1000;
  double decay = 1.7;
  std::size_t num_workers = 10;
  double outcome_variance = 1.0;

  void validate() const;
  DgpConfig with_workers(std::size_t k) const {
    DgpConfig c = *this;
    c.num_workers = k;
    return c;
  }
};

/// Sum_{n=1}^{N} n^{-q}: the expected noise variance of one worker.
double expected_noise_variance(const DgpConfig& cfg);

/// Factor loadings, one row per worker (K x N).
struct WorkerPool {
  Matrix loadings;

  std::size_t num_workers() const { return static_cast<std::size_t>(loadings.rows()); }
  std::size_t num_factors() const { return static_cast<std::size_t>(loadings.cols()); }
  /// The first k workers, in order.
  WorkerPool prefix(std::size_t k) const;
};

/// Outcomes Z (length t) and estimates Y (t x K).
struct History {
  Vector outcomes;
  Matrix estimates;

  std::size_t rounds() const { return static_cast<std::size_t>(estimates.rows()); }
  std::size_t num_workers() const { return static_cast<std::size_t>(estimates.cols()); }
};

class DegeneratePoolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Draws loadings worker by worker, so a pool of K' < K workers drawn from the
/// same seed is the first K' rows of the larger pool.
WorkerPool sample_loadings(const DgpConfig& cfg, Rng& rng);

/// C C^T. Throws DegeneratePoolError if the Cholesky certification fails.
PdMatrix noise_covariance(const WorkerPool& pool);

/// Per round: Z ~ N(0, vbar), then X ~ N(0, I_N), then Y = Z 1 + C X.
/// The draw order does not depend on C, so permuting the pool permutes the
/// columns of Y for the same rng state.
History sample_history(const WorkerPool& pool, std::size_t rounds, double outcome_variance, Rng& rng);

/// Average estimate of `workers` for a round with outcome z and factors x.
double consensus_estimate(const WorkerPool& workers, double outcome, const Vector& factors);

/// Writes `round,z,y_1,...,y_K` with rounds numbered from 1.
void write_history_csv(std::ostream& os, const History& history);

}  // namespace crowdfuse
