#include "crowdfuse/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

#include "crowdfuse/harness/csv.hpp"

namespace crowdfuse {

void DgpConfig::validate() const {
  if (num_factors < 1) throw ContractError("DgpConfig: num_factors must be >= 1");
  if (!(decay > 0.0)) throw ContractError("DgpConfig: decay must be > 0");
  if (num_workers < 1) throw ContractError("DgpConfig: num_workers must be >= 1");
  if (!(outcome_variance > 0.0)) throw ContractError("DgpConfig: outcome_variance must be > 0");
}

double expected_noise_variance(const DgpConfig& cfg) {
  double s = 0.0;
  for (std::size_t n = 1; n <= cfg.num_factors; ++n) s += std::pow(static_cast<double>(n), -cfg.decay);
  return s;
}

WorkerPool WorkerPool::prefix(std::size_t k) const {
  if (k > num_workers()) throw ContractError("WorkerPool::prefix: k exceeds pool size");
  return WorkerPool{loadings.topRows(static_cast<Eigen::Index>(k))};
}

WorkerPool sample_loadings(const DgpConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto k_dim = static_cast<Eigen::Index>(cfg.num_workers);
  const auto n_dim = static_cast<Eigen::Index>(cfg.num_factors);
  Vector scale(n_dim);
  for (Eigen::Index n = 0; n < n_dim; ++n) {
    scale(n) = std::pow(static_cast<double>(n + 1), -0.5 * cfg.decay);
  }
  WorkerPool pool{Matrix(k_dim, n_dim)};
  for (Eigen::Index k = 0; k < k_dim; ++k) {
    for (Eigen::Index n = 0; n < n_dim; ++n) pool.loadings(k, n) = scale(n) * rng.gaussian();
  }
  return pool;
}

PdMatrix noise_covariance(const WorkerPool& pool) {
  Matrix cov = pool.loadings * pool.loadings.transpose();
  try {
    return PdMatrix(SymMatrix::symmetrized(cov));
  } catch (const NotPositiveDefinite& e) {
    std::ostringstream os;
    os << "degenerate pool: noise covariance of " << pool.num_workers() << " workers over "
       << pool.num_factors() << " factors is not positive definite (" << e.what() << ")";
    throw DegeneratePoolError(os.str());
  }
}

History sample_history(const WorkerPool& pool, std::size_t rounds, double outcome_variance,
                       Rng& rng) {
  if (!(outcome_variance > 0.0)) throw ContractError("sample_history: outcome_variance must be > 0");
  const auto k_dim = static_cast<Eigen::Index>(pool.num_workers());
  const auto n_dim = static_cast<Eigen::Index>(pool.num_factors());
  const double z_scale = std::sqrt(outcome_variance);

  History h{Vector(static_cast<Eigen::Index>(rounds)), Matrix(static_cast<Eigen::Index>(rounds), k_dim)};
  constexpr Eigen::Index kBlock = 512;
  Matrix factors(std::min<Eigen::Index>(kBlock, std::max<Eigen::Index>(1, static_cast<Eigen::Index>(rounds))),
                 n_dim);
  for (Eigen::Index start = 0; start < static_cast<Eigen::Index>(rounds); start += kBlock) {
    const Eigen::Index len = std::min<Eigen::Index>(kBlock, static_cast<Eigen::Index>(rounds) - start);
    for (Eigen::Index r = 0; r < len; ++r) {
      h.outcomes(start + r) = z_scale * rng.gaussian();
      for (Eigen::Index n = 0; n < n_dim; ++n) factors(r, n) = rng.gaussian();
    }
    auto block = h.estimates.middleRows(start, len);
    block.noalias() = factors.topRows(len) * pool.loadings.transpose();
    block.colwise() += h.outcomes.segment(start, len);
  }
  return h;
}

double consensus_estimate(const WorkerPool& workers, double outcome, const Vector& factors) {
  if (workers.num_workers() < 1) throw ContractError("consensus_estimate: need at least one worker");
  if (static_cast<std::size_t>(factors.size()) != workers.num_factors()) {
    throw ContractError("consensus_estimate: factor vector length must equal num_factors");
  }
  const Vector mean_loading = workers.loadings.colwise().mean();
  return outcome + mean_loading.dot(factors);
}

void write_history_csv(std::ostream& os, const History& history) {
  os << "round,z";
  for (std::size_t k = 1; k <= history.num_workers(); ++k) os << ",y_" << k;
  os << '\n';
  for (std::size_t r = 0; r < history.rounds(); ++r) {
    os << (r + 1) << ',' << harness::format_double(history.outcomes(static_cast<Eigen::Index>(r)));
    for (std::size_t k = 0; k < history.num_workers(); ++k) {
      os << ',' << harness::format_double(history.estimates(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)));
    }
    os << '\n';
  }
}

}  // namespace crowdfuse
