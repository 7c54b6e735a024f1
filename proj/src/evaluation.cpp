#include "crowdfuse/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

namespace crowdfuse {

MseSample mse_closed_form(const PdMatrix& noise_cov, const AggregationWeights& weights, double outcome_variance,
                          std::uint64_t seed_id) {
  if (weights.size() != noise_cov.dim()) throw ContractError("mse_closed_form: weight length must equal K");
  if (!(outcome_variance > 0.0)) throw ContractError("mse_closed_form: outcome variance must be > 0");
  const auto k = static_cast<Eigen::Index>(noise_cov.dim());
  const Vector ones = Vector::Ones(k);
  const double precision_sum = ones.dot(chol_solve(noise_cov, ones));

  const Matrix s = noise_cov.entries() + outcome_variance * ones * ones.transpose();
  const PdMatrix cov(SymMatrix::symmetrized(s));
  const Vector optimal = outcome_variance * chol_solve(cov, ones);
  const Vector gap = optimal - weights.values;

  MseSample out;
  out.clairvoyant_term = 1.0 / (1.0 / outcome_variance + precision_sum);
  out.excess_term = std::max(0.0, gap.dot(cov.entries() * gap));
  out.seed_id = seed_id;
  return out;
}

MeanEstimate summarize(std::span<const double> values) {
  MeanEstimate e;
  e.count = values.size();
  if (values.empty()) return e;
  double sum = 0.0;
  for (double v : values) {
    if (std::isinf(v)) {
      e.mean = std::numeric_limits<double>::infinity();
      e.stderr = std::numeric_limits<double>::infinity();
      return e;
    }
    sum += v;
  }
  e.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - e.mean) * (v - e.mean);
    e.stderr = std::sqrt(ss / static_cast<double>(values.size() - 1) / static_cast<double>(values.size()));
  }
  return e;
}

Scenario draw_scenario(const DgpConfig& dgp, std::size_t num_workers, std::size_t past_rows, std::uint64_t master_seed,
                       SeedDomain domain, std::size_t seed_index) {
  const DgpConfig cfg = dgp.with_workers(num_workers);
  cfg.validate();
  const auto d = static_cast<std::uint64_t>(domain);
  for (std::size_t attempt = 0; attempt < kMaxPoolResamples; ++attempt) {
    Rng pool_rng(derive_seed(master_seed, {d, num_workers, seed_index, static_cast<std::uint64_t>(SeedRole::pool), attempt}));
    WorkerPool pool = sample_loadings(cfg, pool_rng);
    std::optional<PdMatrix> cov;
    try {
      cov.emplace(noise_covariance(pool));
    } catch (const DegeneratePoolError&) {
      continue;
    }
    Rng hist_rng(
        derive_seed(master_seed, {d, num_workers, seed_index, static_cast<std::uint64_t>(SeedRole::history), attempt}));
    History history = sample_history(pool, past_rows, cfg.outcome_variance, hist_rng);
    return Scenario{std::move(pool), std::move(*cov), std::move(history), seed_index, attempt};
  }
  std::ostringstream os;
  os << "draw_scenario: " << kMaxPoolResamples << " consecutive degenerate pools for K=" << num_workers
     << ", N=" << cfg.num_factors << " (seed index " << seed_index << ")";
  throw DegeneratePoolError(os.str());
}

std::vector<std::vector<MseSample>> evaluate_scenario(const Scenario& scenario, std::span<const std::size_t> t_values,
                                                      const PolicySchedule& policies, double outcome_variance) {
  const Matrix& rows = scenario.history.estimates;
  SecondMoments past(scenario.pool.num_workers());
  std::vector<std::vector<MseSample>> out;
  out.reserve(t_values.size());
  std::size_t fed = 0;
  for (std::size_t t : t_values) {
    if (t < 1) throw ContractError("evaluate_scenario: t must be >= 1");
    if (t - 1 < fed) throw ContractError("evaluate_scenario: t values must be ascending");
    if (t - 1 > static_cast<std::size_t>(rows.rows())) throw ContractError("evaluate_scenario: history too short for t");
    past.add_rows(rows, fed, t - 1);
    fed = t - 1;
    std::vector<MseSample> at_t;
    for (const PolicySpec& p : policies(t)) {
      const AggregationWeights w = policy_weights(p, past, scenario.noise_cov, outcome_variance);
      at_t.push_back(mse_closed_form(scenario.noise_cov, w, outcome_variance, scenario.seed_index));
    }
    out.push_back(std::move(at_t));
  }
  return out;
}

PolicyMseEstimate estimate_policy_mse(const PolicySpec& policy, const DgpConfig& dgp, std::size_t num_workers,
                                      std::size_t t, const SeedPlan& seeds) {
  if (seeds.count == 0) throw ContractError("estimate_policy_mse: need at least one seed");
  if (t < 1) throw ContractError("estimate_policy_mse: t must be >= 1");
  PolicyMseEstimate out;
  std::vector<double> totals;
  const std::size_t ts[] = {t};
  const PolicySchedule schedule = [&](std::size_t) { return std::vector<PolicySpec>{policy}; };
  for (std::size_t i = 0; i < seeds.count; ++i) {
    const Scenario s = draw_scenario(dgp, num_workers, t - 1, seeds.master_seed, seeds.domain, i);
    out.resamples += s.resamples;
    const MseSample sample = evaluate_scenario(s, ts, schedule, dgp.outcome_variance).front().front();
    out.samples.push_back(sample);
    totals.push_back(sample.total());
  }
  out.total = summarize(totals);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

AggregationWeights static_policy_weights(PolicyKind kind, const PdMatrix& cov, double vbar) {
  switch (kind) {
    case PolicyKind::averaging: return averaging_weights(cov.dim());
    case PolicyKind::clairvoyant: return clairvoyant_weights(cov, vbar);
    case PolicyKind::only_skills: return only_skills_weights(cov.entries().diagonal(), vbar);
    default: break;
  }
  throw ContractError("workers_to_match: policy must be averaging, clairvoyant or only_skills");
}

}  // namespace

MatchResult workers_to_match(PolicyKind policy, std::size_t baseline_k, const DgpConfig& dgp, const SeedPlan& seeds) {
  if (baseline_k < 1) throw ContractError("workers_to_match: baseline_k must be >= 1");
  if (seeds.count == 0) throw ContractError("workers_to_match: need at least one seed");
  static_cast<void>(static_policy_weights(policy, PdMatrix(SymMatrix::identity(1)), 1.0));

  const std::size_t cap = 4 * baseline_k;
  const double vbar = dgp.outcome_variance;
  std::vector<Matrix> covs;
  std::vector<double> baseline;
  for (std::size_t i = 0; i < seeds.count; ++i) {
    // Only the pool is needed; the cap-sized pool is certified once and its
    // leading blocks are then PD as principal submatrices.
    const Scenario s = draw_scenario(dgp, cap, 0, seeds.master_seed, seeds.domain, i);
    const auto b = static_cast<Eigen::Index>(baseline_k);
    const PdMatrix base_cov(SymMatrix(s.noise_cov.entries().topLeftCorner(b, b)));
    baseline.push_back(mse_closed_form(base_cov, averaging_weights(baseline_k), vbar).total());
    covs.push_back(s.noise_cov.entries());
  }

  MatchResult result;
  result.baseline = summarize(baseline);
  if (policy == PolicyKind::averaging) {
    result.matching_k_lo = result.matching_k = result.matching_k_hi = baseline_k;
    return result;
  }

  std::map<std::size_t, double> cache;
  auto mean_mse = [&](std::size_t k) {
    if (auto it = cache.find(k); it != cache.end()) return it->second;
    double sum = 0.0;
    const auto kk = static_cast<Eigen::Index>(k);
    for (const Matrix& full : covs) {
      const PdMatrix cov(SymMatrix(full.topLeftCorner(kk, kk)));
      sum += mse_closed_form(cov, static_policy_weights(policy, cov, vbar), vbar).total();
    }
    const double m = sum / static_cast<double>(covs.size());
    cache.emplace(k, m);
    return m;
  };

  auto smallest_matching = [&](double target) {
    if (mean_mse(cap) > target) {
      std::ostringstream os;
      os << "workers_to_match: " << to_string(policy) << " with " << cap << " workers (cap = 4 x " << baseline_k
         << ") does not reach the target MSE " << target;
      throw SearchCapExceeded(os.str());
    }
    std::size_t lo = 0;  // mean_mse(lo) > target, with lo = 0 as a sentinel
    std::size_t hi = cap;
    while (hi - lo > 1) {
      const std::size_t mid = lo + (hi - lo) / 2;
      if (mean_mse(mid) <= target) {
        hi = mid;
      } else {
        lo = mid;
      }
    }
    return hi;
  };

  result.matching_k = smallest_matching(result.baseline.mean);
  result.matching_k_lo = smallest_matching(result.baseline.mean + result.baseline.stderr);
  result.matching_k_hi = smallest_matching(result.baseline.mean - result.baseline.stderr);
  return result;
}

// ---------------------------------------------------------------------------

std::optional<PdMatrix> covariance_from_models(const SslModelSet& models) {
  constexpr double kFloor = 1e-8;
  const Matrix p = precision_from_regression_params(models);
  const auto k = p.rows();

  const Eigen::PartialPivLU<Matrix> lu(p);
  const auto diag = lu.matrixLU().diagonal();
  double sign = lu.permutationP().determinant();
  double log_abs_det = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) {
    if (diag(i) == 0.0 || !std::isfinite(diag(i))) return std::nullopt;
    if (diag(i) < 0.0) sign = -sign;
    log_abs_det += std::log(std::abs(diag(i)));
  }
  if (sign <= 0.0) return std::nullopt;

  const Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (p + p.transpose()));
  if (eig.info() != Eigen::Success) return std::nullopt;
  Vector values = eig.eigenvalues().cwiseMax(kFloor);
  const double log_scale = (log_abs_det - values.array().log().sum()) / static_cast<double>(k);
  values *= std::exp(log_scale);
  const Matrix& vecs = eig.eigenvectors();
  const Matrix cov = vecs * values.cwiseInverse().asDiagonal() * vecs.transpose();
  try {
    return PdMatrix(SymMatrix::symmetrized(cov));
  } catch (const NotPositiveDefinite&) {
    return std::nullopt;
  }
}

std::optional<double> ssl_quality_metric(const SslModelSet& models, const PdMatrix& noise_cov,
                                         double outcome_variance) {
  if (models.size() != noise_cov.dim()) throw ContractError("ssl_quality_metric: model count must equal K");
  const auto estimate = covariance_from_models(models);
  if (!estimate) return std::nullopt;
  const auto k = static_cast<Eigen::Index>(noise_cov.dim());
  const Vector ones = Vector::Ones(k);
  const PdMatrix truth(SymMatrix::symmetrized(noise_cov.entries() + outcome_variance * ones * ones.transpose()));
  return std::max(0.0, kl_zero_mean_gaussian(truth, *estimate));
}

double estimate_outcome_variance(std::span<const double> averaged_estimates) {
  const std::size_t n = averaged_estimates.size();
  if (n < 2) throw ContractError("estimate_outcome_variance: need at least 2 rounds");
  double mean = 0.0;
  for (double v : averaged_estimates) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : averaged_estimates) ss += (v - mean) * (v - mean);
  return ss / static_cast<double>(n - 1);
}

std::optional<double> train_test_ssl_score(const Matrix& train_rows, const Matrix& test_rows, const PewHyperparams& hp) {
  const auto k = test_rows.cols();
  if (train_rows.cols() != k) throw ContractError("train_test_ssl_score: train and test splits have different K");
  if (test_rows.rows() < k + 1) {
    std::ostringstream os;
    os << "train_test_ssl_score: test split has " << test_rows.rows() << " rows; need at least K+1 = " << k + 1;
    throw ContractError(os.str());
  }
  const auto estimate = covariance_from_models(blr_fit_all(SecondMoments::from_rows(train_rows), hp));
  if (!estimate) return std::nullopt;
  const Matrix sample = test_rows.transpose() * test_rows / static_cast<double>(test_rows.rows());
  std::optional<PdMatrix> test_cov;
  try {
    test_cov.emplace(SymMatrix::symmetrized(sample));
  } catch (const NotPositiveDefinite&) {
    throw ContractError("train_test_ssl_score: test-split covariance is singular; use a larger test split");
  }
  return std::max(0.0, kl_zero_mean_gaussian(*estimate, *test_cov));
}

// ---------------------------------------------------------------------------

EvalRounds sample_eval_rounds(const WorkerPool& pool, const DgpConfig& dgp, std::size_t rounds, Rng& rng) {
  const auto n_dim = static_cast<Eigen::Index>(pool.num_factors());
  const auto r_dim = static_cast<Eigen::Index>(rounds);
  Vector scale(n_dim);
  for (Eigen::Index n = 0; n < n_dim; ++n) scale(n) = std::pow(static_cast<double>(n + 1), -0.5 * dgp.decay);
  const double z_scale = std::sqrt(dgp.outcome_variance);

  EvalRounds out{Vector(r_dim), Matrix(r_dim, static_cast<Eigen::Index>(pool.num_workers())), Vector(r_dim)};
  Vector x(n_dim);
  for (Eigen::Index r = 0; r < r_dim; ++r) {
    const double z = z_scale * rng.gaussian();
    for (Eigen::Index n = 0; n < n_dim; ++n) x(n) = rng.gaussian();
    double extra = z;
    for (Eigen::Index n = 0; n < n_dim; ++n) extra += scale(n) * rng.gaussian() * x(n);
    out.outcomes(r) = z;
    out.estimates.row(r) = (pool.loadings * x).transpose().array() + z;
    out.out_of_sample(r) = extra;
  }
  return out;
}

double surrogate_from_rounds(const EvalRounds& rounds, const std::function<double(std::size_t)>& estimate) {
  const auto n = static_cast<std::size_t>(rounds.outcomes.size());
  if (n == 0) throw ContractError("surrogate_from_rounds: no rounds");
  double sum = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double d = rounds.out_of_sample(static_cast<Eigen::Index>(r)) - estimate(r);
    sum += d * d;
  }
  return sum / static_cast<double>(n);
}

std::vector<SurrogateSeed> surrogate_study(const std::vector<PolicySpec>& policies, const DgpConfig& dgp,
                                           std::size_t num_workers, std::size_t t, const SeedPlan& seeds,
                                           std::size_t eval_rounds) {
  if (seeds.count == 0) throw ContractError("surrogate_study: need at least one seed");
  if (t < 1) throw ContractError("surrogate_study: t must be >= 1");
  std::vector<SurrogateSeed> out;
  for (std::size_t i = 0; i < seeds.count; ++i) {
    const Scenario s = draw_scenario(dgp, num_workers, t - 1, seeds.master_seed, seeds.domain, i);
    Rng rng(derive_seed(seeds.master_seed, {static_cast<std::uint64_t>(seeds.domain), num_workers, i,
                                            static_cast<std::uint64_t>(SeedRole::extra_workers), s.resamples}));
    const EvalRounds rounds = sample_eval_rounds(s.pool, dgp, eval_rounds, rng);
    const SecondMoments past = SecondMoments::from_rows(s.history.estimates);
    SurrogateSeed seed{i, {}, {}};
    for (const PolicySpec& p : policies) {
      const AggregationWeights w = policy_weights(p, past, s.noise_cov, dgp.outcome_variance);
      const Vector group = rounds.estimates * w.values;
      seed.surrogate.push_back(
          surrogate_from_rounds(rounds, [&](std::size_t r) { return group(static_cast<Eigen::Index>(r)); }));
      seed.mse.push_back(mse_closed_form(s.noise_cov, w, dgp.outcome_variance, i));
    }
    out.push_back(std::move(seed));
  }
  return out;
}

MeanEstimate surrogate_mse(const PolicySpec& policy, const DgpConfig& dgp, std::size_t num_workers, std::size_t t,
                           const SeedPlan& seeds, std::size_t eval_rounds) {
  const auto study = surrogate_study({policy}, dgp, num_workers, t, seeds, eval_rounds);
  std::vector<double> values;
  for (const auto& s : study) values.push_back(s.surrogate.front());
  return summarize(values);
}

}  // namespace crowdfuse
