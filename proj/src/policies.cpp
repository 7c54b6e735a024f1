#include "crowdfuse/policies.hpp"

#include <cmath>
#include <sstream>

namespace crowdfuse {

SecondMoments::SecondMoments(std::size_t num_workers)
    : gram_(Matrix::Zero(static_cast<Eigen::Index>(num_workers), static_cast<Eigen::Index>(num_workers))) {}

SecondMoments SecondMoments::from_rows(const Matrix& rows) {
  SecondMoments m(static_cast<std::size_t>(rows.cols()));
  m.add_rows(rows, 0, static_cast<std::size_t>(rows.rows()));
  return m;
}

void SecondMoments::add_row(const Vector& y) {
  if (y.size() != gram_.rows()) throw ContractError("SecondMoments::add_row: wrong row length");
  gram_.selfadjointView<Eigen::Lower>().rankUpdate(y);
  gram_.triangularView<Eigen::StrictlyUpper>() = gram_.transpose();
  ++rows_;
}

void SecondMoments::add_rows(const Matrix& y, std::size_t begin, std::size_t end) {
  if (y.cols() != gram_.cols()) throw ContractError("SecondMoments::add_rows: wrong column count");
  if (begin > end || end > static_cast<std::size_t>(y.rows())) {
    throw ContractError("SecondMoments::add_rows: row range out of bounds");
  }
  if (begin == end) return;
  const auto block = y.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin));
  gram_.selfadjointView<Eigen::Lower>().rankUpdate(block.transpose());
  gram_.triangularView<Eigen::StrictlyUpper>() = gram_.transpose();
  rows_ += end - begin;
}

double AggregationWeights::apply(const Vector& y) const {
  if (y.size() != values.size()) throw ContractError("AggregationWeights::apply: length mismatch");
  return values.dot(y);
}

double averaging(const Vector& y) {
  if (y.size() == 0) throw ContractError("averaging: empty estimate vector");
  return y.mean();
}

AggregationWeights averaging_weights(std::size_t num_workers) {
  if (num_workers == 0) throw ContractError("averaging_weights: need at least one worker");
  const auto k = static_cast<Eigen::Index>(num_workers);
  return {Vector::Constant(k, 1.0 / static_cast<double>(num_workers))};
}

AggregationWeights clairvoyant_weights(const PdMatrix& noise_cov, double outcome_variance) {
  if (!(outcome_variance > 0.0)) throw ContractError("clairvoyant_weights: outcome variance must be > 0");
  const auto k = static_cast<Eigen::Index>(noise_cov.dim());
  const Vector ones = Vector::Ones(k);
  const Matrix s = noise_cov.entries() + outcome_variance * ones * ones.transpose();
  const PdMatrix cov(SymMatrix::symmetrized(s));
  return {outcome_variance * chol_solve(cov, ones)};
}

AggregationWeights only_skills_weights(const Vector& noise_var, double outcome_variance) {
  for (Eigen::Index i = 0; i < noise_var.size(); ++i) {
    if (!(noise_var(i) > 0.0)) {
      std::ostringstream os;
      os << "only_skills_weights: noise variance " << i << " is not positive (" << noise_var(i) << ")";
      throw ContractError(os.str());
    }
  }
  const PdMatrix diag(Matrix(noise_var.asDiagonal()));
  return clairvoyant_weights(diag, outcome_variance);
}

// ---------------------------------------------------------------------------

PewHyperparams PewHyperparams::with_standard_priors(std::size_t num_workers, double lambda, double rho,
                                                    double ig_shape, double reg_decay,
                                                    double outcome_variance) {
  const double kp1 = static_cast<double>(num_workers) + 1.0;
  PewHyperparams hp;
  hp.lambda = lambda;
  hp.rho = rho;
  hp.prior_coeff_mean = 1.0 / kp1;
  hp.prior_residual_var = 2.0 + 2.0 / kp1;
  hp.ig_shape = ig_shape;
  hp.reg_decay = reg_decay;
  hp.outcome_variance = outcome_variance;
  return hp;
}

void PewHyperparams::validate() const {
  if (!(lambda >= 0.0)) throw ContractError("PewHyperparams: lambda must be >= 0");
  if (!(rho >= 0.0 && rho < 1.0)) throw ContractError("PewHyperparams: rho must be in [0, 1)");
  if (!(prior_residual_var > 0.0)) throw ContractError("PewHyperparams: prior residual variance must be > 0");
  if (!(ig_shape >= 0.0)) throw ContractError("PewHyperparams: inverse-gamma shape must be >= 0");
  if (!(reg_decay > 0.0)) throw ContractError("PewHyperparams: regularization decay r must be > 0");
  if (!(outcome_variance > 0.0)) throw ContractError("PewHyperparams: outcome variance must be > 0");
  if (!std::isfinite(prior_coeff_mean)) throw ContractError("PewHyperparams: prior coefficient mean must be finite");
}

Matrix PewHyperparams::prior_precision(std::size_t dim) const {
  const auto d = static_cast<Eigen::Index>(dim);
  Matrix m = Matrix::Constant(d, d, lambda * rho);
  m.diagonal().setConstant(lambda);
  return m;
}

namespace {

void require_loo(std::size_t k_dim, std::size_t k) {
  if (k_dim < 2) throw ContractError("leave-one-out models need at least 2 workers");
  if (k >= k_dim) {
    std::ostringstream os;
    os << "worker index " << k << " out of range for " << k_dim << " workers";
    throw ContractError(os.str());
  }
}

}  // namespace

RegressionParams blr_fit(const SecondMoments& past, std::size_t k, const PewHyperparams& hp) {
  hp.validate();
  const std::size_t k_dim = past.num_workers();
  require_loo(k_dim, k);
  const Matrix& g = past.gram();
  const auto kk = static_cast<Eigen::Index>(k);
  const Matrix prior = hp.prior_precision(k_dim - 1);
  const Matrix g_rest = drop_row_col(g, k);
  const Vector g_cross = drop_index(g.col(kk), k);

  const Vector prior_mean = Vector::Constant(static_cast<Eigen::Index>(k_dim - 1), hp.prior_coeff_mean);
  std::optional<PdMatrix> system;
  try {
    system.emplace(SymMatrix::symmetrized(prior + g_rest));
  } catch (const NotPositiveDefinite&) {
    std::ostringstream os;
    os << "blr_fit: prior precision plus Gram matrix is singular for worker " << k << " with "
       << past.rows() << " past rows (lambda=" << hp.lambda << ")";
    throw NotPositiveDefinite(os.str());
  }
  RegressionParams out;
  out.coeffs = chol_solve(*system, Vector(prior * prior_mean + g_cross));

  const Vector dev = out.coeffs - prior_mean;
  const double prior_quad = dev.dot(prior * dev);
  const double ssr = g(kk, kk) - 2.0 * out.coeffs.dot(g_cross) + out.coeffs.dot(g_rest * out.coeffs);
  const double k_real = static_cast<double>(k_dim);
  const double t = static_cast<double>(past.rows()) + 1.0;
  out.residual_var = ((hp.ig_shape + k_real + 1.0) * hp.prior_residual_var + prior_quad + ssr) /
                     (hp.ig_shape + k_real + t);
  if (!(out.residual_var > 0.0)) throw NotPositiveDefinite("blr_fit: non-positive residual variance");
  return out;
}

RegressionParams blr_fit(const Matrix& past_rows, std::size_t k, const PewHyperparams& hp) {
  return blr_fit(SecondMoments::from_rows(past_rows), k, hp);
}

SslModelSet blr_fit_all(const SecondMoments& past, const PewHyperparams& hp) {
  SslModelSet models;
  models.reserve(past.num_workers());
  for (std::size_t k = 0; k < past.num_workers(); ++k) models.push_back(blr_fit(past, k, hp));
  return models;
}

double ssl_loss(const Matrix& past_rows, std::size_t k, const PewHyperparams& hp, const Vector& coeffs,
                double residual_var) {
  const auto k_dim = static_cast<std::size_t>(past_rows.cols());
  require_loo(k_dim, k);
  if (static_cast<std::size_t>(coeffs.size()) != k_dim - 1) throw ContractError("ssl_loss: coefficient length");
  if (!(residual_var > 0.0)) throw ContractError("ssl_loss: residual variance must be > 0");
  const double ell = residual_var;
  const double n = static_cast<double>(past_rows.rows());
  const double k_real = static_cast<double>(k_dim);

  double ssr = 0.0;
  for (Eigen::Index r = 0; r < past_rows.rows(); ++r) {
    const Vector row = past_rows.row(r).transpose();
    const double resid = row(static_cast<Eigen::Index>(k)) - coeffs.dot(drop_index(row, k));
    ssr += resid * resid;
  }
  const Vector dev = coeffs - Vector::Constant(coeffs.size(), hp.prior_coeff_mean);
  const double prior_quad = dev.dot(hp.prior_precision(k_dim - 1) * dev);

  const double log_ell = std::log(ell);
  const double likelihood = ssr / (2.0 * ell) + 0.5 * n * log_ell;
  // N(u-bar 1, ell Lambda^{-1}) over K-1 coefficients.
  const double coeff_prior = prior_quad / (2.0 * ell) + 0.5 * (k_real - 1.0) * log_ell;
  // Inverse gamma, shape lambda_ell / 2, scale (lambda_ell + K + 1) ell-bar / 2.
  const double var_prior = (0.5 * hp.ig_shape + 1.0) * log_ell +
                           (hp.ig_shape + k_real + 1.0) * hp.prior_residual_var / (2.0 * ell);
  return likelihood + coeff_prior + var_prior;
}

AggregationWeights pew_weights(const SslModelSet& models, double outcome_variance) {
  const auto k_dim = static_cast<Eigen::Index>(models.size());
  AggregationWeights w{Vector(k_dim)};
  for (Eigen::Index k = 0; k < k_dim; ++k) {
    const auto& m = models[static_cast<std::size_t>(k)];
    if (!(m.residual_var > 0.0)) {
      std::ostringstream os;
      os << "pew_weights: residual variance of model " << k << " is not positive";
      throw ContractError(os.str());
    }
    w.values(k) = outcome_variance * (1.0 - m.coeffs.sum()) / m.residual_var;
  }
  return w;
}

AggregationWeights pew_prior_weights(std::size_t num_workers, const PewHyperparams& hp) {
  hp.validate();
  const double k_minus_1 = static_cast<double>(num_workers) - 1.0;
  const double w = hp.outcome_variance * (1.0 - k_minus_1 * hp.prior_coeff_mean) / hp.prior_residual_var;
  return {Vector::Constant(static_cast<Eigen::Index>(num_workers), w)};
}

double pew_blend_factor(std::size_t t, double reg_decay) {
  if (t < 1) throw ContractError("pew_blend_factor: t must be >= 1");
  return reg_decay / (reg_decay + static_cast<double>(t) - 1.0);
}

AggregationWeights pew_aggregation_weights(const SecondMoments& past, const PewHyperparams& hp) {
  const std::size_t t = past.rows() + 1;
  AggregationWeights prior = pew_prior_weights(past.num_workers(), hp);
  // gamma_1 = 1 exactly, so the fitted weights would be multiplied by zero.
  if (t == 1) return prior;
  const double gamma = pew_blend_factor(t, hp.reg_decay);
  const AggregationWeights fitted = pew_weights(blr_fit_all(past, hp), hp.outcome_variance);
  return {gamma * prior.values + (1.0 - gamma) * fitted.values};
}

double pew_estimate(const Matrix& history, const PewHyperparams& hp) {
  if (history.rows() < 1) throw ContractError("pew_estimate: need at least the current round");
  const auto past_rows = static_cast<std::size_t>(history.rows()) - 1;
  SecondMoments past(static_cast<std::size_t>(history.cols()));
  past.add_rows(history, 0, past_rows);
  const Vector current = history.row(history.rows() - 1).transpose();
  return pew_aggregation_weights(past, hp).apply(current);
}

// ---------------------------------------------------------------------------

std::string to_string(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::averaging: return "averaging";
    case PolicyKind::clairvoyant: return "clairvoyant";
    case PolicyKind::only_skills: return "only_skills";
    case PolicyKind::pew: return "pew";
    case PolicyKind::em: return "em";
  }
  return "unknown";
}

std::optional<PolicyKind> parse_policy_kind(const std::string& name) {
  for (auto kind : {PolicyKind::averaging, PolicyKind::clairvoyant, PolicyKind::only_skills, PolicyKind::pew,
                    PolicyKind::em}) {
    if (to_string(kind) == name) return kind;
  }
  return std::nullopt;
}

AggregationWeights policy_weights(const PolicySpec& policy, const SecondMoments& past, const PdMatrix& noise_cov,
                                  double outcome_variance) {
  switch (policy.kind) {
    case PolicyKind::averaging:
      return averaging_weights(noise_cov.dim());
    case PolicyKind::clairvoyant:
      return clairvoyant_weights(noise_cov, outcome_variance);
    case PolicyKind::only_skills:
      return only_skills_weights(noise_cov.entries().diagonal(), outcome_variance);
    case PolicyKind::pew:
      return pew_aggregation_weights(past, policy.pew);
    case PolicyKind::em: {
      const EmResult fit = em_fit(past, policy.em);
      return clairvoyant_weights(fit.sigma, outcome_variance);
    }
  }
  throw ContractError("policy_weights: unknown policy kind");
}

}  // namespace crowdfuse
