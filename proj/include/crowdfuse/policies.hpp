#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "crowdfuse/linalg.hpp"

namespace crowdfuse {

/// Running second moments of past estimate rows: G = sum_tau Y_tau Y_tau^T.
///
/// Every learned policy in this library depends on Y_{1:t-1} only through
/// (G, t-1), so a sweep over increasing t feeds rows in once and refits from
/// the running sums.
class SecondMoments {
 public:
  explicit SecondMoments(std::size_t num_workers);
  static SecondMoments from_rows(const Matrix& rows);

  void add_row(const Vector& y);
  /// Adds rows [begin, end) of y.
  void add_rows(const Matrix& y, std::size_t begin, std::size_t end);

  std::size_t num_workers() const { return static_cast<std::size_t>(gram_.rows()); }
  std::size_t rows() const { return rows_; }
  const Matrix& gram() const { return gram_; }

 private:
  Matrix gram_;
  std::size_t rows_ = 0;
};

/// Linear aggregation weights; the group estimate is values^T Y_t.
struct AggregationWeights {
  Vector values;

  double apply(const Vector& y) const;
  std::size_t size() const { return static_cast<std::size_t>(values.size()); }
};

double averaging(const Vector& y);
AggregationWeights averaging_weights(std::size_t num_workers);

/// vbar (Sigma + vbar 11^T)^{-1} 1, i.e. the posterior-mean weights when
/// Sigma is the noise covariance.
AggregationWeights clairvoyant_weights(const PdMatrix& noise_cov, double outcome_variance);

/// Same formula with only the diagonal of the noise covariance.
AggregationWeights only_skills_weights(const Vector& noise_var, double outcome_variance);

// ---------------------------------------------------------------------------
// Predict-each-worker

/// Prior and regularization settings for the leave-one-out Bayesian linear
/// regressions and the weight blending.
///
/// The coefficient prior precision is lambda ((1 - rho) I + rho 11^T) over
/// the K-1 coefficients of each model.
struct PewHyperparams {
  double lambda = 1.0;
  double rho = 0.0;
  double prior_coeff_mean = 0.0;   // u-bar
  double prior_residual_var = 1.0; // ell-bar
  double ig_shape = 0.0;           // lambda_ell
  double reg_decay = 1.0;          // r
  double outcome_variance = 1.0;   // v-bar

  /// u-bar = 1/(K+1), ell-bar = 2 + 2/(K+1).
  static PewHyperparams with_standard_priors(std::size_t num_workers, double lambda, double rho,
                                             double ig_shape, double reg_decay,
                                             double outcome_variance = 1.0);

  void validate() const;
  Matrix prior_precision(std::size_t dim) const;
};

/// Closed-form minimizer of the regularized negative log-likelihood for the
/// model predicting worker k from the others. `past` holds t-1 rows.
///
/// u = (Lambda + G_{-k,-k})^{-1} (Lambda 1 u-bar + G_{-k,k})
/// ell = [(lambda_ell + K + 1) ell-bar + (u - u-bar 1)^T Lambda (u - u-bar 1) + SSR]
///       / (lambda_ell + K + t)
///
/// Throws NotPositiveDefinite when Lambda + G_{-k,-k} is singular (only
/// possible with lambda = 0).
RegressionParams blr_fit(const SecondMoments& past, std::size_t k, const PewHyperparams& hp);
RegressionParams blr_fit(const Matrix& past_rows, std::size_t k, const PewHyperparams& hp);
SslModelSet blr_fit_all(const SecondMoments& past, const PewHyperparams& hp);

/// The loss minimized by blr_fit, evaluated directly from the rows (up to an
/// additive constant). Used to check stationarity of the closed form.
double ssl_loss(const Matrix& past_rows, std::size_t k, const PewHyperparams& hp, const Vector& coeffs,
                double residual_var);

/// nu_k = vbar (1 - 1^T u_k) / ell_k.
AggregationWeights pew_weights(const SslModelSet& models, double outcome_variance);
/// Equal weights vbar (1 - (K-1) u-bar) / ell-bar.
AggregationWeights pew_prior_weights(std::size_t num_workers, const PewHyperparams& hp);
/// gamma_t = r / (r + t - 1).
double pew_blend_factor(std::size_t t, double reg_decay);
/// gamma_t * prior weights + (1 - gamma_t) * fitted weights, for round t = past.rows() + 1.
AggregationWeights pew_aggregation_weights(const SecondMoments& past, const PewHyperparams& hp);
/// Group estimate for the last row of history (rows 0..t-2 are the past).
double pew_estimate(const Matrix& history, const PewHyperparams& hp);

// ---------------------------------------------------------------------------
// Expectation maximization baseline

/// Prior mean Sigma-bar has diagonal prior_var and correlation prior_corr.
struct EmHyperparams {
  double prior_var = 2.0;
  double prior_corr = 0.0;
  double concentration = 1.0;
  double tol = 1e-10;
  std::size_t max_iters = 10000;

  void validate() const;
  SymMatrix prior_mean(std::size_t num_workers) const;
};

struct EmOptions {
  bool record_elbo = false;
  bool symmetrize = true;
  /// Mutation fixture: added to entry (0, 1) of every M-step update.
  double debug_asymmetry = 0.0;
};

struct EmResult {
  PdMatrix sigma;
  std::size_t iterations = 0;
  bool converged = false;
  /// ELBO after the first E-step (at the prior mean), then after each M-step.
  std::vector<double> elbo_trace;
  /// E-step output of the final iteration: z_tau = w^T Y_tau, v_tau = v.
  Vector posterior_weights;
  double posterior_var = 0.0;
};

/// Throws NotPositiveDefinite naming the iteration if an update loses
/// definiteness. With no past rows, returns the prior mean.
EmResult em_fit(const SecondMoments& past, const EmHyperparams& hp, const EmOptions& opts = {});
/// vbar 1^T (Sigma + vbar 11^T)^{-1} y.
double em_estimate(const PdMatrix& sigma_hat, const Vector& y, double outcome_variance);

/// The evidence lower bound, computed row by row:
///   -(c + 2K + 1 + t) log|S| - tr(c Sbar S^{-1})
///   - sum_tau [ (y - z 1)^T S^{-1} (y - z 1) + v 1^T S^{-1} 1 + 2 KL(N(z, v) || N(0, 1)) ]
/// with t = past_rows.rows() + 1.
double elbo(const Matrix& past_rows, const SymMatrix& prior_mean, double concentration,
            const Vector& z_hat, const Vector& v_hat, const PdMatrix& sigma_hat);

// ---------------------------------------------------------------------------
// Policy dispatch

enum class PolicyKind { averaging, clairvoyant, only_skills, pew, em };

std::string to_string(PolicyKind kind);
std::optional<PolicyKind> parse_policy_kind(const std::string& name);

/// A policy with concrete hyperparameters (pew / em fields used by those kinds).
struct PolicySpec {
  PolicyKind kind = PolicyKind::averaging;
  std::string label;
  PewHyperparams pew;
  EmHyperparams em;

  const std::string& name() const { return label; }
};

/// The weights a policy applies at round t = past.rows() + 1. Clairvoyant
/// kinds read the true noise covariance; learned kinds only see `past`.
AggregationWeights policy_weights(const PolicySpec& policy, const SecondMoments& past,
                                  const PdMatrix& noise_cov, double outcome_variance);

}  // namespace crowdfuse
