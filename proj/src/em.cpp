#include <cmath>
#include <sstream>

#include "crowdfuse/policies.hpp"

namespace crowdfuse {

void EmHyperparams::validate() const {
  if (!(prior_var > 0.0)) throw ContractError("EmHyperparams: prior variance must be > 0");
  if (!(prior_corr >= 0.0 && prior_corr < 1.0)) throw ContractError("EmHyperparams: prior correlation must be in [0, 1)");
  if (!(concentration > 0.0)) throw ContractError("EmHyperparams: concentration must be > 0");
  if (!(tol > 0.0)) throw ContractError("EmHyperparams: tolerance must be > 0");
  if (max_iters < 1) throw ContractError("EmHyperparams: max_iters must be >= 1");
}

SymMatrix EmHyperparams::prior_mean(std::size_t num_workers) const {
  const auto k = static_cast<Eigen::Index>(num_workers);
  Matrix m = Matrix::Constant(k, k, prior_corr * prior_var);
  m.diagonal().setConstant(prior_var);
  return SymMatrix(std::move(m));
}

namespace {

double trace_solve(const PdMatrix& s, const Matrix& m) { return chol_solve(s, m).trace(); }

// Scatter sum_tau (y_tau - z_tau 1)(y_tau - z_tau 1)^T with z_tau = w^T y_tau.
Matrix residual_scatter(const Matrix& gram, const Vector& w) {
  const auto k = gram.rows();
  const Vector gw = gram * w;
  const double q = w.dot(gw);
  const Vector ones = Vector::Ones(k);
  return gram - gw * ones.transpose() - ones * gw.transpose() + q * ones * ones.transpose();
}

// ELBO evaluated from sufficient statistics; matches elbo() on the raw rows
// when z_tau = w^T y_tau and v_tau = v for every row.
double elbo_from_moments(const SecondMoments& past, const SymMatrix& prior_mean, double c, const Vector& w,
                         double v, const PdMatrix& sigma) {
  const double n = static_cast<double>(past.rows());
  const double k = static_cast<double>(past.num_workers());
  const double t = n + 1.0;
  const Vector ones = Vector::Ones(static_cast<Eigen::Index>(past.num_workers()));
  const double z_sq = w.dot(past.gram() * w);
  double g = -(c + 2.0 * k + 1.0 + t) * log_det(sigma);
  g -= c * trace_solve(sigma, prior_mean.entries());
  g -= trace_solve(sigma, residual_scatter(past.gram(), w));
  g -= n * v * ones.dot(chol_solve(sigma, ones));
  g -= n * (v - 1.0 - std::log(v)) + z_sq;  // 2 * sum of KL(N(z, v) || N(0, 1))
  return g;
}

}  // namespace

EmResult em_fit(const SecondMoments& past, const EmHyperparams& hp, const EmOptions& opts) {
  hp.validate();
  const std::size_t k_dim = past.num_workers();
  const auto kk = static_cast<Eigen::Index>(k_dim);
  const SymMatrix prior = hp.prior_mean(k_dim);
  const Vector ones = Vector::Ones(kk);

  auto e_step = [&](const PdMatrix& sigma, Vector& w, double& v) {
    const Vector a = chol_solve(sigma, ones);
    const double s = a.sum();
    w = a / (1.0 + s);
    v = 1.0 / (1.0 + s);
  };

  EmResult result{PdMatrix(prior), 0, false, {}, Vector(), 0.0};
  if (past.rows() == 0) {
    e_step(result.sigma, result.posterior_weights, result.posterior_var);
    result.converged = true;
    return result;
  }

  const double n = static_cast<double>(past.rows());
  const double c = hp.concentration;
  const double denom = c + 2.0 * static_cast<double>(k_dim) + (n + 1.0) + 1.0;
  const Matrix& gram = past.gram();

  Vector w, w_prev;
  double v = 0.0;
  for (std::size_t m = 1; m <= hp.max_iters; ++m) {
    e_step(result.sigma, w, v);
    if (opts.record_elbo && m == 1) {
      result.elbo_trace.push_back(elbo_from_moments(past, prior, c, w, v, result.sigma));
    }

    Matrix update = (c * prior.entries() + residual_scatter(gram, w) + n * v * ones * ones.transpose()) / denom;
    if (opts.debug_asymmetry != 0.0 && kk > 1) update(0, 1) += opts.debug_asymmetry;
    if (opts.symmetrize) update = 0.5 * (update + update.transpose());
    try {
      result.sigma = PdMatrix(SymMatrix(std::move(update)));
    } catch (const std::exception& e) {
      std::ostringstream os;
      os << "em_fit: covariance update failed positive-definite certification at iteration " << m << ": "
         << e.what();
      throw NotPositiveDefinite(os.str());
    }
    result.iterations = m;
    if (opts.record_elbo) result.elbo_trace.push_back(elbo_from_moments(past, prior, c, w, v, result.sigma));

    if (m > 1) {
      const Vector dw = w - w_prev;
      const double change = dw.dot(gram * dw) / n;
      if (change < hp.tol) {
        result.converged = true;
        break;
      }
    }
    w_prev = w;
  }
  result.posterior_weights = w;
  result.posterior_var = v;
  return result;
}

double em_estimate(const PdMatrix& sigma_hat, const Vector& y, double outcome_variance) {
  return clairvoyant_weights(sigma_hat, outcome_variance).apply(y);
}

double elbo(const Matrix& past_rows, const SymMatrix& prior_mean, double concentration, const Vector& z_hat,
            const Vector& v_hat, const PdMatrix& sigma_hat) {
  const auto rows = past_rows.rows();
  if (z_hat.size() != rows || v_hat.size() != rows) throw ContractError("elbo: z_hat / v_hat length must equal row count");
  if (static_cast<std::size_t>(past_rows.cols()) != sigma_hat.dim() || prior_mean.dim() != sigma_hat.dim()) {
    throw ContractError("elbo: dimension mismatch");
  }
  const double k = static_cast<double>(sigma_hat.dim());
  const double t = static_cast<double>(rows) + 1.0;
  const Vector ones = Vector::Ones(past_rows.cols());
  const double ones_quad = ones.dot(chol_solve(sigma_hat, ones));

  double g = -(concentration + 2.0 * k + 1.0 + t) * log_det(sigma_hat);
  g -= concentration * chol_solve(sigma_hat, prior_mean.entries()).trace();
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double v = v_hat(r);
    if (!(v > 0.0)) throw ContractError("elbo: posterior variances must be > 0");
    const Vector resid = past_rows.row(r).transpose() - z_hat(r) * ones;
    const double kl = 0.5 * (v + z_hat(r) * z_hat(r) - 1.0 - std::log(v));
    g -= resid.dot(chol_solve(sigma_hat, resid)) + v * ones_quad + 2.0 * kl;
  }
  return g;
}

}  // namespace crowdfuse
