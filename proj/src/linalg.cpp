#include "crowdfuse/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace crowdfuse {

namespace {

void require_square(const Matrix& m, const char* what) {
  if (m.rows() != m.cols() || m.rows() == 0) {
    std::ostringstream os;
    os << what << ": expected a non-empty square matrix, got " << m.rows() << "x" << m.cols();
    throw ContractError(os.str());
  }
}

}  // namespace

SymMatrix::SymMatrix(Matrix entries) : entries_(std::move(entries)) {
  require_square(entries_, "SymMatrix");
  const Eigen::Index n = entries_.rows();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double a = entries_(i, j);
      const double b = entries_(j, i);
      if (!std::isfinite(a) || !std::isfinite(b) ||
          std::abs(a - b) > 1e-12 * std::max(1.0, std::abs(a))) {
        std::ostringstream os;
        os << "SymMatrix: entries (" << i << "," << j << ")=" << a << " and (" << j << "," << i
           << ")=" << b << " are not symmetric";
        throw ContractError(os.str());
      }
    }
    if (!std::isfinite(entries_(i, i))) throw ContractError("SymMatrix: non-finite diagonal");
  }
}

SymMatrix SymMatrix::symmetrized(const Matrix& m) {
  require_square(m, "SymMatrix::symmetrized");
  Matrix s = 0.5 * (m + m.transpose());
  return SymMatrix(std::move(s));
}

SymMatrix SymMatrix::identity(std::size_t dim) {
  return SymMatrix(Matrix::Identity(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim)));
}

PdMatrix::PdMatrix(SymMatrix m) : sym_(std::move(m)), llt_(sym_.entries()) {
  bool ok = llt_.info() == Eigen::Success;
  if (ok) {
    // A pivot this small relative to the largest diagonal entry is roundoff
    // on a singular matrix, not evidence of definiteness.
    const auto diag = llt_.matrixLLT().diagonal();
    const double n = static_cast<double>(diag.size());
    const double floor = 16.0 * n * std::numeric_limits<double>::epsilon() *
                         sym_.entries().diagonal().cwiseAbs().maxCoeff();
    for (Eigen::Index i = 0; i < diag.size(); ++i) {
      if (!(diag(i) > 0.0) || !std::isfinite(diag(i)) || !(diag(i) * diag(i) > floor)) {
        ok = false;
        break;
      }
    }
  }
  if (!ok) {
    std::ostringstream os;
    os << "Cholesky factorization failed for a " << sym_.dim() << "x" << sym_.dim()
       << " matrix (non-positive pivot)";
    throw NotPositiveDefinite(os.str());
  }
}

Vector chol_solve(const PdMatrix& a, const Vector& b) {
  if (static_cast<std::size_t>(b.size()) != a.dim()) {
    std::ostringstream os;
    os << "chol_solve: right-hand side has length " << b.size() << ", matrix has dim " << a.dim();
    throw ContractError(os.str());
  }
  return a.llt().solve(b);
}

Matrix chol_solve(const PdMatrix& a, const Matrix& b) {
  if (static_cast<std::size_t>(b.rows()) != a.dim()) {
    throw ContractError("chol_solve: right-hand side row count does not match matrix dim");
  }
  return a.llt().solve(b);
}

double log_det(const PdMatrix& a) {
  const auto diag = a.llt().matrixLLT().diagonal();
  double s = 0.0;
  for (Eigen::Index i = 0; i < diag.size(); ++i) s += std::log(diag(i));
  return 2.0 * s;
}

Matrix inverse(const PdMatrix& a) {
  const auto n = static_cast<Eigen::Index>(a.dim());
  Matrix inv = a.llt().solve(Matrix::Identity(n, n));
  return 0.5 * (inv + inv.transpose());
}

double kl_zero_mean_gaussian(const PdMatrix& s1, const PdMatrix& s2) {
  if (s1.dim() != s2.dim()) throw ContractError("kl_zero_mean_gaussian: dimension mismatch");
  // trace(S2^{-1} S1) = || L2^{-1} L1 ||_F^2
  Matrix l1 = s1.factor();
  s2.llt().matrixL().solveInPlace(l1);
  const double trace = l1.squaredNorm();
  const auto k = static_cast<double>(s1.dim());
  return 0.5 * (trace - k + log_det(s2) - log_det(s1));
}

Vector drop_index(const Vector& v, std::size_t k) {
  const auto n = v.size();
  Vector out(n - 1);
  const auto kk = static_cast<Eigen::Index>(k);
  out.head(kk) = v.head(kk);
  out.tail(n - kk - 1) = v.tail(n - kk - 1);
  return out;
}

Matrix drop_row_col(const Matrix& s, std::size_t k) {
  const auto n = s.rows();
  const auto kk = static_cast<Eigen::Index>(k);
  const auto tail = n - kk - 1;
  Matrix out(n - 1, n - 1);
  out.topLeftCorner(kk, kk) = s.topLeftCorner(kk, kk);
  out.topRightCorner(kk, tail) = s.topRightCorner(kk, tail);
  out.bottomLeftCorner(tail, kk) = s.bottomLeftCorner(tail, kk);
  out.bottomRightCorner(tail, tail) = s.bottomRightCorner(tail, tail);
  return out;
}

RegressionParams regression_params_from_cov(const PdMatrix& s, std::size_t k) {
  if (s.dim() < 2) throw ContractError("regression_params_from_cov: need dim >= 2");
  if (k >= s.dim()) {
    std::ostringstream os;
    os << "regression_params_from_cov: worker index " << k << " out of range for dim " << s.dim();
    throw ContractError(os.str());
  }
  const Matrix& e = s.entries();
  const auto kk = static_cast<Eigen::Index>(k);
  const PdMatrix rest(SymMatrix(drop_row_col(e, k)));
  const Vector cross = drop_index(e.col(kk), k);
  RegressionParams out;
  out.coeffs = chol_solve(rest, cross);
  out.residual_var = e(kk, kk) - cross.dot(out.coeffs);
  if (!(out.residual_var > 0.0)) {
    throw NotPositiveDefinite("regression_params_from_cov: non-positive Schur complement");
  }
  return out;
}

SslModelSet regression_params_from_cov(const PdMatrix& s) {
  SslModelSet models;
  models.reserve(s.dim());
  for (std::size_t k = 0; k < s.dim(); ++k) models.push_back(regression_params_from_cov(s, k));
  return models;
}

Matrix precision_from_regression_params(const SslModelSet& models) {
  const std::size_t k_dim = models.size();
  if (k_dim < 2) throw ContractError("precision_from_regression_params: need at least 2 models");
  Matrix m(k_dim, k_dim);
  for (std::size_t k = 0; k < k_dim; ++k) {
    const auto& model = models[k];
    if (static_cast<std::size_t>(model.coeffs.size()) != k_dim - 1) {
      throw ContractError("precision_from_regression_params: coefficient length must be K-1");
    }
    if (!(model.residual_var > 0.0)) {
      std::ostringstream os;
      os << "precision_from_regression_params: residual variance of model " << k
         << " is not positive (" << model.residual_var << ")";
      throw ContractError(os.str());
    }
    const double inv_ell = 1.0 / model.residual_var;
    for (std::size_t j = 0; j < k_dim; ++j) {
      m(k, j) = j == k ? inv_ell : -model.coeffs(loo_position(k, j)) * inv_ell;
    }
  }
  return m;
}

Vector sample_mvn_zero_mean(const PdMatrix& s, Rng& rng) {
  Vector z(s.dim());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = rng.gaussian();
  return s.llt().matrixL() * z;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ContractError("max_abs_diff: shape mismatch");
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace crowdfuse
