#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Cholesky>

#include "crowdfuse/rng.hpp"

namespace crowdfuse {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Raised when a caller breaks a documented precondition (sizes, ranges).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a Cholesky factorization hits a non-positive pivot.
class NotPositiveDefinite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A square matrix whose entries agree with their transposes to within
/// 1e-12 * max(1, |a_ij|).
class SymMatrix {
 public:
  explicit SymMatrix(Matrix entries);

  /// (M + M^T) / 2; always succeeds for square input.
  static SymMatrix symmetrized(const Matrix& m);
  static SymMatrix identity(std::size_t dim);

  std::size_t dim() const { return static_cast<std::size_t>(entries_.rows()); }
  const Matrix& entries() const { return entries_; }
  double operator()(std::size_t i, std::size_t j) const { return entries_(i, j); }

 private:
  Matrix entries_;
};

/// A symmetric matrix certified positive definite by a successful Cholesky
/// factorization whose squared pivots all exceed 16 n eps max|a_ii|. Every
/// solve and log-determinant routes through the factor.
class PdMatrix {
 public:
  /// Throws NotPositiveDefinite if the factorization fails.
  explicit PdMatrix(SymMatrix m);
  explicit PdMatrix(Matrix m) : PdMatrix(SymMatrix(std::move(m))) {}

  std::size_t dim() const { return sym_.dim(); }
  const Matrix& entries() const { return sym_.entries(); }
  const SymMatrix& sym() const { return sym_; }
  /// Lower-triangular L with L L^T = entries().
  Matrix factor() const { return llt_.matrixL(); }
  const Eigen::LLT<Matrix>& llt() const { return llt_; }

 private:
  SymMatrix sym_;
  Eigen::LLT<Matrix> llt_;
};

/// Coefficients u (length K-1) and residual variance ell of one leave-one-out
/// linear model.
struct RegressionParams {
  Vector coeffs;
  double residual_var = 1.0;
};

/// One model per worker; entry k regresses worker k on the other K-1 workers
/// in increasing index order.
using SslModelSet = std::vector<RegressionParams>;

Vector chol_solve(const PdMatrix& a, const Vector& b);
Matrix chol_solve(const PdMatrix& a, const Matrix& b);
double log_det(const PdMatrix& a);
/// Inverse assembled from triangular solves against the identity.
Matrix inverse(const PdMatrix& a);

/// KL( N(0, s1) || N(0, s2) ).
double kl_zero_mean_gaussian(const PdMatrix& s1, const PdMatrix& s2);

/// Best linear predictor of coordinate k from the others under N(0, s):
/// u = S_{-k,-k}^{-1} S_{-k,k}, ell = S_kk - S_{k,-k} u.
RegressionParams regression_params_from_cov(const PdMatrix& s, std::size_t k);
SslModelSet regression_params_from_cov(const PdMatrix& s);

/// M_kk = 1/ell_k, M_kk' = -u_k[k'] / ell_k. Not symmetrized: inconsistent
/// model sets produce asymmetric output.
Matrix precision_from_regression_params(const SslModelSet& models);

/// Returns factor * z, z iid standard normal drawn from rng.
Vector sample_mvn_zero_mean(const PdMatrix& s, Rng& rng);

/// Removes index k from v (length K -> K-1).
Vector drop_index(const Vector& v, std::size_t k);
/// Removes row and column k from a square matrix.
Matrix drop_row_col(const Matrix& s, std::size_t k);
/// Position of worker `other` inside the leave-`k`-out coefficient vector.
inline std::size_t loo_position(std::size_t k, std::size_t other) {
  return other < k ? other : other - 1;
}

/// Max-norm of a - b.
double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace crowdfuse
