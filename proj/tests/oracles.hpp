#pragma once

// Reference implementations used only by tests. They avoid the library's
// Cholesky-based routines so that agreement is evidence, not tautology.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "crowdfuse/rng.hpp"

namespace oracle {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Gauss-Jordan elimination with partial pivoting, written out by hand.
inline Matrix gauss_jordan_inverse(const Matrix& a) {
  const Eigen::Index n = a.rows();
  std::vector<std::vector<double>> m(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(2 * n)));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) m[i][j] = a(i, j);
    m[i][n + i] = 1.0;
  }
  for (Eigen::Index col = 0; col < n; ++col) {
    Eigen::Index pivot = col;
    for (Eigen::Index r = col + 1; r < n; ++r) {
      if (std::abs(m[r][col]) > std::abs(m[pivot][col])) pivot = r;
    }
    if (m[pivot][col] == 0.0) throw std::runtime_error("gauss_jordan_inverse: singular");
    std::swap(m[col], m[pivot]);
    const double d = m[col][col];
    for (auto& x : m[col]) x /= d;
    for (Eigen::Index r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = m[r][col];
      if (f == 0.0) continue;
      for (Eigen::Index c = 0; c < 2 * n; ++c) m[r][c] -= f * m[col][c];
    }
  }
  Matrix inv(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) inv(i, j) = m[i][n + j];
  return inv;
}

// log|A| from the same elimination (A assumed to have positive determinant).
inline double log_det_by_elimination(const Matrix& a) {
  Matrix m = a;
  const Eigen::Index n = m.rows();
  double log_abs = 0.0;
  for (Eigen::Index col = 0; col < n; ++col) {
    Eigen::Index pivot = col;
    for (Eigen::Index r = col + 1; r < n; ++r) {
      if (std::abs(m(r, col)) > std::abs(m(pivot, col))) pivot = r;
    }
    m.row(col).swap(m.row(pivot));
    log_abs += std::log(std::abs(m(col, col)));
    for (Eigen::Index r = col + 1; r < n; ++r) {
      const double f = m(r, col) / m(col, col);
      m.row(r) -= f * m.row(col);
    }
  }
  return log_abs;
}

// Random symmetric positive definite matrix with eigenvalues in a moderate range.
inline Matrix random_spd(std::size_t k, crowdfuse::Rng& rng, double ridge = 0.2) {
  const auto n = static_cast<Eigen::Index>(k);
  Matrix a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = rng.gaussian();
  Matrix s = a * a.transpose() / static_cast<double>(k);
  s.diagonal().array() += ridge;
  return 0.5 * (s + s.transpose());
}

// The regularized negative log-likelihood of one leave-one-out model, summed
// row by row from its definition (Gaussian likelihood, Gaussian coefficient
// prior with precision Lambda / ell, inverse-gamma prior on ell).
inline double blr_loss(const Matrix& rows, std::size_t k, const Vector& u, double ell, double lambda, double rho,
                       double u_bar, double ell_bar, double lambda_ell) {
  const Eigen::Index kk = static_cast<Eigen::Index>(k);
  const Eigen::Index dim = rows.cols();
  double ssr = 0.0;
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    double pred = 0.0;
    Eigen::Index pos = 0;
    for (Eigen::Index j = 0; j < dim; ++j) {
      if (j == kk) continue;
      pred += u(pos++) * rows(r, j);
    }
    const double e = rows(r, kk) - pred;
    ssr += e * e;
  }
  double quad = 0.0;
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    for (Eigen::Index j = 0; j < u.size(); ++j) {
      const double lam = i == j ? lambda : lambda * rho;
      quad += (u(i) - u_bar) * lam * (u(j) - u_bar);
    }
  }
  const double n = static_cast<double>(rows.rows());
  const double km1 = static_cast<double>(dim - 1);
  const double kd = static_cast<double>(dim);
  return 0.5 * n * std::log(ell) + ssr / (2.0 * ell) + 0.5 * km1 * std::log(ell) + quad / (2.0 * ell) +
         (0.5 * lambda_ell + 1.0) * std::log(ell) + (lambda_ell + kd + 1.0) * ell_bar / (2.0 * ell);
}

// ELBO from raw rows, using the Gauss-Jordan inverse and elimination log-det.
inline double elbo(const Matrix& rows, const Matrix& prior_mean, double c, const Matrix& sigma, const Vector& w,
                   double v) {
  const Matrix inv = gauss_jordan_inverse(sigma);
  const double k = static_cast<double>(sigma.rows());
  const double t = static_cast<double>(rows.rows()) + 1.0;
  double g = -(c + 2.0 * k + 1.0 + t) * log_det_by_elimination(sigma) - c * (prior_mean * inv).trace();
  const Vector ones = Vector::Ones(sigma.rows());
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    const Vector y = rows.row(r).transpose();
    const double z = w.dot(y);
    const Vector e = y - z * ones;
    g -= e.dot(inv * e) + v * ones.dot(inv * ones) + (v + z * z - 1.0 - std::log(v));
  }
  return g;
}

// Sum_{n=1}^{N} n^{-q}, in long double.
inline double partial_zeta(std::size_t n, double q) {
  long double s = 0.0L;
  for (std::size_t i = 1; i <= n; ++i) s += std::pow(static_cast<long double>(i), -static_cast<long double>(q));
  return static_cast<double>(s);
}

}  // namespace oracle
