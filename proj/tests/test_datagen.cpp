#include <algorithm>
#include <cmath>
#include <sstream>

#include <doctest.h>

#include "crowdfuse/datagen.hpp"
#include "crowdfuse/evaluation.hpp"
#include "oracles.hpp"

using namespace crowdfuse;

TEST_CASE("DgpConfig validation") {
  DgpConfig c;
  CHECK_NOTHROW(c.validate());
  c.decay = 0.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = DgpConfig{};
  c.outcome_variance = -1.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("expected noise variance is the partial zeta sum") {
  DgpConfig c;
  CHECK(expected_noise_variance(c) == doctest::Approx(oracle::partial_zeta(1000, 1.7)).epsilon(1e-12));
}

TEST_CASE("steep decay leaves a rank-one noise covariance") {
  DgpConfig c;
  c.decay = 50.0;
  c.num_workers = 4;
  Rng rng(1);
  const WorkerPool pool = sample_loadings(c, rng);
  CHECK(pool.loadings.rightCols(998).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("loadings are deterministic and nested by prefix") {
  DgpConfig c;
  c.num_workers = 12;
  Rng a(3), b(3);
  const WorkerPool p1 = sample_loadings(c, a);
  const WorkerPool p2 = sample_loadings(c, b);
  CHECK(p1.loadings == p2.loadings);
  Rng d(3);
  const WorkerPool small = sample_loadings(c.with_workers(5), d);
  CHECK(small.loadings == p1.prefix(5).loadings);
}

TEST_CASE("noise_covariance") {
  WorkerPool eye{Matrix::Identity(3, 3)};
  CHECK(noise_covariance(eye).entries() == Matrix::Identity(3, 3));

  WorkerPool one{Matrix(1, 3)};
  one.loadings << 1, 2, 3;
  CHECK(noise_covariance(one).entries()(0, 0) == doctest::Approx(14.0));

  WorkerPool degenerate{Matrix(3, 2)};
  degenerate.loadings << 1, 0, 0, 1, 1, 1;
  CHECK_THROWS_AS(noise_covariance(degenerate), DegeneratePoolError);
}

TEST_CASE("noise covariance matches the sampled noise") {
  DgpConfig c;
  c.num_workers = 10;
  Rng rng(4);
  const WorkerPool pool = sample_loadings(c, rng);
  const PdMatrix sigma = noise_covariance(pool);
  const History h = sample_history(pool, 100000, 1.0, rng);
  const Matrix noise = h.estimates - h.outcomes * Vector::Ones(10).transpose();
  const double n = static_cast<double>(h.rounds());
  const Matrix cov = noise.transpose() * noise / n;
  int within = 0;
  for (Eigen::Index i = 0; i < 10; ++i) {
    for (Eigen::Index j = 0; j < 10; ++j) {
      const Vector prod = noise.col(i).cwiseProduct(noise.col(j));
      const double var = (prod.array() - cov(i, j)).square().sum() / (n - 1.0);
      within += std::abs(cov(i, j) - sigma.entries()(i, j)) <= 3.0 * std::sqrt(var / n);
    }
  }
  // 3 sigma per entry; allow a couple of the 100 entries to stray.
  CHECK(within >= 97);
}

TEST_CASE("sample_history") {
  DgpConfig c;
  c.num_workers = 4;
  Rng rng(5);
  const WorkerPool pool = sample_loadings(c, rng);
  CHECK(sample_history(pool, 0, 1.0, rng).rounds() == 0);

  WorkerPool perfect{Matrix::Zero(4, 50)};
  const History h = sample_history(perfect, 20, 1.0, rng);
  for (Eigen::Index r = 0; r < 20; ++r) {
    for (Eigen::Index k = 0; k < 4; ++k) CHECK(h.estimates(r, k) == h.outcomes(r));
  }
}

TEST_CASE("estimate covariance matches noise plus outcome variance") {
  DgpConfig c;
  c.num_workers = 10;
  Rng rng(6);
  const WorkerPool pool = sample_loadings(c, rng);
  const History h = sample_history(pool, 100000, 1.0, rng);
  const Matrix cov = h.estimates.transpose() * h.estimates / static_cast<double>(h.rounds());
  const Matrix expected = noise_covariance(pool).entries() + Matrix::Ones(10, 10);
  CHECK((cov - expected).cwiseAbs().maxCoeff() <= 0.1);
}

TEST_CASE("permuting workers permutes estimate columns") {
  DgpConfig c;
  c.num_workers = 5;
  Rng rng(7);
  const WorkerPool pool = sample_loadings(c, rng);
  WorkerPool swapped = pool;
  swapped.loadings.row(0).swap(swapped.loadings.row(3));
  Rng a(8), b(8);
  const History h1 = sample_history(pool, 30, 1.0, a);
  const History h2 = sample_history(swapped, 30, 1.0, b);
  CHECK(h1.estimates.col(0) == h2.estimates.col(3));
  CHECK(h1.estimates.col(3) == h2.estimates.col(0));
  CHECK(h1.estimates.col(1) == h2.estimates.col(1));
}

TEST_CASE("consensus estimate") {
  WorkerPool zero{Matrix::Zero(1, 10)};
  Rng rng(9);
  Vector x(10);
  for (Eigen::Index i = 0; i < 10; ++i) x(i) = rng.gaussian();
  CHECK(consensus_estimate(zero, 0.7, x) == 0.7);

  DgpConfig c;
  c.num_workers = 300;
  const WorkerPool pool = sample_loadings(c, rng);
  CHECK(consensus_estimate(pool, -1.2, Vector::Zero(1000)) == -1.2);
}

TEST_CASE("consensus error shrinks like one over the crowd size") {
  // Averaged over pools, E[(consensus - z)^2] = expected_noise_variance / K.
  DgpConfig c;
  c.num_workers = 1000;
  Rng rng(10);
  const std::size_t sizes[] = {10, 100, 1000};
  double sums[3] = {0.0, 0.0, 0.0};
  const int pools = 100, rounds = 10;
  Vector x(1000);
  for (int p = 0; p < pools; ++p) {
    const WorkerPool all = sample_loadings(c, rng);
    for (int r = 0; r < rounds; ++r) {
      for (Eigen::Index i = 0; i < 1000; ++i) x(i) = rng.gaussian();
      for (std::size_t s = 0; s < 3; ++s) sums[s] += std::pow(consensus_estimate(all.prefix(sizes[s]), 0.0, x), 2);
    }
  }
  const double e = expected_noise_variance(c);
  std::vector<double> mse;
  for (std::size_t s = 0; s < 3; ++s) {
    mse.push_back(sums[s] / (pools * rounds));
    CHECK(mse[s] == doctest::Approx(e / static_cast<double>(sizes[s])).epsilon(0.25));
  }
  CHECK(mse[0] > mse[1]);
  CHECK(mse[1] > mse[2]);
  const double slope = (std::log(mse[2]) - std::log(mse[0])) / std::log(100.0);
  CHECK(slope >= -1.15);
  CHECK(slope <= -0.85);
}

TEST_CASE("fixed linear combinations of estimates are Gaussian") {
  DgpConfig c;
  c.num_workers = 6;
  Rng rng(11);
  const WorkerPool pool = sample_loadings(c, rng);
  const History h = sample_history(pool, 20000, 1.0, rng);
  Vector nu(6);
  nu << 0.3, -0.1, 0.2, 0.25, 0.1, 0.05;
  const Matrix s = noise_covariance(pool).entries() + Matrix::Ones(6, 6);
  const double sd = std::sqrt(nu.dot(s * nu));
  std::vector<double> z(static_cast<std::size_t>(h.rounds()));
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = h.estimates.row(static_cast<Eigen::Index>(i)).dot(nu) / sd;
  std::sort(z.begin(), z.end());
  double d = 0.0;
  const double n = static_cast<double>(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double f = 0.5 * std::erfc(-z[i] / std::sqrt(2.0));
    d = std::max({d, std::abs(f - static_cast<double>(i) / n), std::abs(f - static_cast<double>(i + 1) / n)});
  }
  // Kolmogorov-Smirnov critical value at alpha = 0.001.
  CHECK(d < 1.95 / std::sqrt(n));
}

TEST_CASE("history CSV layout") {
  History h{Vector(2), Matrix(2, 2)};
  h.outcomes << 0.5, -1;
  h.estimates << 1, 2, 3, 4.25;
  std::ostringstream os;
  write_history_csv(os, h);
  CHECK(os.str() == "round,z,y_1,y_2\n1,0.5,1,2\n2,-1,3,4.25\n");
}

TEST_CASE("draw_scenario is deterministic and paired across calls") {
  DgpConfig c;
  const Scenario a = draw_scenario(c, 7, 20, 42, SeedDomain::evaluation, 3);
  const Scenario b = draw_scenario(c, 7, 20, 42, SeedDomain::evaluation, 3);
  CHECK(a.pool.loadings == b.pool.loadings);
  CHECK(a.history.estimates == b.history.estimates);
  const Scenario other = draw_scenario(c, 7, 20, 42, SeedDomain::tuning, 3);
  CHECK(other.pool.loadings != a.pool.loadings);
}

TEST_CASE("draw_scenario resamples degenerate pools then gives up") {
  DgpConfig c;
  c.num_factors = 3;
  CHECK_THROWS_AS(draw_scenario(c, 5, 0, 1, SeedDomain::evaluation, 0), DegeneratePoolError);
}
