#include "crowdfuse/harness/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <ostream>
#include <sstream>

#include "crowdfuse/datagen.hpp"
#include "crowdfuse/linalg.hpp"
#include "crowdfuse/policies.hpp"
#include "crowdfuse/rng.hpp"

namespace crowdfuse::harness {

namespace {

constexpr std::uint64_t kSelftestSeed = 20240601;

Matrix random_pd(std::size_t k, Rng& rng) {
  const auto n = static_cast<Eigen::Index>(k);
  Matrix a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = rng.gaussian();
  Matrix s = a * a.transpose() / static_cast<double>(k);
  s.diagonal().array() += 0.5;
  return 0.5 * (s + s.transpose());
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

Outcome precision_round_trip() {
  Rng rng(derive_seed(kSelftestSeed, {1}));
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t k = 2 + static_cast<std::size_t>(i % 11);
    const PdMatrix s(random_pd(k, rng));
    const Matrix p = precision_from_regression_params(regression_params_from_cov(s));
    worst = std::max(worst, max_abs_diff(p, inverse(s)));
  }
  std::ostringstream os;
  os << "max entry error " << worst << " (limit 1e-8)";
  return {worst <= 1e-8, os.str()};
}

Outcome prescient_weight_identity(Mutation mutation) {
  Rng rng(derive_seed(kSelftestSeed, {2}));
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t k = 2 + static_cast<std::size_t>(i % 9);
    const double vbar = (i % 3 == 0) ? 0.5 : (i % 3 == 1 ? 1.0 : 2.0);
    const PdMatrix sigma(random_pd(k, rng));
    const Vector ones = Vector::Ones(static_cast<Eigen::Index>(k));
    const PdMatrix s(SymMatrix::symmetrized(sigma.entries() + vbar * ones * ones.transpose()));
    AggregationWeights pew = pew_weights(regression_params_from_cov(s), vbar);
    if (mutation == Mutation::pew_sign) pew.values = -pew.values;
    const AggregationWeights ref = clairvoyant_weights(sigma, vbar);
    worst = std::max(worst, (pew.values - ref.values).cwiseAbs().maxCoeff());
  }
  std::ostringstream os;
  os << "max weight gap " << worst << " (limit 1e-8)";
  return {worst <= 1e-8, os.str()};
}

Outcome blr_gradient() {
  Rng rng(derive_seed(kSelftestSeed, {3}));
  double worst = 0.0;
  for (int i = 0; i < 6; ++i) {
    const std::size_t k = 5;
    const std::size_t rows = (i % 3 == 0) ? 0 : (i % 3 == 1 ? 20 : 200);
    const PdMatrix cov(random_pd(k, rng));
    Matrix y(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k));
    for (Eigen::Index r = 0; r < y.rows(); ++r) y.row(r) = sample_mvn_zero_mean(cov, rng).transpose();
    const PewHyperparams hp = PewHyperparams::with_standard_priors(k, 2.0 + i, 0.3, 2.0, 10.0);
    const std::size_t worker = static_cast<std::size_t>(i) % k;
    const RegressionParams fit = blr_fit(y, worker, hp);

    Vector theta(fit.coeffs.size() + 1);
    theta << fit.coeffs, fit.residual_var;
    auto loss = [&](const Vector& th) {
      return ssl_loss(y, worker, hp, th.head(th.size() - 1), th(th.size() - 1));
    };
    const double base = loss(theta);
    for (Eigen::Index j = 0; j < theta.size(); ++j) {
      const double h = 1e-5 * std::max(1.0, std::abs(theta(j)));
      Vector up = theta, down = theta;
      up(j) += h;
      down(j) -= h;
      const double g = (loss(up) - loss(down)) / (2.0 * h);
      worst = std::max(worst, std::abs(g) * std::max(1.0, std::abs(theta(j))) / std::max(1.0, std::abs(base)));
    }
  }
  std::ostringstream os;
  os << "max scaled gradient " << worst << " (limit 1e-4)";
  return {worst <= 1e-4, os.str()};
}

Outcome elbo_ascent(Mutation mutation) {
  Rng rng(derive_seed(kSelftestSeed, {4}));
  DgpConfig dgp;
  dgp.num_factors = 200;
  dgp.num_workers = 5;
  const WorkerPool pool = sample_loadings(dgp, rng);
  const History h = sample_history(pool, 50, 1.0, rng);
  EmHyperparams hp;
  EmOptions opts;
  opts.record_elbo = true;
  if (mutation == Mutation::em_nosym) {
    opts.symmetrize = false;
    opts.debug_asymmetry = 1e-3;
  }
  EmResult fit = [&] {
    try {
      return em_fit(SecondMoments::from_rows(h.estimates), hp, opts);
    } catch (const NotPositiveDefinite& e) {
      throw std::runtime_error(std::string("EM update rejected: ") + e.what());
    }
  }();
  double worst_drop = 0.0;
  for (std::size_t i = 1; i < fit.elbo_trace.size(); ++i) {
    worst_drop = std::max(worst_drop, fit.elbo_trace[i - 1] - fit.elbo_trace[i]);
  }
  std::ostringstream os;
  os << fit.iterations << " iterations, largest decrease " << worst_drop << " (limit 1e-6)";
  return {worst_drop <= 1e-6, os.str()};
}

}  // namespace

std::optional<Mutation> parse_mutation(const std::string& name) {
  if (name == "none") return Mutation::none;
  if (name == "pew-sign") return Mutation::pew_sign;
  if (name == "em-nosym") return Mutation::em_nosym;
  return std::nullopt;
}

int run_selftest(std::ostream& out, Mutation mutation) {
  const std::pair<const char*, std::function<Outcome()>> checks[] = {
      {"precision_round_trip", precision_round_trip},
      {"prescient_weight_identity", [&] { return prescient_weight_identity(mutation); }},
      {"blr_gradient", blr_gradient},
      {"elbo_ascent", [&] { return elbo_ascent(mutation); }},
  };
  int failures = 0;
  for (const auto& [name, check] : checks) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << " [" << secs << " s]" << std::endl;
    if (!o.pass) ++failures;
  }
  out << (failures == 0 ? "selftest passed" : "selftest FAILED") << std::endl;
  return failures;
}

}  // namespace crowdfuse::harness
