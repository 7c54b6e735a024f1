#include "crowdfuse/tuning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace crowdfuse {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct SslCombo {
  double lambda;
  double rho;
  double ig_shape;
};

struct EmCombo {
  double prior_var;
  double prior_corr;
  double concentration;
};

std::vector<double> means_of(const std::vector<std::vector<double>>& per_t) {
  std::vector<double> out;
  for (const auto& v : per_t) out.push_back(summarize(v).mean);
  return out;
}

}  // namespace

TuningGrid TuningGrid::standard(std::size_t num_workers) {
  const double k = static_cast<double>(num_workers);
  TuningGrid g;
  for (int i = 0; i <= 10; i += 2) g.lambdas.push_back(static_cast<double>(i) * k / 5.0);
  g.rhos = {0.0, 0.2, 0.4, 0.6, 0.8};
  g.ig_shapes = {0.0, 2.0, 4.0, 6.0};
  for (int i = 1; i <= 8; ++i) g.reg_decays.push_back(2.5 * static_cast<double>(i) * k);
  g.em_prior_vars = {0.2, 2.0, 20.0};
  g.em_prior_corrs = {0.0, 0.1};
  g.em_concentrations = {0.1, 1.0, 10.0};
  return g;
}

void TuningGrid::validate() const {
  if (lambdas.empty() || rhos.empty() || ig_shapes.empty() || reg_decays.empty()) {
    throw ContractError("TuningGrid: PEW grids must be nonempty");
  }
  if (em_prior_vars.empty() || em_prior_corrs.empty() || em_concentrations.empty()) {
    throw ContractError("TuningGrid: EM grids must be nonempty");
  }
}

std::vector<std::size_t> ssl_stage_t_values(std::size_t k) { return {1, k, 10 * k, 100 * k}; }

std::vector<std::size_t> aggregation_stage_t_values(std::size_t k) { return {1, k, 3 * k, 5 * k, 7 * k, 10 * k}; }

bool is_monotone_non_increasing(std::span<const double> means) {
  for (std::size_t i = 1; i < means.size(); ++i) {
    if (means[i] > means[i - 1]) return false;
  }
  return true;
}

std::size_t select_combo(const std::vector<std::vector<double>>& means_by_combo, const std::vector<bool>& eligible,
                         bool& fell_back) {
  if (means_by_combo.empty()) throw ContractError("select_combo: no combos");
  auto pick = [&](bool use_filter) {
    std::size_t best = means_by_combo.size();
    double best_value = kInf;
    for (std::size_t i = 0; i < means_by_combo.size(); ++i) {
      if (!eligible[i]) continue;
      if (use_filter && !is_monotone_non_increasing(means_by_combo[i])) continue;
      const double v = means_by_combo[i].back();
      if (best == means_by_combo.size() || v < best_value) {
        best = i;
        best_value = v;
      }
    }
    return best;
  };
  fell_back = false;
  std::size_t best = pick(true);
  if (best == means_by_combo.size()) {
    fell_back = true;
    best = pick(false);
  }
  if (best == means_by_combo.size()) throw ContractError("select_combo: no eligible combo");
  return best;
}

PewTuningResult tune_pew(const DgpConfig& dgp, std::size_t num_workers, const TuningGrid& grid,
                         const SeedPlan& seeds) {
  grid.validate();
  if (seeds.count == 0) throw ContractError("tune_pew: need at least one seed");
  if (num_workers < 2) throw ContractError("tune_pew: need K >= 2");
  const double vbar = dgp.outcome_variance;
  PewTuningResult result;

  // Stage one: SSL models.
  std::vector<SslCombo> ssl;
  for (double lambda : grid.lambdas)
    for (double rho : grid.rhos)
      for (double ig : grid.ig_shapes) ssl.push_back({lambda, rho, ig});
  auto ssl_hp = [&](const SslCombo& c, double r) {
    return PewHyperparams::with_standard_priors(num_workers, c.lambda, c.rho, c.ig_shape, r, vbar);
  };

  const auto ssl_ts = ssl_stage_t_values(num_workers);
  // metric[combo][t][seed]
  std::vector<std::vector<std::vector<double>>> ssl_metric(ssl.size(), std::vector<std::vector<double>>(ssl_ts.size()));
  for (std::size_t s = 0; s < seeds.count; ++s) {
    const Scenario sc = draw_scenario(dgp, num_workers, ssl_ts.back() - 1, seeds.master_seed, seeds.domain, s);
    SecondMoments past(num_workers);
    std::size_t fed = 0;
    for (std::size_t ti = 0; ti < ssl_ts.size(); ++ti) {
      past.add_rows(sc.history.estimates, fed, ssl_ts[ti] - 1);
      fed = ssl_ts[ti] - 1;
      for (std::size_t c = 0; c < ssl.size(); ++c) {
        double value = kInf;
        try {
          const auto m = ssl_quality_metric(blr_fit_all(past, ssl_hp(ssl[c], 1.0)), sc.noise_cov, vbar);
          if (m) value = *m;
        } catch (const NotPositiveDefinite&) {
        }
        ssl_metric[c][ti].push_back(value);
      }
    }
  }

  std::vector<std::vector<double>> ssl_means;
  std::vector<bool> ssl_eligible;
  for (std::size_t c = 0; c < ssl.size(); ++c) {
    ssl_means.push_back(means_of(ssl_metric[c]));
    ssl_eligible.push_back(ssl[c].lambda > 0.0);
  }
  const std::size_t ssl_best = select_combo(ssl_means, ssl_eligible, result.ssl_fell_back);
  for (std::size_t c = 0; c < ssl.size(); ++c) {
    for (std::size_t ti = 0; ti < ssl_ts.size(); ++ti) {
      result.audit.push_back({"ssl",
                              c,
                              num_workers,
                              {{"lambda", ssl[c].lambda}, {"rho", ssl[c].rho}, {"lambda_ell", ssl[c].ig_shape}, {"r", kNaN}},
                              ssl_ts[ti],
                              summarize(ssl_metric[c][ti]),
                              c == ssl_best});
    }
  }

  // Stage two: aggregation regularization.
  const auto agg_ts = aggregation_stage_t_values(num_workers);
  const auto& rs = grid.reg_decays;
  std::vector<std::vector<std::vector<double>>> agg_mse(rs.size(), std::vector<std::vector<double>>(agg_ts.size()));
  for (std::size_t s = 0; s < seeds.count; ++s) {
    const Scenario sc = draw_scenario(dgp, num_workers, agg_ts.back() - 1, seeds.master_seed, seeds.domain, s);
    SecondMoments past(num_workers);
    std::size_t fed = 0;
    for (std::size_t ti = 0; ti < agg_ts.size(); ++ti) {
      past.add_rows(sc.history.estimates, fed, agg_ts[ti] - 1);
      fed = agg_ts[ti] - 1;
      for (std::size_t c = 0; c < rs.size(); ++c) {
        double value = kInf;
        try {
          const auto w = pew_aggregation_weights(past, ssl_hp(ssl[ssl_best], rs[c]));
          value = mse_closed_form(sc.noise_cov, w, vbar).total();
        } catch (const NotPositiveDefinite&) {
        }
        agg_mse[c][ti].push_back(value);
      }
    }
  }

  std::vector<std::vector<double>> agg_means;
  for (const auto& per_t : agg_mse) agg_means.push_back(means_of(per_t));
  const std::size_t agg_best = select_combo(agg_means, std::vector<bool>(rs.size(), true), result.aggregation_fell_back);
  const auto& w = ssl[ssl_best];
  for (std::size_t c = 0; c < rs.size(); ++c) {
    for (std::size_t ti = 0; ti < agg_ts.size(); ++ti) {
      result.audit.push_back({"aggregation",
                              c,
                              num_workers,
                              {{"lambda", w.lambda}, {"rho", w.rho}, {"lambda_ell", w.ig_shape}, {"r", rs[c]}},
                              agg_ts[ti],
                              summarize(agg_mse[c][ti]),
                              c == agg_best});
    }
  }

  result.selected = ssl_hp(w, rs[agg_best]);
  return result;
}

EmTuningResult tune_em(const DgpConfig& dgp, std::size_t num_workers, std::span<const std::size_t> t_values,
                       const TuningGrid& grid, const SeedPlan& seeds) {
  grid.validate();
  if (seeds.count == 0) throw ContractError("tune_em: need at least one seed");
  if (t_values.empty()) throw ContractError("tune_em: need at least one t");
  std::vector<std::size_t> ts(t_values.begin(), t_values.end());
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  if (ts.front() < 1) throw ContractError("tune_em: t must be >= 1");

  std::vector<EmCombo> combos;
  for (double v : grid.em_prior_vars)
    for (double r : grid.em_prior_corrs)
      for (double c : grid.em_concentrations) combos.push_back({v, r, c});
  auto to_hp = [](const EmCombo& c) {
    EmHyperparams hp;
    hp.prior_var = c.prior_var;
    hp.prior_corr = c.prior_corr;
    hp.concentration = c.concentration;
    return hp;
  };

  const double vbar = dgp.outcome_variance;
  // mse[t][combo][seed]
  std::vector<std::vector<std::vector<double>>> mse(ts.size(), std::vector<std::vector<double>>(combos.size()));
  for (std::size_t s = 0; s < seeds.count; ++s) {
    const Scenario sc = draw_scenario(dgp, num_workers, ts.back() - 1, seeds.master_seed, seeds.domain, s);
    SecondMoments past(num_workers);
    std::size_t fed = 0;
    for (std::size_t ti = 0; ti < ts.size(); ++ti) {
      past.add_rows(sc.history.estimates, fed, ts[ti] - 1);
      fed = ts[ti] - 1;
      for (std::size_t c = 0; c < combos.size(); ++c) {
        double value = kInf;
        try {
          const EmResult fit = em_fit(past, to_hp(combos[c]));
          value = mse_closed_form(sc.noise_cov, clairvoyant_weights(fit.sigma, vbar), vbar).total();
        } catch (const NotPositiveDefinite&) {
        }
        mse[ti][c].push_back(value);
      }
    }
  }

  EmTuningResult result;
  for (std::size_t ti = 0; ti < ts.size(); ++ti) {
    std::size_t best = 0;
    double best_value = kInf;
    std::vector<MeanEstimate> stats;
    for (std::size_t c = 0; c < combos.size(); ++c) {
      stats.push_back(summarize(mse[ti][c]));
      if (c == 0 || stats[c].mean < best_value) {
        best = c;
        best_value = stats[c].mean;
      }
    }
    result.selected.emplace_back(ts[ti], to_hp(combos[best]));
    for (std::size_t c = 0; c < combos.size(); ++c) {
      result.audit.push_back({"em",
                              c,
                              num_workers,
                              {{"sigma_bar_sq", combos[c].prior_var},
                               {"rho_bar", combos[c].prior_corr},
                               {"c", combos[c].concentration}},
                              ts[ti],
                              stats[c],
                              c == best});
    }
  }
  // Report in the caller's order.
  std::vector<std::pair<std::size_t, EmHyperparams>> ordered;
  for (std::size_t t : t_values) {
    for (const auto& entry : result.selected) {
      if (entry.first == t) {
        ordered.push_back(entry);
        break;
      }
    }
  }
  result.selected = std::move(ordered);
  return result;
}

}  // namespace crowdfuse
