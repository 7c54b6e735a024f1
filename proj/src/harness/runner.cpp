#include "crowdfuse/harness/runner.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "crowdfuse/evaluation.hpp"

namespace crowdfuse::harness {

namespace fs = std::filesystem;

namespace {

std::string fmt(std::size_t v) { return std::to_string(v); }

double parse_double(const std::string& s) {
  std::size_t used = 0;
  const double d = std::stod(s, &used);
  if (used != s.size()) throw std::runtime_error("malformed number '" + s + "'");
  return d;
}

std::size_t parse_size(const std::string& s) {
  std::size_t used = 0;
  const unsigned long long v = std::stoull(s, &used);
  if (used != s.size()) throw std::runtime_error("malformed integer '" + s + "'");
  return static_cast<std::size_t>(v);
}

void require_header(const CsvTable& t, const std::vector<std::string>& header, const fs::path& path) {
  if (t.header() != header) throw std::runtime_error(path.string() + ": unexpected header");
}

fs::path unit_path(const fs::path& dir, std::size_t k, std::size_t seed) {
  return dir / "units" / ("K" + fmt(k) + "_seed" + fmt(seed) + ".csv");
}

bool any_tuned(const ExperimentConfig& cfg, PolicyKind kind) {
  for (const auto& p : cfg.policies) {
    if (p.kind == kind && p.mode == HyperparamMode::tuned) return true;
  }
  return false;
}

using PewTable = std::map<std::size_t, PewHyperparams>;
using EmTable = std::map<std::pair<std::size_t, std::size_t>, EmHyperparams>;

std::vector<std::pair<std::size_t, PewHyperparams>> tune_pew_all(const ExperimentConfig& cfg,
                                                                 std::vector<TuningAuditRow>& audit,
                                                                 std::ostream& log) {
  std::vector<std::pair<std::size_t, PewHyperparams>> out;
  const SeedPlan seeds{cfg.master_seed, SeedDomain::tuning, cfg.tuning.seeds};
  for (std::size_t k : cfg.k_values) {
    log << "[tune] pew K=" << k << " (" << seeds.count << " seeds)" << std::endl;
    PewTuningResult r = tune_pew(cfg.dgp, k, cfg.tuning.grid_for(k), seeds);
    if (r.ssl_fell_back) log << "[tune] pew K=" << k << ": no SSL combo passed the monotonicity filter" << std::endl;
    if (r.aggregation_fell_back) log << "[tune] pew K=" << k << ": no r passed the monotonicity filter" << std::endl;
    log << "[tune] pew K=" << k << " selected lambda=" << r.selected.lambda << " rho=" << r.selected.rho
        << " lambda_ell=" << r.selected.ig_shape << " r=" << r.selected.reg_decay << std::endl;
    out.emplace_back(k, r.selected);
    audit.insert(audit.end(), r.audit.begin(), r.audit.end());
  }
  return out;
}

std::vector<std::pair<std::size_t, std::pair<std::size_t, EmHyperparams>>> tune_em_all(
    const ExperimentConfig& cfg, std::vector<TuningAuditRow>& audit, std::ostream& log) {
  if (cfg.t_values.empty()) throw ConfigError("EM tuning needs t_values");
  std::vector<std::pair<std::size_t, std::pair<std::size_t, EmHyperparams>>> out;
  const SeedPlan seeds{cfg.master_seed, SeedDomain::tuning, cfg.tuning.seeds};
  for (std::size_t k : cfg.k_values) {
    const auto ts = cfg.t_values_for(k);
    log << "[tune] em K=" << k << " (" << ts.size() << " t values, " << seeds.count << " seeds)" << std::endl;
    EmTuningResult r = tune_em(cfg.dgp, k, ts, cfg.tuning.grid_for(k), seeds);
    for (const auto& [t, hp] : r.selected) out.push_back({k, {t, hp}});
    audit.insert(audit.end(), r.audit.begin(), r.audit.end());
  }
  return out;
}

PewTable read_tuned_pew(const fs::path& path, double vbar) {
  const CsvTable t = CsvTable::read(path);
  require_header(t, kTunedPewHeader, path);
  PewTable out;
  for (const auto& row : t.rows()) {
    const std::size_t k = parse_size(row[0]);
    out[k] = pew_from_values({{"lambda", parse_double(row[1])},
                              {"rho", parse_double(row[2])},
                              {"lambda_ell", parse_double(row[3])},
                              {"r", parse_double(row[4])}},
                             k, vbar);
  }
  return out;
}

EmTable read_tuned_em(const fs::path& path) {
  const CsvTable t = CsvTable::read(path);
  require_header(t, kTunedEmHeader, path);
  EmTable out;
  for (const auto& row : t.rows()) {
    out[{parse_size(row[0]), parse_size(row[1])}] = em_from_values(
        {{"sigma_bar_sq", parse_double(row[2])}, {"rho_bar", parse_double(row[3])}, {"c", parse_double(row[4])}});
  }
  return out;
}

void check_manifest(const ExperimentConfig& cfg, bool resume) {
  const fs::path manifest = cfg.output_dir / "sweep_manifest.json";
  const std::string fp = cfg.fingerprint() + "\n";
  if (resume && fs::exists(manifest)) {
    std::ifstream in(manifest, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    if (buf.str() != fp) {
      throw ConfigError(manifest.string() +
                        ": existing results were produced by a different config or seed; rerun without --resume");
    }
    return;
  }
  if (!resume) {
    // Drop unit files from an earlier run so they cannot mix with this one.
    const fs::path units = cfg.output_dir / "units";
    if (fs::exists(units)) {
      for (const auto& entry : fs::directory_iterator(units)) {
        const std::string name = entry.path().filename().string();
        if (entry.is_regular_file() && name.rfind('K', 0) == 0 && entry.path().extension() == ".csv") {
          fs::remove(entry.path());
        }
      }
    }
  }
  write_text_atomic(manifest, fp);
}

}  // namespace

CsvTable aggregate_table(const std::vector<CsvTable>& results) {
  CsvTable out(kAggregateHeader);
  for (const CsvTable& table : results) {
    const auto& rows = table.rows();
    std::size_t i = 0;
    while (i < rows.size()) {
      std::size_t j = i;
      std::vector<double> totals;
      while (j < rows.size() && rows[j][0] == rows[i][0] && rows[j][1] == rows[i][1] && rows[j][2] == rows[i][2]) {
        totals.push_back(parse_double(rows[j][6]));
        ++j;
      }
      const MeanEstimate m = summarize(totals);
      const double rmse = std::sqrt(m.mean);
      const double rmse_se = rmse > 0.0 ? m.stderr / (2.0 * rmse) : 0.0;
      out.add_row({rows[i][0], rows[i][1], rows[i][2], fmt(m.count), format_double(m.mean), format_double(m.stderr),
                   format_double(rmse), format_double(rmse_se)});
      i = j;
    }
  }
  return out;
}

CsvTable audit_table(const std::vector<TuningAuditRow>& rows) {
  std::vector<std::string> header{"stage", "combo_id", "K"};
  if (!rows.empty()) {
    for (const auto& [name, value] : rows.front().params) header.push_back(name);
  }
  for (const char* h : {"t", "metric_mean", "metric_stderr", "selected"}) header.emplace_back(h);
  CsvTable out(header);
  for (const auto& r : rows) {
    std::vector<std::string> cells{r.stage, fmt(r.combo_id), fmt(r.num_workers)};
    for (const auto& [name, value] : r.params) cells.push_back(std::isnan(value) ? "" : format_double(value));
    cells.push_back(fmt(r.t));
    cells.push_back(format_double(r.metric.mean));
    cells.push_back(format_double(r.metric.stderr));
    cells.push_back(r.selected ? "true" : "false");
    out.add_row(std::move(cells));
  }
  return out;
}

CsvTable tuned_pew_table(const std::vector<std::pair<std::size_t, PewHyperparams>>& rows) {
  CsvTable out(kTunedPewHeader);
  for (const auto& [k, hp] : rows) {
    out.add_row({fmt(k), format_double(hp.lambda), format_double(hp.rho), format_double(hp.ig_shape),
                 format_double(hp.reg_decay)});
  }
  return out;
}

CsvTable tuned_em_table(const std::vector<std::pair<std::size_t, std::pair<std::size_t, EmHyperparams>>>& rows) {
  CsvTable out(kTunedEmHeader);
  for (const auto& [k, entry] : rows) {
    const auto& [t, hp] = entry;
    out.add_row({fmt(k), fmt(t), format_double(hp.prior_var), format_double(hp.prior_corr),
                 format_double(hp.concentration)});
  }
  return out;
}

SweepSummary run_sweep(const ExperimentConfig& cfg, const SweepOptions& options, std::ostream& log) {
  if (cfg.policies.empty()) throw ConfigError("sweep: config lists no policies");
  if (cfg.t_values.empty()) throw ConfigError("sweep: config lists no t_values");
  fs::create_directories(cfg.output_dir / "units");
  check_manifest(cfg, options.resume);

  PewTable tuned_pew;
  EmTable tuned_em;
  if (any_tuned(cfg, PolicyKind::pew)) {
    const fs::path path = cfg.output_dir / "tuned_pew.csv";
    if (!(options.resume && fs::exists(path))) {
      std::vector<TuningAuditRow> audit;
      const auto rows = tune_pew_all(cfg, audit, log);
      audit_table(audit).write_atomic(cfg.output_dir / "tuning_audit_pew.csv");
      tuned_pew_table(rows).write_atomic(path);
    }
    tuned_pew = read_tuned_pew(path, cfg.dgp.outcome_variance);
  }
  if (any_tuned(cfg, PolicyKind::em)) {
    const fs::path path = cfg.output_dir / "tuned_em.csv";
    if (!(options.resume && fs::exists(path))) {
      std::vector<TuningAuditRow> audit;
      const auto rows = tune_em_all(cfg, audit, log);
      audit_table(audit).write_atomic(cfg.output_dir / "tuning_audit_em.csv");
      tuned_em_table(rows).write_atomic(path);
    }
    tuned_em = read_tuned_em(path);
  }

  auto policies_at = [&](std::size_t k, std::size_t t) {
    std::vector<PolicySpec> specs;
    for (const PolicyConfig& p : cfg.policies) {
      if (p.mode != HyperparamMode::tuned) {
        specs.push_back(resolve_policy(p, k, cfg.dgp.outcome_variance));
        continue;
      }
      PolicySpec s;
      s.kind = p.kind;
      s.label = p.name;
      if (p.kind == PolicyKind::pew) {
        s.pew = tuned_pew.at(k);
      } else {
        const auto it = tuned_em.find({k, t});
        if (it == tuned_em.end()) {
          throw ConfigError("tuned_em.csv has no entry for K=" + fmt(k) + ", t=" + fmt(t));
        }
        s.em = it->second;
      }
      specs.push_back(std::move(s));
    }
    return specs;
  };

  struct Unit {
    std::size_t k;
    std::size_t seed;
  };
  std::vector<Unit> todo;
  SweepSummary summary;
  for (std::size_t k : cfg.k_values) {
    for (std::size_t s = 0; s < cfg.seeds; ++s) {
      ++summary.units_total;
      const fs::path path = unit_path(cfg.output_dir, k, s);
      if (options.resume && fs::exists(path)) {
        try {
          require_header(CsvTable::read(path), kResultsHeader, path);
          ++summary.units_reused;
          continue;
        } catch (const std::exception& e) {
          log << "[sweep] recomputing unreadable unit " << path.string() << ": " << e.what() << std::endl;
        }
      }
      todo.push_back({k, s});
    }
  }
  if (options.max_new_units != 0 && todo.size() > options.max_new_units) todo.resize(options.max_new_units);
  const bool truncated = summary.units_reused + todo.size() < summary.units_total;

  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::mutex mu;
  std::exception_ptr failure;
  std::size_t done = 0;
  auto worker = [&]() {
    while (!stop) {
      const std::size_t i = next++;
      if (i >= todo.size()) return;
      const Unit u = todo[i];
      try {
        const auto ts = cfg.t_values_for(u.k);
        const Scenario sc =
            draw_scenario(cfg.dgp, u.k, ts.back() - 1, cfg.master_seed, SeedDomain::evaluation, u.seed);
        const PolicySchedule schedule = [&](std::size_t t) { return policies_at(u.k, t); };
        const auto samples = evaluate_scenario(sc, ts, schedule, cfg.dgp.outcome_variance);
        CsvTable table(kResultsHeader);
        for (std::size_t ti = 0; ti < ts.size(); ++ti) {
          const auto specs = policies_at(u.k, ts[ti]);
          for (std::size_t p = 0; p < specs.size(); ++p) {
            const MseSample& m = samples[ti][p];
            table.add_row({specs[p].label, fmt(u.k), fmt(ts[ti]), fmt(u.seed), format_double(m.clairvoyant_term),
                           format_double(m.excess_term), format_double(m.total())});
          }
        }
        table.write_atomic(unit_path(cfg.output_dir, u.k, u.seed));
        std::lock_guard<std::mutex> lock(mu);
        ++done;
        summary.pool_resamples += sc.resamples;
        if (sc.resamples > 0) {
          log << "[sweep] K=" << u.k << " seed=" << u.seed << ": resampled " << sc.resamples << " degenerate pool(s)"
              << std::endl;
        }
        log << "[sweep] K=" << u.k << " seed=" << u.seed << " done (" << done << "/" << todo.size() << ")"
            << std::endl;
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
        stop = true;
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, todo.size()));
  std::vector<std::thread> threads;
  for (std::size_t j = 1; j < jobs; ++j) threads.emplace_back(worker);
  worker();
  for (auto& th : threads) th.join();
  summary.units_computed = done;
  if (failure) std::rethrow_exception(failure);
  if (truncated) {
    log << "[sweep] stopped early; rerun with --resume to finish" << std::endl;
    return summary;
  }

  // Rebuild per-(policy, K) tables from the unit files in a fixed order.
  std::vector<CsvTable> results;
  for (std::size_t k : cfg.k_values) {
    std::vector<CsvTable> units;
    for (std::size_t s = 0; s < cfg.seeds; ++s) {
      const fs::path path = unit_path(cfg.output_dir, k, s);
      units.push_back(CsvTable::read(path));
      require_header(units.back(), kResultsHeader, path);
    }
    const auto ts = cfg.t_values_for(k);
    for (const PolicyConfig& p : cfg.policies) {
      CsvTable table(kResultsHeader);
      for (std::size_t t : ts) {
        const std::string t_cell = fmt(t);
        for (const CsvTable& unit : units) {
          for (const auto& row : unit.rows()) {
            if (row[0] == p.name && row[2] == t_cell) table.add_row(row);
          }
        }
      }
      table.write_atomic(cfg.output_dir / ("results_" + p.name + "_K" + fmt(k) + ".csv"));
      results.push_back(std::move(table));
    }
  }
  aggregate_table(results).write_atomic(cfg.output_dir / "aggregate.csv");
  log << "[sweep] wrote " << (cfg.output_dir / "aggregate.csv").string() << std::endl;
  summary.complete = true;
  return summary;
}

void run_tune(const ExperimentConfig& cfg, std::ostream& log) {
  fs::create_directories(cfg.output_dir);
  std::vector<TuningAuditRow> audit;
  if (cfg.tuning.policy == PolicyKind::pew) {
    const auto rows = tune_pew_all(cfg, audit, log);
    audit_table(audit).write_atomic(cfg.output_dir / "tuning_audit_pew.csv");
    tuned_pew_table(rows).write_atomic(cfg.output_dir / "tuned_pew.csv");
  } else {
    const auto rows = tune_em_all(cfg, audit, log);
    audit_table(audit).write_atomic(cfg.output_dir / "tuning_audit_em.csv");
    tuned_em_table(rows).write_atomic(cfg.output_dir / "tuned_em.csv");
  }
}

void run_matching(const ExperimentConfig& cfg, std::ostream& log) {
  fs::create_directories(cfg.output_dir);
  const SeedPlan seeds{cfg.master_seed, SeedDomain::matching, cfg.matching.seeds};
  CsvTable out(kMatchingHeader);
  for (std::size_t bk : cfg.matching.baseline_k) {
    for (PolicyKind kind : cfg.matching.policies) {
      const MatchResult m = workers_to_match(kind, bk, cfg.dgp, seeds);
      log << "[match] baseline " << bk << " " << to_string(kind) << ": " << m.matching_k << " [" << m.matching_k_lo
          << ", " << m.matching_k_hi << "]" << std::endl;
      out.add_row({fmt(bk), to_string(kind), fmt(m.matching_k_lo), fmt(m.matching_k), fmt(m.matching_k_hi)});
    }
  }
  out.write_atomic(cfg.output_dir / "fig2.csv");
}

}  // namespace crowdfuse::harness
