#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "crowdfuse/datagen.hpp"
#include "crowdfuse/evaluation.hpp"
#include "crowdfuse/harness/config.hpp"
#include "crowdfuse/harness/runner.hpp"
#include "crowdfuse/harness/selftest.hpp"

namespace {

using namespace crowdfuse;
using namespace crowdfuse::harness;

harness::ExperimentConfig load(const std::string& path) {
  ExperimentConfig cfg = load_config(path);
  apply_seed_override(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crowdfuse: aggregation policy benchmark harness"};
  app.require_subcommand(1);

  std::string config_path;
  bool resume = false;
  std::size_t jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "Evaluate every policy over the configured K, t and seeds");
  sweep->add_option("-c,--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sweep->add_flag("--resume", resume, "Reuse finished work units from an earlier run");
  sweep->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);

  auto* tune = app.add_subcommand("tune", "Grid-search PEW or EM hyperparameters");
  tune->add_option("-c,--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);

  auto* matching = app.add_subcommand("fig2", "Workers needed to match averaging");
  matching->add_option("-c,--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);

  std::string mutation = "none";
  auto* selftest = app.add_subcommand("selftest", "Fast invariant checks");
  selftest->add_option("--mutation", mutation, "Inject a fault: none, pew-sign, em-nosym")
      ->check(CLI::IsMember({"none", "pew-sign", "em-nosym"}));

  std::size_t hist_k = 10;
  std::size_t hist_rounds = 100;
  std::size_t hist_seed = 0;
  std::uint64_t hist_master = 0;
  auto* history = app.add_subcommand("history", "Print one sampled history as CSV");
  history->add_option("-K,--workers", hist_k, "Number of workers")->check(CLI::PositiveNumber);
  history->add_option("-t,--rounds", hist_rounds, "Number of rounds");
  history->add_option("--seed-index", hist_seed, "Seed index");
  history->add_option("--master-seed", hist_master, "Master seed (CROWDFUSE_SEED overrides)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sweep->parsed()) {
      const SweepSummary s = run_sweep(load(config_path), {resume, jobs, 0}, std::cerr);
      std::cerr << "[sweep] units: " << s.units_computed << " computed, " << s.units_reused << " reused, "
                << s.pool_resamples << " degenerate pools resampled" << std::endl;
      return s.complete ? 0 : 1;
    }
    if (tune->parsed()) {
      run_tune(load(config_path), std::cerr);
      return 0;
    }
    if (matching->parsed()) {
      run_matching(load(config_path), std::cerr);
      return 0;
    }
    if (selftest->parsed()) return run_selftest(std::cout, *parse_mutation(mutation)) == 0 ? 0 : 1;
    if (history->parsed()) {
      ExperimentConfig seed_only;
      seed_only.master_seed = hist_master;
      apply_seed_override(seed_only);
      DgpConfig dgp;
      const Scenario s =
          draw_scenario(dgp, hist_k, hist_rounds, seed_only.master_seed, SeedDomain::evaluation, hist_seed);
      write_history_csv(std::cout, s.history);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
