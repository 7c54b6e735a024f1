#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdfuse/datagen.hpp"
#include "crowdfuse/policies.hpp"
#include "crowdfuse/tuning.hpp"

namespace crowdfuse::harness {

/// A config problem; what() reads "<file>:<line>: <json pointer>: <message>"
/// when the location is known.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A round index given either absolutely ("t": 500) or as a multiple of K ("10K").
struct TValue {
  double multiple = 0.0;
  bool per_worker = false;

  std::size_t resolve(std::size_t num_workers) const;
  std::string to_string() const;
};

enum class HyperparamMode { none, fixed, per_k, tuned };

struct PolicyConfig {
  std::string name;
  PolicyKind kind = PolicyKind::averaging;
  HyperparamMode mode = HyperparamMode::none;
  /// PEW: lambda, rho, lambda_ell, r. EM: sigma_bar_sq, rho_bar, c.
  /// Key 0 holds the fixed values; per_k mode keys by K.
  std::map<std::size_t, std::map<std::string, double>> values;
};

struct TuningConfig {
  PolicyKind policy = PolicyKind::pew;
  std::size_t seeds = 15;
  /// Grid overrides by name; an absent entry keeps TuningGrid::standard(K).
  std::map<std::string, std::vector<double>> grid;

  TuningGrid grid_for(std::size_t num_workers) const;
};

struct MatchingConfig {
  std::vector<std::size_t> baseline_k{20, 40, 60, 80, 100};
  std::vector<PolicyKind> policies{PolicyKind::clairvoyant, PolicyKind::only_skills};
  std::size_t seeds = 25;
};

struct ExperimentConfig {
  int schema_version = 1;
  std::filesystem::path output_dir = "out";
  std::uint64_t master_seed = 0;
  DgpConfig dgp;
  std::vector<std::size_t> k_values;
  std::vector<TValue> t_values;
  std::size_t seeds = 25;
  std::vector<PolicyConfig> policies;
  TuningConfig tuning;
  MatchingConfig matching;

  /// Sorted, de-duplicated t values for one K.
  std::vector<std::size_t> t_values_for(std::size_t num_workers) const;
  /// Canonical JSON of every field that affects sweep results.
  std::string fingerprint() const;
};

/// Parses and validates. `source` names the input in diagnostics.
ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

/// Builds a concrete PEW or EM spec from fixed or per-K values. Throws
/// ConfigError if the mode is `tuned` or K has no entry.
PolicySpec resolve_policy(const PolicyConfig& policy, std::size_t num_workers, double outcome_variance);

PewHyperparams pew_from_values(const std::map<std::string, double>& v, std::size_t num_workers, double outcome_variance);
EmHyperparams em_from_values(const std::map<std::string, double>& v);

/// Applies CROWDFUSE_SEED when set; throws ConfigError on a malformed value.
void apply_seed_override(ExperimentConfig& config);

}  // namespace crowdfuse::harness
