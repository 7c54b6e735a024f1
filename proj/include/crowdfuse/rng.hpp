#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace crowdfuse {

/// Seeded generator plus a cached standard normal distribution.
///
/// Everything stochastic in the library takes an Rng& explicitly; two Rng
/// objects built from the same seed produce identical streams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double gaussian() { return normal_(engine_); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Mixes a master seed with a tuple of counters into a substream seed.
///
/// The scheme is splitmix64 folded over the words in order:
///   h = mix(master); for w in words: h = mix(h ^ (w + golden))
/// so distinct (domain, K, index, attempt, ...) tuples give independent
/// streams and the mapping never depends on execution order.
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> words);

/// Substream domains. Tuning and evaluation draw disjoint noise covariances.
enum class SeedDomain : std::uint64_t {
  evaluation = 1,
  tuning = 2,
  matching = 3,
  surrogate = 4,
  selftest = 5,
  consistency = 6,
};

/// Stream roles inside one (domain, K, seed index) cell.
enum class SeedRole : std::uint64_t {
  pool = 1,
  history = 2,
  extra_workers = 3,
};

}  // namespace crowdfuse
