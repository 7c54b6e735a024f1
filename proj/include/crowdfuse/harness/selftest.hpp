#pragma once

#include <iosfwd>
#include <optional>
#include <string>

namespace crowdfuse::harness {

/// Deliberate faults used to confirm the selftest catches them.
enum class Mutation { none, pew_sign, em_nosym };

std::optional<Mutation> parse_mutation(const std::string& name);

/// Runs the fast invariant suite and prints one line per check. Returns the
/// number of failed checks.
int run_selftest(std::ostream& out, Mutation mutation = Mutation::none);

}  // namespace crowdfuse::harness
