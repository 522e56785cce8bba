#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace geonorm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;  // check failure or training divergence

/// Runs the command line `args` (without the program name), writing human
/// output to `out` and diagnostics to `err`. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace geonorm::cli
