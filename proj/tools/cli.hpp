#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace pchnet::cli {

enum ExitCode : int {
  kSuccess = 0,
  kFailure = 1,
  kConfigError = 2,
  kNumericalFailure = 3,
};

/// Runs `pchnet <subcommand> ...`; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pchnet::cli
