#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace unveil::cli {

enum ExitCode : int {
  kOk = 0,
  kRuntimeError = 1,
  kConfigError = 2,
  kPrerequisiteError = 3,
  kDivergence = 4,
};

/// Entry point behind the `unveil` binary. `args` excludes the program name.
/// Failures print one JSON line {"error": kind, "message": ...} to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace unveil::cli
