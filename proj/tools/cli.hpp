#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tlid::cli {

enum ExitCode : int { kOk = 0, kRuntimeFailure = 1, kUsage = 2 };

/// Runs the `tlid` command line. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tlid::cli
