#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace tumorseg {

/// Exit codes shared by every subcommand.
enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitUsage = 2 };

/// Runs one CLI invocation (args excludes the program name).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tumorseg
