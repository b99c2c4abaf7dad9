#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace safnet::cli {

// Process exit codes.
enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kConfig = 3,
  kLoad = 4,
  kCheckpoint = 5,
  kDiverged = 6,
  kInvalidInput = 7,
};

// Runs one command line (args[0] is the program name). Normal output goes to
// `out`, diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace safnet::cli
