#pragma once

#include <ostream>

namespace bloodnet {

enum ExitCode : int {
    kExitOk = 0,
    kExitUsage = 1,
    kExitData = 2,
    kExitNumerical = 3,
};

// Runs one subcommand (generate, train, eval, infer, report) and returns its
// exit code. Normal output goes to `out`, diagnostics to `err`.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace bloodnet
