#pragma once

#include <iosfwd>

namespace capgnn {

/// Exit codes shared by every command.
enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitConfig = 2, kExitData = 3 };

/// Entry point of the `capgnn` tool: train, eval, analyze, gradcheck, validate, synth.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace capgnn
