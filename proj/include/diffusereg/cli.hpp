#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dreg {

enum ExitCode { exit_ok = 0, exit_usage = 1, exit_data = 2, exit_runtime = 3 };

/// Entry point of the `diffusereg` tool. `args` excludes the program name.
/// Subcommands: ingest, synth, train, sample, eval, serve.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dreg
