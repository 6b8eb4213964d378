#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fusekit {

/// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;

/// Runs the `fusekit` command line. Human-readable output goes to `out`;
/// errors are written to `err` as one JSON record per line.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Convenience overload; `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fusekit
