#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cassle::cli {

enum ExitCode : int { ok = 0, runtime_failure = 1, usage_error = 2 };

/// Runs one command line (args excludes the program name). Human-readable
/// progress goes to `err`; result paths and scalars go to `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cassle::cli
