#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

namespace obs {

using EnvLookup = std::function<const char*(const char*)>;

/// Runs one `obs` subcommand. `args` excludes the program name. Returns 0
/// on success, 1 on a domain error and 2 on a usage error. Structured
/// output goes to `out`, diagnostics to `err`.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
                const EnvLookup& env = nullptr);

}  // namespace obs
