#pragma once

#include <iosfwd>
#include <string>

namespace r2d2 {

/// Exit codes: 0 success, 1 bad configuration (the message names the key),
/// 2 usage error, 3 runtime failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// `git describe` of the source tree at build time, or "unknown".
std::string code_version();

}  // namespace r2d2
