#pragma once

#include <iosfwd>
#include <string_view>

namespace thetaguard {

inline constexpr std::string_view kVersion = "1.0.0";

// Exit codes: 0 success, 1 usage, 2 data/validation, 3 numerical failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace thetaguard
