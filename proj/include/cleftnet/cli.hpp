#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cleftnet {

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int usage = 1;
inline constexpr int config = 2;
inline constexpr int data = 3;
inline constexpr int numerical = 4;
}  // namespace exit_code

/// Runs one `cleftnet` command. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

}  // namespace cleftnet
