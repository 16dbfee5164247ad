#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace m3::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUser = 1;
inline constexpr int kExitInternal = 2;

// Entry point of the m3 tool; args[0] is the program name. Regular output
// goes to `out`, diagnostics and progress to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace m3::cli
