#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vmscan {

// Exit codes: 0 clean, 1 runtime error, 2 usage error, 3 findings.
constexpr int kExitClean = 0;
constexpr int kExitRuntimeError = 1;
constexpr int kExitUsage = 2;
constexpr int kExitFindings = 3;

int run_command(const std::vector<std::string>& args, std::ostream& out,
                std::ostream& err);

}  // namespace vmscan
