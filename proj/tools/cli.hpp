#pragma once

#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcp::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Entry point shared by the executable and the tests. `args` excludes the
/// program name. Errors are reported as a single "error: ..." line on `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dcp::cli
