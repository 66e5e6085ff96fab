#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace acvtt {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;         // bad flags, bad config, missing inputs
inline constexpr int kExitVerification = 2;  // gradcheck or bench tolerance breach

/// Entry point of the `acvtt` tool. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace acvtt
