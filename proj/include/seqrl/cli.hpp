#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "seqrl/common.hpp"

namespace seqrl {

/// Environment variable naming the root under which relative output paths
/// (and default run directories) are placed.
inline constexpr const char* kOutputRootEnv = "SEQRL_OUTPUT_ROOT";

/// 0 is success; each error category has its own code.
int exit_code(ErrorCategory category);
inline constexpr int kUsageExitCode = 64;
inline constexpr int kInternalExitCode = 70;

/// Resolves a user-supplied output path against the output root.
std::filesystem::path resolve_output(const std::filesystem::path& path);

/// Runs the command line (argv[0] is the program name). Errors are reported
/// on `err` as one JSON line {"error": {"category": ..., "message": ...}}.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace seqrl
