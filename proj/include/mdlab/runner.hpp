#pragma once

#include <string>

#include "mdlab/config.hpp"

namespace mdlab {

// Executes one subcommand against a fully resolved configuration (defaults
// already folded in by the caller or by the command itself). Returns the
// process exit code; failures print a machine-readable error record to
// stderr.
int run_command(const std::string& command, const Config& cfg);

// Environment variable naming the default output root.
inline constexpr const char* kOutputRootEnv = "MDLAB_OUT";

std::string resolve_out_dir(const Config& cfg, const std::string& command);

}  // namespace mdlab
