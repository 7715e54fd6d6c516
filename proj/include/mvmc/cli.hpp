#pragma once

#include <string>

#include "mvmc/config.hpp"

namespace mvmc {

// Command implementations: each renders the complete CSV document (first line
// `# config_hash=<hex>`) for the given run. Pure with respect to the inputs,
// so re-running with the same config and seed is byte-identical.
std::string cmd_simulate(const RunConfig& cfg, int threads);
std::string cmd_estimate(const RunConfig& cfg, int threads);
std::string cmd_density(const RunConfig& cfg, int threads);
std::string cmd_pde_check(const RunConfig& cfg, int threads);
std::string cmd_compare(const RunConfig& cfg, int threads);

// Full front-end: flags --config <path>, --seed <u64>, --threads <k>,
// --out <dir>. Writes the command's CSV atomically (temp file + rename; no
// partial file on failure) and reports failures as a machine-readable line
// `error,<code>,<message>` on stderr. Exit codes: 0 ok, 2 config error,
// 3 numeric failure, 4 order-cap violation.
int run_cli(int argc, const char* const* argv);

}  // namespace mvmc
