#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mvmc/estimators.hpp"
#include "mvmc/simulate.hpp"

namespace mvmc {

// Fully parsed and validated run description. Parsing is strict: unknown keys
// anywhere in the document are rejected, every numeric field is checked for
// sign and finiteness, and the model / payoff / sampler are constructed from
// closed registries so a config names exactly one reproducible computation.
struct RunConfig {
    std::string command;  // simulate | estimate | density | pde_check | compare
    std::string model_family;
    CoefficientModel model;

    double t = 1.0;
    int n_steps = 64;
    int particles = 256;
    long samples = 10000;
    std::uint64_t seed = 0;
    int law_copies = 1;
    int aux_copies = 8;

    Eigen::VectorXd x;
    InitialSampler initial;
    Payoff payoff;

    // estimate
    std::vector<std::string> kinds;
    std::vector<int> alpha, beta;
    std::vector<Eigen::VectorXd> v_list;

    // density
    double z_lo = -1.0, z_hi = 1.0;
    int z_count = 101;
    bool density_derivatives = false;
    std::vector<int> density_alpha, density_beta;

    // compare
    std::string fd_target = "dx";
    std::vector<double> bumps;

    std::string out_file;       // per-command default when empty
    std::uint64_t config_hash = 0;  // FNV-1a over the canonical effective document
};

// Load and validate a config file. A seed override (from the command line)
// replaces the file's seed before hashing, so the hash always matches the
// numbers that were actually produced.
RunConfig load_run_config(const std::string& path,
                          std::optional<std::uint64_t> seed_override = std::nullopt);

// Same, from an in-memory document (exposed for tests).
RunConfig parse_run_config(const std::string& text,
                           std::optional<std::uint64_t> seed_override = std::nullopt);

// Payoff registry lookup used by the config parser: identity, square, sin,
// positive_part, indicator_above, centred_mean, polynomial.
Payoff payoff_from_registry(const std::string& name, double frequency, int component,
                            double strike, const Eigen::VectorXd& z,
                            const Eigen::VectorXd& coefficients);

EstimatorOptions options_from_config(const RunConfig& cfg, int threads);

}  // namespace mvmc
