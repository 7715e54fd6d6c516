#include "mvmc/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "mvmc/errors.hpp"
#include "mvmc/measures.hpp"
#include "mvmc/simulate.hpp"

namespace mvmc {

namespace {

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string join_vec(const Eigen::VectorXd& v) {
    std::string out;
    for (int i = 0; i < v.size(); ++i) {
        if (i) out += ';';
        out += fmt_g(v(i));
    }
    return out;
}

std::string hash_line(const RunConfig& cfg) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(cfg.config_hash));
    return std::string("# config_hash=") + buf + "\n";
}

std::vector<int> or_default(const std::vector<int>& idx) {
    return idx.empty() ? std::vector<int>{0} : idx;
}

}  // namespace

std::string cmd_simulate(const RunConfig& cfg, int threads) {
    (void)threads;  // the particle sweep is a single deterministic pass
    const TimeGrid grid(cfg.t, cfg.n_steps);
    const BrownianDriver driver(cfg.seed);
    const Eigen::MatrixXd theta = cfg.initial.sample(cfg.particles, cfg.model.N, driver);
    const ParticleSystemPaths sys = simulate_particles(cfg.model, theta, grid, driver);

    const int probes = std::min(8, sys.M);
    std::string out = hash_line(cfg);
    out += "k,time,mean,second_moment,w2_prev";
    for (int p = 0; p < probes; ++p) out += ",p" + std::to_string(p);
    out += '\n';
    for (int k = 0; k <= grid.n_steps; ++k) {
        const EmpiricalMeasure& mu = sys.measures[static_cast<std::size_t>(k)];
        out += std::to_string(k);
        out += ',' + fmt_g(grid.time(k));
        out += ',' + join_vec(mu.mean);
        out += ',' + fmt_g(mu.second_moment);
        out += ',';
        if (k > 0 && cfg.model.N == 1) {
            out += fmt_g(
                wasserstein2_1d(sys.measures[static_cast<std::size_t>(k - 1)], mu));
        }
        for (int p = 0; p < probes; ++p) {
            out += ',' +
                   join_vec(sys.states[static_cast<std::size_t>(k)].row(p).transpose());
        }
        out += '\n';
    }
    return out;
}

std::string cmd_estimate(const RunConfig& cfg, int threads) {
    const EstimatorOptions opts = options_from_config(cfg, threads);
    std::string out = hash_line(cfg);
    out += csv_header() + "\n";
    for (const std::string& kind : cfg.kinds) {
        if (kind == "expectation") {
            out += csv_row(estimate_expectation(cfg.model, cfg.payoff, cfg.x, cfg.initial,
                                                cfg.t, opts)) +
                   "\n";
        } else if (kind == "dx") {
            out += csv_row(estimate_dx(cfg.model, or_default(cfg.alpha), cfg.payoff, cfg.x,
                                       cfg.initial, cfg.t, opts)) +
                   "\n";
        } else if (kind == "dmu") {
            if (cfg.v_list.empty()) {
                throw ConfigError("estimate kind 'dmu' needs a non-empty 'v' list");
            }
            for (const Eigen::VectorXd& v : cfg.v_list) {
                out += csv_row(estimate_dmu(cfg.model, or_default(cfg.beta), cfg.payoff,
                                            cfg.x, cfg.initial, cfg.t, v, opts)) +
                       "\n";
            }
        } else {  // fixed_point_dx
            out += csv_row(estimate_dx_fixed_point(cfg.model, or_default(cfg.alpha),
                                                   cfg.payoff, cfg.x, cfg.t, opts)) +
                   "\n";
        }
    }
    return out;
}

std::string cmd_density(const RunConfig& cfg, int threads) {
    if (cfg.model.N != 1) {
        throw ConfigError("the density command builds a scalar z-grid (N == 1)");
    }
    if (cfg.density_derivatives &&
        (!cfg.density_alpha.empty() || !cfg.density_beta.empty())) {
        throw ConfigError(
            "density.derivatives adds first-order columns and needs empty alpha/beta");
    }
    const EstimatorOptions opts = options_from_config(cfg, threads);
    Eigen::MatrixXd grid(cfg.z_count, 1);
    for (int k = 0; k < cfg.z_count; ++k) {
        grid(k, 0) = (cfg.z_count == 1)
                         ? cfg.z_lo
                         : cfg.z_lo + (cfg.z_hi - cfg.z_lo) * static_cast<double>(k) /
                                          static_cast<double>(cfg.z_count - 1);
    }
    const DensityEstimate base = estimate_density(cfg.model, cfg.x, cfg.t, grid,
                                                  cfg.density_alpha, cfg.density_beta, opts);
    std::optional<DensityEstimate> dz, dx;
    if (cfg.density_derivatives) {
        dz = estimate_density(cfg.model, cfg.x, cfg.t, grid, {}, {0}, opts);
        dx = estimate_density(cfg.model, cfg.x, cfg.t, grid, {0}, {}, opts);
    }

    std::string out = hash_line(cfg);
    out += "z,p,stderr";
    if (cfg.density_derivatives) out += ",dp_dz,dp_dz_stderr,dp_dx,dp_dx_stderr";
    out += '\n';
    for (int k = 0; k < cfg.z_count; ++k) {
        out += fmt_g(grid(k, 0));
        out += ',' + fmt_g(base.value(k));
        out += ',' + fmt_g(base.std_error(k));
        if (cfg.density_derivatives) {
            out += ',' + fmt_g(dz->value(k));
            out += ',' + fmt_g(dz->std_error(k));
            out += ',' + fmt_g(dx->value(k));
            out += ',' + fmt_g(dx->std_error(k));
        }
        out += '\n';
    }
    out += "# tail_slope=" + fmt_g(base.tail_slope) +
           " tail_intercept=" + fmt_g(base.tail_intercept) +
           " tail_r2=" + fmt_g(base.tail_r2) +
           " tail_points=" + std::to_string(base.tail_points) + "\n";
    return out;
}

std::string cmd_pde_check(const RunConfig& cfg, int threads) {
    const EstimatorOptions opts = options_from_config(cfg, threads);
    const PdeResidualResult r =
        pde_residual(cfg.model, cfg.payoff, cfg.x, cfg.initial, cfg.t, opts);
    std::string out = hash_line(cfg);
    out +=
        "t,x,h_t,dt_u,dt_u_stderr,x_terms,x_terms_stderr,mu_terms,mu_terms_stderr,residual,"
        "residual_stderr,n_samples,seed\n";
    out += fmt_g(r.t);
    out += ',' + join_vec(r.x);
    out += ',' + fmt_g(r.h_t);
    out += ',' + fmt_g(r.dt_u);
    out += ',' + fmt_g(r.dt_u_stderr);
    out += ',' + fmt_g(r.x_terms);
    out += ',' + fmt_g(r.x_terms_stderr);
    out += ',' + fmt_g(r.mu_terms);
    out += ',' + fmt_g(r.mu_terms_stderr);
    out += ',' + fmt_g(r.residual);
    out += ',' + fmt_g(r.residual_stderr);
    out += ',' + std::to_string(r.n_samples);
    out += ',' + std::to_string(r.seed);
    out += '\n';
    return out;
}

std::string cmd_compare(const RunConfig& cfg, int threads) {
    const EstimatorOptions opts = options_from_config(cfg, threads);
    const FdTarget target = (cfg.fd_target == "dmu") ? FdTarget::dmu : FdTarget::dx;
    const Eigen::VectorXd v =
        cfg.v_list.empty() ? Eigen::VectorXd::Zero(cfg.model.N) : cfg.v_list.front();
    const std::vector<FdComparisonRow> rows = compare_fd(
        cfg.model, target, cfg.payoff, cfg.x, cfg.initial, cfg.t, v, cfg.bumps, opts);
    std::string out = hash_line(cfg);
    out += "target,bump,fd_value,fd_stderr,weight_value,weight_stderr,difference,"
           "combined_stderr\n";
    for (const FdComparisonRow& r : rows) {
        out += cfg.fd_target;
        out += ',' + fmt_g(r.bump);
        out += ',' + fmt_g(r.fd_value);
        out += ',' + fmt_g(r.fd_stderr);
        out += ',' + fmt_g(r.weight_value);
        out += ',' + fmt_g(r.weight_stderr);
        out += ',' + fmt_g(r.difference);
        out += ',' + fmt_g(r.combined_stderr);
        out += '\n';
    }
    return out;
}

namespace {

void write_atomic(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ConfigError("cannot open output file '" + tmp.string() + "'");
        out << content;
        out.flush();
        if (!out.good()) throw ConfigError("failed writing '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

std::string default_out_name(const std::string& command) {
    return command + ".csv";
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Monte-Carlo engine for interacting-particle dynamics: expectations, "
                 "space and measure derivatives, densities and backward-equation checks"};
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed_value = 0;
    int threads = 0;
    app.add_option("--config", config_path, "path to the JSON run description")->required();
    CLI::Option* seed_opt = app.add_option("--seed", seed_value, "seed override");
    app.add_option("--threads", threads, "worker threads (default: hardware)");
    app.add_option("--out", out_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error,config," << e.what() << "\n";
        return 2;
    }

    try {
        std::optional<std::uint64_t> seed_override;
        if (seed_opt->count() > 0) seed_override = seed_value;
        const RunConfig cfg = load_run_config(config_path, seed_override);

        int n_threads = threads;
        if (n_threads <= 0) {
            n_threads = static_cast<int>(std::thread::hardware_concurrency());
            if (n_threads < 1) n_threads = 1;
        }

        std::string content;
        if (cfg.command == "simulate") {
            content = cmd_simulate(cfg, n_threads);
        } else if (cfg.command == "estimate") {
            content = cmd_estimate(cfg, n_threads);
        } else if (cfg.command == "density") {
            content = cmd_density(cfg, n_threads);
        } else if (cfg.command == "pde_check") {
            content = cmd_pde_check(cfg, n_threads);
        } else {
            content = cmd_compare(cfg, n_threads);
        }

        std::filesystem::path out_path =
            cfg.out_file.empty() ? default_out_name(cfg.command) : cfg.out_file;
        if (!out_dir.empty()) out_path = std::filesystem::path(out_dir) / out_path;
        write_atomic(out_path, content);
        std::cout << "# wrote " << out_path.string() << "\n";
        return 0;
    } catch (const OrderExceededError& e) {
        std::cerr << "error,order," << e.what() << "\n";
        return 4;
    } catch (const BlowUpError& e) {
        std::cerr << "error,numeric," << e.what() << "\n";
        return 3;
    } catch (const SingularJacobianError& e) {
        std::cerr << "error,numeric," << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error,config," << e.what() << "\n";
        return 2;
    }
}

}  // namespace mvmc
