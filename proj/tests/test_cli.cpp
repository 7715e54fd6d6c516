#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "mvmc/cli.hpp"
#include "mvmc/config.hpp"
#include "mvmc/errors.hpp"
#include "mvmc/oracles.hpp"
#include "mvmc/payoffs.hpp"

using namespace mvmc;
namespace fs = std::filesystem;
using testutil::atoms1;
using testutil::vec1;

namespace {

// Scratch directory under the system temp root, removed on scope exit.
struct TempDir {
    fs::path path;
    TempDir() {
        static std::atomic<int> counter{0};
        path = fs::temp_directory_path() /
               ("mvmc_cli_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter.fetch_add(1)));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::string write_config(const fs::path& dir, const std::string& name,
                         const std::string& text) {
    const fs::path p = dir / name;
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    REQUIRE(out.good());
    out << text;
    out.close();
    return p.string();
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

struct CliResult {
    int code = -1;
    std::string out;
    std::string err;
};

// Runs the entry point with captured standard streams.
CliResult run(const std::vector<std::string>& args) {
    std::vector<std::string> full;
    full.emplace_back("mvmc");
    full.insert(full.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    argv.reserve(full.size());
    for (const std::string& s : full) argv.push_back(s.c_str());

    std::ostringstream cap_out, cap_err;
    std::streambuf* old_out = std::cout.rdbuf(cap_out.rdbuf());
    std::streambuf* old_err = std::cerr.rdbuf(cap_err.rdbuf());
    CliResult r;
    try {
        r.code = run_cli(static_cast<int>(argv.size()), argv.data());
    } catch (...) {
        std::cout.rdbuf(old_out);
        std::cerr.rdbuf(old_err);
        throw;
    }
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    r.out = cap_out.str();
    r.err = cap_err.str();
    return r;
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) out.push_back(line);
    return out;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

bool starts_with(const std::string& s, const std::string& prefix) {
    return s.rfind(prefix, 0) == 0;
}

const char* kEstimateConfig = R"({
  "command": "estimate",
  "model": {"family": "constant", "drift": 0.0, "sigma": 1.0},
  "grid": {"t": 1.0, "n_steps": 64},
  "particles": 16,
  "samples": 4000,
  "seed": 11,
  "x": 0.3,
  "payoff": {"name": "sin"},
  "estimate": {"kinds": ["dx"], "alpha": [0]}
})";

}  // namespace

TEST_CASE("config parsing maps every documented field") {
    const std::string text = R"({
      "command": "estimate",
      "model": {"family": "mean_field_ou", "a": 1.0, "sigma": 0.5},
      "grid": {"t": 0.5, "n_steps": 20},
      "particles": 37,
      "samples": 1234,
      "seed": 99,
      "law_copies": 2,
      "aux_copies": 5,
      "x": [0.4],
      "initial": {"kind": "normal", "mean": [0.1], "std": [0.7], "shift": [0.01]},
      "payoff": {"name": "sin", "frequency": 2.0},
      "estimate": {"kinds": ["expectation", "dx", "dmu"], "alpha": [0], "beta": [0],
                   "v": [[0.5], -1.0]},
      "out": "runs/result.csv"
    })";
    const RunConfig cfg = parse_run_config(text);
    CHECK(cfg.command == "estimate");
    CHECK(cfg.model_family == "mean_field_ou");
    CHECK(cfg.model.N == 1);
    CHECK(cfg.t == doctest::Approx(0.5));
    CHECK(cfg.n_steps == 20);
    CHECK(cfg.particles == 37);
    CHECK(cfg.samples == 1234);
    CHECK(cfg.seed == 99);
    CHECK(cfg.law_copies == 2);
    CHECK(cfg.aux_copies == 5);
    REQUIRE(cfg.x.size() == 1);
    CHECK(cfg.x(0) == doctest::Approx(0.4));
    CHECK(cfg.initial.kind == InitialSampler::Kind::normal);
    CHECK(cfg.initial.point(0) == doctest::Approx(0.1));
    CHECK(cfg.initial.scale(0) == doctest::Approx(0.7));
    REQUIRE(cfg.initial.shift.size() == 1);
    CHECK(cfg.initial.shift(0) == doctest::Approx(0.01));
    CHECK(cfg.payoff.name == "sin");
    REQUIRE(cfg.kinds.size() == 3);
    CHECK(cfg.kinds[0] == "expectation");
    CHECK(cfg.kinds[1] == "dx");
    CHECK(cfg.kinds[2] == "dmu");
    CHECK(cfg.alpha == std::vector<int>{0});
    CHECK(cfg.beta == std::vector<int>{0});
    REQUIRE(cfg.v_list.size() == 2);
    CHECK(cfg.v_list[0](0) == doctest::Approx(0.5));
    CHECK(cfg.v_list[1](0) == doctest::Approx(-1.0));
    CHECK(cfg.out_file == "runs/result.csv");

    // Omitted blocks fall back to the documented defaults.
    const RunConfig d =
        parse_run_config(R"({"command": "simulate", "model": {"family": "constant"}})");
    CHECK(d.t == doctest::Approx(1.0));
    CHECK(d.n_steps == 64);
    CHECK(d.particles == 256);
    CHECK(d.samples == 10000);
    CHECK(d.seed == 0);
    CHECK(d.law_copies == 1);
    CHECK(d.aux_copies == 8);
    REQUIRE(d.x.size() == 1);
    CHECK(d.x(0) == 0.0);
    CHECK(d.initial.kind == InitialSampler::Kind::delta);
    CHECK(d.payoff.name == "identity");
    CHECK(d.out_file.empty());
}

TEST_CASE("unknown keys are rejected at every level") {
    auto bad = [](const std::string& text) {
        CHECK_THROWS_AS(parse_run_config(text), ConfigError);
    };
    bad(R"({"command": "simulate", "model": {"family": "constant"}, "extra": 1})");
    bad(R"({"command": "simulate", "model": {"family": "constant", "mu": 3}})");
    bad(R"({"command": "simulate", "model": {"family": "constant"},
            "grid": {"t": 1.0, "dt": 0.1}})");
    bad(R"({"command": "simulate", "model": {"family": "constant"},
            "payoff": {"name": "sin", "strike2": 1.0}})");
    bad(R"({"command": "estimate", "model": {"family": "constant"},
            "estimate": {"kinds": ["dx"], "order": 2}})");
    bad(R"({"command": "density", "model": {"family": "constant"},
            "density": {"lo": -1.0, "hi": 1.0, "points": 5}})");
    bad(R"({"command": "compare", "model": {"family": "constant"},
            "compare": {"target": "dx", "bumps": [0.1], "eps": 1e-3}})");
    bad(R"({"command": "simulate", "model": {"family": "constant"},
            "initial": {"kind": "delta", "point": 0.0, "sd": 1.0}})");
    bad(R"({"command": "simulate", "model": {"family": "constant"}, "pde": {"order": 1}})");
    bad("{nope");
    bad("[1, 2]");
}

TEST_CASE("value validation failures") {
    auto bad = [](const std::string& text) {
        CHECK_THROWS_AS(parse_run_config(text), ConfigError);
    };
    const std::string head = R"({"command": "simulate", "model": {"family": "constant"}, )";
    bad(head + R"("grid": {"t": -1.0}})");
    bad(head + R"("grid": {"t": 1.0, "n_steps": 0}})");
    bad(head + R"("particles": 1})");
    bad(head + R"("samples": 0})");
    bad(head + R"("seed": -1})");
    bad(head + R"("law_copies": 0})");
    bad(head + R"("aux_copies": 0})");
    bad(head + R"("x": [0.1, 0.2]})");
    bad(head + R"("payoff": {"name": "identity", "component": 1}})");
    bad(head + R"("payoff": {"name": "does_not_exist"}})");
    bad(R"({"command": "fly", "model": {"family": "constant"}})");
    bad(R"({"command": "simulate", "model": {"family": "unknown_family"}})");
    bad(R"({"command": "simulate", "model": {"family": "mean_field_ou", "a": 1.0,
            "sigma": 0.0}})");
    bad(R"({"command": "simulate", "model": {"family": "bounded_sin", "base": 0.5,
            "amplitude": 0.6}})");
    // Commands that need their block refuse to run without it.
    bad(R"({"command": "estimate", "model": {"family": "constant"}})");
    bad(R"({"command": "density", "model": {"family": "constant"}})");
    bad(R"({"command": "compare", "model": {"family": "constant"}})");
    // Block-level shape checks.
    bad(R"({"command": "estimate", "model": {"family": "constant"},
            "estimate": {"kinds": []}})");
    bad(R"({"command": "estimate", "model": {"family": "constant"},
            "estimate": {"kinds": ["d2x"]}})");
    bad(R"({"command": "density", "model": {"family": "constant"},
            "density": {"lo": 1.0, "hi": -1.0}})");
    bad(R"({"command": "density", "model": {"family": "constant"},
            "density": {"lo": -1.0, "hi": 1.0, "count": 0}})");
    bad(R"({"command": "compare", "model": {"family": "constant"},
            "compare": {"target": "dx", "bumps": []}})");
    bad(R"({"command": "compare", "model": {"family": "constant"},
            "compare": {"target": "dx", "bumps": [-0.1]}})");
    bad(R"({"command": "compare", "model": {"family": "constant"},
            "compare": {"target": "d3", "bumps": [0.1]}})");
}

TEST_CASE("seed override feeds both the run and the config hash") {
    const std::string with_seed_0 =
        R"({"command": "simulate", "model": {"family": "constant"}, "seed": 0})";
    const std::string with_seed_7 =
        R"({"command": "simulate", "model": {"family": "constant"}, "seed": 7})";

    const RunConfig a = parse_run_config(with_seed_0);
    const RunConfig b = parse_run_config(with_seed_0);
    CHECK(a.config_hash == b.config_hash);

    const RunConfig c = parse_run_config(with_seed_0, 7);
    CHECK(c.seed == 7);
    CHECK(c.config_hash != a.config_hash);

    // Overriding to 7 is indistinguishable from authoring 7.
    const RunConfig d = parse_run_config(with_seed_7);
    CHECK(c.config_hash == d.config_hash);
}

TEST_CASE("payoff registry evaluates by name") {
    const EmpiricalMeasure mu(atoms1({0.5, 1.5}));
    const Eigen::VectorXd x = vec1(3.0);
    const Eigen::VectorXd none;

    CHECK(payoff_from_registry("identity", 1.0, 0, 0.0, none, none).value(x, mu) == 3.0);
    CHECK(payoff_from_registry("square", 1.0, 0, 0.0, none, none).value(x, mu) == 9.0);
    CHECK(payoff_from_registry("sin", 2.0, 0, 0.0, none, none).value(x, mu) ==
          doctest::Approx(std::sin(6.0)).epsilon(1e-15));
    CHECK(payoff_from_registry("positive_part", 1.0, 0, 2.5, none, none).value(x, mu) ==
          doctest::Approx(0.5).epsilon(1e-15));
    CHECK(payoff_from_registry("indicator_above", 1.0, 0, 0.0, vec1(2.0), none).value(x, mu) ==
          1.0);
    CHECK(payoff_from_registry("indicator_above", 1.0, 0, 0.0, vec1(4.0), none).value(x, mu) ==
          0.0);
    CHECK(payoff_from_registry("centred_mean", 1.0, 0, 0.0, none, none).value(x, mu) ==
          doctest::Approx(2.0).epsilon(1e-15));
    Eigen::VectorXd coeffs(3);
    coeffs << 1.0, 0.0, 2.0;
    CHECK(payoff_from_registry("polynomial", 1.0, 0, 0.0, none, coeffs).value(x, mu) ==
          doctest::Approx(19.0).epsilon(1e-15));

    CHECK_THROWS_AS(payoff_from_registry("nope", 1.0, 0, 0.0, none, none), ConfigError);
    CHECK_THROWS_AS(payoff_from_registry("indicator_above", 1.0, 0, 0.0, none, none),
                    ConfigError);
    CHECK_THROWS_AS(payoff_from_registry("polynomial", 1.0, 0, 0.0, none, none), ConfigError);
}

TEST_CASE("estimator options inherit the run description") {
    const RunConfig cfg = parse_run_config(R"({
      "command": "simulate",
      "model": {"family": "constant"},
      "grid": {"t": 0.5, "n_steps": 20},
      "particles": 37, "samples": 1234, "seed": 99, "law_copies": 2, "aux_copies": 5
    })");
    const EstimatorOptions opts = options_from_config(cfg, 3);
    CHECK(opts.n_samples == 1234);
    CHECK(opts.n_particles == 37);
    CHECK(opts.n_steps == 20);
    CHECK(opts.seed == 99);
    CHECK(opts.threads == 3);
    CHECK(opts.law_copies == 2);
    CHECK(opts.aux_copies == 5);
}

TEST_CASE("end-to-end estimate run writes a reproducible csv") {
    TempDir tmp;
    const std::string cfg_path = write_config(tmp.path, "run.json", kEstimateConfig);
    const fs::path out_a = tmp.path / "a";

    const CliResult r = run({"--config", cfg_path, "--out", out_a.string(), "--threads", "2"});
    CAPTURE(r.err);
    REQUIRE(r.code == 0);
    const fs::path csv = out_a / "estimate.csv";
    CHECK(r.out == "# wrote " + csv.string() + "\n");
    REQUIRE(fs::exists(csv));

    const std::string content = read_file(csv);
    const std::vector<std::string> lines = lines_of(content);
    REQUIRE(lines.size() == 3);
    CHECK(starts_with(lines[0], "# config_hash="));
    CHECK(lines[0].size() == std::string("# config_hash=").size() + 16);
    CHECK(lines[1] == "estimator,t,x,v,z,value,stderr,n_samples,seed,method");

    const std::vector<std::string> row = split_csv(lines[2]);
    REQUIRE(row.size() == 10);
    CHECK(row[0] == "dx");
    CHECK(std::stod(row[1]) == doctest::Approx(1.0));
    CHECK(std::stod(row[2]) == doctest::Approx(0.3));
    const double value = std::stod(row[5]);
    const double se = std::stod(row[6]);
    CHECK(row[7] == "4000");
    CHECK(row[8] == "11");
    CHECK(row[9] == "weight");
    // d/dx E sin(x + B_t) = e^{-t/2} cos(x).
    const double target = std::exp(-0.5) * std::cos(0.3);
    CHECK(se > 0.0);
    CHECK(std::abs(value - target) <= 4.0 * se);

    // Re-running the same description is byte-identical, as is a different
    // thread count; a different seed is not.
    const fs::path out_b = tmp.path / "b";
    const CliResult again =
        run({"--config", cfg_path, "--out", out_b.string(), "--threads", "2"});
    REQUIRE(again.code == 0);
    CHECK(read_file(out_b / "estimate.csv") == content);

    const fs::path out_c = tmp.path / "c";
    const CliResult threads3 =
        run({"--config", cfg_path, "--out", out_c.string(), "--threads", "3"});
    REQUIRE(threads3.code == 0);
    CHECK(read_file(out_c / "estimate.csv") == content);

    const fs::path out_d = tmp.path / "d";
    const CliResult reseeded = run(
        {"--config", cfg_path, "--out", out_d.string(), "--threads", "2", "--seed", "7"});
    REQUIRE(reseeded.code == 0);
    const std::string reseeded_content = read_file(out_d / "estimate.csv");
    CHECK(reseeded_content != content);
    CHECK(lines_of(reseeded_content)[0] != lines[0]);
}

TEST_CASE("the out key may nest directories under --out") {
    TempDir tmp;
    std::string text = kEstimateConfig;
    text.insert(text.rfind('}'), R"(, "out": "runs/custom.csv")");
    const std::string cfg_path = write_config(tmp.path, "run.json", text);
    const fs::path out_dir = tmp.path / "o";
    const CliResult r = run({"--config", cfg_path, "--out", out_dir.string()});
    CAPTURE(r.err);
    REQUIRE(r.code == 0);
    CHECK(fs::exists(out_dir / "runs" / "custom.csv"));
}

TEST_CASE("end-to-end density run against the gaussian law") {
    TempDir tmp;
    const std::string cfg_path = write_config(tmp.path, "run.json", R"({
      "command": "density",
      "model": {"family": "constant", "drift": 0.2, "sigma": 1.1},
      "grid": {"t": 0.8, "n_steps": 32},
      "particles": 16,
      "samples": 20000,
      "seed": 3,
      "x": 0.3,
      "density": {"lo": -2.0, "hi": 2.9, "count": 21}
    })");
    const CliResult r = run({"--config", cfg_path, "--out", tmp.path.string()});
    CAPTURE(r.err);
    REQUIRE(r.code == 0);
    const std::vector<std::string> lines = lines_of(read_file(tmp.path / "density.csv"));
    REQUIRE(lines.size() == 24);
    CHECK(lines[1] == "z,p,stderr");
    CHECK(starts_with(lines[23], "# tail_slope="));
    CHECK(lines[23].find("tail_r2=") != std::string::npos);

    for (int k = 0; k < 21; ++k) {
        const std::vector<std::string> row = split_csv(lines[static_cast<std::size_t>(2 + k)]);
        REQUIRE(row.size() == 3);
        const double z = std::stod(row[0]);
        const double p = std::stod(row[1]);
        const double se = std::stod(row[2]);
        const double exact = oracle::gaussian_density(0.8, 0.3, z, 0.2, 1.1);
        CHECK(std::abs(p - exact) <= std::max(5.0 * se, 0.025));
        CHECK(p >= -3.0 * se);
    }
}

TEST_CASE("error exits and their stderr tags") {
    TempDir tmp;

    SUBCASE("config rejection leaves no output behind") {
        const std::string bad = write_config(tmp.path, "bad.json", R"({
          "command": "simulate", "model": {"family": "constant"}, "grid": {"t": -1.0}
        })");
        const CliResult r = run({"--config", bad, "--out", (tmp.path / "o").string()});
        CHECK(r.code == 2);
        CHECK(starts_with(r.err, "error,config,"));
        CHECK(!fs::exists(tmp.path / "o" / "simulate.csv"));
    }

    SUBCASE("unknown key") {
        const std::string bad = write_config(
            tmp.path, "bad.json",
            R"({"command": "simulate", "model": {"family": "constant"}, "oops": 1})");
        const CliResult r = run({"--config", bad, "--out", (tmp.path / "o").string()});
        CHECK(r.code == 2);
        CHECK(starts_with(r.err, "error,config,"));
    }

    SUBCASE("derivative order cap") {
        const std::string bad = write_config(tmp.path, "bad.json", R"({
          "command": "estimate",
          "model": {"family": "constant"},
          "samples": 10,
          "estimate": {"kinds": ["dx"], "alpha": [0, 0, 0]}
        })");
        const CliResult r = run({"--config", bad, "--out", (tmp.path / "o").string()});
        CHECK(r.code == 4);
        CHECK(starts_with(r.err, "error,order,"));
        CHECK(!fs::exists(tmp.path / "o" / "estimate.csv"));
    }

    SUBCASE("numerical blow-up") {
        const std::string bad = write_config(tmp.path, "bad.json", R"({
          "command": "simulate",
          "model": {"family": "geometric", "sigma": 1e200},
          "grid": {"t": 1.0, "n_steps": 8},
          "particles": 8,
          "seed": 5,
          "x": 1.0
        })");
        const CliResult r = run({"--config", bad, "--out", (tmp.path / "o").string()});
        CHECK(r.code == 3);
        CHECK(starts_with(r.err, "error,numeric,"));
        CHECK(!fs::exists(tmp.path / "o" / "simulate.csv"));
    }

    SUBCASE("missing required flag") {
        const CliResult r = run({});
        CHECK(r.code == 2);
        CHECK(starts_with(r.err, "error,config,"));
    }

    SUBCASE("missing config file") {
        const CliResult r = run({"--config", (tmp.path / "absent.json").string()});
        CHECK(r.code == 2);
        CHECK(starts_with(r.err, "error,config,"));
    }

    SUBCASE("help text") {
        const CliResult r = run({"--help"});
        CHECK(r.code == 0);
        CHECK(r.out.find("--config") != std::string::npos);
    }
}

TEST_CASE("simulate command reports the particle sweep") {
    const RunConfig cfg = parse_run_config(R"({
      "command": "simulate",
      "model": {"family": "constant", "drift": 0.3, "sigma": 0.5},
      "grid": {"t": 1.0, "n_steps": 4},
      "particles": 5,
      "seed": 2,
      "x": 1.0
    })");
    const std::vector<std::string> lines = lines_of(cmd_simulate(cfg, 1));
    REQUIRE(lines.size() == 7);
    CHECK(starts_with(lines[0], "# config_hash="));
    CHECK(lines[1] == "k,time,mean,second_moment,w2_prev,p0,p1,p2,p3,p4");
    // The start is a point mass at 1, before any noise.
    CHECK(lines[2] == "0,0,1,1,,1,1,1,1,1");
    // Each later row carries a positive 1d transport distance to its parent.
    for (std::size_t k = 3; k < lines.size(); ++k) {
        const std::vector<std::string> row = split_csv(lines[k]);
        REQUIRE(row.size() == 10);
        CHECK(std::stod(row[4]) > 0.0);
    }
}

TEST_CASE("backward-equation command balances at an interior point") {
    const RunConfig cfg = parse_run_config(R"({
      "command": "pde_check",
      "model": {"family": "constant", "drift": 0.4, "sigma": 1.0},
      "grid": {"t": 0.5, "n_steps": 16},
      "particles": 16,
      "samples": 3000,
      "seed": 21,
      "x": 0.3,
      "payoff": {"name": "identity"}
    })");
    const std::vector<std::string> lines = lines_of(cmd_pde_check(cfg, 2));
    REQUIRE(lines.size() == 3);
    CHECK(lines[1] ==
          "t,x,h_t,dt_u,dt_u_stderr,x_terms,x_terms_stderr,mu_terms,mu_terms_stderr,"
          "residual,residual_stderr,n_samples,seed");
    const std::vector<std::string> row = split_csv(lines[2]);
    REQUIRE(row.size() == 13);
    const double dt_u = std::stod(row[3]);
    const double dt_se = std::stod(row[4]);
    const double x_terms = std::stod(row[5]);
    const double x_se = std::stod(row[6]);
    const double mu_terms = std::stod(row[7]);
    const double mu_se = std::stod(row[8]);
    const double residual = std::stod(row[9]);
    const double res_se = std::stod(row[10]);
    // U(t, x) = x + 0.4 t: the time slope and the drift term are both 0.4,
    // and the measure term vanishes identically for a state-only model.
    CHECK(std::abs(dt_u - 0.4) <= 4.0 * (dt_se + 0.02));
    CHECK(std::abs(x_terms - 0.4) <= 4.0 * (x_se + 0.02));
    CHECK(mu_terms == 0.0);
    CHECK(mu_se == 0.0);
    CHECK(std::abs(residual) <= 4.0 * (res_se + 0.02));
}

TEST_CASE("compare command pits bump reruns against weight estimates") {
    const RunConfig cfg = parse_run_config(R"({
      "command": "compare",
      "model": {"family": "constant", "drift": 0.0, "sigma": 1.0},
      "grid": {"t": 1.0, "n_steps": 32},
      "particles": 16,
      "samples": 6000,
      "seed": 13,
      "x": 0.3,
      "payoff": {"name": "sin"},
      "compare": {"target": "dx", "bumps": [0.01]}
    })");
    const std::vector<std::string> lines = lines_of(cmd_compare(cfg, 2));
    REQUIRE(lines.size() == 3);
    CHECK(lines[1] ==
          "target,bump,fd_value,fd_stderr,weight_value,weight_stderr,difference,"
          "combined_stderr");
    const std::vector<std::string> row = split_csv(lines[2]);
    REQUIRE(row.size() == 8);
    CHECK(row[0] == "dx");
    CHECK(std::stod(row[1]) == doctest::Approx(0.01));
    const double difference = std::stod(row[6]);
    const double combined = std::stod(row[7]);
    CHECK(std::abs(difference) <= 4.0 * combined + 5e-3);
    // Both routes sit near the analytic slope.
    const double target = std::exp(-0.5) * std::cos(0.3);
    CHECK(std::abs(std::stod(row[2]) - target) <= 5.0 * std::stod(row[3]) + 5e-3);
    CHECK(std::abs(std::stod(row[4]) - target) <= 5.0 * std::stod(row[5]) + 5e-3);
}
