#include "mvmc/config.hpp"

#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>

#include <json.hpp>

#include "mvmc/errors.hpp"
#include "mvmc/families.hpp"
#include "mvmc/payoffs.hpp"

namespace mvmc {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw ConfigError(msg); }

void require_object(const json& j, const std::string& where) {
    if (!j.is_object()) fail("'" + where + "' must be an object");
}

void reject_unknown(const json& obj, const std::string& where,
                    std::initializer_list<const char*> allowed) {
    for (const auto& item : obj.items()) {
        bool known = false;
        for (const char* k : allowed) {
            if (item.key() == k) {
                known = true;
                break;
            }
        }
        if (!known) fail("unknown key '" + item.key() + "' in " + where);
    }
}

double get_num(const json& obj, const std::string& where, const char* key) {
    if (!obj.contains(key)) fail("missing key '" + std::string(key) + "' in " + where);
    const json& v = obj.at(key);
    if (!v.is_number()) fail("'" + std::string(key) + "' in " + where + " must be a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) fail("'" + std::string(key) + "' in " + where + " must be finite");
    return d;
}

double get_num_or(const json& obj, const std::string& where, const char* key, double dflt) {
    return obj.contains(key) ? get_num(obj, where, key) : dflt;
}

long get_int(const json& obj, const std::string& where, const char* key) {
    if (!obj.contains(key)) fail("missing key '" + std::string(key) + "' in " + where);
    const json& v = obj.at(key);
    if (!v.is_number_integer()) {
        fail("'" + std::string(key) + "' in " + where + " must be an integer");
    }
    return v.get<long>();
}

long get_int_or(const json& obj, const std::string& where, const char* key, long dflt) {
    return obj.contains(key) ? get_int(obj, where, key) : dflt;
}

bool get_bool_or(const json& obj, const std::string& where, const char* key, bool dflt) {
    if (!obj.contains(key)) return dflt;
    const json& v = obj.at(key);
    if (!v.is_boolean()) fail("'" + std::string(key) + "' in " + where + " must be a boolean");
    return v.get<bool>();
}

std::string get_str(const json& obj, const std::string& where, const char* key) {
    if (!obj.contains(key)) fail("missing key '" + std::string(key) + "' in " + where);
    const json& v = obj.at(key);
    if (!v.is_string()) fail("'" + std::string(key) + "' in " + where + " must be a string");
    return v.get<std::string>();
}

std::string get_str_or(const json& obj, const std::string& where, const char* key,
                       const std::string& dflt) {
    return obj.contains(key) ? get_str(obj, where, key) : dflt;
}

// A point is a number (length-1 vector) or an array of numbers.
Eigen::VectorXd parse_point(const json& v, const std::string& where) {
    if (v.is_number()) {
        Eigen::VectorXd out(1);
        out(0) = v.get<double>();
        if (!std::isfinite(out(0))) fail(where + " must be finite");
        return out;
    }
    if (!v.is_array() || v.empty()) fail(where + " must be a number or a non-empty array");
    Eigen::VectorXd out(static_cast<int>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!v[i].is_number()) fail(where + " entries must be numbers");
        out(static_cast<int>(i)) = v[i].get<double>();
        if (!std::isfinite(out(static_cast<int>(i)))) fail(where + " entries must be finite");
    }
    return out;
}

Eigen::VectorXd get_point(const json& obj, const std::string& where, const char* key) {
    if (!obj.contains(key)) fail("missing key '" + std::string(key) + "' in " + where);
    return parse_point(obj.at(key), where + "." + key);
}

std::vector<int> parse_indices(const json& obj, const std::string& where, const char* key) {
    std::vector<int> out;
    if (!obj.contains(key)) return out;
    const json& v = obj.at(key);
    if (!v.is_array()) fail("'" + std::string(key) + "' in " + where + " must be an array");
    for (const json& e : v) {
        if (!e.is_number_integer()) {
            fail("'" + std::string(key) + "' in " + where + " must contain integers");
        }
        out.push_back(e.get<int>());
    }
    return out;
}

Fn1 phi_from_name(const std::string& name, const std::string& where) {
    if (name == "identity") return fn_identity();
    if (name == "square") return fn_square();
    if (name == "one") return fn_constant(1.0);
    fail("unknown interaction function '" + name + "' in " + where +
         " (expected identity, square or one)");
}

Fn2 affine_fn2(const json& obj, const std::string& where) {
    require_object(obj, where);
    reject_unknown(obj, where, {"c0", "c1", "c2", "phi"});
    return fn2_affine(get_num_or(obj, where, "c0", 0.0), get_num_or(obj, where, "c1", 0.0),
                      get_num_or(obj, where, "c2", 0.0));
}

CoefficientModel build_model(const json& m) {
    require_object(m, "model");
    const std::string family = get_str(m, "model", "family");

    if (family == "constant") {
        reject_unknown(m, "model", {"family", "drift", "sigma"});
        Eigen::VectorXd b(1);
        b(0) = get_num_or(m, "model", "drift", 0.0);
        if (m.contains("drift") && m.at("drift").is_array()) {
            b = parse_point(m.at("drift"), "model.drift");
        }
        Eigen::MatrixXd s;
        if (m.contains("sigma") && m.at("sigma").is_array()) {
            const Eigen::VectorXd diag = parse_point(m.at("sigma"), "model.sigma");
            s = diag.asDiagonal();
        } else {
            s.setConstant(1, 1, get_num_or(m, "model", "sigma", 1.0));
        }
        if (b.size() != s.rows()) fail("model.drift and model.sigma dimensions disagree");
        return make_constant(b, s);
    }
    if (family == "mean_field_ou") {
        reject_unknown(m, "model", {"family", "a", "sigma"});
        const double a = get_num(m, "model", "a");
        const double sigma = get_num(m, "model", "sigma");
        if (!(sigma > 0.0)) fail("model.sigma must be positive");
        return make_mean_field_ou(a, sigma);
    }
    if (family == "geometric") {
        reject_unknown(m, "model", {"family", "drift", "sigma"});
        const double b = get_num_or(m, "model", "drift", 0.0);
        const double sigma = get_num(m, "model", "sigma");
        ScalarInteractionSpec spec;
        spec.u_drift = fn2_affine(0.0, b, 0.0);
        spec.phi_drift = fn_constant(0.0);
        spec.u_diffusion = fn2_affine(0.0, sigma, 0.0);
        spec.phi_diffusion = fn_constant(0.0);
        CoefficientModel model = make_scalar_interaction(spec);
        model.family = "geometric";
        return model;
    }
    if (family == "bounded_sin") {
        reject_unknown(m, "model", {"family", "base", "amplitude", "frequency"});
        const double base = get_num_or(m, "model", "base", 1.0);
        const double amp = get_num_or(m, "model", "amplitude", 0.1);
        const double freq = get_num_or(m, "model", "frequency", 1.0);
        if (!(base - std::abs(amp) > 0.0)) {
            fail("model base must exceed |amplitude| for a uniformly elliptic diffusion");
        }
        ScalarInteractionSpec spec;
        spec.u_drift = fn2_zero();
        spec.phi_drift = fn_constant(0.0);
        spec.u_diffusion = fn2_sin_first(base, amp, freq);
        spec.phi_diffusion = fn_constant(0.0);
        spec.bounded_coefficients = true;
        spec.uniformly_elliptic = true;
        spec.ellipticity_floor = (base - std::abs(amp)) * (base - std::abs(amp));
        CoefficientModel model = make_scalar_interaction(spec);
        model.family = "bounded_sin";
        return model;
    }
    if (family == "scalar_interaction") {
        reject_unknown(m, "model",
                       {"family", "drift", "diffusion", "bounded", "elliptic", "floor"});
        if (!m.contains("drift") || !m.contains("diffusion")) {
            fail("model needs 'drift' and 'diffusion' blocks");
        }
        ScalarInteractionSpec spec;
        spec.u_drift = affine_fn2(m.at("drift"), "model.drift");
        spec.phi_drift = phi_from_name(
            get_str_or(m.at("drift"), "model.drift", "phi", "identity"), "model.drift");
        spec.u_diffusion = affine_fn2(m.at("diffusion"), "model.diffusion");
        spec.phi_diffusion = phi_from_name(
            get_str_or(m.at("diffusion"), "model.diffusion", "phi", "identity"),
            "model.diffusion");
        spec.bounded_coefficients = get_bool_or(m, "model", "bounded", false);
        spec.uniformly_elliptic = get_bool_or(m, "model", "elliptic", false);
        spec.ellipticity_floor = get_num_or(m, "model", "floor", 0.0);
        return make_scalar_interaction(spec);
    }
    if (family == "first_order") {
        reject_unknown(m, "model",
                       {"family", "drift", "diffusion", "bounded", "elliptic", "floor"});
        if (!m.contains("drift") || !m.contains("diffusion")) {
            fail("model needs 'drift' and 'diffusion' blocks");
        }
        FirstOrderSpec spec;
        spec.w_drift = affine_fn2(m.at("drift"), "model.drift");
        spec.w_diffusion = affine_fn2(m.at("diffusion"), "model.diffusion");
        spec.bounded_coefficients = get_bool_or(m, "model", "bounded", false);
        spec.uniformly_elliptic = get_bool_or(m, "model", "elliptic", false);
        spec.ellipticity_floor = get_num_or(m, "model", "floor", 0.0);
        return make_first_order(spec);
    }
    fail("unknown model family '" + family + "'");
}

InitialSampler build_sampler(const json& j, int n) {
    require_object(j, "initial");
    reject_unknown(j, "initial", {"kind", "point", "mean", "std", "lo", "width", "shift"});
    const std::string kind = get_str(j, "initial", "kind");
    InitialSampler s;
    if (kind == "delta") {
        s = InitialSampler::delta(get_point(j, "initial", "point"));
    } else if (kind == "normal") {
        s = InitialSampler::normal(get_point(j, "initial", "mean"),
                                   get_point(j, "initial", "std"));
        if ((s.scale.array() < 0.0).any()) fail("initial.std must be nonnegative");
    } else if (kind == "uniform") {
        s = InitialSampler::uniform(get_point(j, "initial", "lo"),
                                    get_point(j, "initial", "width"));
        if ((s.scale.array() < 0.0).any()) fail("initial.width must be nonnegative");
    } else {
        fail("unknown initial sampler kind '" + kind + "'");
    }
    if (j.contains("shift")) s.shift = get_point(j, "initial", "shift");
    if (s.point.size() != n) fail("initial condition dimension must equal the model dimension");
    return s;
}

std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= static_cast<std::uint64_t>(c);
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace

Payoff payoff_from_registry(const std::string& name, double frequency, int component,
                            double strike, const Eigen::VectorXd& z,
                            const Eigen::VectorXd& coefficients) {
    if (name == "identity") return payoff_identity(component);
    if (name == "square") return payoff_square(component);
    if (name == "sin") return payoff_sin(frequency, component);
    if (name == "positive_part") return payoff_positive_part(strike, component);
    if (name == "indicator_above") {
        if (z.size() == 0) fail("payoff indicator_above needs a threshold 'z'");
        return payoff_indicator_above(z);
    }
    if (name == "centred_mean") return payoff_centred_mean(component);
    if (name == "polynomial") {
        if (coefficients.size() == 0) fail("payoff polynomial needs 'coefficients'");
        return payoff_polynomial(coefficients, component);
    }
    fail("unknown payoff '" + name + "'");
}

RunConfig parse_run_config(const std::string& text,
                           std::optional<std::uint64_t> seed_override) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        fail(std::string("config is not valid JSON: ") + e.what());
    }
    require_object(doc, "config");
    reject_unknown(doc, "config",
                   {"command", "model", "grid", "particles", "samples", "seed", "law_copies",
                    "aux_copies", "x", "initial", "payoff", "estimate", "density", "pde",
                    "compare", "out"});

    RunConfig cfg;
    cfg.command = get_str(doc, "config", "command");
    if (cfg.command != "simulate" && cfg.command != "estimate" && cfg.command != "density" &&
        cfg.command != "pde_check" && cfg.command != "compare") {
        fail("unknown command '" + cfg.command + "'");
    }

    if (!doc.contains("model")) fail("missing 'model' block");
    cfg.model = build_model(doc.at("model"));
    cfg.model_family = cfg.model.family;

    if (doc.contains("grid")) {
        const json& g = doc.at("grid");
        require_object(g, "grid");
        reject_unknown(g, "grid", {"t", "n_steps"});
        cfg.t = get_num(g, "grid", "t");
        cfg.n_steps = static_cast<int>(get_int_or(g, "grid", "n_steps", 64));
    }
    if (!(cfg.t > 0.0)) fail("grid.t must be positive");
    if (cfg.n_steps < 1) fail("grid.n_steps must be at least 1");

    cfg.particles = static_cast<int>(get_int_or(doc, "config", "particles", 256));
    if (cfg.particles < 2) fail("particles must be at least 2");
    cfg.samples = get_int_or(doc, "config", "samples", 10000);
    if (cfg.samples < 1) fail("samples must be at least 1");
    const long seed_raw = get_int_or(doc, "config", "seed", 0);
    if (seed_raw < 0) fail("seed must be nonnegative");
    cfg.seed = static_cast<std::uint64_t>(seed_raw);
    cfg.law_copies = static_cast<int>(get_int_or(doc, "config", "law_copies", 1));
    if (cfg.law_copies < 1) fail("law_copies must be at least 1");
    cfg.aux_copies = static_cast<int>(get_int_or(doc, "config", "aux_copies", 8));
    if (cfg.aux_copies < 1) fail("aux_copies must be at least 1");

    cfg.x = doc.contains("x") ? parse_point(doc.at("x"), "x")
                              : Eigen::VectorXd::Zero(cfg.model.N);
    if (cfg.x.size() != cfg.model.N) fail("x must have the model dimension");

    if (doc.contains("initial")) {
        cfg.initial = build_sampler(doc.at("initial"), cfg.model.N);
    } else {
        cfg.initial = InitialSampler::delta(cfg.x);
    }

    if (doc.contains("payoff")) {
        const json& p = doc.at("payoff");
        require_object(p, "payoff");
        reject_unknown(p, "payoff",
                       {"name", "frequency", "component", "strike", "z", "coefficients"});
        const std::string name = get_str(p, "payoff", "name");
        const double freq = get_num_or(p, "payoff", "frequency", 1.0);
        const int comp = static_cast<int>(get_int_or(p, "payoff", "component", 0));
        const double strike = get_num_or(p, "payoff", "strike", 0.0);
        Eigen::VectorXd z, coeffs;
        if (p.contains("z")) z = parse_point(p.at("z"), "payoff.z");
        if (p.contains("coefficients")) {
            coeffs = parse_point(p.at("coefficients"), "payoff.coefficients");
        }
        if (comp < 0 || comp >= cfg.model.N) fail("payoff.component out of range");
        cfg.payoff = payoff_from_registry(name, freq, comp, strike, z, coeffs);
    } else {
        cfg.payoff = payoff_identity(0);
    }

    if (doc.contains("estimate")) {
        const json& e = doc.at("estimate");
        require_object(e, "estimate");
        reject_unknown(e, "estimate", {"kinds", "alpha", "beta", "v"});
        if (!e.contains("kinds") || !e.at("kinds").is_array() || e.at("kinds").empty()) {
            fail("estimate.kinds must be a non-empty array");
        }
        for (const json& k : e.at("kinds")) {
            if (!k.is_string()) fail("estimate.kinds entries must be strings");
            const std::string kind = k.get<std::string>();
            if (kind != "expectation" && kind != "dx" && kind != "dmu" &&
                kind != "fixed_point_dx") {
                fail("unknown estimate kind '" + kind + "'");
            }
            cfg.kinds.push_back(kind);
        }
        cfg.alpha = parse_indices(e, "estimate", "alpha");
        cfg.beta = parse_indices(e, "estimate", "beta");
        if (e.contains("v")) {
            const json& vlist = e.at("v");
            if (!vlist.is_array()) fail("estimate.v must be an array of points");
            for (const json& entry : vlist) {
                cfg.v_list.push_back(parse_point(entry, "estimate.v"));
            }
        }
    } else if (cfg.command == "estimate") {
        fail("command 'estimate' needs an 'estimate' block");
    }

    if (doc.contains("density")) {
        const json& d = doc.at("density");
        require_object(d, "density");
        reject_unknown(d, "density", {"lo", "hi", "count", "derivatives", "alpha", "beta"});
        cfg.z_lo = get_num(d, "density", "lo");
        cfg.z_hi = get_num(d, "density", "hi");
        cfg.z_count = static_cast<int>(get_int_or(d, "density", "count", 101));
        if (!(cfg.z_hi > cfg.z_lo)) fail("density.hi must exceed density.lo");
        if (cfg.z_count < 1) fail("density.count must be at least 1");
        cfg.density_derivatives = get_bool_or(d, "density", "derivatives", false);
        cfg.density_alpha = parse_indices(d, "density", "alpha");
        cfg.density_beta = parse_indices(d, "density", "beta");
    } else if (cfg.command == "density") {
        fail("command 'density' needs a 'density' block");
    }

    if (doc.contains("pde")) {
        const json& p = doc.at("pde");
        require_object(p, "pde");
        reject_unknown(p, "pde", {});
    }

    if (doc.contains("compare")) {
        const json& c = doc.at("compare");
        require_object(c, "compare");
        reject_unknown(c, "compare", {"target", "bumps", "v"});
        cfg.fd_target = get_str(c, "compare", "target");
        if (cfg.fd_target != "dx" && cfg.fd_target != "dmu") {
            fail("compare.target must be 'dx' or 'dmu'");
        }
        if (!c.contains("bumps") || !c.at("bumps").is_array() || c.at("bumps").empty()) {
            fail("compare.bumps must be a non-empty array");
        }
        for (const json& b : c.at("bumps")) {
            if (!b.is_number()) fail("compare.bumps entries must be numbers");
            const double bump = b.get<double>();
            if (!(bump > 0.0) || !std::isfinite(bump)) fail("bump sizes must be positive");
            cfg.bumps.push_back(bump);
        }
        if (c.contains("v")) cfg.v_list.push_back(parse_point(c.at("v"), "compare.v"));
    } else if (cfg.command == "compare") {
        fail("command 'compare' needs a 'compare' block");
    }

    cfg.out_file = get_str_or(doc, "config", "out", "");

    if (seed_override) {
        cfg.seed = *seed_override;
        doc["seed"] = *seed_override;
    }
    cfg.config_hash = fnv1a64(doc.dump());
    return cfg;
}

RunConfig load_run_config(const std::string& path,
                          std::optional<std::uint64_t> seed_override) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str(), seed_override);
}

EstimatorOptions options_from_config(const RunConfig& cfg, int threads) {
    EstimatorOptions opts;
    opts.n_samples = cfg.samples;
    opts.n_particles = cfg.particles;
    opts.n_steps = cfg.n_steps;
    opts.seed = cfg.seed;
    opts.threads = threads;
    opts.law_copies = cfg.law_copies;
    opts.aux_copies = cfg.aux_copies;
    return opts;
}

}  // namespace mvmc
