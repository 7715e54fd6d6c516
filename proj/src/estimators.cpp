#include "mvmc/estimators.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <optional>
#include <thread>
#include <utility>
#include <vector>

#include "mvmc/errors.hpp"
#include "mvmc/simulate.hpp"
#include "mvmc/tangents.hpp"

namespace mvmc {

namespace {

// Samples are grouped into fixed-size batches; partial moments are merged in
// batch-index order so the reduction is independent of the thread schedule.
constexpr long kBatch = 64;

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

struct BatchAcc {
    long count = 0;
    Eigen::VectorXd mean, m2;
};

void acc_push(BatchAcc& a, const Eigen::VectorXd& y) {
    if (a.count == 0) {
        a.mean = Eigen::VectorXd::Zero(y.size());
        a.m2 = Eigen::VectorXd::Zero(y.size());
    }
    ++a.count;
    const Eigen::VectorXd delta = y - a.mean;
    a.mean += delta / static_cast<double>(a.count);
    a.m2 += delta.cwiseProduct(y - a.mean);
}

void acc_merge(BatchAcc& a, const BatchAcc& b) {
    if (b.count == 0) return;
    if (a.count == 0) {
        a = b;
        return;
    }
    const double na = static_cast<double>(a.count);
    const double nb = static_cast<double>(b.count);
    const Eigen::VectorXd delta = b.mean - a.mean;
    a.mean += delta * (nb / (na + nb));
    a.m2 += b.m2 + delta.cwiseProduct(delta) * (na * nb / (na + nb));
    a.count += b.count;
}

void validate_options(const EstimatorOptions& opts) {
    if (opts.n_samples < 1) throw ConfigError("n_samples must be at least 1");
    if (opts.n_particles < 2) throw ConfigError("n_particles must be at least 2");
    if (opts.n_steps < 1) throw ConfigError("n_steps must be at least 1");
    if (opts.threads < 1) throw ConfigError("threads must be at least 1");
    if (opts.law_copies < 1) throw ConfigError("law_copies must be at least 1");
    if (opts.aux_copies < 1) throw ConfigError("aux_copies must be at least 1");
}

void require_single_law(const EstimatorOptions& opts, const char* which) {
    if (opts.law_copies != 1) {
        throw ConfigError(std::string(which) +
                          " couples samples to the law tangents and supports law_copies = 1 only");
    }
}

void check_point(const Eigen::VectorXd& p, int n, const char* what) {
    if (p.size() != n) {
        throw DimensionError(std::string(what) + " must have length N");
    }
}

void check_indices(const std::vector<int>& idx, int n, const char* what) {
    for (int i : idx) {
        if (i < 0 || i >= n) {
            throw DimensionError(std::string(what) + " component index out of range");
        }
    }
}

double prefactor(double t, std::size_t order) {
    return std::pow(t, -0.5 * static_cast<double>(order));
}

// Independent particle systems cycled across sample batches. Copy c draws its
// own initial rows and its own noise block (particle ids offset by c * M), so
// copies differ in both the cloud and the dynamics noise.
struct LawSet {
    std::vector<ParticleSystemPaths> laws;
    const ParticleSystemPaths& pick(long sample) const {
        return laws[static_cast<std::size_t>((sample / kBatch) %
                                             static_cast<long>(laws.size()))];
    }
    std::size_t index_of(long sample) const {
        return static_cast<std::size_t>((sample / kBatch) % static_cast<long>(laws.size()));
    }
};

LawSet laws_from_rows(const CoefficientModel& model, const Eigen::MatrixXd& rows, int m,
                      int copies, const TimeGrid& grid, const BrownianDriver& driver) {
    LawSet set;
    set.laws.reserve(static_cast<std::size_t>(copies));
    for (int c = 0; c < copies; ++c) {
        set.laws.push_back(simulate_particles(model, rows.middleRows(c * m, m), grid, driver, 0,
                                              static_cast<std::uint32_t>(c) *
                                                  static_cast<std::uint32_t>(m)));
    }
    return set;
}

LawSet laws_from_sampler(const CoefficientModel& model, const InitialSampler& sampler,
                         const TimeGrid& grid, const BrownianDriver& driver,
                         const EstimatorOptions& opts) {
    const Eigen::MatrixXd rows =
        sampler.sample(opts.n_particles * opts.law_copies, model.N, driver);
    return laws_from_rows(model, rows, opts.n_particles, opts.law_copies, grid, driver);
}

LawSet laws_at_point(const CoefficientModel& model, const Eigen::VectorXd& x,
                     const TimeGrid& grid, const BrownianDriver& driver,
                     const EstimatorOptions& opts) {
    const Eigen::MatrixXd rows =
        x.transpose().replicate(opts.n_particles * opts.law_copies, 1);
    return laws_from_rows(model, rows, opts.n_particles, opts.law_copies, grid, driver);
}

bool chain_has(const std::vector<OpStep>& ops, OpKind kind) {
    return std::any_of(ops.begin(), ops.end(),
                       [kind](const OpStep& s) { return s.kind == kind; });
}

EstimatorResult base_result(std::string name, double t, const Eigen::VectorXd& x,
                            const EstimatorOptions& opts) {
    EstimatorResult r;
    r.estimator = std::move(name);
    r.t = t;
    r.x = x;
    r.seed = opts.seed;
    return r;
}

void finish_diag(EstimatorResult& r, const McMoments& mc, const EstimatorOptions& opts,
                 int w2_col, int cond_col) {
    r.value = mc.mean(0);
    r.std_error = mc.std_error(0);
    r.n_samples = mc.accepted;
    r.diag.rejected = mc.rejected;
    r.diag.flagged =
        mc.rejected > static_cast<long>(0.001 * static_cast<double>(opts.n_samples));
    if (w2_col >= 0) r.diag.weight_second_moment = mc.mean(w2_col);
    if (cond_col >= 0) r.diag.mean_condition = mc.mean(cond_col);
}

}  // namespace

std::string csv_header() {
    return "estimator,t,x,v,z,value,stderr,n_samples,seed,method";
}

std::string csv_row(const EstimatorResult& r) {
    std::string out = r.estimator;
    out += ',' + fmt_g(r.t);
    out += ',' + join_vec(r.x);
    out += ',' + join_vec(r.v);
    out += ',' + join_vec(r.z);
    out += ',' + fmt_g(r.value);
    out += ',' + fmt_g(r.std_error);
    out += ',' + std::to_string(r.n_samples);
    out += ',' + std::to_string(r.seed);
    out += ',' + r.method;
    return out;
}

McMoments run_monte_carlo(long n_samples, int threads, int dim,
                          const std::function<void(long, Eigen::VectorXd&)>& fill) {
    if (n_samples < 1) throw ConfigError("n_samples must be at least 1");
    if (dim < 1) throw ConfigError("sample dimension must be at least 1");

    const long n_batches = (n_samples + kBatch - 1) / kBatch;
    std::vector<BatchAcc> batches(static_cast<std::size_t>(n_batches));
    std::vector<long> batch_rejected(static_cast<std::size_t>(n_batches), 0);

    std::atomic<long> next{0};
    std::atomic<bool> abort{false};
    std::mutex err_mutex;
    std::exception_ptr first_error;

    auto worker = [&]() {
        Eigen::VectorXd buf(dim);
        for (;;) {
            const long b = next.fetch_add(1);
            if (b >= n_batches || abort.load()) break;
            BatchAcc acc;
            long rej = 0;
            const long lo = b * kBatch;
            const long hi = std::min(n_samples, lo + kBatch);
            for (long s = lo; s < hi; ++s) {
                try {
                    fill(s, buf);
                    acc_push(acc, buf);
                } catch (const BlowUpError&) {
                    ++rej;
                } catch (const SingularJacobianError&) {
                    ++rej;
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!first_error) first_error = std::current_exception();
                    abort.store(true);
                    return;
                }
            }
            batches[static_cast<std::size_t>(b)] = std::move(acc);
            batch_rejected[static_cast<std::size_t>(b)] = rej;
        }
    };

    const int n_threads =
        static_cast<int>(std::min<long>(std::max(threads, 1), n_batches));
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(n_threads));
        for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    BatchAcc total;
    long rejected = 0;
    for (long b = 0; b < n_batches; ++b) {
        acc_merge(total, batches[static_cast<std::size_t>(b)]);
        rejected += batch_rejected[static_cast<std::size_t>(b)];
    }
    if (total.count == 0) {
        throw BlowUpError("every Monte-Carlo sample was rejected", -1);
    }

    McMoments out;
    out.accepted = total.count;
    out.rejected = rejected;
    out.mean = total.mean;
    out.std_error = Eigen::VectorXd::Zero(dim);
    if (total.count > 1) {
        const double n = static_cast<double>(total.count);
        out.std_error = (total.m2 / (n - 1.0)).cwiseMax(0.0).cwiseSqrt() / std::sqrt(n);
    }
    return out;
}

EstimatorResult estimate_expectation(const CoefficientModel& model, const Payoff& payoff,
                                     const Eigen::VectorXd& x, const InitialSampler& sampler,
                                     double t, const EstimatorOptions& opts) {
    validate_options(opts);
    check_point(x, model.N, "x");
    const TimeGrid grid(t, opts.n_steps);
    const BrownianDriver driver(opts.seed);
    const LawSet laws = laws_from_sampler(model, sampler, grid, driver, opts);
    const int n = grid.n_steps;

    auto fill = [&](long s, Eigen::VectorXd& out) {
        const ParticleSystemPaths& law = laws.pick(s);
        const PathBundle path = simulate_decoupled(model, x, law, driver, streams::decoupled,
                                                   static_cast<std::uint32_t>(s));
        out(0) = payoff.value(path.x[n], law.measures[n]);
    };
    const McMoments mc = run_monte_carlo(opts.n_samples, opts.threads, 1, fill);

    EstimatorResult r = base_result("expectation", t, x, opts);
    finish_diag(r, mc, opts, -1, -1);
    return r;
}

namespace {

// Shared core of the single-value weighted estimators: per sample, one
// decoupled carrier path, one operator-chain weight, payoff value times the
// scaled weight. Lions material is attached only when the chain consumes it.
EstimatorResult run_chain_estimator(std::string name, const CoefficientModel& model,
                                    const Payoff& payoff, const Eigen::VectorXd& x,
                                    const LawSet& laws,
                                    const std::vector<LawTangents>& tangents,
                                    const std::vector<OpStep>& ops, double t,
                                    const BrownianDriver& driver,
                                    const EstimatorOptions& opts) {
    const ModelStructure st = analyze_structure(model);
    const bool lions_ops = chain_has(ops, OpKind::lions_bel) ||
                           chain_has(ops, OpKind::lions_total) ||
                           chain_has(ops, OpKind::fixed_point);
    const bool needs_lions = lions_ops && !st.lions_zero();
    const bool inverts = chain_has(ops, OpKind::inverse_flow) || needs_lions;
    const double pref = prefactor(t, ops.size());
    const int n = opts.n_steps;

    auto fill = [&](long s, Eigen::VectorXd& out) {
        const ParticleSystemPaths& law = laws.pick(s);
        const PathBundle path = simulate_decoupled(model, x, law, driver, streams::decoupled,
                                                   static_cast<std::uint32_t>(s));
        std::optional<SampleLions> sl;
        std::optional<WeightWorkspace> ws;
        if (needs_lions) {
            const LawTangents& lt = tangents[laws.index_of(s)];
            sl = propagate_lions(model, path, law, lt, driver, static_cast<std::uint32_t>(s),
                                 SampleLionsOptions{opts.force_generic_lions, false});
            WeightWorkspace::LionsMaterial mat;
            mat.lions = &sl->lions;
            mat.lt = &lt;
            mat.aux = &sl->aux;
            mat.aux_jac = &sl->aux_jac;
            mat.per_sample_aux = true;
            ws.emplace(model, law, path, false, mat);
        } else {
            ws.emplace(model, law, path, false);
        }
        const double w = pref * build_weight(*ws, ops).value;
        out(0) = payoff.value(path.x[n], law.measures[n]) * w;
        out(1) = w * w;
        out(2) = inverts ? ws->jacobian_end_inverse().condition : 0.0;
    };
    const McMoments mc = run_monte_carlo(opts.n_samples, opts.threads, 3, fill);

    EstimatorResult r = base_result(std::move(name), t, x, opts);
    finish_diag(r, mc, opts, 1, inverts ? 2 : -1);
    return r;
}

}  // namespace

EstimatorResult estimate_dx(const CoefficientModel& model, const std::vector<int>& alpha,
                            const Payoff& payoff, const Eigen::VectorXd& x,
                            const InitialSampler& sampler, double t,
                            const EstimatorOptions& opts) {
    validate_options(opts);
    check_point(x, model.N, "x");
    check_indices(alpha, model.N, "alpha");
    if (alpha.size() > 2) {
        throw OrderExceededError("x-derivatives are shipped up to order two");
    }
    const TimeGrid grid(t, opts.n_steps);
    const BrownianDriver driver(opts.seed);
    const LawSet laws = laws_from_sampler(model, sampler, grid, driver, opts);
    return run_chain_estimator("dx", model, payoff, x, laws, {},
                               op_chain(OpKind::total_dx, alpha), t, driver, opts);
}

EstimatorResult estimate_derivative_of_payoff(const CoefficientModel& model,
                                              const std::vector<int>& beta, const Payoff& payoff,
                                              const Eigen::VectorXd& x,
                                              const InitialSampler& sampler, double t,
                                              const EstimatorOptions& opts) {
    validate_options(opts);
    check_point(x, model.N, "x");
    check_indices(beta, model.N, "beta");
    if (beta.size() > 2) {
        throw OrderExceededError("payoff derivatives are shipped up to order two");
    }
    const TimeGrid grid(t, opts.n_steps);
    const BrownianDriver driver(opts.seed);
    const LawSet laws = laws_from_sampler(model, sampler, grid, driver, opts);
    EstimatorResult r =
        run_chain_estimator("derivative_of_payoff", model, payoff, x, laws, {},
                            op_chain(OpKind::inverse_flow, beta), t, driver, opts);
    return r;
}

EstimatorResult estimate_dmu(const CoefficientModel& model, const std::vector<int>& beta,
                             const Payoff& payoff, const Eigen::VectorXd& x,
                             const InitialSampler& sampler, double t, const Eigen::VectorXd& v,
                             const EstimatorOptions& opts) {
    validate_options(opts);
    require_single_law(opts, "estimate_dmu");
    check_point(x, model.N, "x");
    check_point(v, model.N, "v");
    check_indices(beta, model.N, "beta");
    if (beta.empty()) throw ConfigError("the measure derivative needs one component index");
    if (beta.size() > 1) {
        throw OrderExceededError("only first-order measure derivatives are shipped");
    }
    if (!payoff.measure_free) {
        throw ClassMismatchError(
            "estimate_dmu differentiates the law of the state only; measure-coupled "
            "functionals go through estimate_U_and_derivatives");
    }
    const TimeGrid grid(t, opts.n_steps);
    const BrownianDriver driver(opts.seed);
    const LawSet laws = laws_from_sampler(model, sampler, grid, driver, opts);
    std::vector<LawTangents> tangents;
    tangents.push_back(build_law_tangents(
        model, laws.laws[0], v, 0, driver,
        LawTangentsOptions{opts.aux_copies, opts.force_generic_lions, false, false}));
    EstimatorResult r =
        run_chain_estimator("dmu", model, payoff, x, laws, tangents,
                            op_chain(OpKind::lions_bel, beta), t, driver, opts);
    r.v = v;
    return r;
}

EstimatorResult estimate_dx_fixed_point(const CoefficientModel& model,
                                        const std::vector<int>& alpha, const Payoff& payoff,
                                        const Eigen::VectorXd& x, double t,
                                        const EstimatorOptions& opts) {
    validate_options(opts);
    require_single_law(opts, "estimate_dx_fixed_point");
    check_point(x, model.N, "x");
    check_indices(alpha, model.N, "alpha");
    if (alpha.size() > 2) {
        throw OrderExceededError("x-derivatives are shipped up to order two");
    }
    const ModelStructure st = analyze_structure(model);
    const TimeGrid grid(t, opts.n_steps);
    const BrownianDriver driver(opts.seed);
    const LawSet laws = laws_at_point(model, x, grid, driver, opts);
    std::vector<LawTangents> tangents;
    if (!alpha.empty() && !st.lions_zero()) {
        tangents.push_back(build_law_tangents(
            model, laws.laws[0], x, 0, driver,
            LawTangentsOptions{opts.aux_copies, opts.force_generic_lions, false, false}));
    } else if (!alpha.empty()) {
        tangents.emplace_back();  // chain shortcut makes the material unused
    }
    EstimatorResult r =
        run_chain_estimator("dx_fixed_point", model, payoff, x, laws, tangents,
                            op_chain(OpKind::fixed_point, alpha), t, driver, opts);
    return r;
}

DensityEstimate estimate_density(const CoefficientModel& model, const Eigen::VectorXd& x,
                                 double t, const Eigen::MatrixXd& z_grid,
                                 const std::vector<int>& alpha, const std::vector<int>& beta,
                                 const EstimatorOptions& opts) {
    validate_options(opts);
    check_point(x, model.N, "x");
    check_indices(alpha, model.N, "alpha");
    check_indices(beta, model.N, "beta");
    const int nn = model.N;
    const int q = static_cast<int>(z_grid.rows());
    if (q < 1) throw DegenerateGridError("the density evaluation grid is empty");
    if (z_grid.cols() != nn) {
        throw DimensionError("density grid points must have length N");
    }
    if (nn == 1) {
        for (int i = 0; i + 1 < q; ++i) {
            if (!(z_grid(i + 1, 0) > z_grid(i, 0))) {
                throw DegenerateGridError(
                    "one-dimensional density grids must be strictly increasing");
            }
        }
    }
    const std::size_t total = static_cast<std::size_t>(nn) + alpha.size() + beta.size();
    if (total > 2) {
        throw OrderExceededError(
            "density weights are shipped up to two operators (N + |alpha| + |beta| <= 2)");
    }

    const ModelStructure st = analyze_structure(model);
    const TimeGrid grid(t, opts.n_steps);
    const BrownianDriver driver(opts.seed);
    const LawSet laws = laws_at_point(model, x, grid, driver, opts);

    std::vector<LawTangents> tangents;
    const bool needs_lions = !alpha.empty() && !st.lions_zero();
    if (needs_lions) {
        tangents.reserve(laws.laws.size());
        for (std::size_t c = 0; c < laws.laws.size(); ++c) {
            tangents.push_back(build_law_tangents(
                model, laws.laws[c], x, static_cast<std::uint32_t>(c), driver,
                LawTangentsOptions{opts.aux_copies, opts.force_generic_lions, false, false}));
        }
    }

    std::vector<int> eta(static_cast<std::size_t>(nn));
    for (int e = 0; e < nn; ++e) eta[static_cast<std::size_t>(e)] = e;
    std::vector<OpStep> ops = op_chain(OpKind::fixed_point, alpha);
    for (const OpStep& s : op_chain(OpKind::inverse_flow, eta)) ops.push_back(s);
    for (const OpStep& s : op_chain(OpKind::inverse_flow, beta)) ops.push_back(s);

    const double sign = (beta.size() % 2 == 1) ? -1.0 : 1.0;
    const double pref = prefactor(t, total);
    const int n = grid.n_steps;
    const int dim = q + 2 + nn + 1;  // values, w2, cond, X coordinates, |X|^2

    auto fill = [&](long s, Eigen::VectorXd& out) {
        const ParticleSystemPaths& law = laws.pick(s);
        const PathBundle path = simulate_decoupled(model, x, law, driver, streams::decoupled,
                                                   static_cast<std::uint32_t>(s));
        std::optional<SampleLions> sl;
        std::optional<WeightWorkspace> ws;
        if (needs_lions) {
            const LawTangents& lt = tangents[laws.index_of(s)];
            sl = propagate_lions(model, path, law, lt, driver, static_cast<std::uint32_t>(s),
                                 SampleLionsOptions{opts.force_generic_lions, false});
            WeightWorkspace::LionsMaterial mat;
            mat.lions = &sl->lions;
            mat.lt = &lt;
            mat.aux = &sl->aux;
            mat.aux_jac = &sl->aux_jac;
            mat.per_sample_aux = true;
            ws.emplace(model, law, path, true, mat);
        } else {
            ws.emplace(model, law, path, true);
        }
        const double w = sign * pref * build_weight(*ws, ops).value;
        const Eigen::VectorXd& xn = path.x[n];
        for (int k = 0; k < q; ++k) {
            const bool above = (xn.array() > z_grid.row(k).transpose().array()).all();
            out(k) = above ? w : 0.0;
        }
        out(q) = w * w;
        out(q + 1) = ws->jacobian_end_inverse().condition;
        out.segment(q + 2, nn) = xn;
        out(q + 2 + nn) = xn.squaredNorm();
    };
    const McMoments mc = run_monte_carlo(opts.n_samples, opts.threads, dim, fill);

    DensityEstimate de;
    de.t = t;
    de.x = x;
    de.z_grid = z_grid;
    de.alpha = alpha;
    de.beta = beta;
    de.value = mc.mean.head(q);
    de.std_error = mc.std_error.head(q);
    de.n_samples = mc.accepted;
    de.seed = opts.seed;
    de.diag.weight_second_moment = mc.mean(q);
    de.diag.mean_condition = mc.mean(q + 1);
    de.diag.rejected = mc.rejected;
    de.diag.flagged =
        mc.rejected > static_cast<long>(0.001 * static_cast<double>(opts.n_samples));

    if (alpha.empty() && beta.empty()) {
        // Gaussian-like tail diagnostic: regress log p on u = |z - x|^2 / t
        // over far, statistically significant grid points.
        const Eigen::VectorXd xbar = mc.mean.segment(q + 2, nn);
        const double var_avg =
            std::max(0.0, (mc.mean(q + 2 + nn) - xbar.squaredNorm()) / static_cast<double>(nn));
        const double u_min = 2.0 * var_avg / t;
        double su = 0, sy = 0, suu = 0, suy = 0, syy = 0;
        int cnt = 0;
        for (int k = 0; k < q; ++k) {
            const double u = (z_grid.row(k).transpose() - x).squaredNorm() / t;
            const double p = de.value(k);
            if (u < u_min || !(p > 0.0) || p < 5.0 * de.std_error(k)) continue;
            const double y = std::log(p);
            su += u;
            sy += y;
            suu += u * u;
            suy += u * y;
            syy += y * y;
            ++cnt;
        }
        de.tail_points = cnt;
        if (cnt >= 3) {
            const double nc = static_cast<double>(cnt);
            const double du = suu - su * su / nc;
            if (du > 0.0) {
                de.tail_slope = (suy - su * sy / nc) / du;
                de.tail_intercept = (sy - de.tail_slope * su) / nc;
                const double ss_tot = syy - sy * sy / nc;
                double ss_res = 0.0;
                // One more pass for the residual sum keeps the fit numerically honest.
                for (int k = 0; k < q; ++k) {
                    const double u = (z_grid.row(k).transpose() - x).squaredNorm() / t;
                    const double p = de.value(k);
                    if (u < u_min || !(p > 0.0) || p < 5.0 * de.std_error(k)) continue;
                    const double e = std::log(p) - (de.tail_intercept + de.tail_slope * u);
                    ss_res += e * e;
                }
                de.tail_r2 = (ss_tot > 0.0) ? 1.0 - ss_res / ss_tot : 0.0;
            }
        }
    }
    return de;
}

namespace {

const char* route_name(URoute r) {
    switch (r) {
        case URoute::smooth: return "smooth";
        case URoute::weight_x: return "weight_x";
        case URoute::weight_v: return "weight_v";
        default: return "automatic";
    }
}

URoute resolve_route(const Payoff& g, URoute requested) {
    if (requested != URoute::automatic) return requested;
    if (g.smooth && g.grad_x && (g.measure_free || g.dmu)) return URoute::smooth;
    if (g.ic == InteractionClass::in_x) return URoute::weight_x;
    if (g.ic == InteractionClass::in_v) return URoute::weight_v;
    throw ClassMismatchError(
        "the functional is neither smooth enough for the tangent route nor tagged with a "
        "usable interaction class");
}

}  // namespace

UDerivativesResult estimate_U_and_derivatives(const CoefficientModel& model, const Payoff& g,
                                              const Eigen::VectorXd& x,
                                              const InitialSampler& sampler, double t,
                                              const Eigen::VectorXd& v, URoute route,
                                              bool with_dv_dmu, const EstimatorOptions& opts) {
    validate_options(opts);
    require_single_law(opts, "estimate_U_and_derivatives");
    check_point(x, model.N, "x");
    check_point(v, model.N, "v");
    const int nn = model.N;

    const URoute r = resolve_route(g, route);
    if (r == URoute::smooth) {
        if (!(g.smooth && g.grad_x && (g.measure_free || g.dmu))) {
            throw ClassMismatchError("the smooth route needs grad_x and (for measure-coupled "
                                     "functionals) the Lions gradient of the payoff");
        }
        if (with_dv_dmu && !g.measure_free && !g.dv_dmu) {
            throw ClassMismatchError("the v-derivative of the Lions gradient of the payoff is "
                                     "required on the smooth route");
        }
    } else if (r == URoute::weight_x) {
        if (g.ic != InteractionClass::in_x || !g.companion) {
            throw ClassMismatchError("route weight_x needs interaction class in_x and a "
                                     "companion kernel");
        }
        if (with_dv_dmu) {
            throw ClassMismatchError(
                "route weight_x represents the measure derivative through an x-gradient of the "
                "companion; its v-derivative has no weight form at the shipped order");
        }
    } else {
        if (g.ic != InteractionClass::in_v || !g.companion) {
            throw ClassMismatchError("route weight_v needs interaction class in_v and a "
                                     "companion kernel");
        }
        if (!model.bounded_coefficients) {
            throw ClassMismatchError(
                "route weight_v integrates by parts along the auxiliary copy and is only valid "
                "under declared bounded coefficients");
        }
    }
    if (with_dv_dmu && nn != 1) {
        throw DimensionError("dv of the measure derivative is only shipped for N == 1");
    }

    const TimeGrid grid(t, opts.n_steps);
    const BrownianDriver driver(opts.seed);
    const LawSet laws = laws_from_sampler(model, sampler, grid, driver, opts);
    const ParticleSystemPaths& law = laws.laws[0];
    const int n = grid.n_steps;
    const int m_count = law.M;
    const double inv_m = 1.0 / static_cast<double>(m_count);

    const bool need_dv_tangents = with_dv_dmu;
    const LawTangents lt = build_law_tangents(
        model, law, v, 0, driver,
        LawTangentsOptions{opts.aux_copies, opts.force_generic_lions, false, need_dv_tangents});

    // Route weight_v: law-level per-particle measure weights, one per particle
    // and component, shared by every sample (and their v-derivatives on demand).
    Eigen::MatrixXd pw;                 // (m, i)
    std::vector<Eigen::MatrixXd> pw_gv;  // [m](i, j)
    std::vector<PathBundle> particle_paths;
    if (r == URoute::weight_v) {
        pw.setZero(m_count, nn);
        if (with_dv_dmu) pw_gv.assign(static_cast<std::size_t>(m_count),
                                      Eigen::MatrixXd::Zero(nn, nn));
        for (int m = 0; m < m_count; ++m) {
            const PathBundle pb = particle_bundle(law, m);
            WeightWorkspace::LionsMaterial mat;
            mat.lions = &lt.particle_lions[static_cast<std::size_t>(m)];
            if (with_dv_dmu) {
                mat.lions_dv = &lt.particle_lions_dv[static_cast<std::size_t>(m)];
            }
            mat.lt = &lt;
            mat.per_sample_aux = false;
            WeightWorkspace pws(model, law, pb, false, mat);
            WeightNeeds needs;
            needs.grad_v = with_dv_dmu;
            for (int i = 0; i < nn; ++i) {
                const WeightNode node = lions_bel_weight(pws, {i}, needs);
                pw(m, i) = node.value;
                if (with_dv_dmu && node.grad_v_state == Dep::present) {
                    pw_gv[static_cast<std::size_t>(m)].row(i) = node.grad_v.transpose();
                }
            }
        }
    }

    const double pr1 = prefactor(t, 1);
    const double pr2 = prefactor(t, 2);
    const bool route_weights = (r != URoute::smooth);
    const int n_dv = with_dv_dmu ? nn * nn : 0;
    const int dim = 1 + nn + nn * nn + nn + n_dv + 2;
    const int col_w2 = 1 + nn + nn * nn + nn + n_dv;
    const int col_cond = col_w2 + 1;

    auto fill = [&](long s, Eigen::VectorXd& out) {
        const PathBundle path = simulate_decoupled(model, x, law, driver, streams::decoupled,
                                                   static_cast<std::uint32_t>(s));
        const SampleLions sl =
            propagate_lions(model, path, law, lt, driver, static_cast<std::uint32_t>(s),
                            SampleLionsOptions{opts.force_generic_lions, need_dv_tangents});

        std::optional<WeightWorkspace> ws;
        if (route_weights) {
            WeightWorkspace::LionsMaterial mat;
            mat.lions = &sl.lions;
            if (need_dv_tangents) mat.lions_dv = &sl.lions_dv;
            mat.lt = &lt;
            mat.aux = &sl.aux;
            mat.aux_jac = &sl.aux_jac;
            mat.per_sample_aux = true;
            ws.emplace(model, law, path, false, mat);
        } else {
            ws.emplace(model, law, path, false);
        }

        const Eigen::VectorXd& xn = path.x[n];
        const EmpiricalMeasure& mu_n = law.measures[n];
        const double gval = g.value(xn, mu_n);
        out(0) = gval;

        // x-derivatives by total-derivative operator chains in every route.
        WeightNeeds inner_needs;
        inner_needs.field = true;
        inner_needs.grad_x = true;
        std::vector<WeightNode> w1(static_cast<std::size_t>(nn));
        for (int a = 0; a < nn; ++a) {
            w1[static_cast<std::size_t>(a)] =
                extend_weight(*ws, WeightNode::unit(), {{OpKind::total_dx, a}}, inner_needs);
            out(1 + a) = pr1 * gval * w1[static_cast<std::size_t>(a)].value;
        }
        for (int a = 0; a < nn; ++a) {
            for (int b = 0; b < nn; ++b) {
                const WeightNode w2 = extend_weight(*ws, w1[static_cast<std::size_t>(a)],
                                                    {{OpKind::total_dx, b}});
                out(1 + nn + a * nn + b) = pr2 * gval * w2.value;
            }
        }

        Eigen::VectorXd dmu = Eigen::VectorXd::Zero(nn);
        Eigen::MatrixXd dv = Eigen::MatrixXd::Zero(nn, nn);

        if (r == URoute::smooth) {
            const Eigen::VectorXd gx = g.grad_x(xn, mu_n);
            dmu = sl.lions[static_cast<std::size_t>(n)].transpose() * gx;
            if (!g.measure_free) {
                const Eigen::VectorXd da = g.dmu(xn, mu_n, sl.aux.x[static_cast<std::size_t>(n)]);
                dmu += sl.aux_jac[static_cast<std::size_t>(n)].transpose() * da;
                for (int m = 0; m < m_count; ++m) {
                    const Eigen::VectorXd dm =
                        g.dmu(xn, mu_n, law.states[static_cast<std::size_t>(n)].row(m).transpose());
                    dmu += inv_m *
                           (lt.particle_lions[static_cast<std::size_t>(m)]
                                             [static_cast<std::size_t>(n)].transpose() * dm);
                }
            }
            if (with_dv_dmu) {
                dv(0, 0) = gx(0) * sl.lions_dv[static_cast<std::size_t>(n)](0, 0);
                if (!g.measure_free) {
                    const Eigen::VectorXd& xa = sl.aux.x[static_cast<std::size_t>(n)];
                    const double jhat = sl.aux_jac[static_cast<std::size_t>(n)](0, 0);
                    dv(0, 0) += g.dv_dmu(xn, mu_n, xa)(0, 0) * jhat * jhat +
                                g.dmu(xn, mu_n, xa)(0) *
                                    sl.aux_second[static_cast<std::size_t>(n)](0, 0);
                    for (int m = 0; m < m_count; ++m) {
                        dv(0, 0) += inv_m *
                                    g.dmu(xn, mu_n,
                                          law.states[static_cast<std::size_t>(n)].row(m)
                                              .transpose())(0) *
                                    lt.particle_lions_dv[static_cast<std::size_t>(m)]
                                                        [static_cast<std::size_t>(n)](0, 0);
                    }
                }
            }
        } else if (r == URoute::weight_x) {
            const Eigen::VectorXd& xa = sl.aux.x[static_cast<std::size_t>(n)];
            const double g_aux = g.companion(xn, mu_n, xa);
            std::vector<double> i2(static_cast<std::size_t>(nn));
            for (int a = 0; a < nn; ++a) {
                i2[static_cast<std::size_t>(a)] = inverse_flow_weight(*ws, {a}).value;
            }
            Eigen::MatrixXd carried =
                g_aux * sl.aux_jac[static_cast<std::size_t>(n)];  // (a, i)
            for (int m = 0; m < m_count; ++m) {
                const double gm = g.companion(
                    xn, mu_n, law.states[static_cast<std::size_t>(n)].row(m).transpose());
                carried += inv_m * gm *
                           lt.particle_lions[static_cast<std::size_t>(m)]
                                            [static_cast<std::size_t>(n)];
            }
            for (int i = 0; i < nn; ++i) {
                double acc = gval * lions_bel_weight(*ws, {i}).value;
                for (int a = 0; a < nn; ++a) {
                    acc += i2[static_cast<std::size_t>(a)] * carried(a, i);
                }
                dmu(i) = pr1 * acc;
            }
        } else {  // weight_v
            const Eigen::VectorXd& xa = sl.aux.x[static_cast<std::size_t>(n)];
            const double g_aux = g.companion(xn, mu_n, xa);
            WeightWorkspace aux_ws(model, law, sl.aux, true);
            WeightNeeds main_needs;
            main_needs.grad_v = with_dv_dmu;
            for (int i = 0; i < nn; ++i) {
                const WeightNode main = lions_bel_weight(*ws, {i}, main_needs);
                WeightNeeds aux_needs;
                aux_needs.field = with_dv_dmu;
                aux_needs.grad_x = with_dv_dmu;
                const WeightNode aux_node = bel_weight(aux_ws, {i}, aux_needs);
                double acc = gval * main.value + g_aux * aux_node.value;
                double law_sum = 0.0;
                for (int m = 0; m < m_count; ++m) {
                    const double gm = g.companion(
                        xn, mu_n, law.states[static_cast<std::size_t>(n)].row(m).transpose());
                    law_sum += gm * pw(m, i);
                }
                acc += inv_m * law_sum;
                dmu(i) = pr1 * acc;
                if (with_dv_dmu) {
                    for (int j = 0; j < nn; ++j) {
                        const double main_gv =
                            (main.grad_v_state == Dep::present) ? main.grad_v(j) : 0.0;
                        const WeightNode nested =
                            extend_weight(aux_ws, aux_node, {{OpKind::total_dx, j}});
                        double lsum = 0.0;
                        for (int m = 0; m < m_count; ++m) {
                            const double gm = g.companion(
                                xn, mu_n,
                                law.states[static_cast<std::size_t>(n)].row(m).transpose());
                            lsum += gm * pw_gv[static_cast<std::size_t>(m)](i, j);
                        }
                        dv(i, j) = pr1 * (gval * main_gv + inv_m * lsum) +
                                   pr2 * g_aux * nested.value;
                    }
                }
            }
        }

        out.segment(1 + nn + nn * nn, nn) = dmu;
        if (with_dv_dmu) {
            for (int i = 0; i < nn; ++i) {
                for (int j = 0; j < nn; ++j) {
                    out(1 + nn + nn * nn + nn + i * nn + j) = dv(i, j);
                }
            }
        }
        const double scaled = pr1 * w1[0].value;
        out(col_w2) = scaled * scaled;
        out(col_cond) = route_weights ? ws->jacobian_end_inverse().condition : 0.0;
    };

    const McMoments mc = run_monte_carlo(opts.n_samples, opts.threads, dim, fill);

    UDerivativesResult res;
    res.t = t;
    res.x = x;
    res.v = v;
    res.route = route_name(r);
    res.u = mc.mean(0);
    res.u_stderr = mc.std_error(0);
    res.dx = mc.mean.segment(1, nn);
    res.dx_stderr = mc.std_error.segment(1, nn);
    res.dxx.setZero(nn, nn);
    res.dxx_stderr.setZero(nn, nn);
    for (int a = 0; a < nn; ++a) {
        for (int b = 0; b < nn; ++b) {
            res.dxx(a, b) = mc.mean(1 + nn + a * nn + b);
            res.dxx_stderr(a, b) = mc.std_error(1 + nn + a * nn + b);
        }
    }
    res.dmu = mc.mean.segment(1 + nn + nn * nn, nn);
    res.dmu_stderr = mc.std_error.segment(1 + nn + nn * nn, nn);
    res.has_dv_dmu = with_dv_dmu;
    if (with_dv_dmu) {
        res.dv_dmu.setZero(nn, nn);
        res.dv_dmu_stderr.setZero(nn, nn);
        for (int i = 0; i < nn; ++i) {
            for (int j = 0; j < nn; ++j) {
                res.dv_dmu(i, j) = mc.mean(1 + nn + nn * nn + nn + i * nn + j);
                res.dv_dmu_stderr(i, j) = mc.std_error(1 + nn + nn * nn + nn + i * nn + j);
            }
        }
    }
    res.n_samples = mc.accepted;
    res.seed = opts.seed;
    res.diag.weight_second_moment = mc.mean(col_w2);
    res.diag.mean_condition = mc.mean(col_cond);
    res.diag.rejected = mc.rejected;
    res.diag.flagged =
        mc.rejected > static_cast<long>(0.001 * static_cast<double>(opts.n_samples));
    return res;
}

PdeResidualResult pde_residual(const CoefficientModel& model, const Payoff& g,
                               const Eigen::VectorXd& x, const InitialSampler& sampler, double t,
                               const EstimatorOptions& opts) {
    validate_options(opts);
    require_single_law(opts, "pde_residual");
    if (model.N != 1) {
        throw DimensionError("the backward-equation check is only shipped for N == 1");
    }
    check_point(x, 1, "x");
    if (!(g.smooth && g.grad_x)) {
        throw ClassMismatchError("the backward-equation check needs a smooth functional");
    }
    if (!g.measure_free && !g.dmu) {
        throw ClassMismatchError("measure-coupled functionals need their Lions gradient for "
                                 "the measure terms");
    }
    if (!g.measure_free && !g.dv_dmu) {
        throw ClassMismatchError("measure-coupled functionals need the v-derivative of their "
                                 "Lions gradient for the diffusion measure term");
    }

    const int n = opts.n_steps;
    const double h = t / static_cast<double>(n);
    // Central time difference over j whole Euler steps with j h ~ sqrt(h).
    const int j = std::max(1, static_cast<int>(std::lround(1.0 / std::sqrt(h))));
    if (n - j < 1) {
        throw ConfigError("n_steps is too small for the time-difference stencil");
    }
    const TimeGrid grid_ext(t * static_cast<double>(n + j) / static_cast<double>(n), n + j);
    const double h_used = grid_ext.h;
    const double t_used = h_used * static_cast<double>(n);

    const BrownianDriver driver(opts.seed);
    const Eigen::MatrixXd theta0 = sampler.sample(opts.n_particles, 1, driver);
    const ParticleSystemPaths law = simulate_particles(model, theta0, grid_ext, driver);
    const EmpiricalMeasure& mu0 = law.measures[0];
    const int m_count = law.M;
    const double inv_m = 1.0 / static_cast<double>(m_count);

    // Atom-level generator weights at time zero: drift value and half squared
    // diffusion per particle, carried by two weighted-aggregate tangent systems.
    Eigen::VectorXd wa(m_count), wb(m_count);
    for (int m = 0; m < m_count; ++m) {
        const Eigen::VectorXd th = theta0.row(m).transpose();
        wa(m) = model.drift().value(th, mu0)(0) * inv_m;
        const Eigen::MatrixXd sg = sigma_matrix(model, th, mu0);
        wb(m) = 0.5 * (sg * sg.transpose())(0, 0) * inv_m;
    }
    const AggregatedTangentsOptions agg_a_opts{false, opts.force_generic_lions};
    const AggregatedTangentsOptions agg_b_opts{true, opts.force_generic_lions};
    const AggregatedTangents agg_a = build_aggregated_tangents(model, law, wa, agg_a_opts);
    const AggregatedTangents agg_b = build_aggregated_tangents(model, law, wb, agg_b_opts);

    const double c1 = model.drift().value(x, mu0)(0);
    const Eigen::MatrixXd sgx = sigma_matrix(model, x, mu0);
    const double c2 = 0.5 * (sgx * sgx.transpose())(0, 0);

    const double pr1 = prefactor(t_used, 1);
    const double pr2 = prefactor(t_used, 2);

    auto fill = [&](long s, Eigen::VectorXd& out) {
        const PathBundle full = simulate_decoupled(model, x, law, driver, streams::decoupled,
                                                   static_cast<std::uint32_t>(s));
        const double g_hi = g.value(full.x[static_cast<std::size_t>(n + j)],
                                    law.measures[static_cast<std::size_t>(n + j)]);
        const double g_lo = g.value(full.x[static_cast<std::size_t>(n - j)],
                                    law.measures[static_cast<std::size_t>(n - j)]);
        const double q = (g_hi - g_lo) / (2.0 * static_cast<double>(j) * h_used);

        PathBundle trunc;
        trunc.grid = full.grid;
        trunc.start_step = 0;
        trunc.n_used = n;
        trunc.x.assign(full.x.begin(), full.x.begin() + n + 1);
        trunc.db.assign(full.db.begin(), full.db.begin() + n);

        WeightWorkspace ws(model, law, trunc);
        WeightNeeds inner_needs;
        inner_needs.field = true;
        inner_needs.grad_x = true;
        const WeightNode w1 =
            extend_weight(ws, WeightNode::unit(), {{OpKind::total_dx, 0}}, inner_needs);
        const WeightNode w2 = extend_weight(ws, w1, {{OpKind::total_dx, 0}});

        const Eigen::VectorXd& xn = trunc.x[static_cast<std::size_t>(n)];
        const EmpiricalMeasure& mu_n = law.measures[static_cast<std::size_t>(n)];
        const double gval = g.value(xn, mu_n);
        const double gx = g.grad_x(xn, mu_n)(0);
        const double dx_s = pr1 * gval * w1.value;
        const double dxx_s = pr2 * gval * w2.value;
        const double xterm = c1 * dx_s + c2 * dxx_s;

        const AggregatedSampleLions la = propagate_aggregated_lions(model, trunc, law, agg_a);
        const AggregatedSampleLions lb = propagate_aggregated_lions(model, trunc, law, agg_b);

        double aterm = gx * la.lions[static_cast<std::size_t>(n)](0, 0);
        double bterm = gx * lb.lions_dv[static_cast<std::size_t>(n)](0, 0);
        if (!g.measure_free) {
            for (int m = 0; m < m_count; ++m) {
                const Eigen::VectorXd thn =
                    law.states[static_cast<std::size_t>(n)].row(m).transpose();
                const double dg = g.dmu(xn, mu_n, thn)(0);
                const double jm =
                    agg_a.particle_jac[static_cast<std::size_t>(m)][static_cast<std::size_t>(n)](
                        0, 0);
                aterm += wa(m) * dg * jm;
                aterm += inv_m * dg *
                         agg_a.lions[static_cast<std::size_t>(m)][static_cast<std::size_t>(n)](0,
                                                                                               0);
                const double km = agg_b.particle_second[static_cast<std::size_t>(m)]
                                                       [static_cast<std::size_t>(n)](0, 0);
                bterm += wb(m) * (g.dv_dmu(xn, mu_n, thn)(0, 0) * jm * jm + dg * km);
                bterm += inv_m * dg *
                         agg_b.lions_dv[static_cast<std::size_t>(m)]
                                       [static_cast<std::size_t>(n)](0, 0);
            }
        }
        const double muterm = aterm + bterm;
        out(0) = q;
        out(1) = xterm;
        out(2) = muterm;
        out(3) = q - xterm - muterm;
        const double scaled = pr2 * w2.value;
        out(4) = scaled * scaled;
    };

    const McMoments mc = run_monte_carlo(opts.n_samples, opts.threads, 5, fill);

    PdeResidualResult res;
    res.t = t_used;
    res.x = x;
    res.h_t = static_cast<double>(j) * h_used;
    res.dt_u = mc.mean(0);
    res.dt_u_stderr = mc.std_error(0);
    res.x_terms = mc.mean(1);
    res.x_terms_stderr = mc.std_error(1);
    res.mu_terms = mc.mean(2);
    res.mu_terms_stderr = mc.std_error(2);
    res.residual = mc.mean(3);
    res.residual_stderr = mc.std_error(3);
    res.n_samples = mc.accepted;
    res.seed = opts.seed;
    res.diag.weight_second_moment = mc.mean(4);
    res.diag.rejected = mc.rejected;
    res.diag.flagged =
        mc.rejected > static_cast<long>(0.001 * static_cast<double>(opts.n_samples));
    return res;
}

std::vector<FdComparisonRow> compare_fd(const CoefficientModel& model, FdTarget target,
                                        const Payoff& payoff, const Eigen::VectorXd& x,
                                        const InitialSampler& sampler, double t,
                                        const Eigen::VectorXd& v, const std::vector<double>& bumps,
                                        const EstimatorOptions& opts) {
    validate_options(opts);
    require_single_law(opts, "compare_fd");
    check_point(x, model.N, "x");
    check_point(v, model.N, "v");
    if (bumps.empty()) throw ConfigError("at least one bump size is required");
    for (double b : bumps) {
        if (!(b > 0.0)) throw ConfigError("bump sizes must be positive");
    }
    if (target == FdTarget::dmu && !payoff.measure_free) {
        throw ClassMismatchError("the measure-derivative comparison needs a measure-free payoff");
    }

    const ModelStructure st = analyze_structure(model);
    const TimeGrid grid(t, opts.n_steps);
    const BrownianDriver driver(opts.seed);
    const LawSet base = laws_from_sampler(model, sampler, grid, driver, opts);
    const ParticleSystemPaths& law = base.laws[0];
    const int n = grid.n_steps;
    const int nb = static_cast<int>(bumps.size());

    // Bumped laws for the measure target: every initial atom is displaced along
    // the first coordinate, under the same noise (paired comparison).
    std::vector<ParticleSystemPaths> law_plus, law_minus;
    if (target == FdTarget::dmu) {
        law_plus.reserve(static_cast<std::size_t>(nb));
        law_minus.reserve(static_cast<std::size_t>(nb));
        for (double b : bumps) {
            Eigen::VectorXd shift = Eigen::VectorXd::Zero(model.N);
            if (sampler.shift.size() == model.N) shift = sampler.shift;
            InitialSampler up = sampler;
            InitialSampler down = sampler;
            up.shift = shift;
            down.shift = shift;
            up.shift(0) += b;
            down.shift(0) -= b;
            law_plus.push_back(simulate_particles(
                model, up.sample(opts.n_particles, model.N, driver), grid, driver));
            law_minus.push_back(simulate_particles(
                model, down.sample(opts.n_particles, model.N, driver), grid, driver));
        }
    }

    std::optional<LawTangents> lt;
    const bool needs_lions = (target == FdTarget::dmu) && !st.lions_zero();
    if (needs_lions) {
        lt = build_law_tangents(
            model, law, v, 0, driver,
            LawTangentsOptions{opts.aux_copies, opts.force_generic_lions, false, false});
    }

    const double pref = prefactor(t, 1);
    const int dim = 1 + 2 * nb;

    auto fill = [&](long s, Eigen::VectorXd& out) {
        const PathBundle path = simulate_decoupled(model, x, law, driver, streams::decoupled,
                                                   static_cast<std::uint32_t>(s));
        double w = 0.0;
        if (target == FdTarget::dx) {
            WeightWorkspace ws(model, law, path);
            w = pref * payoff.value(path.x[n], law.measures[n]) *
                total_dx_weight(ws, {0}).value;
        } else {
            std::optional<SampleLions> sl;
            std::optional<WeightWorkspace> ws;
            if (needs_lions) {
                sl = propagate_lions(model, path, law, lt ? *lt : LawTangents{}, driver,
                                     static_cast<std::uint32_t>(s),
                                     SampleLionsOptions{opts.force_generic_lions, false});
                WeightWorkspace::LionsMaterial mat;
                mat.lions = &sl->lions;
                mat.lt = &*lt;
                mat.aux = &sl->aux;
                mat.aux_jac = &sl->aux_jac;
                mat.per_sample_aux = true;
                ws.emplace(model, law, path, false, mat);
            } else {
                ws.emplace(model, law, path, false);
            }
            w = pref * payoff.value(path.x[n], law.measures[n]) *
                lions_bel_weight(*ws, {0}).value;
        }
        out(0) = w;
        for (int b = 0; b < nb; ++b) {
            double fd;
            if (target == FdTarget::dx) {
                Eigen::VectorXd xp = x, xm = x;
                xp(0) += bumps[static_cast<std::size_t>(b)];
                xm(0) -= bumps[static_cast<std::size_t>(b)];
                const PathBundle up = simulate_decoupled(model, xp, law, driver,
                                                         streams::decoupled,
                                                         static_cast<std::uint32_t>(s));
                const PathBundle dn = simulate_decoupled(model, xm, law, driver,
                                                         streams::decoupled,
                                                         static_cast<std::uint32_t>(s));
                fd = (payoff.value(up.x[n], law.measures[n]) -
                      payoff.value(dn.x[n], law.measures[n])) /
                     (2.0 * bumps[static_cast<std::size_t>(b)]);
            } else {
                const ParticleSystemPaths& lp = law_plus[static_cast<std::size_t>(b)];
                const ParticleSystemPaths& lm = law_minus[static_cast<std::size_t>(b)];
                const PathBundle up = simulate_decoupled(model, x, lp, driver,
                                                         streams::decoupled,
                                                         static_cast<std::uint32_t>(s));
                const PathBundle dn = simulate_decoupled(model, x, lm, driver,
                                                         streams::decoupled,
                                                         static_cast<std::uint32_t>(s));
                fd = (payoff.value(up.x[n], lp.measures[n]) -
                      payoff.value(dn.x[n], lm.measures[n])) /
                     (2.0 * bumps[static_cast<std::size_t>(b)]);
            }
            out(1 + 2 * b) = fd;
            out(2 + 2 * b) = fd - w;
        }
    };

    const McMoments mc = run_monte_carlo(opts.n_samples, opts.threads, dim, fill);

    std::vector<FdComparisonRow> rows;
    rows.reserve(static_cast<std::size_t>(nb));
    for (int b = 0; b < nb; ++b) {
        FdComparisonRow row;
        row.bump = bumps[static_cast<std::size_t>(b)];
        row.weight_value = mc.mean(0);
        row.weight_stderr = mc.std_error(0);
        row.fd_value = mc.mean(1 + 2 * b);
        row.fd_stderr = mc.std_error(1 + 2 * b);
        row.difference = mc.mean(2 + 2 * b);
        row.combined_stderr = mc.std_error(2 + 2 * b);
        rows.push_back(row);
    }
    return rows;
}

}  // namespace mvmc
