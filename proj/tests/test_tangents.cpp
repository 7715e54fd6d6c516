#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "mvmc/oracles.hpp"
#include "mvmc/tangents.hpp"

using namespace mvmc;
using testutil::atoms1;
using testutil::vec1;

namespace {

struct Setup {
    CoefficientModel model;
    ParticleSystemPaths law;
    PathBundle path;
};

Setup make_setup(const CoefficientModel& model, double x, double t, int n, int m,
                 const BrownianDriver& driver, double law_center = 0.0, double law_sd = 0.0) {
    Setup s{model, {}, {}};
    Eigen::MatrixXd theta0;
    if (law_sd > 0.0) {
        theta0 = InitialSampler::normal(vec1(law_center), vec1(law_sd)).sample(m, 1, driver);
    } else {
        theta0 = Eigen::MatrixXd::Constant(m, 1, law_center);
    }
    s.law = simulate_particles(model, theta0, TimeGrid(t, n), driver);
    s.path = simulate_decoupled(model, vec1(x), s.law, driver, streams::decoupled, 0);
    return s;
}

}  // namespace

TEST_CASE("flow derivative of constant dynamics is the identity") {
    const BrownianDriver driver(21);
    const Setup s = make_setup(testutil::constant1d(0.2, 1.0), 0.3, 1.0, 16, 2, driver);
    const MatSeq j = propagate_jacobian(s.model, s.path, s.law);
    for (const Eigen::MatrixXd& jk : j) CHECK(jk(0, 0) == 1.0);
}

TEST_CASE("flow derivative of the multiplicative model tracks the state ratio") {
    const BrownianDriver driver(22);
    const Setup s = make_setup(testutil::multiplicative1d(0.0, 1.0), 1.0, 0.5, 32, 2, driver, 1.0);
    const MatSeq j = propagate_jacobian(s.model, s.path, s.law);
    double prod = 1.0;
    for (int k = 0; k < 32; ++k) {
        prod *= 1.0 + s.path.db[static_cast<std::size_t>(k)](0);
        CHECK(j[static_cast<std::size_t>(k + 1)](0, 0) ==
              doctest::Approx(prod).epsilon(1e-12));
        CHECK(j[static_cast<std::size_t>(k + 1)](0, 0) ==
              doctest::Approx(s.path.x[static_cast<std::size_t>(k + 1)](0)).epsilon(1e-12));
    }
}

TEST_CASE("flow derivative of the mean-reverting model is its deterministic product") {
    const double a = 1.0, t = 1.0;
    const int n = 64;
    const BrownianDriver driver(23);
    const Setup s = make_setup(make_mean_field_ou(a, 0.5), 0.4, t, n, 64, driver, 0.0, 1.0);
    const MatSeq j = propagate_jacobian(s.model, s.path, s.law);
    const double q = 1.0 - a * t / n;
    CHECK(j[n](0, 0) == doctest::Approx(std::pow(q, n)).epsilon(1e-13));
    CHECK(std::abs(j[n](0, 0) - std::exp(-a * t)) <= 2.0 * a * a * t * (t / n));
}

TEST_CASE("jacobian inversion reports conditioning and rejects degeneracy") {
    const JacobianInverse id = invert_jacobian(Eigen::MatrixXd::Identity(2, 2));
    CHECK((id.inv - Eigen::MatrixXd::Identity(2, 2)).norm() == doctest::Approx(0.0));
    CHECK(id.condition == doctest::Approx(1.0));

    Eigen::MatrixXd diag = Eigen::MatrixXd::Zero(2, 2);
    diag(0, 0) = 2.0;
    diag(1, 1) = 0.5;
    const JacobianInverse di = invert_jacobian(diag);
    CHECK(di.inv(0, 0) == doctest::Approx(0.5));
    CHECK(di.inv(1, 1) == doctest::Approx(2.0));

    // Brute-force cofactor inverse as an independent reference.
    Eigen::MatrixXd r(3, 3);
    r << 2.0, 0.3, -0.4, 0.1, 1.5, 0.2, -0.3, 0.4, 1.8;
    const JacobianInverse ri = invert_jacobian(r);
    Eigen::MatrixXd cof(3, 3);
    for (int i = 0; i < 3; ++i) {
        for (int jj = 0; jj < 3; ++jj) {
            Eigen::MatrixXd minor(2, 2);
            int rr = 0;
            for (int p = 0; p < 3; ++p) {
                if (p == i) continue;
                int cc = 0;
                for (int qq = 0; qq < 3; ++qq) {
                    if (qq == jj) continue;
                    minor(rr, cc++) = r(p, qq);
                }
                ++rr;
            }
            cof(jj, i) = ((i + jj) % 2 == 0 ? 1.0 : -1.0) * minor.determinant();
        }
    }
    const Eigen::MatrixXd adj = cof / r.determinant();
    CHECK((ri.inv - adj).norm() <= 1e-12 * adj.norm());

    Eigen::MatrixXd sing = Eigen::MatrixXd::Zero(2, 2);
    sing(0, 0) = 1.0;
    sing(1, 1) = 1e-13;
    CHECK_THROWS_AS(invert_jacobian(sing), SingularJacobianError);
}

TEST_CASE("linear propagation scales exactly with its seed") {
    const BrownianDriver driver(24);
    const Setup s =
        make_setup(testutil::multiplicative1d(0.1, 0.9), 1.0, 0.5, 16, 2, driver, 1.0);
    const MatSeq one = propagate_linear(s.model, s.path, s.law,
                                        Eigen::MatrixXd::Identity(1, 1), 0);
    const MatSeq two = propagate_linear(s.model, s.path, s.law,
                                        2.0 * Eigen::MatrixXd::Identity(1, 1), 0);
    for (std::size_t k = 0; k < one.size(); ++k) {
        CHECK(two[k](0, 0) == 2.0 * one[k](0, 0));  // doubling is exact in binary
    }
}

TEST_CASE("noise sensitivity of constant dynamics is the diffusion itself") {
    const double sigma = 1.3;
    const BrownianDriver driver(25);
    const Setup s = make_setup(testutil::constant1d(0.0, sigma), 0.0, 1.0, 16, 2, driver);
    const MatSeq d = propagate_malliavin_field(s.model, s.path, s.law, 5);
    for (int k = 0; k <= 5; ++k) CHECK(d[static_cast<std::size_t>(k)].size() == 1);
    for (int k = 6; k <= 16; ++k) CHECK(d[static_cast<std::size_t>(k)](0, 0) == sigma);
}

TEST_CASE("noise sensitivity of the multiplicative model matches the hand recursion") {
    const BrownianDriver driver(26);
    const int n = 24, r = 7;
    const Setup s = make_setup(testutil::multiplicative1d(0.0, 1.0), 1.0, 0.5, n, 2, driver, 1.0);
    const MatSeq d = propagate_malliavin_field(s.model, s.path, s.law, r);
    double hand = s.path.x[r](0);  // seeded with sigma(X_r) = X_r
    for (int k = r + 1; k <= n; ++k) {
        CHECK(d[static_cast<std::size_t>(k)](0, 0) == doctest::Approx(hand).epsilon(1e-12));
        if (k < n) hand *= 1.0 + s.path.db[static_cast<std::size_t>(k)](0);
    }
}

TEST_CASE("transfer identity closes to first order in the step") {
    // Mean-reverting model: every factor in the identity is deterministic, so
    // the residual equals its hand value q^{n-1}(q - 1) path by path.
    const double a = 1.0, t = 1.0;
    const BrownianDriver driver(27);
    for (int n : {32, 64}) {
        const Setup s = make_setup(make_mean_field_ou(a, 0.5), 0.4, t, n, 32, driver, 0.0, 1.0);
        const double q = 1.0 - a * t / n;
        const Eigen::MatrixXd res = transfer_identity_residual(s.model, s.path, s.law, n / 2);
        CHECK(res(0, 0) == doctest::Approx(std::pow(q, n - 1) * (q - 1.0)).epsilon(1e-10));
    }

    // Multiplicative model: the residual reduces to J_n (1 - 1/(1 + dB_r)).
    const int n = 32, r = 16;
    const Setup s =
        make_setup(testutil::multiplicative1d(0.0, 1.0), 1.0, 0.5, n, 2, driver, 1.0);
    const MatSeq j = propagate_jacobian(s.model, s.path, s.law);
    const double dbr = s.path.db[r](0);
    const double hand = j[n](0, 0) * (1.0 - 1.0 / (1.0 + dbr));
    const Eigen::MatrixXd res = transfer_identity_residual(s.model, s.path, s.law, r);
    CHECK(res(0, 0) == doctest::Approx(hand).epsilon(1e-10));
}

TEST_CASE("measure tangents vanish identically without measure dependence") {
    const BrownianDriver driver(28);
    const Setup s = make_setup(testutil::constant1d(0.1, 1.0), 0.3, 1.0, 16, 8, driver);
    const LawTangents lt =
        build_law_tangents(s.model, s.law, vec1(0.5), 0, driver);
    const SampleLions sl = propagate_lions(s.model, s.path, s.law, lt, driver, 0);
    for (const Eigen::MatrixXd& l : sl.lions) CHECK(l.norm() == 0.0);
    for (const MatSeq& pl : lt.particle_lions) {
        for (const Eigen::MatrixXd& l : pl) CHECK(l.norm() == 0.0);
    }
}

TEST_CASE("mean-reverting measure tangent hits its discrete closed form") {
    const double a = 1.0, t = std::log(2.0);
    const int n = 32, m = 64;
    const BrownianDriver driver(29);
    const Setup s = make_setup(make_mean_field_ou(a, 0.5), 0.4, t, n, m, driver, 0.0, 1.0);
    const double q = 1.0 - a * t / n;
    const double expected = 1.0 - std::pow(q, n);

    for (double v : {-1.0, 0.0, 2.0}) {
        const LawTangents lt = build_law_tangents(s.model, s.law, vec1(v), 0, driver);
        const SampleLions sl = propagate_lions(s.model, s.path, s.law, lt, driver, 3);
        CHECK(sl.lions[n](0, 0) == doctest::Approx(expected).epsilon(1e-12));
    }

    // Same value through the generic (non-factored) evaluation path.
    LawTangentsOptions gen;
    gen.force_generic = true;
    const LawTangents ltg = build_law_tangents(s.model, s.law, vec1(0.0), 0, driver, gen);
    SampleLionsOptions sgen;
    sgen.force_generic = true;
    const SampleLions slg = propagate_lions(s.model, s.path, s.law, ltg, driver, 3, sgen);
    CHECK(slg.lions[n](0, 0) == doctest::Approx(expected).epsilon(1e-12));

    // The d/dv companion is structurally zero for this model.
    LawTangentsOptions dv;
    dv.dv_derivatives = true;
    const LawTangents ltv = build_law_tangents(s.model, s.law, vec1(0.0), 0, driver, dv);
    SampleLionsOptions sdv;
    sdv.dv_derivative = true;
    const SampleLions slv = propagate_lions(s.model, s.path, s.law, ltv, driver, 3, sdv);
    CHECK(slv.lions_dv[n].norm() == 0.0);
}

TEST_CASE("pairwise-interaction measure tangent grows like the horizon") {
    FirstOrderSpec f;
    f.w_drift = fn2_affine(0.0, 0.0, 1.0);  // average position as drift
    f.w_diffusion = fn2_affine(1.0, 0.0, 0.0);
    f.uniformly_elliptic = true;
    f.ellipticity_floor = 1.0;
    const CoefficientModel model = make_first_order(f);

    const double t = 0.05;
    const int n = 10;
    const BrownianDriver driver(30);
    Setup s{model, {}, {}};
    s.law = simulate_particles(
        model, InitialSampler::normal(vec1(0.0), vec1(1.0)).sample(32, 1, driver),
        TimeGrid(t, n), driver);
    s.path = simulate_decoupled(model, vec1(0.2), s.law, driver, streams::decoupled, 0);

    const LawTangents lt = build_law_tangents(model, s.law, vec1(0.7), 0, driver);
    const SampleLions sl = propagate_lions(model, s.path, s.law, lt, driver, 0);
    const double h = t / n;
    const double expected = std::pow(1.0 + h, n) - 1.0;  // exact for this recursion
    CHECK(sl.lions[n](0, 0) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(std::abs(sl.lions[n](0, 0) - t) <= t * t);
}

TEST_CASE("per-particle flow derivatives of the law are exposed on request") {
    const BrownianDriver driver(31);
    const Setup s = make_setup(make_mean_field_ou(1.0, 0.5), 0.2, 0.5, 16, 12, driver, 0.0, 1.0);
    LawTangentsOptions opts;
    opts.particle_jacobians = true;
    const LawTangents lt = build_law_tangents(s.model, s.law, vec1(0.0), 0, driver, opts);
    REQUIRE(lt.particle_jac.size() == 12);
    for (int m : {0, 5, 11}) {
        const PathBundle pb = particle_bundle(s.law, m);
        const MatSeq direct = propagate_jacobian(s.model, pb, s.law);
        for (std::size_t k = 0; k < direct.size(); ++k) {
            CHECK(lt.particle_jac[static_cast<std::size_t>(m)][k](0, 0) == direct[k](0, 0));
        }
    }
}

TEST_CASE("lions propagation guards its preconditions") {
    const BrownianDriver driver(32);
    const Setup s = make_setup(make_mean_field_ou(1.0, 0.5), 0.2, 0.5, 8, 8, driver, 0.0, 1.0);
    const LawTangents lt = build_law_tangents(s.model, s.law, vec1(0.0), 0, driver);

    // A carrier that does not start at node zero has no matching tilde path.
    const PathBundle tail = simulate_decoupled(s.model, s.path.x[4], s.law, driver,
                                               streams::decoupled, 0, -1, 4);
    CHECK_THROWS_AS(propagate_lions(s.model, tail, s.law, lt, driver, 0),
                    MissingAuxiliaryPathError);

    // Factored propagation cannot run against generically built law material.
    LawTangentsOptions gen;
    gen.force_generic = true;
    const LawTangents ltg = build_law_tangents(s.model, s.law, vec1(0.0), 0, driver, gen);
    CHECK_THROWS_AS(propagate_lions(s.model, s.path, s.law, ltg, driver, 0),
                    MissingAuxiliaryPathError);

    // d/dv companions are only shipped in one dimension.
    const CoefficientModel model2 =
        make_constant(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2));
    const Eigen::MatrixXd theta2 = Eigen::MatrixXd::Zero(4, 2);
    const ParticleSystemPaths law2 =
        simulate_particles(model2, theta2, TimeGrid(0.5, 4), driver);
    const PathBundle path2 = simulate_decoupled(model2, Eigen::VectorXd::Zero(2), law2, driver,
                                                streams::decoupled, 0);
    const LawTangents lt2 =
        build_law_tangents(model2, law2, Eigen::VectorXd::Zero(2), 0, driver);
    SampleLionsOptions dv;
    dv.dv_derivative = true;
    CHECK_THROWS_AS(propagate_lions(model2, path2, law2, lt2, driver, 0, dv), DimensionError);
}

TEST_CASE("weighted aggregation matches the per-direction tangents") {
    const double a = 1.0, t = 0.5;
    const int n = 16, m = 24;
    const BrownianDriver driver(33);
    const Setup s = make_setup(make_mean_field_ou(a, 0.5), 0.3, t, n, m, driver, 0.0, 1.0);
    const double q = 1.0 - a * t / n;
    const double lions_n = 1.0 - std::pow(q, n);

    Eigen::VectorXd w(m);
    for (int j = 0; j < m; ++j) w(j) = 0.01 * (j + 1);
    const AggregatedTangents agg = build_aggregated_tangents(s.model, s.law, w);
    const AggregatedSampleLions asl = propagate_aggregated_lions(s.model, s.path, s.law, agg);
    CHECK(asl.lions[n](0, 0) == doctest::Approx(w.sum() * lions_n).epsilon(1e-12));

    AggregatedTangentsOptions gen;
    gen.force_generic = true;
    const AggregatedTangents agg2 = build_aggregated_tangents(s.model, s.law, w, gen);
    const AggregatedSampleLions asl2 = propagate_aggregated_lions(s.model, s.path, s.law, agg2);
    CHECK(asl2.lions[n](0, 0) == doctest::Approx(asl.lions[n](0, 0)).epsilon(1e-12));

    AggregatedTangentsOptions dv;
    dv.with_dv = true;
    const AggregatedTangents agg3 = build_aggregated_tangents(s.model, s.law, w, dv);
    const AggregatedSampleLions asl3 = propagate_aggregated_lions(s.model, s.path, s.law, agg3);
    CHECK(asl3.lions_dv[n].norm() == 0.0);
}

TEST_CASE("nonlinear interaction: factored and generic aggregation agree") {
    ScalarInteractionSpec spec;
    spec.u_drift = fn2_product();
    spec.phi_drift = fn_square();
    spec.u_diffusion = fn2_affine(1.0, 0.0, 0.2);
    spec.phi_diffusion = fn_identity();
    spec.uniformly_elliptic = true;
    spec.ellipticity_floor = 1e-4;
    const CoefficientModel model = make_scalar_interaction(spec);

    const BrownianDriver driver(34);
    const int m = 16, n = 12;
    Setup s{model, {}, {}};
    s.law = simulate_particles(
        model, InitialSampler::normal(vec1(0.3), vec1(0.5)).sample(m, 1, driver),
        TimeGrid(0.25, n), driver);
    s.path = simulate_decoupled(model, vec1(0.4), s.law, driver, streams::decoupled, 1);

    Eigen::VectorXd w = Eigen::VectorXd::Constant(m, 1.0 / m);
    const AggregatedTangents fac = build_aggregated_tangents(model, s.law, w);
    AggregatedTangentsOptions gopts;
    gopts.force_generic = true;
    const AggregatedTangents gen = build_aggregated_tangents(model, s.law, w, gopts);
    CHECK(fac.used_factored);
    CHECK_FALSE(gen.used_factored);
    const AggregatedSampleLions lf = propagate_aggregated_lions(model, s.path, s.law, fac);
    const AggregatedSampleLions lg = propagate_aggregated_lions(model, s.path, s.law, gen);
    CHECK(lf.lions[n](0, 0) == doctest::Approx(lg.lions[n](0, 0)).epsilon(1e-12));
}

TEST_CASE("tilde averages are invariant under particle relabeling") {
    // Noise-free interacting dynamics: relabeling the initial atoms permutes
    // the particle trajectories without changing the cloud, so every averaged
    // tangent quantity must agree up to summation roundoff.
    ScalarInteractionSpec spec;
    spec.u_drift = fn2_product();
    spec.phi_drift = fn_square();
    spec.u_diffusion = fn2_affine(0.0, 0.0, 0.0);
    spec.phi_diffusion = fn_constant(0.0);
    const CoefficientModel model = make_scalar_interaction(spec);

    const BrownianDriver driver(35);
    const Eigen::MatrixXd theta = atoms1({0.5, -0.3, 1.1, 0.2, -0.8, 0.9});
    const Eigen::MatrixXd perm = atoms1({0.9, 1.1, -0.8, 0.5, 0.2, -0.3});
    const TimeGrid grid(0.2, 8);

    const ParticleSystemPaths law_a = simulate_particles(model, theta, grid, driver);
    const ParticleSystemPaths law_b = simulate_particles(model, perm, grid, driver);
    const PathBundle path_a =
        simulate_decoupled(model, vec1(0.6), law_a, driver, streams::decoupled, 0);
    const PathBundle path_b =
        simulate_decoupled(model, vec1(0.6), law_b, driver, streams::decoupled, 0);

    const LawTangents lt_a = build_law_tangents(model, law_a, vec1(0.4), 0, driver);
    const LawTangents lt_b = build_law_tangents(model, law_b, vec1(0.4), 0, driver);
    const SampleLions sa = propagate_lions(model, path_a, law_a, lt_a, driver, 0);
    const SampleLions sb = propagate_lions(model, path_b, law_b, lt_b, driver, 0);
    CHECK(sa.lions[8](0, 0) == doctest::Approx(sb.lions[8](0, 0)).epsilon(1e-12));
}
