#pragma once

#include <Eigen/Dense>
#include <initializer_list>

#include "mvmc/families.hpp"
#include "mvmc/simulate.hpp"

namespace testutil {

inline Eigen::VectorXd vec1(double a) {
    Eigen::VectorXd v(1);
    v << a;
    return v;
}

inline Eigen::VectorXd vec(std::initializer_list<double> xs) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) v(i++) = x;
    return v;
}

inline Eigen::MatrixXd mat1(double a) {
    Eigen::MatrixXd m(1, 1);
    m << a;
    return m;
}

// Column of atoms as an M x 1 cloud.
inline Eigen::MatrixXd atoms1(std::initializer_list<double> xs) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(xs.size()), 1);
    Eigen::Index i = 0;
    for (double x : xs) m(i++, 0) = x;
    return m;
}

inline mvmc::CoefficientModel constant1d(double b, double sigma) {
    return mvmc::make_constant(vec1(b), mat1(sigma));
}

// dX = sigma * X dB (optionally b * X dt): the multiplicative scalar model.
// Ellipticity is declared (sigma(x) vanishes only at x = 0, which the short
// runs in these tests never visit).
inline mvmc::CoefficientModel multiplicative1d(double b, double sigma) {
    mvmc::ScalarInteractionSpec spec;
    spec.u_drift = mvmc::fn2_affine(0.0, b, 0.0);
    spec.phi_drift = mvmc::fn_constant(0.0);
    spec.u_diffusion = mvmc::fn2_affine(0.0, sigma, 0.0);
    spec.phi_diffusion = mvmc::fn_constant(0.0);
    spec.uniformly_elliptic = true;
    spec.ellipticity_floor = 1e-12;
    return mvmc::make_scalar_interaction(spec);
}

// dX = (1 + amp * sin(freq X)) dB: bounded coefficients, uniformly elliptic.
inline mvmc::CoefficientModel bounded_sin1d(double base, double amp, double freq) {
    mvmc::ScalarInteractionSpec spec;
    spec.u_drift = mvmc::fn2_zero();
    spec.phi_drift = mvmc::fn_constant(0.0);
    spec.u_diffusion = mvmc::fn2_sin_first(base, amp, freq);
    spec.phi_diffusion = mvmc::fn_constant(0.0);
    spec.bounded_coefficients = true;
    spec.uniformly_elliptic = true;
    const double lo = base - std::abs(amp);
    spec.ellipticity_floor = lo * lo;
    return mvmc::make_scalar_interaction(spec);
}

// sigma(x, mu) = c0 + c2 * integral(phi) d mu: measure-coupled diffusion.
inline mvmc::CoefficientModel measure_diffusion1d(double c0, double c2) {
    mvmc::ScalarInteractionSpec spec;
    spec.u_drift = mvmc::fn2_zero();
    spec.phi_drift = mvmc::fn_constant(0.0);
    spec.u_diffusion = mvmc::fn2_affine(c0, 0.0, c2);
    spec.phi_diffusion = mvmc::fn_identity();
    spec.uniformly_elliptic = true;
    spec.ellipticity_floor = 1e-6;
    return mvmc::make_scalar_interaction(spec);
}

// Law cloud of M points at a single location x (the model's atoms prepared).
inline mvmc::ParticleSystemPaths point_law(const mvmc::CoefficientModel& model, double x,
                                           double t, int n_steps, int m,
                                           const mvmc::BrownianDriver& driver) {
    const mvmc::TimeGrid grid(t, n_steps);
    const Eigen::MatrixXd theta0 = Eigen::MatrixXd::Constant(m, 1, x);
    return mvmc::simulate_particles(model, theta0, grid, driver);
}

}  // namespace testutil
