#pragma once

#include <vector>

#include "mvmc/model.hpp"

namespace mvmc {

// Scalar function of one variable with analytic first and second derivatives.
struct Fn1 {
    std::function<double(double)> f;
    std::function<double(double)> d1;
    std::function<double(double)> d2;
    bool d1_zero = false;
    bool d2_zero = false;
};

Fn1 fn_constant(double c);
Fn1 fn_identity();
Fn1 fn_square();
Fn1 fn_poly(std::vector<double> coeffs);  // c0 + c1 y + c2 y^2 + ...

// Scalar function of two variables with all first and second partials.
struct Fn2 {
    std::function<double(double, double)> f;
    std::function<double(double, double)> d1;
    std::function<double(double, double)> d2;
    std::function<double(double, double)> d11;
    std::function<double(double, double)> d12;
    std::function<double(double, double)> d22;
    bool d1_zero = false;
    bool d2_zero = false;
    bool d11_zero = false;
    bool d12_zero = false;
    bool d22_zero = false;
};

Fn2 fn2_zero();
Fn2 fn2_affine(double c0, double c1, double c2);  // c0 + c1 a + c2 b
Fn2 fn2_product();                                // a * b
Fn2 fn2_sin_first(double c0, double c1, double c2);  // c0 + c1 sin(c2 a)

// Constant coefficients: drift b, diffusion matrix sigma0 (N x d).
CoefficientModel make_constant(const Eigen::VectorXd& b, const Eigen::MatrixXd& sigma0);

// Scalar mean-field Ornstein-Uhlenbeck:
//   dX = a (E[X] - X) dt + sigma0 dB.
CoefficientModel make_mean_field_ou(double a, double sigma0);

// Scalar-interaction family (N = d = 1): V_i(x, mu) = U_i(x, integral of phi_i d mu).
struct ScalarInteractionSpec {
    Fn2 u_drift;
    Fn1 phi_drift;
    Fn2 u_diffusion;
    Fn1 phi_diffusion;
    bool bounded_coefficients = false;
    bool uniformly_elliptic = false;
    double ellipticity_floor = 0.0;
};
CoefficientModel make_scalar_interaction(ScalarInteractionSpec spec);

// First-order interaction family (N = d = 1): V_i(x, mu) = integral of W_i(x, y) mu(dy).
// The Lions derivative d2 W_i(x, v) has no product structure, so particle
// averages in the tangent recursions run in O(M) per evaluation.
struct FirstOrderSpec {
    Fn2 w_drift;
    Fn2 w_diffusion;
    bool bounded_coefficients = false;
    bool uniformly_elliptic = false;
    double ellipticity_floor = 0.0;
};
CoefficientModel make_first_order(FirstOrderSpec spec);

}  // namespace mvmc
