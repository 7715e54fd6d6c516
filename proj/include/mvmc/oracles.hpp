#pragma once

#include <Eigen/Dense>
#include <functional>

namespace mvmc::oracle {

double normal_pdf(double z, double mean, double sd);
double normal_cdf(double z);

struct Gaussian1D {
    double mean = 0.0;
    double sd = 1.0;
};

// Terminal law of the drift-plus-noise model dX = b dt + sigma0 dB from x.
Gaussian1D constant_model_law(double x, double b, double sigma0, double t);

double expect_identity(const Gaussian1D& g);
double expect_square(const Gaussian1D& g);
double expect_sin(const Gaussian1D& g, double frequency = 1.0);
double expect_positive_part(const Gaussian1D& g, double strike = 0.0);

// Transition density of the same model and its first derivatives.
double gaussian_density(double t, double x, double z, double b, double sigma0);
double gaussian_density_dx(double t, double x, double z, double b, double sigma0);
double gaussian_density_dz(double t, double x, double z, double b, double sigma0);

// Composite-Simpson expectation of f under N(mean, sd^2); resolves smooth
// integrands to well below 1e-8.
double gaussian_expectation(const std::function<double(double)>& f, double mean, double sd,
                            int intervals = 20000, double width_in_sds = 10.0);

// Closed-form mean-reverting interaction benchmark started from a point mass:
//   mean_t = m + (x - m) e^{-a t}, var_t = sigma0^2 (1 - e^{-2 a t}) / (2 a),
//   flow derivative e^{-a t}, measure derivative 1 - e^{-a t}.
struct MeanRevertingValues {
    double mean = 0.0;
    double var = 0.0;
    double jac = 1.0;    // sensitivity of X_t to the starting point
    double lions = 0.0;  // sensitivity of X_t to one initial atom
};
MeanRevertingValues mean_reverting_closed_form(double a, double sigma0, double x, double m0,
                                               double t);
// The same quantities under the n-step Euler recursion (exact discrete values).
MeanRevertingValues mean_reverting_discrete(double a, double sigma0, double x, double m0,
                                            double t, int n);

// Classic fourth-order Runge-Kutta for dy/dt = f(t, y).
Eigen::VectorXd rk4(const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)>& f,
                    Eigen::VectorXd y0, double t0, double t1, int steps);

}  // namespace mvmc::oracle
