#include "mvmc/oracles.hpp"

#include <cmath>
#include <stdexcept>

namespace mvmc::oracle {

namespace {
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}

double normal_pdf(double z, double mean, double sd) {
    const double u = (z - mean) / sd;
    return kInvSqrt2Pi * std::exp(-0.5 * u * u) / sd;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

Gaussian1D constant_model_law(double x, double b, double sigma0, double t) {
    return {x + b * t, sigma0 * std::sqrt(t)};
}

double expect_identity(const Gaussian1D& g) { return g.mean; }

double expect_square(const Gaussian1D& g) { return g.mean * g.mean + g.sd * g.sd; }

double expect_sin(const Gaussian1D& g, double frequency) {
    return std::exp(-0.5 * frequency * frequency * g.sd * g.sd) * std::sin(frequency * g.mean);
}

double expect_positive_part(const Gaussian1D& g, double strike) {
    const double m = g.mean - strike;
    if (g.sd == 0.0) return std::max(m, 0.0);
    return m * normal_cdf(m / g.sd) + g.sd * normal_pdf(m / g.sd, 0.0, 1.0);
}

double gaussian_density(double t, double x, double z, double b, double sigma0) {
    const Gaussian1D g = constant_model_law(x, b, sigma0, t);
    return normal_pdf(z, g.mean, g.sd);
}

double gaussian_density_dx(double t, double x, double z, double b, double sigma0) {
    const Gaussian1D g = constant_model_law(x, b, sigma0, t);
    return normal_pdf(z, g.mean, g.sd) * (z - g.mean) / (g.sd * g.sd);
}

double gaussian_density_dz(double t, double x, double z, double b, double sigma0) {
    return -gaussian_density_dx(t, x, z, b, sigma0);
}

double gaussian_expectation(const std::function<double(double)>& f, double mean, double sd,
                            int intervals, double width_in_sds) {
    if (intervals < 2) throw std::invalid_argument("gaussian_expectation: too few intervals");
    if (intervals % 2 != 0) ++intervals;
    const double lo = mean - width_in_sds * sd;
    const double hi = mean + width_in_sds * sd;
    const double h = (hi - lo) / intervals;
    auto g = [&](double z) { return f(z) * normal_pdf(z, mean, sd); };
    double acc = g(lo) + g(hi);
    for (int k = 1; k < intervals; ++k) acc += g(lo + k * h) * (k % 2 == 1 ? 4.0 : 2.0);
    return acc * h / 3.0;
}

MeanRevertingValues mean_reverting_closed_form(double a, double sigma0, double x, double m0,
                                               double t) {
    MeanRevertingValues out;
    const double e = std::exp(-a * t);
    out.mean = m0 + (x - m0) * e;
    out.var = sigma0 * sigma0 * (1.0 - e * e) / (2.0 * a);
    out.jac = e;
    out.lions = 1.0 - e;
    return out;
}

MeanRevertingValues mean_reverting_discrete(double a, double sigma0, double x, double m0,
                                            double t, int n) {
    // X_{k+1} = X_k + a (m0 - X_k) h + sigma0 dB with the initial mean frozen
    // by construction of the point-mass start: the running mean stays m0, so
    // the one-step multiplier is (1 - a h) throughout.
    MeanRevertingValues out;
    const double h = t / n;
    const double q = 1.0 - a * h;
    const double qn = std::pow(q, n);
    out.mean = m0 + (x - m0) * qn;
    // var_{k+1} = q^2 var_k + sigma0^2 h, var_0 = 0.
    const double q2 = q * q;
    out.var = sigma0 * sigma0 * h * (q2 == 1.0 ? n : (1.0 - std::pow(q2, n)) / (1.0 - q2));
    out.jac = qn;
    out.lions = 1.0 - qn;
    return out;
}

Eigen::VectorXd rk4(const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)>& f,
                    Eigen::VectorXd y0, double t0, double t1, int steps) {
    if (steps < 1) throw std::invalid_argument("rk4: steps must be positive");
    const double h = (t1 - t0) / steps;
    Eigen::VectorXd y = std::move(y0);
    for (int k = 0; k < steps; ++k) {
        const double s = t0 + k * h;
        const Eigen::VectorXd k1 = f(s, y);
        const Eigen::VectorXd k2 = f(s + 0.5 * h, y + 0.5 * h * k1);
        const Eigen::VectorXd k3 = f(s + 0.5 * h, y + 0.5 * h * k2);
        const Eigen::VectorXd k4 = f(s + h, y + h * k3);
        y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    return y;
}

}  // namespace mvmc::oracle
