#include "mvmc/families.hpp"

#include <cmath>
#include <utility>

namespace mvmc {

Fn1 fn_constant(double c) {
    Fn1 g;
    g.f = [c](double) { return c; };
    g.d1 = [](double) { return 0.0; };
    g.d2 = [](double) { return 0.0; };
    g.d1_zero = true;
    g.d2_zero = true;
    return g;
}

Fn1 fn_identity() {
    Fn1 g;
    g.f = [](double y) { return y; };
    g.d1 = [](double) { return 1.0; };
    g.d2 = [](double) { return 0.0; };
    g.d2_zero = true;
    return g;
}

Fn1 fn_square() {
    Fn1 g;
    g.f = [](double y) { return y * y; };
    g.d1 = [](double y) { return 2.0 * y; };
    g.d2 = [](double) { return 2.0; };
    return g;
}

Fn1 fn_poly(std::vector<double> coeffs) {
    auto horner = [](const std::vector<double>& c, double y) {
        double acc = 0.0;
        for (auto it = c.rbegin(); it != c.rend(); ++it) acc = acc * y + *it;
        return acc;
    };
    std::vector<double> c1, c2;
    for (std::size_t k = 1; k < coeffs.size(); ++k) c1.push_back(coeffs[k] * static_cast<double>(k));
    for (std::size_t k = 1; k < c1.size(); ++k) c2.push_back(c1[k] * static_cast<double>(k));
    Fn1 g;
    g.f = [coeffs, horner](double y) { return horner(coeffs, y); };
    g.d1 = [c1, horner](double y) { return horner(c1, y); };
    g.d2 = [c2, horner](double y) { return horner(c2, y); };
    g.d1_zero = c1.empty();
    g.d2_zero = c2.empty();
    return g;
}

Fn2 fn2_zero() {
    Fn2 g;
    auto z = [](double, double) { return 0.0; };
    g.f = z;
    g.d1 = z;
    g.d2 = z;
    g.d11 = z;
    g.d12 = z;
    g.d22 = z;
    g.d1_zero = g.d2_zero = g.d11_zero = g.d12_zero = g.d22_zero = true;
    return g;
}

Fn2 fn2_affine(double c0, double c1, double c2) {
    Fn2 g;
    g.f = [=](double a, double b) { return c0 + c1 * a + c2 * b; };
    g.d1 = [=](double, double) { return c1; };
    g.d2 = [=](double, double) { return c2; };
    auto z = [](double, double) { return 0.0; };
    g.d11 = z;
    g.d12 = z;
    g.d22 = z;
    g.d1_zero = c1 == 0.0;
    g.d2_zero = c2 == 0.0;
    g.d11_zero = g.d12_zero = g.d22_zero = true;
    return g;
}

Fn2 fn2_product() {
    Fn2 g;
    g.f = [](double a, double b) { return a * b; };
    g.d1 = [](double, double b) { return b; };
    g.d2 = [](double a, double) { return a; };
    auto z = [](double, double) { return 0.0; };
    g.d11 = z;
    g.d12 = [](double, double) { return 1.0; };
    g.d22 = z;
    g.d11_zero = g.d22_zero = true;
    return g;
}

Fn2 fn2_sin_first(double c0, double c1, double c2) {
    Fn2 g;
    g.f = [=](double a, double) { return c0 + c1 * std::sin(c2 * a); };
    g.d1 = [=](double a, double) { return c1 * c2 * std::cos(c2 * a); };
    g.d11 = [=](double a, double) { return -c1 * c2 * c2 * std::sin(c2 * a); };
    auto z = [](double, double) { return 0.0; };
    g.d2 = z;
    g.d12 = z;
    g.d22 = z;
    g.d2_zero = g.d12_zero = g.d22_zero = true;
    g.d1_zero = c1 == 0.0 || c2 == 0.0;
    g.d11_zero = g.d1_zero;
    return g;
}

namespace {

Tensor3 zero_tensor(int n) {
    return Tensor3(static_cast<std::size_t>(n), Eigen::MatrixXd::Zero(n, n));
}

Coefficient zero_derivative_coefficient(int n, Coefficient::ValueFn value) {
    Coefficient c;
    c.value = std::move(value);
    c.jac_x = [n](const Eigen::VectorXd&, const EmpiricalMeasure&) {
        return Eigen::MatrixXd::Zero(n, n);
    };
    c.hess_x = [n](const Eigen::VectorXd&, const EmpiricalMeasure&) { return zero_tensor(n); };
    c.jac_zero = true;
    c.hess_zero = true;
    c.dmu_zero = true;
    c.dxdmu_zero = true;
    c.dvdmu_zero = true;
    return c;
}

// Cloud average of phi, preferring the precomputed atom slot.
double atom_average(const EmpiricalMeasure& mu, std::size_t idx,
                    const std::function<double(double)>& phi) {
    if (mu.atoms.size() > idx) return mu.atoms[idx];
    double acc = 0.0;
    for (Eigen::Index i = 0; i < mu.pts.rows(); ++i) acc += phi(mu.pts(i, 0));
    return acc / static_cast<double>(mu.pts.rows());
}

Eigen::VectorXd scalar1(double v) {
    Eigen::VectorXd out(1);
    out[0] = v;
    return out;
}

Eigen::MatrixXd mat1(double v) {
    Eigen::MatrixXd out(1, 1);
    out(0, 0) = v;
    return out;
}

Tensor3 tensor1(double v) {
    return Tensor3(1, mat1(v));
}

}  // namespace

CoefficientModel make_constant(const Eigen::VectorXd& b, const Eigen::MatrixXd& sigma0) {
    const int n = static_cast<int>(b.size());
    const int d = static_cast<int>(sigma0.cols());
    if (sigma0.rows() != n || d < 1) throw ConfigError("constant family: sigma0 must be N x d");

    CoefficientModel m;
    m.N = n;
    m.d = d;
    m.family = "constant";
    m.bounded_coefficients = true;

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sigma0 * sigma0.transpose());
    const double lo = es.eigenvalues().minCoeff();
    m.uniformly_elliptic = lo > 0.0;
    m.ellipticity_floor = lo;

    m.coef.push_back(zero_derivative_coefficient(
        n, [b](const Eigen::VectorXd&, const EmpiricalMeasure&) { return b; }));
    for (int i = 0; i < d; ++i) {
        const Eigen::VectorXd col = sigma0.col(i);
        m.coef.push_back(zero_derivative_coefficient(
            n, [col](const Eigen::VectorXd&, const EmpiricalMeasure&) { return col; }));
    }
    return m;
}

CoefficientModel make_mean_field_ou(double a, double sigma0) {
    if (!(sigma0 > 0.0)) throw ConfigError("mean_field_ou: sigma0 must be positive");
    CoefficientModel m;
    m.N = 1;
    m.d = 1;
    m.family = "mean_field_ou";
    m.bounded_coefficients = false;  // linear drift
    m.uniformly_elliptic = true;
    m.ellipticity_floor = sigma0 * sigma0;

    Coefficient drift;
    drift.value = [a](const Eigen::VectorXd& x, const EmpiricalMeasure& mu) {
        return scalar1(a * (mu.mean[0] - x[0]));
    };
    drift.jac_x = [a](const Eigen::VectorXd&, const EmpiricalMeasure&) { return mat1(-a); };
    drift.hess_x = [](const Eigen::VectorXd&, const EmpiricalMeasure&) { return tensor1(0.0); };
    drift.hess_zero = true;
    drift.dmu = [a](const Eigen::VectorXd&, const EmpiricalMeasure&, const Eigen::VectorXd&) {
        return mat1(a);
    };
    Coefficient::Factor fac;
    fac.left = [a](const Eigen::VectorXd&, const EmpiricalMeasure&) { return mat1(a); };
    fac.right = [](const Eigen::VectorXd&) { return mat1(1.0); };
    fac.dx_left = [](const Eigen::VectorXd&, const EmpiricalMeasure&) { return tensor1(0.0); };
    fac.dv_right = [](const Eigen::VectorXd&) { return tensor1(0.0); };
    fac.left_constant = true;
    fac.right_constant = true;
    drift.factor = fac;
    drift.dmu_zero = a == 0.0;
    drift.jac_zero = a == 0.0;
    drift.dxdmu_zero = true;
    drift.dvdmu_zero = true;
    m.coef.push_back(std::move(drift));

    m.coef.push_back(zero_derivative_coefficient(
        1, [sigma0](const Eigen::VectorXd&, const EmpiricalMeasure&) { return scalar1(sigma0); }));
    return m;
}

CoefficientModel make_scalar_interaction(ScalarInteractionSpec spec) {
    CoefficientModel m;
    m.N = 1;
    m.d = 1;
    m.family = "scalar_interaction";
    m.bounded_coefficients = spec.bounded_coefficients;
    m.uniformly_elliptic = spec.uniformly_elliptic;
    m.ellipticity_floor = spec.ellipticity_floor;

    const auto phis = {spec.phi_drift, spec.phi_diffusion};
    std::size_t idx = 0;
    for (const Fn1& phi : phis) {
        auto f = phi.f;
        m.measure_atoms.push_back([f](const Eigen::VectorXd& y) { return f(y[0]); });
        (void)idx;
        ++idx;
    }

    auto build = [](const Fn2& u, const Fn1& phi, std::size_t atom_idx) {
        Coefficient c;
        auto phif = phi.f;
        c.value = [u, phif, atom_idx](const Eigen::VectorXd& x, const EmpiricalMeasure& mu) {
            return scalar1(u.f(x[0], atom_average(mu, atom_idx, phif)));
        };
        c.jac_x = [u, phif, atom_idx](const Eigen::VectorXd& x, const EmpiricalMeasure& mu) {
            return mat1(u.d1(x[0], atom_average(mu, atom_idx, phif)));
        };
        c.hess_x = [u, phif, atom_idx](const Eigen::VectorXd& x, const EmpiricalMeasure& mu) {
            return tensor1(u.d11(x[0], atom_average(mu, atom_idx, phif)));
        };
        c.dmu = [u, phi, atom_idx](const Eigen::VectorXd& x, const EmpiricalMeasure& mu,
                                   const Eigen::VectorXd& v) {
            return mat1(u.d2(x[0], atom_average(mu, atom_idx, phi.f)) * phi.d1(v[0]));
        };
        Coefficient::Factor fac;
        fac.left = [u, phif, atom_idx](const Eigen::VectorXd& x, const EmpiricalMeasure& mu) {
            return mat1(u.d2(x[0], atom_average(mu, atom_idx, phif)));
        };
        fac.right = [phi](const Eigen::VectorXd& v) { return mat1(phi.d1(v[0])); };
        fac.dx_left = [u, phif, atom_idx](const Eigen::VectorXd& x, const EmpiricalMeasure& mu) {
            return tensor1(u.d12(x[0], atom_average(mu, atom_idx, phif)));
        };
        fac.dv_right = [phi](const Eigen::VectorXd& v) { return tensor1(phi.d2(v[0])); };
        fac.left_constant = u.d12_zero && u.d22_zero;
        fac.right_constant = phi.d2_zero;
        c.factor = fac;

        c.jac_zero = u.d1_zero;
        c.hess_zero = u.d11_zero;
        c.dmu_zero = u.d2_zero || phi.d1_zero;
        c.dxdmu_zero = c.dmu_zero || u.d12_zero;
        c.dvdmu_zero = u.d2_zero || phi.d2_zero;
        return c;
    };

    m.coef.push_back(build(spec.u_drift, spec.phi_drift, 0));
    m.coef.push_back(build(spec.u_diffusion, spec.phi_diffusion, 1));
    return m;
}

CoefficientModel make_first_order(FirstOrderSpec spec) {
    CoefficientModel m;
    m.N = 1;
    m.d = 1;
    m.family = "first_order";
    m.bounded_coefficients = spec.bounded_coefficients;
    m.uniformly_elliptic = spec.uniformly_elliptic;
    m.ellipticity_floor = spec.ellipticity_floor;

    auto build = [](const Fn2& w) {
        auto cloud_avg = [](const std::function<double(double, double)>& f, double x,
                            const EmpiricalMeasure& mu) {
            double acc = 0.0;
            for (Eigen::Index i = 0; i < mu.pts.rows(); ++i) acc += f(x, mu.pts(i, 0));
            return acc / static_cast<double>(mu.pts.rows());
        };
        Coefficient c;
        c.value = [w, cloud_avg](const Eigen::VectorXd& x, const EmpiricalMeasure& mu) {
            return scalar1(cloud_avg(w.f, x[0], mu));
        };
        c.jac_x = [w, cloud_avg](const Eigen::VectorXd& x, const EmpiricalMeasure& mu) {
            return mat1(w.d1_zero ? 0.0 : cloud_avg(w.d1, x[0], mu));
        };
        c.hess_x = [w, cloud_avg](const Eigen::VectorXd& x, const EmpiricalMeasure& mu) {
            return tensor1(w.d11_zero ? 0.0 : cloud_avg(w.d11, x[0], mu));
        };
        c.dmu = [w](const Eigen::VectorXd& x, const EmpiricalMeasure&, const Eigen::VectorXd& v) {
            return mat1(w.d2(x[0], v[0]));
        };
        c.dx_dmu = [w](const Eigen::VectorXd& x, const EmpiricalMeasure&, const Eigen::VectorXd& v) {
            return tensor1(w.d12(x[0], v[0]));
        };
        c.dv_dmu = [w](const Eigen::VectorXd& x, const EmpiricalMeasure&, const Eigen::VectorXd& v) {
            return tensor1(w.d22(x[0], v[0]));
        };
        c.jac_zero = w.d1_zero;
        c.hess_zero = w.d11_zero;
        c.dmu_zero = w.d2_zero;
        c.dxdmu_zero = w.d12_zero;
        c.dvdmu_zero = w.d22_zero;
        return c;
    };

    m.coef.push_back(build(spec.w_drift));
    m.coef.push_back(build(spec.w_diffusion));
    return m;
}

}  // namespace mvmc
