#include "mvmc/payoffs.hpp"

#include <cmath>

#include "mvmc/errors.hpp"

namespace mvmc {

namespace {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

void fill_measure_free_zeroes(Payoff& p) {
    p.dmu = [](const Vec& x, const EmpiricalMeasure&, const Vec&) {
        return Vec::Zero(x.size()).eval();
    };
    p.dv_dmu = [](const Vec& x, const EmpiricalMeasure&, const Vec&) {
        return Mat::Zero(x.size(), x.size()).eval();
    };
}

Payoff pointwise(std::string name, int e, std::function<double(double)> f,
                 std::function<double(double)> d1, std::function<double(double)> d2) {
    Payoff p;
    p.name = std::move(name);
    p.value = [f, e](const Vec& x, const EmpiricalMeasure&) { return f(x(e)); };
    p.grad_x = [d1, e](const Vec& x, const EmpiricalMeasure&) {
        Vec g = Vec::Zero(x.size());
        g(e) = d1(x(e));
        return g;
    };
    p.hess_x = [d2, e](const Vec& x, const EmpiricalMeasure&) {
        Mat h = Mat::Zero(x.size(), x.size());
        h(e, e) = d2(x(e));
        return h;
    };
    fill_measure_free_zeroes(p);
    return p;
}

}  // namespace

Payoff payoff_identity(int component) {
    return pointwise("identity", component, [](double s) { return s; },
                     [](double) { return 1.0; }, [](double) { return 0.0; });
}

Payoff payoff_square(int component) {
    return pointwise("square", component, [](double s) { return s * s; },
                     [](double s) { return 2.0 * s; }, [](double) { return 2.0; });
}

Payoff payoff_sin(double frequency, int component) {
    const double w = frequency;
    return pointwise("sin", component, [w](double s) { return std::sin(w * s); },
                     [w](double s) { return w * std::cos(w * s); },
                     [w](double s) { return -w * w * std::sin(w * s); });
}

Payoff payoff_positive_part(double strike, int component) {
    // Kink at the strike: one-sided derivatives, flagged smooth enough for
    // plain Monte Carlo comparisons but with a zero second derivative a.e.
    const double k = strike;
    Payoff p = pointwise("positive_part", component,
                         [k](double s) { return s > k ? s - k : 0.0; },
                         [k](double s) { return s > k ? 1.0 : 0.0; },
                         [](double) { return 0.0; });
    return p;
}

Payoff payoff_indicator_above(const Eigen::VectorXd& z) {
    Payoff p;
    p.name = "indicator_above";
    p.smooth = false;
    p.value = [z](const Vec& x, const EmpiricalMeasure&) {
        if (x.size() != z.size()) throw DimensionError("indicator level has wrong dimension");
        for (int i = 0; i < x.size(); ++i) {
            if (!(x(i) > z(i))) return 0.0;
        }
        return 1.0;
    };
    fill_measure_free_zeroes(p);
    return p;
}

Payoff payoff_centred_mean(int component) {
    const int e = component;
    Payoff p;
    p.name = "centred_mean";
    p.measure_free = false;
    p.ic = InteractionClass::in_x;
    p.value = [e](const Vec& x, const EmpiricalMeasure& mu) { return x(e) - mu.mean(e); };
    p.grad_x = [e](const Vec& x, const EmpiricalMeasure&) {
        Vec g = Vec::Zero(x.size());
        g(e) = 1.0;
        return g;
    };
    p.hess_x = [](const Vec& x, const EmpiricalMeasure&) {
        return Mat::Zero(x.size(), x.size()).eval();
    };
    p.dmu = [e](const Vec& x, const EmpiricalMeasure&, const Vec&) {
        Vec g = Vec::Zero(x.size());
        g(e) = -1.0;
        return g;
    };
    p.dv_dmu = [](const Vec& x, const EmpiricalMeasure&, const Vec&) {
        return Mat::Zero(x.size(), x.size()).eval();
    };
    p.companion = [e](const Vec& x, const EmpiricalMeasure& mu, const Vec&) {
        return -(x(e) - mu.mean(e));
    };
    return p;
}

Payoff payoff_polynomial(const Eigen::VectorXd& coefficients, int component) {
    if (coefficients.size() == 0) throw ConfigError("polynomial payoff needs coefficients");
    const Vec c = coefficients;
    auto horner = [](const Vec& cs, double s) {
        double acc = 0.0;
        for (int k = static_cast<int>(cs.size()) - 1; k >= 0; --k) acc = acc * s + cs(k);
        return acc;
    };
    Vec d1 = Vec::Zero(std::max<int>(1, c.size() - 1));
    for (int k = 1; k < c.size(); ++k) d1(k - 1) = k * c(k);
    Vec d2 = Vec::Zero(std::max<int>(1, d1.size() - 1));
    for (int k = 1; k < d1.size(); ++k) d2(k - 1) = k * d1(k);
    return pointwise("polynomial", component,
                     [c, horner](double s) { return horner(c, s); },
                     [d1, horner](double s) { return horner(d1, s); },
                     [d2, horner](double s) { return horner(d2, s); });
}

Payoff payoff_product_mean(int component) {
    const int e = component;
    Payoff p;
    p.name = "product_mean";
    p.measure_free = false;
    p.ic = InteractionClass::in_v;
    p.value = [e](const Vec& x, const EmpiricalMeasure& mu) { return x(e) * mu.mean(e); };
    p.grad_x = [e](const Vec& x, const EmpiricalMeasure& mu) {
        Vec g = Vec::Zero(x.size());
        g(e) = mu.mean(e);
        return g;
    };
    p.hess_x = [](const Vec& x, const EmpiricalMeasure&) {
        return Mat::Zero(x.size(), x.size()).eval();
    };
    p.dmu = [e](const Vec& x, const EmpiricalMeasure&, const Vec&) {
        Vec g = Vec::Zero(x.size());
        g(e) = x(e);
        return g;
    };
    p.dv_dmu = [](const Vec& x, const EmpiricalMeasure&, const Vec&) {
        return Mat::Zero(x.size(), x.size()).eval();
    };
    p.companion = [e](const Vec& x, const EmpiricalMeasure&, const Vec& y) {
        return x(e) * y(e);
    };
    return p;
}

}  // namespace mvmc
