#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>

#include "mvmc/measures.hpp"

namespace mvmc {

// Structure of the measure dependence of a terminal functional g(x, mu):
//   none: no usable companion; in_x: the Lions derivative of g equals the
//   x-gradient of the companion G(x, mu, y) at y; in_v: it equals the
//   y-gradient of G. The tag selects which integration-by-parts route the
//   measure-derivative estimators may take.
enum class InteractionClass { none, in_x, in_v };

struct Payoff {
    std::string name;
    bool smooth = true;        // grad_x / dmu / dv_dmu below are usable
    bool measure_free = true;  // value ignores the measure argument
    InteractionClass ic = InteractionClass::none;

    std::function<double(const Eigen::VectorXd&, const EmpiricalMeasure&)> value;
    std::function<Eigen::VectorXd(const Eigen::VectorXd&, const EmpiricalMeasure&)> grad_x;
    std::function<Eigen::MatrixXd(const Eigen::VectorXd&, const EmpiricalMeasure&)> hess_x;
    // Lions gradient of g at v, R^N; identically zero for measure-free payoffs.
    std::function<Eigen::VectorXd(const Eigen::VectorXd&, const EmpiricalMeasure&,
                                  const Eigen::VectorXd&)> dmu;
    // (a, b) = d/dv_b of dmu_a.
    std::function<Eigen::MatrixXd(const Eigen::VectorXd&, const EmpiricalMeasure&,
                                  const Eigen::VectorXd&)> dv_dmu;
    // Companion G(x, mu, y) for ic != none.
    std::function<double(const Eigen::VectorXd&, const EmpiricalMeasure&,
                         const Eigen::VectorXd&)> companion;
};

// All constructors act on one coordinate of the state.
Payoff payoff_identity(int component = 0);
Payoff payoff_square(int component = 0);
Payoff payoff_sin(double frequency = 1.0, int component = 0);
Payoff payoff_positive_part(double strike = 0.0, int component = 0);
// prod_i 1{x_i > z_i}; not smooth.
Payoff payoff_indicator_above(const Eigen::VectorXd& z);
// x_e - mean_e(mu); measure-coupled, interaction class in_x.
Payoff payoff_centred_mean(int component = 0);
// sum_k c_k x_e^k.
Payoff payoff_polynomial(const Eigen::VectorXd& coefficients, int component = 0);
// x_e * mean_e(mu); measure-coupled, interaction class in_v.
Payoff payoff_product_mean(int component = 0);

}  // namespace mvmc
