#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "mvmc/errors.hpp"

namespace mvmc {

// Empirical measure: equal-weight atoms, one per row of `pts`. The summary
// statistics every coefficient evaluation needs (mean, second moment, and the
// model-registered scalar integrals in `atoms`) are computed once up front so
// that repeated callback evaluations against the same cloud stay O(1).
struct EmpiricalMeasure {
    Eigen::MatrixXd pts;        // M x N, one atom per row
    Eigen::VectorXd mean;       // N
    double second_moment = 0.0; // average of |y|^2
    std::vector<double> atoms;  // averages of registered unary functions, see CoefficientModel

    EmpiricalMeasure() = default;
    explicit EmpiricalMeasure(Eigen::MatrixXd points);

    int size() const { return static_cast<int>(pts.rows()); }
    int dim() const { return static_cast<int>(pts.cols()); }

    // Average of phi over the atoms. O(M) per call; prefer `atoms` in hot loops.
    double integrate(const std::function<double(const Eigen::VectorXd&)>& phi) const;
};

// Dirac mass at a point, represented as a one-atom cloud.
EmpiricalMeasure dirac_measure(const Eigen::VectorXd& x);

// Cloud of M copies of the same point (useful as the fixed-point initial condition).
EmpiricalMeasure constant_cloud(const Eigen::VectorXd& x, int m);

// 2-Wasserstein distance between two scalar empirical measures with the same
// number of atoms (the optimal coupling sorts both samples). Throws
// DimensionError for dim != 1 or mismatched atom counts.
double wasserstein2_1d(const EmpiricalMeasure& a, const EmpiricalMeasure& b);

}  // namespace mvmc
