#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mvmc/errors.hpp"
#include "mvmc/measures.hpp"

namespace mvmc {

// Third-order blocks are stored as one N x N matrix per output component:
// T[a](b, c) is the (b, c) entry of the block for component a.
using Tensor3 = std::vector<Eigen::MatrixXd>;

// Contraction of the trailing index against a direction w:
// out(a, b) = sum_c T[a](b, c) * w(c).
Eigen::MatrixXd contract_last(const Tensor3& t, const Eigen::VectorXd& w);

// One coefficient V : R^N x P2(R^N) -> R^N of the dynamics
//   dX = V_0(X, mu) dt + sum_i V_i(X, mu) dB^i.
//
// `value` and `jac_x` are required. The remaining callbacks are optional
// analytic extensions: Lions derivative in v, its x- and v-derivatives, the
// x-Hessian, and a rank-one factorization of the Lions derivative
// dmu(x, mu, v) = left(x, mu) * right(v) that lets particle averages close in
// O(M). Structural zero flags let downstream recursions skip terms exactly.
struct Coefficient {
    using ValueFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&, const EmpiricalMeasure&)>;
    using MatFn = std::function<Eigen::MatrixXd(const Eigen::VectorXd&, const EmpiricalMeasure&)>;
    using TensorFn = std::function<Tensor3(const Eigen::VectorXd&, const EmpiricalMeasure&)>;
    using MatFnV = std::function<Eigen::MatrixXd(const Eigen::VectorXd&, const EmpiricalMeasure&,
                                                 const Eigen::VectorXd&)>;
    using TensorFnV = std::function<Tensor3(const Eigen::VectorXd&, const EmpiricalMeasure&,
                                            const Eigen::VectorXd&)>;

    ValueFn value;
    MatFn jac_x;          // (a, b) = dV^a / dx_b

    TensorFn hess_x;      // [a](b, c) = d2 V^a / dx_b dx_c
    MatFnV dmu;           // (a, b) = b-th component of the Lions gradient of V^a at v
    TensorFnV dx_dmu;     // [a](b, e) = d/dx_e of dmu(a, b)
    TensorFnV dv_dmu;     // [a](b, e) = d/dv_e of dmu(a, b)

    struct Factor {
        MatFn left;                                            // N x N
        std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> right;  // N x N in v
        TensorFn dx_left;                                      // [a](b, e) = d/dx_e left(a, b)
        std::function<Tensor3(const Eigen::VectorXd&)> dv_right;       // [a](b, e) = d/dv_e right(a, b)
        // True when the factor does not vary with its arguments at all; enables
        // exact structural zeros in higher-order sensitivity recursions.
        bool left_constant = false;
        bool right_constant = false;
    };
    std::optional<Factor> factor;

    bool jac_zero = false;
    bool hess_zero = false;
    bool dmu_zero = false;
    bool dxdmu_zero = false;
    bool dvdmu_zero = false;
};

struct CoefficientModel {
    int N = 1;
    int d = 1;
    std::string family;
    std::vector<Coefficient> coef;  // size d + 1; coef[0] is the drift

    bool bounded_coefficients = false;
    bool uniformly_elliptic = false;
    double ellipticity_floor = 0.0;  // declared lower bound on eig(sigma sigma^T)

    // Unary functions whose cloud averages the coefficient callbacks read from
    // EmpiricalMeasure::atoms. The law context fills them once per time step.
    std::vector<std::function<double(const Eigen::VectorXd&)>> measure_atoms;

    const Coefficient& drift() const { return coef[0]; }
    const Coefficient& diffusion(int i) const { return coef[1 + i]; }  // i in [0, d)
};

// Fill mu.atoms with the model's registered averages (needed before handing an
// ad-hoc measure to coefficient callbacks).
void prepare_measure(const CoefficientModel& model, EmpiricalMeasure& mu);

// Values and first derivatives of every coefficient at one point. Shapes are
// validated and non-finite entries raise ModelEvaluationError.
struct CoefficientEval {
    Eigen::VectorXd drift;                  // N
    Eigen::MatrixXd sigma;                  // N x d
    Eigen::MatrixXd jac_drift;              // N x N
    std::vector<Eigen::MatrixXd> jac_sigma; // d matrices, N x N
    Eigen::MatrixXd dmu_drift;              // N x N, zero when the model has none
    std::vector<Eigen::MatrixXd> dmu_sigma; // d matrices, N x N
};
CoefficientEval eval_all(const CoefficientModel& model, const Eigen::VectorXd& x,
                         const EmpiricalMeasure& mu, const Eigen::VectorXd& v);

// Evaluation helpers with zero-fallbacks and MissingFieldError when an optional
// pack is structurally needed but absent.
Eigen::MatrixXd eval_dmu(const Coefficient& c, int n, const Eigen::VectorXd& x,
                         const EmpiricalMeasure& mu, const Eigen::VectorXd& v);
Tensor3 eval_hess(const Coefficient& c, int n, const Eigen::VectorXd& x,
                  const EmpiricalMeasure& mu, const std::string& who);
Tensor3 eval_dx_dmu(const Coefficient& c, int n, const Eigen::VectorXd& x,
                    const EmpiricalMeasure& mu, const Eigen::VectorXd& v, const std::string& who);
Tensor3 eval_dv_dmu(const Coefficient& c, int n, const Eigen::VectorXd& x,
                    const EmpiricalMeasure& mu, const Eigen::VectorXd& v, const std::string& who);

// sigma(x, mu) assembled from the diffusion coefficients, N x d.
Eigen::MatrixXd sigma_matrix(const CoefficientModel& model, const Eigen::VectorXd& x,
                             const EmpiricalMeasure& mu);

// Smallest eigenvalue of sigma sigma^T over a set of probe states.
struct EllipticityReport {
    double min_eigenvalue = 0.0;
    Eigen::VectorXd argmin;
    bool above_declared_floor = true;
};
EllipticityReport check_ellipticity(const CoefficientModel& model,
                                    const std::vector<Eigen::VectorXd>& probes,
                                    const EmpiricalMeasure& mu);

// One full evaluation with shape checks; throws ModelEvaluationError on
// malformed callbacks. Called on config load.
void validate_model(const CoefficientModel& model, const Eigen::VectorXd& x,
                    const EmpiricalMeasure& mu);

}  // namespace mvmc
