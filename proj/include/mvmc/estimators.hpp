#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mvmc/payoffs.hpp"
#include "mvmc/weights.hpp"

namespace mvmc {

struct EstimatorOptions {
    long n_samples = 10000;
    int n_particles = 256;  // M, size of the law particle system
    int n_steps = 64;       // Euler steps over [0, t]
    std::uint64_t seed = 0;
    int threads = 1;
    // > 1 simulates that many independent particle systems and cycles sample
    // batches across them, exposing the law-approximation error component.
    // Only plain and x-derivative estimators support it.
    int law_copies = 1;
    int aux_copies = 8;               // law-level tilde copies per direction point
    bool force_generic_lions = false;  // ignore coefficient factorizations
};

struct Diagnostics {
    double weight_second_moment = 0.0;  // E[W^2] of the (scaled) weight, 0 if none
    double mean_condition = 0.0;        // average Jacobian condition number, 0 if unused
    long rejected = 0;                  // samples dropped on blow-up / singular flow
    bool flagged = false;               // rejected exceeded 0.1% of n_samples
};

struct EstimatorResult {
    std::string estimator;
    std::string method = "weight";  // weight | finite-difference | oracle
    double t = 0.0;
    Eigen::VectorXd x, v, z;  // anchors; empty when not applicable
    double value = 0.0;
    double std_error = 0.0;
    long n_samples = 0;
    std::uint64_t seed = 0;
    Diagnostics diag;
};

std::string csv_header();
std::string csv_row(const EstimatorResult& r);

// Deterministic fixed-batch Monte-Carlo reduction: `fill` computes the
// per-sample output vector; samples are grouped into fixed batches whose
// partial moments are merged in batch order, so results are bit-identical for
// any thread count. Throwing BlowUpError or SingularJacobianError from `fill`
// rejects that sample; other exceptions propagate.
struct McMoments {
    long accepted = 0;
    long rejected = 0;
    Eigen::VectorXd mean, std_error;
};
McMoments run_monte_carlo(long n_samples, int threads, int dim,
                          const std::function<void(long, Eigen::VectorXd&)>& fill);

// U(t, x, [theta]) = E f(X_t^{x,[theta]}, mu_t): plain Monte-Carlo mean over
// decoupled paths against the simulated particle law.
EstimatorResult estimate_expectation(const CoefficientModel& model, const Payoff& payoff,
                                     const Eigen::VectorXd& x, const InitialSampler& sampler,
                                     double t, const EstimatorOptions& opts);

// d^alpha/dx^alpha U via t^{-|alpha|/2} E[f(X_t) W], |alpha| <= 2, weights
// instead of payoff derivatives. alpha lists coordinate indices in [0, N).
EstimatorResult estimate_dx(const CoefficientModel& model, const std::vector<int>& alpha,
                            const Payoff& payoff, const Eigen::VectorXd& x,
                            const InitialSampler& sampler, double t,
                            const EstimatorOptions& opts);

// E[(d^beta f)(X_t)] without evaluating the payoff derivative (inverse-flow
// weights), |beta| <= 2.
EstimatorResult estimate_derivative_of_payoff(const CoefficientModel& model,
                                              const std::vector<int>& beta, const Payoff& payoff,
                                              const Eigen::VectorXd& x,
                                              const InitialSampler& sampler, double t,
                                              const EstimatorOptions& opts);

// Measure derivative of E f(X_t^{x,[theta]}) at direction point v, component
// beta[0]; |beta| == 1 in the shipped configuration. Needs a measure-free
// payoff (measure-coupled functionals go through estimate_U_and_derivatives).
EstimatorResult estimate_dmu(const CoefficientModel& model, const std::vector<int>& beta,
                             const Payoff& payoff, const Eigen::VectorXd& x,
                             const InitialSampler& sampler, double t, const Eigen::VectorXd& v,
                             const EstimatorOptions& opts);

// Total x-derivative in the fixed-point regime (law started at delta_x):
// flow and measure sensitivities combined, |alpha| <= 2.
EstimatorResult estimate_dx_fixed_point(const CoefficientModel& model,
                                        const std::vector<int>& alpha, const Payoff& payoff,
                                        const Eigen::VectorXd& x, double t,
                                        const EstimatorOptions& opts);

// Transition density of X_t^{x, delta_x} and its x/z-derivatives on a shared
// z-grid (one weight per sample, the indicator varies). N + |alpha| + |beta|
// <= 2. The tail diagnostic regresses log p against |z - x|^2 / t over grid
// points that are in the Gaussian tail and significant, and is only fitted
// for the plain density.
struct DensityEstimate {
    double t = 0.0;
    Eigen::VectorXd x;
    Eigen::MatrixXd z_grid;  // rows = evaluation points
    std::vector<int> alpha, beta;
    Eigen::VectorXd value, std_error;
    double tail_slope = 0.0, tail_intercept = 0.0, tail_r2 = 0.0;
    int tail_points = 0;
    long n_samples = 0;
    std::uint64_t seed = 0;
    Diagnostics diag;
};
DensityEstimate estimate_density(const CoefficientModel& model, const Eigen::VectorXd& x,
                                 double t, const Eigen::MatrixXd& z_grid,
                                 const std::vector<int>& alpha, const std::vector<int>& beta,
                                 const EstimatorOptions& opts);

// Estimation route for the functional U and its measure derivatives.
//   smooth:   direct tangent formula; needs grad_x / dmu (/ dv_dmu) of g.
//   weight_x: companion-based weights for interaction class in_x.
//   weight_v: companion-based weights for interaction class in_v; requires
//             declared bounded coefficients. The only route with a
//             second-order (dv of dmu) weight form.
//   automatic: smooth if usable, otherwise by the payoff's class tag.
enum class URoute { automatic, smooth, weight_x, weight_v };

struct UDerivativesResult {
    double t = 0.0;
    Eigen::VectorXd x, v;
    std::string route;
    double u = 0.0, u_stderr = 0.0;
    Eigen::VectorXd dx, dx_stderr;    // length N
    Eigen::MatrixXd dxx, dxx_stderr;  // N x N
    Eigen::VectorXd dmu, dmu_stderr;  // component i at direction point v
    bool has_dv_dmu = false;
    Eigen::MatrixXd dv_dmu, dv_dmu_stderr;  // (i, j) = d/dv_j of dmu_i
    long n_samples = 0;
    std::uint64_t seed = 0;
    Diagnostics diag;
};
UDerivativesResult estimate_U_and_derivatives(const CoefficientModel& model, const Payoff& g,
                                              const Eigen::VectorXd& x,
                                              const InitialSampler& sampler, double t,
                                              const Eigen::VectorXd& v, URoute route,
                                              bool with_dv_dmu, const EstimatorOptions& opts);

// Backward-equation residual (d/dt - L)U at (t, x, [theta]) for smooth g,
// N == 1. The time derivative is a central difference on the master grid
// (step = a whole number of Euler steps near sqrt(h)); the x-terms use weight
// estimates at the initial measure; the measure terms average the Lions
// derivatives over v = the initial atoms through one weighted-aggregate
// tangent system per coefficient group. All terms share samples, so the
// residual's standard error is computed per sample, correlations included.
struct PdeResidualResult {
    double t = 0.0;
    Eigen::VectorXd x;
    double h_t = 0.0;
    double dt_u = 0.0, dt_u_stderr = 0.0;
    double x_terms = 0.0, x_terms_stderr = 0.0;
    double mu_terms = 0.0, mu_terms_stderr = 0.0;
    double residual = 0.0, residual_stderr = 0.0;
    long n_samples = 0;
    std::uint64_t seed = 0;
    Diagnostics diag;
};
PdeResidualResult pde_residual(const CoefficientModel& model, const Payoff& g,
                               const Eigen::VectorXd& x, const InitialSampler& sampler, double t,
                               const EstimatorOptions& opts);

// Weight estimate against central finite differences under common random
// numbers. dx bumps the start point; dmu shifts every initial atom (a full
// unit mass displacement, matching the weight estimate when the measure
// derivative is flat in v). The difference column is paired per sample, so
// combined_stderr reflects the correlated comparison.
enum class FdTarget { dx, dmu };
struct FdComparisonRow {
    double bump = 0.0;
    double fd_value = 0.0, fd_stderr = 0.0;
    double weight_value = 0.0, weight_stderr = 0.0;
    double difference = 0.0, combined_stderr = 0.0;
};
std::vector<FdComparisonRow> compare_fd(const CoefficientModel& model, FdTarget target,
                                        const Payoff& payoff, const Eigen::VectorXd& x,
                                        const InitialSampler& sampler, double t,
                                        const Eigen::VectorXd& v, const std::vector<double>& bumps,
                                        const EstimatorOptions& opts);

}  // namespace mvmc
