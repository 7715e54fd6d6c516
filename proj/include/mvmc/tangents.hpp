#pragma once

#include <functional>
#include <vector>

#include "mvmc/simulate.hpp"

namespace mvmc {

// Matrix-valued process along a path, indexed by path-local node 0..n_used.
using MatSeq = std::vector<Eigen::MatrixXd>;

// Structural zero analysis of a model. The tangent and weight recursions use
// these predicates to skip terms that vanish identically, which is also what
// makes higher-order compositions exact on affine-coefficient families.
struct ModelStructure {
    bool jac_diffusion_zero = false;  // x-Jacobians of all diffusion columns vanish
    bool hess_all_zero = false;       // x-Hessians of every coefficient vanish
    bool dmu_all_zero = false;        // no measure dependence in any coefficient
    bool dmu_diffusion_zero = false;  // diffusion columns carry no measure dependence
    bool dxdmu_all_zero = false;
    bool dvdmu_all_zero = false;
    bool factored = true;             // every nonzero Lions derivative has a factorization
    bool factor_left_constant = true;   // every factorization has a constant left part
    bool factor_right_constant = true;  // ... and a constant right part

    bool lions_zero() const { return dmu_all_zero; }
    // Malliavin field of the Jacobian vanishes identically.
    bool jacobian_field_zero() const { return jac_diffusion_zero && hess_all_zero; }
    // Malliavin field of the Lions tangent vanishes identically.
    bool lions_field_zero() const {
        return dmu_all_zero ||
               (jac_diffusion_zero && dmu_diffusion_zero && hess_all_zero && dxdmu_all_zero);
    }
    // Second variation d(Jacobian)/dx vanishes identically.
    bool second_variation_zero() const { return hess_all_zero; }
    // x-derivative of the Lions tangent vanishes identically.
    bool lions_dx_zero() const { return dmu_all_zero || (hess_all_zero && dxdmu_all_zero); }
    // v-derivative of the Lions tangent vanishes identically.
    bool lions_dv_zero() const { return dmu_all_zero || (dvdmu_all_zero && hess_all_zero); }

    // Noise sensitivity and x-sensitivity of the elementary integrand
    // sigma^T (sigma sigma^T)^{-1} dX both vanish identically.
    bool integrand_rigid() const { return jac_diffusion_zero && hess_all_zero; }
    // Measure derivative of the elementary stochastic-integral weights
    // vanishes identically.
    bool integrand_lions_zero() const {
        return dmu_all_zero ||
               (dmu_diffusion_zero && jac_diffusion_zero && hess_all_zero && dxdmu_all_zero);
    }
    // Measure derivative of the Jacobian vanishes identically.
    bool jacobian_lions_zero() const {
        return hess_all_zero && dxdmu_all_zero;
    }
    // Measure derivative of the Lions tangent itself vanishes identically.
    // Beyond this structural case the second-order measure expansion would
    // require coefficient derivatives outside the model interface.
    bool second_lions_zero() const {
        return dmu_all_zero || (hess_all_zero && dxdmu_all_zero && factored &&
                                factor_left_constant && factor_right_constant);
    }
};
ModelStructure analyze_structure(const CoefficientModel& model);

// sigma^T (sigma sigma^T)^{-1} at (x, mu): the d x N right pseudo-inverse used
// by every integration-by-parts integrand. Requires a declared uniformly
// elliptic model.
Eigen::MatrixXd sigma_dagger(const CoefficientModel& model, const Eigen::VectorXd& x,
                             const EmpiricalMeasure& mu);

struct JacobianInverse {
    Eigen::MatrixXd inv;
    double condition;
};
// Numeric inverse with a condition estimate; throws SingularJacobianError
// above 1e12.
JacobianInverse invert_jacobian(const Eigen::MatrixXd& j);

// Generic measure-frozen linear propagation along a decoupled path:
//   Y_{k+1} = Y_k + sum_{i=0..d} [ jac_i(X_k, mu_k) Y_k + F_i(k) ] dBt^i_k
// with dBt^0 = h, starting from `seed` at local node seed_step (Y = 0 before).
// The forcing callback may be empty; it receives (local step k, coefficient i)
// and must return an N x cols matrix. This one recursion realizes the
// Jacobian, Malliavin fields, Lions tangents and all their x/v-derivatives,
// distinguished only by seed and forcing.
using ForcingFn = std::function<Eigen::MatrixXd(int, int)>;
MatSeq propagate_linear(const CoefficientModel& model, const PathBundle& path,
                        const ParticleSystemPaths& law, const Eigen::MatrixXd& seed,
                        int seed_step, const ForcingFn& forcing = nullptr);

// Jacobian of the flow w.r.t. its starting point: seed I at node 0.
MatSeq propagate_jacobian(const CoefficientModel& model, const PathBundle& path,
                          const ParticleSystemPaths& law);

// Malliavin derivative of the state w.r.t. the increment vector at local node
// r: N x d, seeded with sigma(X_r, mu_r) at r+1 (the measure argument is
// frozen, so this is plain linear propagation).
MatSeq propagate_malliavin_field(const CoefficientModel& model, const PathBundle& path,
                                 const ParticleSystemPaths& law, int r);

// View of one particle's trajectory as a decoupled path (it is one: a particle
// follows the empirical-law dynamics with its own noise).
PathBundle particle_bundle(const ParticleSystemPaths& law, int m);

// Law-level tangent context for one direction point v: auxiliary copy paths
// started at v, the coupled per-particle Lions system, and (for factored
// models) the per-step brackets that close the particle averages in O(M).
struct LawTangentsOptions {
    int n_aux = 8;                  // copies averaged in the law-level tilde terms
    bool force_generic = false;     // ignore factorizations (test path)
    bool particle_jacobians = false;
    bool dv_derivatives = false;    // also build d/dv tangents (N == 1 only)
};

struct LawTangents {
    Eigen::VectorXd v;
    std::uint32_t v_index = 0;
    bool used_factored = false;
    std::vector<PathBundle> aux_paths;
    std::vector<MatSeq> aux_jac;
    std::vector<MatSeq> aux_second;        // d(aux Jacobian)/dv per copy (dv only)
    std::vector<MatSeq> particle_jac;      // J^m (on request)
    std::vector<MatSeq> particle_lions;    // L^m(v)
    std::vector<MatSeq> particle_lions_dv; // dL^m/dv (dv only)
    // Factored brackets, [coefficient i][node k], all N x N:
    std::vector<MatSeq> bracket_R;   // avg over copies of right_i(Xaux_k) Jaux_k
    std::vector<MatSeq> bracket_P;   // (1/M) sum_m right_i(X^m_k) L^m_k
    std::vector<MatSeq> bracket_Rv;  // avg over copies of d/dv [ right_i(Xaux) Jaux ]
    std::vector<MatSeq> bracket_Pv;  // (1/M) sum_m right_i(X^m_k) dL^m_k/dv
};

LawTangents build_law_tangents(const CoefficientModel& model, const ParticleSystemPaths& law,
                               const Eigen::VectorXd& v, std::uint32_t v_index,
                               const BrownianDriver& driver, const LawTangentsOptions& opts = {});

// Per-sample Lions tangent of a decoupled path in direction v, using a fresh
// auxiliary copy path (stream aux_sample) and the law-level particle system
// from `lt`.
struct SampleLionsOptions {
    bool force_generic = false;
    bool dv_derivative = false;  // also propagate dL/dv (N == 1 only)
};

struct SampleLions {
    PathBundle aux;      // per-sample copy started at v
    MatSeq aux_jac;
    MatSeq aux_second;   // d(aux_jac)/dv (dv only)
    MatSeq lions;        // L_k(v)
    MatSeq lions_dv;     // dL_k(v)/dv (dv only)
};

SampleLions propagate_lions(const CoefficientModel& model, const PathBundle& path,
                            const ParticleSystemPaths& law, const LawTangents& lt,
                            const BrownianDriver& driver, std::uint32_t sample_id,
                            const SampleLionsOptions& opts = {});

// Signed one-path residual of the flow-transfer identity
//   J_n = D_r X_n sigma^T (sigma sigma^T)^{-1}(X_r, mu_r) J_r.
// Its sample mean decays O(h); the pathwise norm carries a mean-zero
// single-increment term of order sqrt(h).
Eigen::MatrixXd transfer_identity_residual(const CoefficientModel& model, const PathBundle& path,
                                           const ParticleSystemPaths& law, int r);

// Weighted aggregation of Lions responses over v = the particle starting
// points, sum_j w_j L(theta_j), in a single coupled pass: each particle
// doubles as the auxiliary copy started at its own initial position (an
// O(1/M) in-system approximation of an independent copy). This turns
// atom-averaged measure terms, which would need one tangent build per atom,
// into one weighted-forcing system. N == 1 only.
struct AggregatedTangentsOptions {
    bool with_dv = false;        // also aggregate the d/dv companions
    bool force_generic = false;  // ignore factorizations (test path)
};

struct AggregatedTangents {
    Eigen::VectorXd weights;  // w_j per particle, any 1/M normalization included
    bool with_dv = false;
    bool used_factored = false;
    std::vector<MatSeq> particle_jac;     // J^j along particle j
    std::vector<MatSeq> particle_second;  // d J^j / d(start) (with_dv only)
    std::vector<MatSeq> lions;            // sum_j w_j L^m(theta_j) per particle m
    std::vector<MatSeq> lions_dv;         // sum_j w_j dL^m/dv(theta_j) (with_dv only)
    // Factored brackets, [coefficient i][node k]:
    std::vector<MatSeq> bracket_R, bracket_P, bracket_Rv, bracket_Pv;
};

AggregatedTangents build_aggregated_tangents(const CoefficientModel& model,
                                             const ParticleSystemPaths& law,
                                             const Eigen::VectorXd& weights,
                                             const AggregatedTangentsOptions& opts = {});

// The matching weighted-aggregate Lions tangent of one decoupled sample path.
struct AggregatedSampleLions {
    MatSeq lions;
    MatSeq lions_dv;  // empty unless the aggregate was built with_dv
};
AggregatedSampleLions propagate_aggregated_lions(const CoefficientModel& model,
                                                 const PathBundle& path,
                                                 const ParticleSystemPaths& law,
                                                 const AggregatedTangents& agg);

}  // namespace mvmc
