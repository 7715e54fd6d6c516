#pragma once

#include <optional>
#include <unordered_map>
#include <vector>

#include "mvmc/tangents.hpp"

namespace mvmc {

// Availability of a derived sensitivity of a stochastic weight: structurally
// zero, explicitly computed, or outside what the model interface can express.
// Consuming an unavailable component raises MissingFieldError; carrying one
// around is fine.
enum class Dep { zero, present, unavailable };

struct WeightNeeds {
    bool field = false;    // noise sensitivity, needed to nest inside a Skorohod op
    bool grad_x = false;   // sensitivity to the carrier's starting point
    bool grad_v = false;   // sensitivity to the measure-derivative evaluation point
    bool grad_mu = false;  // Lions derivative of the weight itself
};

// A scalar stochastic weight on one carrier path, together with whatever
// sensitivities were requested so it can be nested inside further operators.
struct WeightNode {
    double value = 0.0;
    int order = 0;  // number of integration-by-parts operators applied

    Dep field_state = Dep::zero;
    std::vector<Eigen::RowVectorXd> field;  // [r] = derivative wrt dB_r, length d

    Dep grad_x_state = Dep::zero;
    Eigen::VectorXd grad_x;  // length N

    Dep grad_v_state = Dep::zero;
    Eigen::VectorXd grad_v;  // length N

    // Never `present`: only the structural-zero case is representable. A
    // nonzero measure derivative of a weight would need coefficient
    // derivatives beyond the model interface.
    Dep grad_mu_state = Dep::zero;

    static WeightNode unit() { return WeightNode{1.0, 0, Dep::zero, {}, Dep::zero, {}, Dep::zero, {}, Dep::zero}; }
};

// Per-sample factory for weights on one carrier path. Lazily materializes and
// memoizes every tangent object the operators touch: the flow Jacobian and
// its end-point inverse, the elementary integrands sigma^T (sigma sigma^T)^{-1} J,
// Malliavin fields of the state / Jacobian / Lions tangent, x-variations, and
// the anticipating matrix A = J_n^{-1} L_n with its sensitivities.
//
// `v_is_start = true` marks carriers whose path starts at the measure-
// derivative evaluation point (auxiliary copies): their grad_v is the path's
// own starting-point sensitivity.
class WeightWorkspace {
  public:
    // Law-coupled material for measure-derivative weights on this carrier.
    // `per_sample_aux` selects the tilde realization the attached Lions
    // tangent was built with: a private auxiliary path (decoupled sample
    // carriers) or the shared law-level copies inside `lt` (particle
    // carriers).
    struct LionsMaterial {
        const MatSeq* lions = nullptr;     // L_k along the carrier
        const MatSeq* lions_dv = nullptr;  // optional v-derivative of L_k
        const LawTangents* lt = nullptr;
        const PathBundle* aux = nullptr;  // per-sample tilde path
        const MatSeq* aux_jac = nullptr;
        bool per_sample_aux = false;
    };

    WeightWorkspace(const CoefficientModel& model, const ParticleSystemPaths& law,
                    const PathBundle& path, bool v_is_start, LionsMaterial lions);
    WeightWorkspace(const CoefficientModel& model, const ParticleSystemPaths& law,
                    const PathBundle& path, bool v_is_start = false)
        : WeightWorkspace(model, law, path, v_is_start, LionsMaterial{}) {}

    const CoefficientModel& model() const { return *model_; }
    const ParticleSystemPaths& law() const { return *law_; }
    const PathBundle& path() const { return *path_; }
    const ModelStructure& structure() const { return structure_; }
    int steps() const { return n_; }
    double horizon() const { return n_ * path_->grid.h; }
    bool v_is_start() const { return v_is_start_; }
    bool has_lions() const { return lions_.lions != nullptr; }

    const MatSeq& jacobian();
    const JacobianInverse& jacobian_end_inverse();
    // sigma^T (sigma sigma^T)^{-1} J at node k, d x N.
    const Eigen::MatrixXd& sig(int k);

    // Elementary adapted integrals delta_e = sum_k sig_k.col(e) . dB_k and
    // their sensitivities.
    double delta_value(int e);
    Dep delta_field_state() const { return Dep::present; }
    const std::vector<Eigen::RowVectorXd>& delta_field(int e);
    Dep delta_grad_x_state() const;
    const Eigen::VectorXd& delta_grad_x(int e);
    Dep delta_grad_mu_state() const;

    // Pathwise sensitivities (memoized; indices are local path nodes).
    const MatSeq& malliavin_state(int r);                          // D_r X
    const std::vector<MatSeq>& malliavin_jacobian(int r);          // D_{r,l} J, per l
    const MatSeq& x_variation(int e);                              // dJ/dx_e
    const std::vector<MatSeq>& malliavin_lions(int r);             // D_{r,l} L, per l
    const MatSeq& lions_x_variation(int e);                        // dL/dx_e

    // Entries of J_n^{-1} and A = J_n^{-1} L_n with sensitivity states.
    Dep jinv_field_state() const;
    const std::vector<Eigen::MatrixXd>& jinv_field(int r);  // per l, N x N
    Dep jinv_grad_x_state() const;
    const Eigen::MatrixXd& jinv_grad_x(int e);
    Dep jinv_grad_mu_state() const;

    const Eigen::MatrixXd& a_matrix();
    Dep a_field_state() const;
    const std::vector<Eigen::MatrixXd>& a_field(int r);  // per l, N x N
    Dep a_grad_x_state() const;
    const Eigen::MatrixXd& a_grad_x(int e);
    Dep a_grad_v_state() const;
    const Eigen::MatrixXd& a_grad_v();
    Dep a_grad_mu_state() const;

  private:
    const EmpiricalMeasure& measure(int k) const {
        return law_->measures[path_->start_step + k];
    }
    void build_sig();
    // Directional derivative of sigma^T (sigma sigma^T)^{-1} at node k along w.
    Eigen::MatrixXd sigmat_directional(int k, const Eigen::VectorXd& w);
    const Tensor3& hess_cached(int k, int i);
    // Combined linearization tensor of the Lions forcing at (k, i): contracting
    // its last index with a state perturbation w gives the forcing perturbation.
    const Tensor3& lions_sensitivity_tensor(int k, int i);
    // Value-level Lions forcing at (k, i), used for Malliavin seeds.
    Eigen::MatrixXd lions_forcing(int k, int i);
    void require_lions(const char* what) const;

    const CoefficientModel* model_;
    const ParticleSystemPaths* law_;
    const PathBundle* path_;
    bool v_is_start_;
    LionsMaterial lions_;
    ModelStructure structure_;
    int n_;

    std::optional<MatSeq> jac_;
    std::optional<JacobianInverse> jinv_;
    bool sig_built_ = false;
    std::vector<Eigen::MatrixXd> sigma_raw_;  // N x d per node
    std::vector<Eigen::MatrixXd> ginv_;       // N x N per node
    std::vector<Eigen::MatrixXd> sigmat_;     // sigma^T Ginv, d x N per node
    std::vector<Eigen::MatrixXd> sig_;        // sigmat * J, d x N per node

    std::vector<std::optional<double>> delta_value_;
    std::vector<std::optional<std::vector<Eigen::RowVectorXd>>> delta_field_;
    std::vector<std::optional<Eigen::VectorXd>> delta_grad_x_;

    std::unordered_map<int, MatSeq> dx_;
    std::unordered_map<int, std::vector<MatSeq>> dj_;
    std::optional<std::vector<MatSeq>> kvar_;
    std::unordered_map<int, std::vector<MatSeq>> dl_;
    std::optional<std::vector<MatSeq>> lx_;

    std::vector<std::vector<std::optional<Tensor3>>> hess_cache_;
    std::vector<std::vector<std::optional<Tensor3>>> lions_sens_cache_;

    std::unordered_map<int, std::vector<Eigen::MatrixXd>> jinv_field_;
    std::optional<std::vector<Eigen::MatrixXd>> jinv_grad_x_;
    std::optional<Eigen::MatrixXd> a_;
    std::unordered_map<int, std::vector<Eigen::MatrixXd>> a_field_;
    std::optional<std::vector<Eigen::MatrixXd>> a_grad_x_;
    std::optional<Eigen::MatrixXd> a_grad_v_;
};

// Elementary integration-by-parts operators. Each includes the 1/sqrt(t)
// normalization; estimator-level prefactors come on top.
enum class OpKind {
    bel,           // Skorohod integral of the elementary integrand against the weight
    inverse_flow,  // bel with the end-point inverse Jacobian folded in
    total_dx,      // bel plus sqrt(t) times the weight's x-gradient
    lions_bel,     // Skorohod integral against the integrand contracted with A
    lions_total,   // lions_bel plus sqrt(t) times the weight's measure derivative
    fixed_point,   // total_dx + lions_total (law started at the carrier's point)
};

struct OpStep {
    OpKind kind;
    int index = 0;  // component in [0, N)
};

// Compose operators on an existing weight, innermost first. The combined
// operator count is capped at two; beyond that the required sensitivities
// leave the supported model structure (OrderExceededError).
WeightNode extend_weight(WeightWorkspace& ws, const WeightNode& base,
                         const std::vector<OpStep>& steps, const WeightNeeds& needs = {});
WeightNode build_weight(WeightWorkspace& ws, const std::vector<OpStep>& steps,
                        const WeightNeeds& needs = {});

std::vector<OpStep> op_chain(OpKind kind, const std::vector<int>& idx);

// Multi-index conveniences; indices are applied first-entry innermost.
WeightNode bel_weight(WeightWorkspace& ws, const std::vector<int>& alpha,
                      const WeightNeeds& needs = {});
WeightNode inverse_flow_weight(WeightWorkspace& ws, const std::vector<int>& alpha,
                               const WeightNeeds& needs = {});
WeightNode total_dx_weight(WeightWorkspace& ws, const std::vector<int>& alpha,
                           const WeightNeeds& needs = {});
WeightNode lions_bel_weight(WeightWorkspace& ws, const std::vector<int>& beta,
                            const WeightNeeds& needs = {});
WeightNode lions_total_weight(WeightWorkspace& ws, const std::vector<int>& beta,
                              const WeightNeeds& needs = {});
WeightNode fixed_point_weight(WeightWorkspace& ws, const std::vector<int>& alpha,
                              const WeightNeeds& needs = {});

}  // namespace mvmc
