#include "mvmc/model.hpp"

#include <cmath>

namespace mvmc {

namespace {

void require_finite_vec(const Eigen::VectorXd& v, const char* who) {
    if (!v.allFinite()) throw ModelEvaluationError(std::string(who) + " returned non-finite values");
}

void require_finite_mat(const Eigen::MatrixXd& m, const char* who) {
    if (!m.allFinite()) throw ModelEvaluationError(std::string(who) + " returned non-finite values");
}

void require_shape(const Eigen::MatrixXd& m, int rows, int cols, const char* who) {
    if (m.rows() != rows || m.cols() != cols) {
        throw ModelEvaluationError(std::string(who) + " has wrong shape");
    }
}

}  // namespace

Eigen::MatrixXd contract_last(const Tensor3& t, const Eigen::VectorXd& w) {
    const int n = static_cast<int>(t.size());
    Eigen::MatrixXd out(n, n == 0 ? 0 : t[0].rows());
    for (int a = 0; a < n; ++a) {
        out.row(a) = (t[a] * w).transpose();
    }
    return out;
}

void prepare_measure(const CoefficientModel& model, EmpiricalMeasure& mu) {
    mu.atoms.assign(model.measure_atoms.size(), 0.0);
    for (std::size_t i = 0; i < model.measure_atoms.size(); ++i) {
        mu.atoms[i] = mu.integrate(model.measure_atoms[i]);
    }
}

Eigen::MatrixXd eval_dmu(const Coefficient& c, int n, const Eigen::VectorXd& x,
                         const EmpiricalMeasure& mu, const Eigen::VectorXd& v) {
    if (c.dmu_zero) return Eigen::MatrixXd::Zero(n, n);
    if (c.factor) return c.factor->left(x, mu) * c.factor->right(v);
    if (c.dmu) return c.dmu(x, mu, v);
    return Eigen::MatrixXd::Zero(n, n);
}

namespace {
Tensor3 zero_tensor(int n) {
    return Tensor3(static_cast<std::size_t>(n), Eigen::MatrixXd::Zero(n, n));
}
}  // namespace

Tensor3 eval_hess(const Coefficient& c, int n, const Eigen::VectorXd& x,
                  const EmpiricalMeasure& mu, const std::string& who) {
    if (c.hess_zero) return zero_tensor(n);
    if (!c.hess_x) {
        throw MissingFieldError("second x-derivative of " + who +
                                " is required here but the model does not provide it");
    }
    return c.hess_x(x, mu);
}

Tensor3 eval_dx_dmu(const Coefficient& c, int n, const Eigen::VectorXd& x,
                    const EmpiricalMeasure& mu, const Eigen::VectorXd& v, const std::string& who) {
    if (c.dmu_zero || c.dxdmu_zero) return zero_tensor(n);
    if (c.factor && c.factor->dx_left) {
        // d/dx (left * right): [a](b,e) = sum_c dx_left[a](c,e) right(c,b)
        const Tensor3 dl = c.factor->dx_left(x, mu);
        const Eigen::MatrixXd r = c.factor->right(v);
        Tensor3 out = zero_tensor(n);
        for (int a = 0; a < n; ++a) {
            // dl[a](c, e); out[a](b, e) = sum_c r(c, b) dl[a](c, e)
            out[a] = r.transpose() * dl[a];
        }
        return out;
    }
    if (c.dx_dmu) return c.dx_dmu(x, mu, v);
    throw MissingFieldError("x-derivative of the Lions derivative of " + who +
                            " is required here but the model does not provide it");
}

Tensor3 eval_dv_dmu(const Coefficient& c, int n, const Eigen::VectorXd& x,
                    const EmpiricalMeasure& mu, const Eigen::VectorXd& v, const std::string& who) {
    if (c.dmu_zero || c.dvdmu_zero) return zero_tensor(n);
    if (c.factor && c.factor->dv_right) {
        // d/dv (left * right): [a](b,e) = sum_c left(a,c) dv_right[c](b,e)
        const Eigen::MatrixXd l = c.factor->left(x, mu);
        const Tensor3 dr = c.factor->dv_right(v);
        Tensor3 out = zero_tensor(n);
        for (int a = 0; a < n; ++a) {
            for (int cIdx = 0; cIdx < n; ++cIdx) {
                out[a] += l(a, cIdx) * dr[cIdx];
            }
        }
        return out;
    }
    if (c.dv_dmu) return c.dv_dmu(x, mu, v);
    throw MissingFieldError("v-derivative of the Lions derivative of " + who +
                            " is required here but the model does not provide it");
}

Eigen::MatrixXd sigma_matrix(const CoefficientModel& model, const Eigen::VectorXd& x,
                             const EmpiricalMeasure& mu) {
    Eigen::MatrixXd s(model.N, model.d);
    for (int i = 0; i < model.d; ++i) {
        s.col(i) = model.diffusion(i).value(x, mu);
    }
    require_finite_mat(s, "diffusion");
    return s;
}

CoefficientEval eval_all(const CoefficientModel& model, const Eigen::VectorXd& x,
                         const EmpiricalMeasure& mu, const Eigen::VectorXd& v) {
    CoefficientEval e;
    e.drift = model.drift().value(x, mu);
    require_finite_vec(e.drift, "drift");
    e.sigma = sigma_matrix(model, x, mu);
    e.jac_drift = model.drift().jac_x(x, mu);
    require_finite_mat(e.jac_drift, "drift jacobian");
    e.jac_sigma.resize(model.d);
    e.dmu_sigma.resize(model.d);
    for (int i = 0; i < model.d; ++i) {
        e.jac_sigma[i] = model.diffusion(i).jac_x(x, mu);
        require_finite_mat(e.jac_sigma[i], "diffusion jacobian");
        e.dmu_sigma[i] = eval_dmu(model.diffusion(i), model.N, x, mu, v);
    }
    e.dmu_drift = eval_dmu(model.drift(), model.N, x, mu, v);
    return e;
}

EllipticityReport check_ellipticity(const CoefficientModel& model,
                                    const std::vector<Eigen::VectorXd>& probes,
                                    const EmpiricalMeasure& mu) {
    EllipticityReport rep;
    rep.min_eigenvalue = std::numeric_limits<double>::infinity();
    for (const auto& x : probes) {
        const Eigen::MatrixXd s = sigma_matrix(model, x, mu);
        const Eigen::MatrixXd g = s * s.transpose();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g);
        const double lo = es.eigenvalues().minCoeff();
        if (lo < rep.min_eigenvalue) {
            rep.min_eigenvalue = lo;
            rep.argmin = x;
        }
    }
    rep.above_declared_floor = rep.min_eigenvalue >= model.ellipticity_floor * (1.0 - 1e-12);
    return rep;
}

void validate_model(const CoefficientModel& model, const Eigen::VectorXd& x,
                    const EmpiricalMeasure& mu) {
    if (model.N < 1 || model.d < 1) throw ModelEvaluationError("model dimensions must be positive");
    if (static_cast<int>(model.coef.size()) != model.d + 1) {
        throw ModelEvaluationError("model must have exactly d + 1 coefficients");
    }
    if (x.size() != model.N) throw DimensionError("state dimension does not match the model");
    if (mu.dim() != model.N) throw DimensionError("measure dimension does not match the model");

    EmpiricalMeasure m = mu;
    prepare_measure(model, m);
    const Eigen::VectorXd v = m.pts.row(0).transpose();

    const CoefficientEval e = eval_all(model, x, m, v);
    require_shape(e.jac_drift, model.N, model.N, "drift jacobian");
    if (e.sigma.rows() != model.N || e.sigma.cols() != model.d) {
        throw ModelEvaluationError("diffusion has wrong shape");
    }
    for (int i = 0; i < model.d; ++i) {
        require_shape(e.jac_sigma[i], model.N, model.N, "diffusion jacobian");
        require_shape(e.dmu_sigma[i], model.N, model.N, "diffusion Lions derivative");
    }
    require_shape(e.dmu_drift, model.N, model.N, "drift Lions derivative");
    if (e.drift.size() != model.N) throw ModelEvaluationError("drift has wrong shape");
}

}  // namespace mvmc
