#include "mvmc/weights.hpp"

#include <cmath>
#include <string>

namespace mvmc {

namespace {

[[noreturn]] void throw_unavailable(const char* what) {
    throw MissingFieldError(std::string(what) +
                            " is outside the supported model structure for this composition");
}

// Join for sums and products of independently known parts.
Dep dep_join(Dep a, Dep b) {
    if (a == Dep::unavailable || b == Dep::unavailable) return Dep::unavailable;
    if (a == Dep::present || b == Dep::present) return Dep::present;
    return Dep::zero;
}

}  // namespace

WeightWorkspace::WeightWorkspace(const CoefficientModel& model, const ParticleSystemPaths& law,
                                 const PathBundle& path, bool v_is_start, LionsMaterial lions)
    : model_(&model),
      law_(&law),
      path_(&path),
      v_is_start_(v_is_start),
      lions_(lions),
      structure_(analyze_structure(model)),
      n_(path.n_used) {
    if (n_ < 1) throw ConfigError("weight carrier needs at least one step");
    if (lions_.lions != nullptr && lions_.lt == nullptr) {
        throw MissingAuxiliaryPathError("Lions weight material needs the law tangent pack");
    }
    delta_value_.resize(model.N);
    delta_field_.resize(model.N);
    delta_grad_x_.resize(model.N);
    hess_cache_.assign(n_, std::vector<std::optional<Tensor3>>(model.d + 1));
    lions_sens_cache_.assign(n_, std::vector<std::optional<Tensor3>>(model.d + 1));
}

void WeightWorkspace::require_lions(const char* what) const {
    if (!has_lions()) {
        throw MissingAuxiliaryPathError(std::string(what) +
                                        " needs a carrier with attached Lions tangents");
    }
}

const MatSeq& WeightWorkspace::jacobian() {
    if (!jac_) jac_ = propagate_jacobian(*model_, *path_, *law_);
    return *jac_;
}

const JacobianInverse& WeightWorkspace::jacobian_end_inverse() {
    if (!jinv_) jinv_ = invert_jacobian(jacobian()[n_]);
    return *jinv_;
}

void WeightWorkspace::build_sig() {
    if (sig_built_) return;
    const MatSeq& j = jacobian();
    const int nn = model_->N;
    sigma_raw_.resize(n_);
    ginv_.resize(n_);
    sigmat_.resize(n_);
    sig_.resize(n_);
    for (int k = 0; k < n_; ++k) {
        sigma_raw_[k] = sigma_matrix(*model_, path_->x[k], measure(k));
        const Eigen::MatrixXd g = sigma_raw_[k] * sigma_raw_[k].transpose();
        Eigen::LDLT<Eigen::MatrixXd> ldlt(g);
        if (ldlt.info() != Eigen::Success) {
            throw ModelEvaluationError("sigma sigma^T is not positive definite along the path");
        }
        ginv_[k] = ldlt.solve(Eigen::MatrixXd::Identity(nn, nn));
        sigmat_[k] = sigma_raw_[k].transpose() * ginv_[k];
        sig_[k] = sigmat_[k] * j[k];
    }
    sig_built_ = true;
}

const Eigen::MatrixXd& WeightWorkspace::sig(int k) {
    build_sig();
    return sig_[k];
}

Eigen::MatrixXd WeightWorkspace::sigmat_directional(int k, const Eigen::VectorXd& w) {
    build_sig();
    const int nn = model_->N;
    const int dd = model_->d;
    Eigen::MatrixXd dsigma = Eigen::MatrixXd::Zero(nn, dd);
    for (int i = 0; i < dd; ++i) {
        const Coefficient& c = model_->coef[i + 1];
        if (!c.jac_zero) dsigma.col(i) = c.jac_x(path_->x[k], measure(k)) * w;
    }
    const Eigen::MatrixXd dg =
        dsigma * sigma_raw_[k].transpose() + sigma_raw_[k] * dsigma.transpose();
    return dsigma.transpose() * ginv_[k] - sigmat_[k] * dg * ginv_[k];
}

double WeightWorkspace::delta_value(int e) {
    auto& slot = delta_value_[e];
    if (!slot) {
        build_sig();
        double acc = 0.0;
        for (int k = 0; k < n_; ++k) acc += sig_[k].col(e).dot(path_->db[k]);
        slot = acc;
    }
    return *slot;
}

const std::vector<Eigen::RowVectorXd>& WeightWorkspace::delta_field(int e) {
    auto& slot = delta_field_[e];
    if (slot) return *slot;
    build_sig();
    const int dd = model_->d;
    std::vector<Eigen::RowVectorXd> f(n_);
    for (int r = 0; r < n_; ++r) f[r] = sig_[r].col(e).transpose();
    if (!structure_.integrand_rigid()) {
        const MatSeq& j = jacobian();
        const bool dj_live = !structure_.jacobian_field_zero();
        for (int r = 0; r < n_; ++r) {
            const MatSeq& dxr = malliavin_state(r);
            const std::vector<MatSeq>* djr = dj_live ? &malliavin_jacobian(r) : nullptr;
            for (int l = 0; l < dd; ++l) {
                double acc = 0.0;
                for (int k = r + 1; k < n_; ++k) {
                    Eigen::MatrixXd ds = Eigen::MatrixXd::Zero(dd, model_->N);
                    if (!structure_.jac_diffusion_zero) {
                        ds = sigmat_directional(k, dxr[k].col(l)) * j[k];
                    }
                    if (djr) ds.noalias() += sigmat_[k] * (*djr)[l][k];
                    acc += ds.col(e).dot(path_->db[k]);
                }
                f[r](l) += acc;
            }
        }
    }
    slot = std::move(f);
    return *slot;
}

Dep WeightWorkspace::delta_grad_x_state() const {
    return structure_.integrand_rigid() ? Dep::zero : Dep::present;
}

const Eigen::VectorXd& WeightWorkspace::delta_grad_x(int e) {
    auto& slot = delta_grad_x_[e];
    if (slot) return *slot;
    build_sig();
    const int nn = model_->N;
    Eigen::VectorXd g = Eigen::VectorXd::Zero(nn);
    if (!structure_.integrand_rigid()) {
        const MatSeq& j = jacobian();
        const bool k_live = !structure_.second_variation_zero();
        for (int e2 = 0; e2 < nn; ++e2) {
            double acc = 0.0;
            for (int k = 0; k < n_; ++k) {
                Eigen::MatrixXd ds = Eigen::MatrixXd::Zero(model_->d, nn);
                if (!structure_.jac_diffusion_zero) {
                    ds = sigmat_directional(k, j[k].col(e2)) * j[k];
                }
                if (k_live) ds.noalias() += sigmat_[k] * x_variation(e2)[k];
                acc += ds.col(e).dot(path_->db[k]);
            }
            g(e2) = acc;
        }
    }
    slot = std::move(g);
    return *slot;
}

Dep WeightWorkspace::delta_grad_mu_state() const {
    return structure_.integrand_lions_zero() ? Dep::zero : Dep::unavailable;
}

const MatSeq& WeightWorkspace::malliavin_state(int r) {
    auto it = dx_.find(r);
    if (it == dx_.end()) {
        it = dx_.emplace(r, propagate_malliavin_field(*model_, *path_, *law_, r)).first;
    }
    return it->second;
}

const std::vector<MatSeq>& WeightWorkspace::malliavin_jacobian(int r) {
    auto it = dj_.find(r);
    if (it != dj_.end()) return it->second;
    const int nn = model_->N;
    const int dd = model_->d;
    const MatSeq& j = jacobian();
    const MatSeq& dxr = malliavin_state(r);
    std::vector<MatSeq> per_l;
    per_l.reserve(dd);
    for (int l = 0; l < dd; ++l) {
        const Coefficient& cd = model_->coef[l + 1];
        Eigen::MatrixXd seed = Eigen::MatrixXd::Zero(nn, nn);
        if (!cd.jac_zero) seed = cd.jac_x(path_->x[r], measure(r)) * j[r];
        ForcingFn fn;
        if (!structure_.hess_all_zero) {
            fn = [this, &j, &dxr, l](int k, int i) -> Eigen::MatrixXd {
                const Coefficient& c = model_->coef[i];
                if (c.hess_zero) return Eigen::MatrixXd();
                return contract_last(hess_cached(k, i), dxr[k].col(l)) * j[k];
            };
        }
        per_l.push_back(propagate_linear(*model_, *path_, *law_, seed, r + 1, fn));
    }
    return dj_.emplace(r, std::move(per_l)).first->second;
}

const MatSeq& WeightWorkspace::x_variation(int e) {
    if (!kvar_) {
        const int nn = model_->N;
        const MatSeq& j = jacobian();
        std::vector<MatSeq> ks;
        ks.reserve(nn);
        const Eigen::MatrixXd zero_nn = Eigen::MatrixXd::Zero(nn, nn);
        for (int e2 = 0; e2 < nn; ++e2) {
            if (structure_.second_variation_zero()) {
                ks.emplace_back(n_ + 1, zero_nn);
            } else {
                ForcingFn fn = [this, &j, e2](int k, int i) -> Eigen::MatrixXd {
                    const Coefficient& c = model_->coef[i];
                    if (c.hess_zero) return Eigen::MatrixXd();
                    return contract_last(hess_cached(k, i), j[k].col(e2)) * j[k];
                };
                ks.push_back(propagate_linear(*model_, *path_, *law_, zero_nn, 0, fn));
            }
        }
        kvar_ = std::move(ks);
    }
    return (*kvar_)[e];
}

const Tensor3& WeightWorkspace::hess_cached(int k, int i) {
    auto& slot = hess_cache_[k][i];
    if (!slot) {
        slot = eval_hess(model_->coef[i], model_->N, path_->x[k], measure(k), "coefficient");
    }
    return *slot;
}

Eigen::MatrixXd WeightWorkspace::lions_forcing(int k, int i) {
    const Coefficient& c = model_->coef[i];
    const int nn = model_->N;
    if (c.dmu_zero) return Eigen::MatrixXd::Zero(nn, nn);
    const Eigen::VectorXd& xk = path_->x[k];
    const EmpiricalMeasure& mu = measure(k);
    const LawTangents& lt = *lions_.lt;
    if (lt.used_factored) {
        Eigen::MatrixXd tilde = lions_.per_sample_aux
                                    ? Eigen::MatrixXd(c.factor->right(lions_.aux->x[k]) *
                                                      (*lions_.aux_jac)[k])
                                    : lt.bracket_R[i][k];
        return c.factor->left(xk, mu) * (tilde + lt.bracket_P[i][k]);
    }
    Eigen::MatrixXd f = Eigen::MatrixXd::Zero(nn, nn);
    if (lions_.per_sample_aux) {
        f = eval_dmu(c, nn, xk, mu, lions_.aux->x[k]) * (*lions_.aux_jac)[k];
    } else {
        const double inv_aux = 1.0 / static_cast<double>(lt.aux_paths.size());
        for (std::size_t a = 0; a < lt.aux_paths.size(); ++a) {
            f.noalias() += inv_aux * (eval_dmu(c, nn, xk, mu, lt.aux_paths[a].x[k]) *
                                      lt.aux_jac[a][k]);
        }
    }
    const double inv_m = 1.0 / static_cast<double>(law_->M);
    for (int m = 0; m < law_->M; ++m) {
        f.noalias() += inv_m * (eval_dmu(c, nn, xk, mu, law_->states[k].row(m).transpose()) *
                                lt.particle_lions[m][k]);
    }
    return f;
}

const Tensor3& WeightWorkspace::lions_sensitivity_tensor(int k, int i) {
    auto& slot = lions_sens_cache_[k][i];
    if (slot) return *slot;
    const Coefficient& c = model_->coef[i];
    const int nn = model_->N;
    Tensor3 t(nn, Eigen::MatrixXd::Zero(nn, nn));
    const Eigen::VectorXd& xk = path_->x[k];
    const EmpiricalMeasure& mu = measure(k);
    const Eigen::MatrixXd& lk = (*lions_.lions)[k];
    if (!c.hess_zero) {
        const Tensor3& hs = hess_cached(k, i);
        for (int a = 0; a < nn; ++a) t[a].noalias() += lk.transpose() * hs[a];
    }
    if (!c.dmu_zero && !c.dxdmu_zero) {
        const LawTangents& lt = *lions_.lt;
        if (lt.used_factored) {
            Eigen::MatrixXd tilde = lions_.per_sample_aux
                                        ? Eigen::MatrixXd(c.factor->right(lions_.aux->x[k]) *
                                                          (*lions_.aux_jac)[k])
                                        : lt.bracket_R[i][k];
            tilde += lt.bracket_P[i][k];
            const Tensor3 dxl = c.factor->dx_left(xk, mu);
            for (int a = 0; a < nn; ++a) t[a].noalias() += tilde.transpose() * dxl[a];
        } else {
            if (lions_.per_sample_aux) {
                const Tensor3 dxd =
                    eval_dx_dmu(c, nn, xk, mu, lions_.aux->x[k], "coefficient");
                for (int a = 0; a < nn; ++a) {
                    t[a].noalias() += (*lions_.aux_jac)[k].transpose() * dxd[a];
                }
            } else {
                const double inv_aux = 1.0 / static_cast<double>(lt.aux_paths.size());
                for (std::size_t ac = 0; ac < lt.aux_paths.size(); ++ac) {
                    const Tensor3 dxd =
                        eval_dx_dmu(c, nn, xk, mu, lt.aux_paths[ac].x[k], "coefficient");
                    for (int a = 0; a < nn; ++a) {
                        t[a].noalias() += inv_aux * (lt.aux_jac[ac][k].transpose() * dxd[a]);
                    }
                }
            }
            const double inv_m = 1.0 / static_cast<double>(law_->M);
            for (int m = 0; m < law_->M; ++m) {
                const Tensor3 dxd = eval_dx_dmu(c, nn, xk, mu,
                                                law_->states[k].row(m).transpose(), "coefficient");
                for (int a = 0; a < nn; ++a) {
                    t[a].noalias() +=
                        inv_m * (lt.particle_lions[m][k].transpose() * dxd[a]);
                }
            }
        }
    }
    slot = std::move(t);
    return *slot;
}

const std::vector<MatSeq>& WeightWorkspace::malliavin_lions(int r) {
    require_lions("the Malliavin field of the Lions tangent");
    auto it = dl_.find(r);
    if (it != dl_.end()) return it->second;
    const int nn = model_->N;
    const int dd = model_->d;
    const MatSeq& lseq = *lions_.lions;
    const MatSeq& dxr = malliavin_state(r);
    const bool forced = !(structure_.hess_all_zero && structure_.dxdmu_all_zero);
    std::vector<MatSeq> per_l;
    per_l.reserve(dd);
    for (int l = 0; l < dd; ++l) {
        const Coefficient& cd = model_->coef[l + 1];
        Eigen::MatrixXd seed = Eigen::MatrixXd::Zero(nn, nn);
        if (!cd.jac_zero) seed = cd.jac_x(path_->x[r], measure(r)) * lseq[r];
        if (!cd.dmu_zero) seed += lions_forcing(r, l + 1);
        ForcingFn fn;
        if (forced) {
            fn = [this, &dxr, l](int k, int i) -> Eigen::MatrixXd {
                const Coefficient& c = model_->coef[i];
                if (c.hess_zero && (c.dmu_zero || c.dxdmu_zero)) return Eigen::MatrixXd();
                return contract_last(lions_sensitivity_tensor(k, i), dxr[k].col(l));
            };
        }
        per_l.push_back(propagate_linear(*model_, *path_, *law_, seed, r + 1, fn));
    }
    return dl_.emplace(r, std::move(per_l)).first->second;
}

const MatSeq& WeightWorkspace::lions_x_variation(int e) {
    require_lions("the x-variation of the Lions tangent");
    if (!lx_) {
        const int nn = model_->N;
        const MatSeq& j = jacobian();
        const Eigen::MatrixXd zero_nn = Eigen::MatrixXd::Zero(nn, nn);
        std::vector<MatSeq> ls;
        ls.reserve(nn);
        for (int e2 = 0; e2 < nn; ++e2) {
            if (structure_.lions_dx_zero()) {
                ls.emplace_back(n_ + 1, zero_nn);
            } else {
                ForcingFn fn = [this, &j, e2](int k, int i) -> Eigen::MatrixXd {
                    const Coefficient& c = model_->coef[i];
                    if (c.hess_zero && (c.dmu_zero || c.dxdmu_zero)) return Eigen::MatrixXd();
                    return contract_last(lions_sensitivity_tensor(k, i), j[k].col(e2));
                };
                ls.push_back(propagate_linear(*model_, *path_, *law_, zero_nn, 0, fn));
            }
        }
        lx_ = std::move(ls);
    }
    return (*lx_)[e];
}

Dep WeightWorkspace::jinv_field_state() const {
    return structure_.jacobian_field_zero() ? Dep::zero : Dep::present;
}

const std::vector<Eigen::MatrixXd>& WeightWorkspace::jinv_field(int r) {
    auto it = jinv_field_.find(r);
    if (it != jinv_field_.end()) return it->second;
    const Eigen::MatrixXd& inv = jacobian_end_inverse().inv;
    const std::vector<MatSeq>& djr = malliavin_jacobian(r);
    std::vector<Eigen::MatrixXd> v(model_->d);
    for (int l = 0; l < model_->d; ++l) v[l] = -inv * djr[l][n_] * inv;
    return jinv_field_.emplace(r, std::move(v)).first->second;
}

Dep WeightWorkspace::jinv_grad_x_state() const {
    return structure_.second_variation_zero() ? Dep::zero : Dep::present;
}

const Eigen::MatrixXd& WeightWorkspace::jinv_grad_x(int e) {
    if (!jinv_grad_x_) {
        const Eigen::MatrixXd& inv = jacobian_end_inverse().inv;
        std::vector<Eigen::MatrixXd> v(model_->N);
        for (int e2 = 0; e2 < model_->N; ++e2) v[e2] = -inv * x_variation(e2)[n_] * inv;
        jinv_grad_x_ = std::move(v);
    }
    return (*jinv_grad_x_)[e];
}

Dep WeightWorkspace::jinv_grad_mu_state() const {
    return structure_.jacobian_lions_zero() ? Dep::zero : Dep::unavailable;
}

const Eigen::MatrixXd& WeightWorkspace::a_matrix() {
    require_lions("the anticipating Lions factor");
    if (!a_) a_ = Eigen::MatrixXd(jacobian_end_inverse().inv * (*lions_.lions)[n_]);
    return *a_;
}

Dep WeightWorkspace::a_field_state() const {
    return (structure_.jacobian_field_zero() && structure_.lions_field_zero()) ? Dep::zero
                                                                               : Dep::present;
}

const std::vector<Eigen::MatrixXd>& WeightWorkspace::a_field(int r) {
    require_lions("the anticipating Lions factor");
    auto it = a_field_.find(r);
    if (it != a_field_.end()) return it->second;
    const int nn = model_->N;
    const Eigen::MatrixXd& inv = jacobian_end_inverse().inv;
    std::vector<Eigen::MatrixXd> v(model_->d, Eigen::MatrixXd::Zero(nn, nn));
    if (!structure_.jacobian_field_zero()) {
        const std::vector<Eigen::MatrixXd>& jf = jinv_field(r);
        for (int l = 0; l < model_->d; ++l) v[l] += jf[l] * (*lions_.lions)[n_];
    }
    if (!structure_.lions_field_zero()) {
        const std::vector<MatSeq>& dlr = malliavin_lions(r);
        for (int l = 0; l < model_->d; ++l) v[l] += inv * dlr[l][n_];
    }
    return a_field_.emplace(r, std::move(v)).first->second;
}

Dep WeightWorkspace::a_grad_x_state() const {
    return (structure_.second_variation_zero() && structure_.lions_dx_zero()) ? Dep::zero
                                                                              : Dep::present;
}

const Eigen::MatrixXd& WeightWorkspace::a_grad_x(int e) {
    require_lions("the anticipating Lions factor");
    if (!a_grad_x_) {
        const int nn = model_->N;
        const Eigen::MatrixXd& inv = jacobian_end_inverse().inv;
        std::vector<Eigen::MatrixXd> v(nn, Eigen::MatrixXd::Zero(nn, nn));
        for (int e2 = 0; e2 < nn; ++e2) {
            if (!structure_.second_variation_zero()) {
                v[e2] += jinv_grad_x(e2) * (*lions_.lions)[n_];
            }
            if (!structure_.lions_dx_zero()) v[e2] += inv * lions_x_variation(e2)[n_];
        }
        a_grad_x_ = std::move(v);
    }
    return (*a_grad_x_)[e];
}

Dep WeightWorkspace::a_grad_v_state() const {
    if (structure_.lions_dv_zero()) return Dep::zero;
    return lions_.lions_dv != nullptr ? Dep::present : Dep::unavailable;
}

const Eigen::MatrixXd& WeightWorkspace::a_grad_v() {
    require_lions("the anticipating Lions factor");
    if (!a_grad_v_) {
        a_grad_v_ =
            Eigen::MatrixXd(jacobian_end_inverse().inv * (*lions_.lions_dv)[n_]);
    }
    return *a_grad_v_;
}

Dep WeightWorkspace::a_grad_mu_state() const {
    return (structure_.jacobian_lions_zero() && structure_.second_lions_zero())
               ? Dep::zero
               : Dep::unavailable;
}

namespace {

void scale_node(WeightNode& w, double s) {
    w.value *= s;
    if (w.field_state == Dep::present) {
        for (auto& row : w.field) row *= s;
    }
    if (w.grad_x_state == Dep::present) w.grad_x *= s;
    if (w.grad_v_state == Dep::present) w.grad_v *= s;
}

WeightNode add_nodes(const WeightNode& a, const WeightNode& b) {
    WeightNode out;
    out.value = a.value + b.value;
    out.order = std::max(a.order, b.order);
    out.field_state = dep_join(a.field_state, b.field_state);
    if (out.field_state == Dep::present) {
        const std::vector<Eigen::RowVectorXd>& src =
            a.field_state == Dep::present ? a.field : b.field;
        out.field = src;
        if (a.field_state == Dep::present && b.field_state == Dep::present) {
            for (std::size_t r = 0; r < out.field.size(); ++r) out.field[r] += b.field[r];
        }
    }
    out.grad_x_state = dep_join(a.grad_x_state, b.grad_x_state);
    if (out.grad_x_state == Dep::present) {
        out.grad_x = a.grad_x_state == Dep::present ? a.grad_x : b.grad_x;
        if (a.grad_x_state == Dep::present && b.grad_x_state == Dep::present) {
            out.grad_x += b.grad_x;
        }
    }
    out.grad_v_state = dep_join(a.grad_v_state, b.grad_v_state);
    if (out.grad_v_state == Dep::present) {
        out.grad_v = a.grad_v_state == Dep::present ? a.grad_v : b.grad_v;
        if (a.grad_v_state == Dep::present && b.grad_v_state == Dep::present) {
            out.grad_v += b.grad_v;
        }
    }
    out.grad_mu_state = dep_join(a.grad_mu_state, b.grad_mu_state);
    return out;
}

WeightNode product_nodes(const WeightNode& a, const WeightNode& b) {
    WeightNode out;
    out.value = a.value * b.value;
    out.order = a.order + b.order;
    out.field_state = dep_join(a.field_state, b.field_state);
    if (out.field_state == Dep::present) {
        const std::size_t n =
            a.field_state == Dep::present ? a.field.size() : b.field.size();
        out.field.resize(n);
        for (std::size_t r = 0; r < n; ++r) {
            Eigen::RowVectorXd row;
            if (a.field_state == Dep::present) {
                row = a.field[r] * b.value;
                if (b.field_state == Dep::present) row += b.field[r] * a.value;
            } else {
                row = b.field[r] * a.value;
            }
            out.field[r] = std::move(row);
        }
    }
    auto mul_grad = [&](Dep sa, const Eigen::VectorXd& ga, Dep sb, const Eigen::VectorXd& gb,
                        Dep& so, Eigen::VectorXd& go) {
        so = dep_join(sa, sb);
        if (so != Dep::present) return;
        if (sa == Dep::present) {
            go = ga * b.value;
            if (sb == Dep::present) go += gb * a.value;
        } else {
            go = gb * a.value;
        }
    };
    mul_grad(a.grad_x_state, a.grad_x, b.grad_x_state, b.grad_x, out.grad_x_state, out.grad_x);
    mul_grad(a.grad_v_state, a.grad_v, b.grad_v_state, b.grad_v, out.grad_v_state, out.grad_v);
    out.grad_mu_state = dep_join(a.grad_mu_state, b.grad_mu_state);
    return out;
}

// Entry (e, i) of J_n^{-1} as a weight node.
WeightNode jinv_entry(WeightWorkspace& ws, int e, int i, const WeightNeeds& needs) {
    WeightNode node;
    node.value = ws.jacobian_end_inverse().inv(e, i);
    const int n = ws.steps();
    const int dd = ws.model().d;
    if (ws.jinv_field_state() == Dep::zero) {
        node.field_state = Dep::zero;
    } else if (needs.field) {
        node.field_state = Dep::present;
        node.field.resize(n);
        for (int r = 0; r < n; ++r) {
            Eigen::RowVectorXd row(dd);
            const std::vector<Eigen::MatrixXd>& jf = ws.jinv_field(r);
            for (int l = 0; l < dd; ++l) row(l) = jf[l](e, i);
            node.field[r] = std::move(row);
        }
    } else {
        node.field_state = Dep::unavailable;
    }
    const int nn = ws.model().N;
    if (ws.jinv_grad_x_state() == Dep::zero) {
        node.grad_x_state = Dep::zero;
    } else if (needs.grad_x || (needs.grad_v && ws.v_is_start())) {
        node.grad_x_state = Dep::present;
        node.grad_x.resize(nn);
        for (int e2 = 0; e2 < nn; ++e2) node.grad_x(e2) = ws.jinv_grad_x(e2)(e, i);
    } else {
        node.grad_x_state = Dep::unavailable;
    }
    if (ws.v_is_start()) {
        node.grad_v_state = node.grad_x_state;
        if (node.grad_v_state == Dep::present) node.grad_v = node.grad_x;
    } else {
        node.grad_v_state = Dep::zero;
    }
    if (!needs.grad_x && node.grad_x_state == Dep::present) node.grad_x_state = Dep::unavailable;
    if (!needs.grad_v && node.grad_v_state == Dep::present) node.grad_v_state = Dep::unavailable;
    node.grad_mu_state = ws.jinv_grad_mu_state();
    return node;
}

// Entry (e, i) of A = J_n^{-1} L_n as a weight node.
WeightNode a_entry(WeightWorkspace& ws, int e, int i, const WeightNeeds& needs) {
    WeightNode node;
    node.value = ws.a_matrix()(e, i);
    const int n = ws.steps();
    const int dd = ws.model().d;
    if (ws.a_field_state() == Dep::zero) {
        node.field_state = Dep::zero;
    } else if (needs.field) {
        node.field_state = Dep::present;
        node.field.resize(n);
        for (int r = 0; r < n; ++r) {
            Eigen::RowVectorXd row(dd);
            const std::vector<Eigen::MatrixXd>& af = ws.a_field(r);
            for (int l = 0; l < dd; ++l) row(l) = af[l](e, i);
            node.field[r] = std::move(row);
        }
    } else {
        node.field_state = Dep::unavailable;
    }
    const int nn = ws.model().N;
    if (ws.a_grad_x_state() == Dep::zero) {
        node.grad_x_state = Dep::zero;
    } else if (needs.grad_x) {
        node.grad_x_state = Dep::present;
        node.grad_x.resize(nn);
        for (int e2 = 0; e2 < nn; ++e2) node.grad_x(e2) = ws.a_grad_x(e2)(e, i);
    } else {
        node.grad_x_state = Dep::unavailable;
    }
    switch (ws.a_grad_v_state()) {
        case Dep::zero:
            node.grad_v_state = Dep::zero;
            break;
        case Dep::present:
            if (needs.grad_v) {
                node.grad_v_state = Dep::present;
                node.grad_v = Eigen::VectorXd::Constant(1, ws.a_grad_v()(e, i));
            } else {
                node.grad_v_state = Dep::unavailable;
            }
            break;
        case Dep::unavailable:
            node.grad_v_state = Dep::unavailable;
            break;
    }
    node.grad_mu_state = ws.a_grad_mu_state();
    return node;
}

// Gaussian-dual Skorohod integral of the e-th elementary integrand column
// scaled by the (possibly anticipating) factor f:
//   delta(f u_e) = f delta_e - h sum_k (D_k f) . u_e(k).
WeightNode skorohod_column(WeightWorkspace& ws, const WeightNode& f, int e,
                           const WeightNeeds& needs) {
    const int n = ws.steps();
    const double h = ws.path().grid.h;
    WeightNode out;
    out.order = f.order;

    if (f.field_state == Dep::unavailable) {
        throw_unavailable("the noise sensitivity needed for the anticipating correction");
    }
    double corr = 0.0;
    if (f.field_state == Dep::present) {
        for (int k = 0; k < n; ++k) corr += f.field[k].dot(ws.sig(k).col(e));
    }
    out.value = f.value * ws.delta_value(e) - h * corr;

    const bool f_rigid = (f.field_state == Dep::zero);
    if (f_rigid && needs.field) {
        out.field_state = Dep::present;
        out.field.resize(n);
        const std::vector<Eigen::RowVectorXd>& df = ws.delta_field(e);
        for (int r = 0; r < n; ++r) out.field[r] = f.value * df[r];
    } else {
        out.field_state = Dep::unavailable;
    }

    auto grad_part = [&](Dep fg_state, const Eigen::VectorXd& fg, Dep d_state, bool wanted,
                         Dep& so, Eigen::VectorXd& go) {
        if (!f_rigid) {
            so = Dep::unavailable;
            return;
        }
        const Dep joined = dep_join(fg_state, d_state);
        if (joined == Dep::zero) {
            so = Dep::zero;
            return;
        }
        if (joined == Dep::unavailable || !wanted) {
            so = Dep::unavailable;
            return;
        }
        so = Dep::present;
        go = Eigen::VectorXd::Zero(ws.model().N);
        if (fg_state == Dep::present) go += fg * ws.delta_value(e);
        if (d_state == Dep::present) go += f.value * ws.delta_grad_x(e);
    };
    grad_part(f.grad_x_state, f.grad_x, ws.delta_grad_x_state(), needs.grad_x, out.grad_x_state,
              out.grad_x);
    const Dep dv_state = ws.v_is_start() ? ws.delta_grad_x_state() : Dep::zero;
    grad_part(f.grad_v_state, f.grad_v, dv_state, needs.grad_v, out.grad_v_state, out.grad_v);

    out.grad_mu_state = (ws.structure().lions_zero() ||
                         (f_rigid && f.grad_mu_state == Dep::zero &&
                          ws.delta_grad_mu_state() == Dep::zero))
                            ? Dep::zero
                            : Dep::unavailable;
    return out;
}

WeightNode apply_bel(WeightWorkspace& ws, const WeightNode& psi, int i, const WeightNeeds& needs) {
    WeightNode out = skorohod_column(ws, psi, i, needs);
    scale_node(out, 1.0 / std::sqrt(ws.horizon()));
    out.order = psi.order + 1;
    return out;
}

WeightNode apply_matrix_bel(WeightWorkspace& ws, const WeightNode& psi, int i, bool lions,
                            const WeightNeeds& needs) {
    if (lions && ws.structure().lions_zero()) {
        // No measure dependence anywhere: the anticipating Lions factor is
        // identically zero and so is the whole integral, with every
        // sensitivity an exact structural zero.
        WeightNode out;
        out.order = psi.order + 1;
        return out;
    }
    const int nn = ws.model().N;
    const WeightNeeds factor_needs{true, needs.grad_x, needs.grad_v, needs.grad_mu};
    WeightNode acc;
    for (int e = 0; e < nn; ++e) {
        const WeightNode entry = lions ? a_entry(ws, e, i, factor_needs)
                                       : jinv_entry(ws, e, i, factor_needs);
        const WeightNode f = product_nodes(entry, psi);
        const WeightNode se = skorohod_column(ws, f, e, needs);
        acc = (e == 0) ? se : add_nodes(acc, se);
    }
    scale_node(acc, 1.0 / std::sqrt(ws.horizon()));
    acc.order = psi.order + 1;
    return acc;
}

WeightNode apply_total_dx(WeightWorkspace& ws, const WeightNode& psi, int i,
                          const WeightNeeds& needs) {
    WeightNode out = apply_bel(ws, psi, i, needs);
    if (psi.grad_x_state == Dep::unavailable) {
        throw_unavailable("the x-gradient of the inner weight");
    }
    if (psi.grad_x_state == Dep::present) {
        WeightNode gpart;
        gpart.value = std::sqrt(ws.horizon()) * psi.grad_x(i);
        gpart.order = psi.order + 1;
        gpart.field_state = Dep::unavailable;
        gpart.grad_x_state = Dep::unavailable;
        gpart.grad_v_state = Dep::unavailable;
        gpart.grad_mu_state =
            ws.structure().lions_zero() ? Dep::zero : Dep::unavailable;
        const int order = out.order;
        out = add_nodes(out, gpart);
        out.order = order;
    }
    return out;
}

WeightNode apply_lions_total(WeightWorkspace& ws, const WeightNode& psi, int i,
                             const WeightNeeds& needs) {
    WeightNode out = apply_matrix_bel(ws, psi, i, true, needs);
    if (psi.grad_mu_state == Dep::unavailable) {
        throw_unavailable("the measure derivative of the inner weight");
    }
    return out;
}

WeightNode apply_step(WeightWorkspace& ws, const WeightNode& psi, const OpStep& step,
                      const WeightNeeds& needs) {
    if (step.index < 0 || step.index >= ws.model().N) {
        throw DimensionError("weight component index out of range");
    }
    switch (step.kind) {
        case OpKind::bel:
            return apply_bel(ws, psi, step.index, needs);
        case OpKind::inverse_flow:
            return apply_matrix_bel(ws, psi, step.index, false, needs);
        case OpKind::total_dx:
            return apply_total_dx(ws, psi, step.index, needs);
        case OpKind::lions_bel:
            return apply_matrix_bel(ws, psi, step.index, true, needs);
        case OpKind::lions_total:
            return apply_lions_total(ws, psi, step.index, needs);
        case OpKind::fixed_point: {
            WeightNode a = apply_total_dx(ws, psi, step.index, needs);
            WeightNode b = apply_lions_total(ws, psi, step.index, needs);
            WeightNode out = add_nodes(a, b);
            out.order = psi.order + 1;
            return out;
        }
    }
    throw ConfigError("unknown weight operator");
}

}  // namespace

WeightNode extend_weight(WeightWorkspace& ws, const WeightNode& base,
                         const std::vector<OpStep>& steps, const WeightNeeds& needs) {
    if (base.order + static_cast<int>(steps.size()) > 2) {
        throw OrderExceededError("weight compositions are supported up to order two");
    }
    // Derive what each intermediate result must carry, outermost first.
    std::vector<WeightNeeds> out_needs(steps.size());
    WeightNeeds cur = needs;
    for (int s = static_cast<int>(steps.size()) - 1; s >= 0; --s) {
        out_needs[s] = cur;
        WeightNeeds in;
        in.field = true;
        in.grad_x = cur.grad_x || steps[s].kind == OpKind::total_dx ||
                    steps[s].kind == OpKind::fixed_point;
        in.grad_v = cur.grad_v;
        in.grad_mu = cur.grad_mu || steps[s].kind == OpKind::lions_total ||
                     steps[s].kind == OpKind::fixed_point;
        cur = in;
    }
    WeightNode node = base;
    for (std::size_t s = 0; s < steps.size(); ++s) {
        node = apply_step(ws, node, steps[s], out_needs[s]);
    }
    return node;
}

WeightNode build_weight(WeightWorkspace& ws, const std::vector<OpStep>& steps,
                        const WeightNeeds& needs) {
    return extend_weight(ws, WeightNode::unit(), steps, needs);
}

std::vector<OpStep> op_chain(OpKind kind, const std::vector<int>& idx) {
    std::vector<OpStep> steps;
    steps.reserve(idx.size());
    for (int i : idx) steps.push_back(OpStep{kind, i});
    return steps;
}

WeightNode bel_weight(WeightWorkspace& ws, const std::vector<int>& alpha,
                      const WeightNeeds& needs) {
    return build_weight(ws, op_chain(OpKind::bel, alpha), needs);
}
WeightNode inverse_flow_weight(WeightWorkspace& ws, const std::vector<int>& alpha,
                               const WeightNeeds& needs) {
    return build_weight(ws, op_chain(OpKind::inverse_flow, alpha), needs);
}
WeightNode total_dx_weight(WeightWorkspace& ws, const std::vector<int>& alpha,
                           const WeightNeeds& needs) {
    return build_weight(ws, op_chain(OpKind::total_dx, alpha), needs);
}
WeightNode lions_bel_weight(WeightWorkspace& ws, const std::vector<int>& beta,
                            const WeightNeeds& needs) {
    return build_weight(ws, op_chain(OpKind::lions_bel, beta), needs);
}
WeightNode lions_total_weight(WeightWorkspace& ws, const std::vector<int>& beta,
                              const WeightNeeds& needs) {
    return build_weight(ws, op_chain(OpKind::lions_total, beta), needs);
}
WeightNode fixed_point_weight(WeightWorkspace& ws, const std::vector<int>& alpha,
                              const WeightNeeds& needs) {
    return build_weight(ws, op_chain(OpKind::fixed_point, alpha), needs);
}

}  // namespace mvmc
