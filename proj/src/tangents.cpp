#include "mvmc/tangents.hpp"

#include <cmath>
#include <limits>

namespace mvmc {

ModelStructure analyze_structure(const CoefficientModel& model) {
    ModelStructure s;
    s.jac_diffusion_zero = true;
    s.hess_all_zero = true;
    s.dmu_all_zero = true;
    s.dmu_diffusion_zero = true;
    s.dxdmu_all_zero = true;
    s.dvdmu_all_zero = true;
    s.factored = true;
    for (int i = 0; i <= model.d; ++i) {
        const Coefficient& c = model.coef[i];
        if (i > 0 && !c.jac_zero) s.jac_diffusion_zero = false;
        if (!c.hess_zero) s.hess_all_zero = false;
        if (!c.dmu_zero) {
            s.dmu_all_zero = false;
            if (i > 0) s.dmu_diffusion_zero = false;
            if (!c.factor) {
                s.factored = false;
                s.factor_left_constant = false;
                s.factor_right_constant = false;
            } else {
                s.factor_left_constant = s.factor_left_constant && c.factor->left_constant;
                s.factor_right_constant = s.factor_right_constant && c.factor->right_constant;
            }
        }
        if (!c.dxdmu_zero) s.dxdmu_all_zero = false;
        if (!c.dvdmu_zero) s.dvdmu_all_zero = false;
    }
    return s;
}

Eigen::MatrixXd sigma_dagger(const CoefficientModel& model, const Eigen::VectorXd& x,
                             const EmpiricalMeasure& mu) {
    const Eigen::MatrixXd s = sigma_matrix(model, x, mu);
    const Eigen::MatrixXd g = s * s.transpose();
    Eigen::LDLT<Eigen::MatrixXd> ldlt(g);
    if (ldlt.info() != Eigen::Success) {
        throw ModelEvaluationError("sigma sigma^T is not positive definite at a path state");
    }
    // solve G Z = sigma, then dagger = Z^T
    return ldlt.solve(s).transpose();
}

JacobianInverse invert_jacobian(const Eigen::MatrixXd& j) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(j, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    const double smax = sv(0);
    const double smin = sv(sv.size() - 1);
    const double cond = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
    if (!(cond <= 1e12)) {
        throw SingularJacobianError("flow Jacobian is numerically singular", cond);
    }
    JacobianInverse out;
    out.condition = cond;
    out.inv = svd.matrixV() * sv.cwiseInverse().asDiagonal() * svd.matrixU().transpose();
    return out;
}

MatSeq propagate_linear(const CoefficientModel& model, const PathBundle& path,
                        const ParticleSystemPaths& law, const Eigen::MatrixXd& seed,
                        int seed_step, const ForcingFn& forcing) {
    const int n = path.n_used;
    const int cols = static_cast<int>(seed.cols());
    if (seed_step < 0 || seed_step > n) throw ConfigError("tangent seed step out of range");

    MatSeq y(n + 1, Eigen::MatrixXd::Zero(model.N, cols));
    y[seed_step] = seed;
    Eigen::MatrixXd acc(model.N, cols);
    for (int k = seed_step; k < n; ++k) {
        const Eigen::VectorXd& xk = path.x[k];
        const EmpiricalMeasure& mu = law.measures[path.start_step + k];
        acc = y[k];
        for (int i = 0; i <= model.d; ++i) {
            const double db = (i == 0) ? path.grid.h : path.db[k][i - 1];
            const Coefficient& c = model.coef[i];
            if (!c.jac_zero) {
                acc.noalias() += db * (c.jac_x(xk, mu) * y[k]);
            }
            if (forcing) {
                const Eigen::MatrixXd f = forcing(k, i);
                if (f.size() > 0) acc.noalias() += db * f;
            }
        }
        y[k + 1] = acc;
    }
    return y;
}

MatSeq propagate_jacobian(const CoefficientModel& model, const PathBundle& path,
                          const ParticleSystemPaths& law) {
    return propagate_linear(model, path, law, Eigen::MatrixXd::Identity(model.N, model.N), 0);
}

MatSeq propagate_malliavin_field(const CoefficientModel& model, const PathBundle& path,
                                 const ParticleSystemPaths& law, int r) {
    if (r < 0 || r >= path.n_used) throw ConfigError("Malliavin field node out of range");
    const Eigen::MatrixXd seed =
        sigma_matrix(model, path.x[r], law.measures[path.start_step + r]);
    return propagate_linear(model, path, law, seed, r + 1);
}

PathBundle particle_bundle(const ParticleSystemPaths& law, int m) {
    PathBundle p;
    p.grid = law.grid;
    p.start_step = 0;
    p.n_used = law.grid.n_steps;
    p.x.resize(p.n_used + 1);
    p.db.resize(p.n_used);
    for (int k = 0; k <= p.n_used; ++k) p.x[k] = law.states[k].row(m).transpose();
    for (int k = 0; k < p.n_used; ++k) p.db[k] = law.increments[k].row(m).transpose();
    return p;
}

LawTangents build_law_tangents(const CoefficientModel& model, const ParticleSystemPaths& law,
                               const Eigen::VectorXd& v, std::uint32_t v_index,
                               const BrownianDriver& driver, const LawTangentsOptions& opts) {
    const int n = law.grid.n_steps;
    const int m_count = law.M;
    const int nn = model.N;
    const int dd = model.d;
    const ModelStructure st = analyze_structure(model);

    if (opts.dv_derivatives && nn != 1) {
        throw DimensionError("dv tangents are only shipped for N == 1");
    }

    LawTangents lt;
    lt.v = v;
    lt.v_index = v_index;
    const bool factored = st.factored && !opts.force_generic;
    lt.used_factored = factored;

    const Eigen::MatrixXd zero_nn = Eigen::MatrixXd::Zero(nn, nn);

    // Auxiliary copies started at v with law-level noise.
    lt.aux_paths.resize(opts.n_aux);
    lt.aux_jac.resize(opts.n_aux);
    if (opts.dv_derivatives) lt.aux_second.resize(opts.n_aux);
    for (int c = 0; c < opts.n_aux; ++c) {
        lt.aux_paths[c] = simulate_decoupled(model, v, law, driver,
                                             streams::indexed(streams::aux_system, v_index),
                                             static_cast<std::uint32_t>(c));
        lt.aux_jac[c] = propagate_jacobian(model, lt.aux_paths[c], law);
        if (opts.dv_derivatives) {
            if (st.second_variation_zero()) {
                lt.aux_second[c].assign(n + 1, zero_nn);
            } else {
                const PathBundle& ap = lt.aux_paths[c];
                const MatSeq& aj = lt.aux_jac[c];
                auto forcing = [&](int k, int i) -> Eigen::MatrixXd {
                    const Coefficient& cf = model.coef[i];
                    if (cf.hess_zero) return Eigen::MatrixXd();
                    const Tensor3 h = eval_hess(cf, nn, ap.x[k], law.measures[k], "coefficient");
                    return contract_last(h, aj[k].col(0)) * aj[k];
                };
                lt.aux_second[c] = propagate_linear(model, ap, law, zero_nn, 0, forcing);
            }
        }
    }

    if (opts.particle_jacobians) {
        lt.particle_jac.resize(m_count);
        for (int m = 0; m < m_count; ++m) {
            lt.particle_jac[m] = propagate_jacobian(model, particle_bundle(law, m), law);
        }
    }

    // Per-particle Lions system (coupled through the particle average).
    lt.particle_lions.assign(m_count, MatSeq(n + 1, zero_nn));
    if (opts.dv_derivatives) lt.particle_lions_dv.assign(m_count, MatSeq(n + 1, zero_nn));

    if (st.lions_zero()) return lt;

    if (factored) {
        lt.bracket_R.assign(dd + 1, MatSeq(n, zero_nn));
        lt.bracket_P.assign(dd + 1, MatSeq(n, zero_nn));
        if (opts.dv_derivatives) {
            lt.bracket_Rv.assign(dd + 1, MatSeq(n, zero_nn));
            lt.bracket_Pv.assign(dd + 1, MatSeq(n, zero_nn));
        }
    }

    const double inv_m = 1.0 / static_cast<double>(m_count);
    const double inv_aux = 1.0 / static_cast<double>(opts.n_aux);
    const bool do_dv = opts.dv_derivatives && !st.lions_dv_zero();

    Eigen::MatrixXd acc(nn, nn), accv(nn, nn), fterm(nn, nn), fv(nn, nn);

    for (int k = 0; k < n; ++k) {
        const EmpiricalMeasure& mu = law.measures[k];

        for (int i = 0; i <= dd; ++i) {
            const Coefficient& cf = model.coef[i];
            if (cf.dmu_zero) continue;
            if (factored) {
                // R: tilde average over the auxiliary copies.
                Eigen::MatrixXd r = zero_nn;
                for (int c = 0; c < opts.n_aux; ++c) {
                    r.noalias() +=
                        cf.factor->right(lt.aux_paths[c].x[k]) * lt.aux_jac[c][k];
                }
                lt.bracket_R[i][k] = inv_aux * r;
                // P: particle average of right * L.
                Eigen::MatrixXd p = zero_nn;
                for (int m = 0; m < m_count; ++m) {
                    p.noalias() += cf.factor->right(law.states[k].row(m).transpose()) *
                                   lt.particle_lions[m][k];
                }
                lt.bracket_P[i][k] = inv_m * p;
                if (do_dv) {
                    Eigen::MatrixXd rv = zero_nn;
                    for (int c = 0; c < opts.n_aux; ++c) {
                        const Eigen::VectorXd xa = lt.aux_paths[c].x[k];
                        rv.noalias() +=
                            contract_last(cf.factor->dv_right(xa), lt.aux_jac[c][k].col(0)) *
                            lt.aux_jac[c][k];
                        rv.noalias() += cf.factor->right(xa) * lt.aux_second[c][k];
                    }
                    lt.bracket_Rv[i][k] = inv_aux * rv;
                    Eigen::MatrixXd pv = zero_nn;
                    for (int m = 0; m < m_count; ++m) {
                        pv.noalias() += cf.factor->right(law.states[k].row(m).transpose()) *
                                        lt.particle_lions_dv[m][k];
                    }
                    lt.bracket_Pv[i][k] = inv_m * pv;
                }
            }
        }

        // Step every particle's Lions tangent (and its dv companion).
        for (int m = 0; m < m_count; ++m) {
            const Eigen::VectorXd xm = law.states[k].row(m).transpose();
            acc = lt.particle_lions[m][k];
            if (do_dv) accv = lt.particle_lions_dv[m][k];
            for (int i = 0; i <= dd; ++i) {
                const Coefficient& cf = model.coef[i];
                const double db = (i == 0) ? law.grid.h : law.increments[k](m, i - 1);
                if (!cf.jac_zero) {
                    const Eigen::MatrixXd jac = cf.jac_x(xm, mu);
                    acc.noalias() += db * (jac * lt.particle_lions[m][k]);
                    if (do_dv) accv.noalias() += db * (jac * lt.particle_lions_dv[m][k]);
                }
                if (cf.dmu_zero) continue;
                if (factored) {
                    const Eigen::MatrixXd left = cf.factor->left(xm, mu);
                    fterm.noalias() = left * (lt.bracket_R[i][k] + lt.bracket_P[i][k]);
                    acc.noalias() += db * fterm;
                    if (do_dv) {
                        fv.noalias() = left * (lt.bracket_Rv[i][k] + lt.bracket_Pv[i][k]);
                        accv.noalias() += db * fv;
                    }
                } else {
                    fterm.setZero();
                    if (do_dv) fv.setZero();
                    for (int c = 0; c < opts.n_aux; ++c) {
                        const Eigen::VectorXd xa = lt.aux_paths[c].x[k];
                        const Eigen::MatrixXd dm = eval_dmu(cf, nn, xm, mu, xa);
                        fterm.noalias() += inv_aux * (dm * lt.aux_jac[c][k]);
                        if (do_dv) {
                            fv.noalias() +=
                                inv_aux *
                                (contract_last(eval_dv_dmu(cf, nn, xm, mu, xa, "coefficient"),
                                               lt.aux_jac[c][k].col(0)) *
                                 lt.aux_jac[c][k]);
                            fv.noalias() += inv_aux * (dm * lt.aux_second[c][k]);
                        }
                    }
                    for (int j = 0; j < m_count; ++j) {
                        const Eigen::MatrixXd dm =
                            eval_dmu(cf, nn, xm, mu, law.states[k].row(j).transpose());
                        fterm.noalias() += inv_m * (dm * lt.particle_lions[j][k]);
                        if (do_dv) fv.noalias() += inv_m * (dm * lt.particle_lions_dv[j][k]);
                    }
                    acc.noalias() += db * fterm;
                    if (do_dv) accv.noalias() += db * fv;
                }
            }
            lt.particle_lions[m][k + 1] = acc;
            if (do_dv) lt.particle_lions_dv[m][k + 1] = accv;
        }
    }
    return lt;
}

SampleLions propagate_lions(const CoefficientModel& model, const PathBundle& path,
                            const ParticleSystemPaths& law, const LawTangents& lt,
                            const BrownianDriver& driver, std::uint32_t sample_id,
                            const SampleLionsOptions& opts) {
    const int nn = model.N;
    const ModelStructure st = analyze_structure(model);
    if (opts.dv_derivative && nn != 1) {
        throw DimensionError("dv tangents are only shipped for N == 1");
    }
    if (path.start_step != 0) {
        throw MissingAuxiliaryPathError("Lions tangents need paths started at time 0");
    }

    SampleLions out;
    const Eigen::MatrixXd zero_nn = Eigen::MatrixXd::Zero(nn, nn);

    out.aux = simulate_decoupled(model, lt.v, law, driver,
                                 streams::indexed(streams::aux_sample, lt.v_index), sample_id,
                                 path.n_used, 0);
    out.aux_jac = propagate_jacobian(model, out.aux, law);
    if (opts.dv_derivative) {
        if (st.second_variation_zero()) {
            out.aux_second.assign(path.n_used + 1, zero_nn);
        } else {
            auto forcing = [&](int k, int i) -> Eigen::MatrixXd {
                const Coefficient& cf = model.coef[i];
                if (cf.hess_zero) return Eigen::MatrixXd();
                const Tensor3 h =
                    eval_hess(cf, nn, out.aux.x[k], law.measures[k], "coefficient");
                return contract_last(h, out.aux_jac[k].col(0)) * out.aux_jac[k];
            };
            out.aux_second = propagate_linear(model, out.aux, law, zero_nn, 0, forcing);
        }
    }

    if (st.lions_zero()) {
        out.lions.assign(path.n_used + 1, zero_nn);
        if (opts.dv_derivative) out.lions_dv.assign(path.n_used + 1, zero_nn);
        return out;
    }

    const bool factored = lt.used_factored && !opts.force_generic;
    if (!lt.used_factored && !opts.force_generic && st.factored) {
        throw MissingAuxiliaryPathError(
            "law tangents were built generic; sample tangents must match");
    }
    const int m_count = law.M;
    const double inv_m = 1.0 / static_cast<double>(m_count);

    auto forcing = [&](int k, int i) -> Eigen::MatrixXd {
        const Coefficient& cf = model.coef[i];
        if (cf.dmu_zero) return Eigen::MatrixXd();
        const Eigen::VectorXd& xk = path.x[k];
        const EmpiricalMeasure& mu = law.measures[k];
        if (factored) {
            return cf.factor->left(xk, mu) *
                   (cf.factor->right(out.aux.x[k]) * out.aux_jac[k] + lt.bracket_P[i][k]);
        }
        Eigen::MatrixXd f = eval_dmu(cf, nn, xk, mu, out.aux.x[k]) * out.aux_jac[k];
        for (int j = 0; j < m_count; ++j) {
            f.noalias() += inv_m * (eval_dmu(cf, nn, xk, mu, law.states[k].row(j).transpose()) *
                                    lt.particle_lions[j][k]);
        }
        return f;
    };
    out.lions = propagate_linear(model, path, law, zero_nn, 0, forcing);

    if (opts.dv_derivative) {
        if (st.lions_dv_zero()) {
            out.lions_dv.assign(path.n_used + 1, zero_nn);
        } else {
            auto forcing_dv = [&](int k, int i) -> Eigen::MatrixXd {
                const Coefficient& cf = model.coef[i];
                if (cf.dmu_zero) return Eigen::MatrixXd();
                const Eigen::VectorXd& xk = path.x[k];
                const EmpiricalMeasure& mu = law.measures[k];
                if (factored) {
                    const Eigen::VectorXd xa = out.aux.x[k];
                    Eigen::MatrixXd tilde =
                        contract_last(cf.factor->dv_right(xa), out.aux_jac[k].col(0)) *
                        out.aux_jac[k];
                    tilde.noalias() += cf.factor->right(xa) * out.aux_second[k];
                    return cf.factor->left(xk, mu) * (tilde + lt.bracket_Pv[i][k]);
                }
                const Eigen::VectorXd xa = out.aux.x[k];
                Eigen::MatrixXd f =
                    contract_last(eval_dv_dmu(cf, nn, xk, mu, xa, "coefficient"),
                                  out.aux_jac[k].col(0)) *
                    out.aux_jac[k];
                f.noalias() += eval_dmu(cf, nn, xk, mu, xa) * out.aux_second[k];
                for (int j = 0; j < m_count; ++j) {
                    f.noalias() +=
                        inv_m * (eval_dmu(cf, nn, xk, mu, law.states[k].row(j).transpose()) *
                                 lt.particle_lions_dv[j][k]);
                }
                return f;
            };
            out.lions_dv = propagate_linear(model, path, law, zero_nn, 0, forcing_dv);
        }
    }
    return out;
}

Eigen::MatrixXd transfer_identity_residual(const CoefficientModel& model, const PathBundle& path,
                                           const ParticleSystemPaths& law, int r) {
    const MatSeq j = propagate_jacobian(model, path, law);
    const MatSeq dx = propagate_malliavin_field(model, path, law, r);
    const Eigen::MatrixXd dag =
        sigma_dagger(model, path.x[r], law.measures[path.start_step + r]);
    return j[path.n_used] - dx[path.n_used] * dag * j[r];
}

AggregatedTangents build_aggregated_tangents(const CoefficientModel& model,
                                             const ParticleSystemPaths& law,
                                             const Eigen::VectorXd& weights,
                                             const AggregatedTangentsOptions& opts) {
    const int n = law.grid.n_steps;
    const int m_count = law.M;
    const int nn = model.N;
    const int dd = model.d;
    if (nn != 1) throw DimensionError("aggregated tangents are only shipped for N == 1");
    if (weights.size() != m_count) {
        throw ConfigError("aggregated tangents need one weight per particle");
    }
    const ModelStructure st = analyze_structure(model);

    AggregatedTangents agg;
    agg.weights = weights;
    agg.with_dv = opts.with_dv;
    const bool factored = st.factored && !opts.force_generic;
    agg.used_factored = factored;

    const Eigen::MatrixXd zero_nn = Eigen::MatrixXd::Zero(nn, nn);

    // Each particle's own starting-point sensitivities; these play the role of
    // the auxiliary copy started at v = theta_j.
    agg.particle_jac.resize(m_count);
    for (int m = 0; m < m_count; ++m) {
        agg.particle_jac[m] = propagate_jacobian(model, particle_bundle(law, m), law);
    }
    if (opts.with_dv) {
        agg.particle_second.resize(m_count);
        for (int m = 0; m < m_count; ++m) {
            if (st.second_variation_zero()) {
                agg.particle_second[m].assign(n + 1, zero_nn);
                continue;
            }
            const PathBundle pb = particle_bundle(law, m);
            const MatSeq& pj = agg.particle_jac[m];
            auto forcing = [&](int k, int i) -> Eigen::MatrixXd {
                const Coefficient& cf = model.coef[i];
                if (cf.hess_zero) return Eigen::MatrixXd();
                const Tensor3 h = eval_hess(cf, nn, pb.x[k], law.measures[k], "coefficient");
                return contract_last(h, pj[k].col(0)) * pj[k];
            };
            agg.particle_second[m] = propagate_linear(model, pb, law, zero_nn, 0, forcing);
        }
    }

    agg.lions.assign(m_count, MatSeq(n + 1, zero_nn));
    if (opts.with_dv) agg.lions_dv.assign(m_count, MatSeq(n + 1, zero_nn));
    if (st.lions_zero()) return agg;

    if (factored) {
        agg.bracket_R.assign(dd + 1, MatSeq(n, zero_nn));
        agg.bracket_P.assign(dd + 1, MatSeq(n, zero_nn));
        if (opts.with_dv) {
            agg.bracket_Rv.assign(dd + 1, MatSeq(n, zero_nn));
            agg.bracket_Pv.assign(dd + 1, MatSeq(n, zero_nn));
        }
    }

    const double inv_m = 1.0 / static_cast<double>(m_count);
    const bool do_dv = opts.with_dv && !st.lions_dv_zero();

    Eigen::MatrixXd acc(nn, nn), accv(nn, nn), fterm(nn, nn), fv(nn, nn);

    for (int k = 0; k < n; ++k) {
        const EmpiricalMeasure& mu = law.measures[k];

        for (int i = 0; i <= dd && factored; ++i) {
            const Coefficient& cf = model.coef[i];
            if (cf.dmu_zero) continue;
            Eigen::MatrixXd r = zero_nn;
            Eigen::MatrixXd p = zero_nn;
            for (int j = 0; j < m_count; ++j) {
                const Eigen::VectorXd xj = law.states[k].row(j).transpose();
                r.noalias() += weights(j) * (cf.factor->right(xj) * agg.particle_jac[j][k]);
                p.noalias() += cf.factor->right(xj) * agg.lions[j][k];
            }
            agg.bracket_R[i][k] = r;
            agg.bracket_P[i][k] = inv_m * p;
            if (do_dv) {
                Eigen::MatrixXd rv = zero_nn;
                Eigen::MatrixXd pv = zero_nn;
                for (int j = 0; j < m_count; ++j) {
                    const Eigen::VectorXd xj = law.states[k].row(j).transpose();
                    rv.noalias() +=
                        weights(j) *
                        (contract_last(cf.factor->dv_right(xj), agg.particle_jac[j][k].col(0)) *
                         agg.particle_jac[j][k]);
                    rv.noalias() +=
                        weights(j) * (cf.factor->right(xj) * agg.particle_second[j][k]);
                    pv.noalias() += cf.factor->right(xj) * agg.lions_dv[j][k];
                }
                agg.bracket_Rv[i][k] = rv;
                agg.bracket_Pv[i][k] = inv_m * pv;
            }
        }

        for (int m = 0; m < m_count; ++m) {
            const Eigen::VectorXd xm = law.states[k].row(m).transpose();
            acc = agg.lions[m][k];
            if (do_dv) accv = agg.lions_dv[m][k];
            for (int i = 0; i <= dd; ++i) {
                const Coefficient& cf = model.coef[i];
                const double db = (i == 0) ? law.grid.h : law.increments[k](m, i - 1);
                if (!cf.jac_zero) {
                    const Eigen::MatrixXd jac = cf.jac_x(xm, mu);
                    acc.noalias() += db * (jac * agg.lions[m][k]);
                    if (do_dv) accv.noalias() += db * (jac * agg.lions_dv[m][k]);
                }
                if (cf.dmu_zero) continue;
                if (factored) {
                    const Eigen::MatrixXd left = cf.factor->left(xm, mu);
                    fterm.noalias() = left * (agg.bracket_R[i][k] + agg.bracket_P[i][k]);
                    acc.noalias() += db * fterm;
                    if (do_dv) {
                        fv.noalias() = left * (agg.bracket_Rv[i][k] + agg.bracket_Pv[i][k]);
                        accv.noalias() += db * fv;
                    }
                } else {
                    fterm.setZero();
                    if (do_dv) fv.setZero();
                    for (int j = 0; j < m_count; ++j) {
                        const Eigen::VectorXd xj = law.states[k].row(j).transpose();
                        const Eigen::MatrixXd dm = eval_dmu(cf, nn, xm, mu, xj);
                        fterm.noalias() += weights(j) * (dm * agg.particle_jac[j][k]);
                        fterm.noalias() += inv_m * (dm * agg.lions[j][k]);
                        if (do_dv) {
                            fv.noalias() +=
                                weights(j) *
                                (contract_last(eval_dv_dmu(cf, nn, xm, mu, xj, "coefficient"),
                                               agg.particle_jac[j][k].col(0)) *
                                 agg.particle_jac[j][k]);
                            fv.noalias() += weights(j) * (dm * agg.particle_second[j][k]);
                            fv.noalias() += inv_m * (dm * agg.lions_dv[j][k]);
                        }
                    }
                    acc.noalias() += db * fterm;
                    if (do_dv) accv.noalias() += db * fv;
                }
            }
            agg.lions[m][k + 1] = acc;
            if (do_dv) agg.lions_dv[m][k + 1] = accv;
        }
    }
    return agg;
}

AggregatedSampleLions propagate_aggregated_lions(const CoefficientModel& model,
                                                 const PathBundle& path,
                                                 const ParticleSystemPaths& law,
                                                 const AggregatedTangents& agg) {
    const int nn = model.N;
    if (nn != 1) throw DimensionError("aggregated tangents are only shipped for N == 1");
    if (path.start_step != 0) {
        throw MissingAuxiliaryPathError("Lions tangents need paths started at time 0");
    }
    const ModelStructure st = analyze_structure(model);
    const Eigen::MatrixXd zero_nn = Eigen::MatrixXd::Zero(nn, nn);

    AggregatedSampleLions out;
    if (st.lions_zero()) {
        out.lions.assign(path.n_used + 1, zero_nn);
        if (agg.with_dv) out.lions_dv.assign(path.n_used + 1, zero_nn);
        return out;
    }

    const int m_count = law.M;
    const double inv_m = 1.0 / static_cast<double>(m_count);

    auto forcing = [&](int k, int i) -> Eigen::MatrixXd {
        const Coefficient& cf = model.coef[i];
        if (cf.dmu_zero) return Eigen::MatrixXd();
        const Eigen::VectorXd& xk = path.x[k];
        const EmpiricalMeasure& mu = law.measures[k];
        if (agg.used_factored) {
            return cf.factor->left(xk, mu) * (agg.bracket_R[i][k] + agg.bracket_P[i][k]);
        }
        Eigen::MatrixXd f = zero_nn;
        for (int j = 0; j < m_count; ++j) {
            const Eigen::VectorXd xj = law.states[k].row(j).transpose();
            const Eigen::MatrixXd dm = eval_dmu(cf, nn, xk, mu, xj);
            f.noalias() += agg.weights(j) * (dm * agg.particle_jac[j][k]);
            f.noalias() += inv_m * (dm * agg.lions[j][k]);
        }
        return f;
    };
    out.lions = propagate_linear(model, path, law, zero_nn, 0, forcing);

    if (agg.with_dv) {
        if (st.lions_dv_zero()) {
            out.lions_dv.assign(path.n_used + 1, zero_nn);
            return out;
        }
        auto forcing_dv = [&](int k, int i) -> Eigen::MatrixXd {
            const Coefficient& cf = model.coef[i];
            if (cf.dmu_zero) return Eigen::MatrixXd();
            const Eigen::VectorXd& xk = path.x[k];
            const EmpiricalMeasure& mu = law.measures[k];
            if (agg.used_factored) {
                return cf.factor->left(xk, mu) * (agg.bracket_Rv[i][k] + agg.bracket_Pv[i][k]);
            }
            Eigen::MatrixXd f = zero_nn;
            for (int j = 0; j < m_count; ++j) {
                const Eigen::VectorXd xj = law.states[k].row(j).transpose();
                const Eigen::MatrixXd dm = eval_dmu(cf, nn, xk, mu, xj);
                f.noalias() +=
                    agg.weights(j) *
                    (contract_last(eval_dv_dmu(cf, nn, xk, mu, xj, "coefficient"),
                                   agg.particle_jac[j][k].col(0)) *
                     agg.particle_jac[j][k]);
                f.noalias() += agg.weights(j) * (dm * agg.particle_second[j][k]);
                f.noalias() += inv_m * (dm * agg.lions_dv[j][k]);
            }
            return f;
        };
        out.lions_dv = propagate_linear(model, path, law, zero_nn, 0, forcing_dv);
    }
    return out;
}

}  // namespace mvmc
