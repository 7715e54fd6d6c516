#include "mvmc/simulate.hpp"

#include <cmath>

namespace mvmc {

InitialSampler InitialSampler::delta(const Eigen::VectorXd& x) {
    InitialSampler s;
    s.kind = Kind::delta;
    s.point = x;
    return s;
}

InitialSampler InitialSampler::normal(const Eigen::VectorXd& mean, const Eigen::VectorXd& std) {
    InitialSampler s;
    s.kind = Kind::normal;
    s.point = mean;
    s.scale = std;
    return s;
}

InitialSampler InitialSampler::uniform(const Eigen::VectorXd& lo, const Eigen::VectorXd& width) {
    InitialSampler s;
    s.kind = Kind::uniform;
    s.point = lo;
    s.scale = width;
    return s;
}

Eigen::MatrixXd InitialSampler::sample(int m, int n, const BrownianDriver& driver) const {
    if (point.size() != n) throw DimensionError("initial sampler dimension mismatch");
    Eigen::MatrixXd out(m, n);
    for (int i = 0; i < m; ++i) {
        for (int c = 0; c < n; ++c) {
            double val = point[c];
            switch (kind) {
                case Kind::delta:
                    break;
                case Kind::normal:
                    val += scale[c] * driver.gaussian(streams::initial, static_cast<std::uint32_t>(i),
                                                      0, static_cast<std::uint32_t>(c));
                    break;
                case Kind::uniform:
                    val += scale[c] * driver.uniform(streams::initial, static_cast<std::uint32_t>(i),
                                                     0, static_cast<std::uint32_t>(c));
                    break;
            }
            out(i, c) = val;
        }
    }
    if (shift.size() == n) out.rowwise() += shift.transpose();
    return out;
}

namespace {

EmpiricalMeasure make_prepared(const CoefficientModel& model, Eigen::MatrixXd pts) {
    EmpiricalMeasure mu(std::move(pts));
    prepare_measure(model, mu);
    return mu;
}

}  // namespace

ParticleSystemPaths simulate_particles(const CoefficientModel& model,
                                       const Eigen::MatrixXd& theta0, const TimeGrid& grid,
                                       const BrownianDriver& driver, int start_step,
                                       std::uint32_t particle_id_offset) {
    const int m = static_cast<int>(theta0.rows());
    if (m < 2) throw ConfigError("particle system needs at least 2 particles");
    if (theta0.cols() != model.N) throw DimensionError("initial cloud dimension mismatch");
    if (start_step < 0 || start_step >= grid.n_steps) throw ConfigError("bad start step");

    ParticleSystemPaths out;
    out.grid = grid;
    out.M = m;
    out.states.resize(grid.n_steps + 1);
    out.measures.resize(grid.n_steps + 1);
    out.increments.resize(grid.n_steps);

    out.states[start_step] = theta0;
    out.measures[start_step] = make_prepared(model, theta0);

    Eigen::MatrixXd next(m, model.N);
    for (int k = start_step; k < grid.n_steps; ++k) {
        const EmpiricalMeasure& mu = out.measures[k];
        Eigen::MatrixXd db(m, model.d);
        for (int p = 0; p < m; ++p) {
            db.row(p) = driver
                            .increment(streams::law, particle_id_offset + p, k, model.d, grid.h)
                            .transpose();
        }
        for (int p = 0; p < m; ++p) {
            const Eigen::VectorXd xp = out.states[k].row(p).transpose();
            Eigen::VectorXd xn = xp + grid.h * model.drift().value(xp, mu);
            for (int i = 0; i < model.d; ++i) {
                xn += db(p, i) * model.diffusion(i).value(xp, mu);
            }
            next.row(p) = xn.transpose();
        }
        if (!next.allFinite()) {
            throw BlowUpError("particle system state became non-finite", k + 1);
        }
        out.states[k + 1] = next;
        out.measures[k + 1] = make_prepared(model, next);
        out.increments[k] = db;
    }
    return out;
}

PathBundle simulate_decoupled(const CoefficientModel& model, const Eigen::VectorXd& x0,
                              const ParticleSystemPaths& law, const BrownianDriver& driver,
                              std::uint32_t stream, std::uint32_t path_id, int n_use,
                              int start_step) {
    const int n_total = law.grid.n_steps;
    if (n_use < 0) n_use = n_total - start_step;
    if (start_step < 0 || start_step + n_use > n_total) {
        throw ConfigError("decoupled horizon exceeds the law path");
    }
    if (x0.size() != model.N) throw DimensionError("initial state dimension mismatch");

    PathBundle out;
    out.grid = law.grid;
    out.start_step = start_step;
    out.n_used = n_use;
    out.x.resize(n_use + 1);
    out.db.resize(n_use);
    out.x[0] = x0;

    for (int j = 0; j < n_use; ++j) {
        const int k = start_step + j;
        const EmpiricalMeasure& mu = law.measures[k];
        const Eigen::VectorXd db = driver.increment(stream, path_id, k, model.d, law.grid.h);
        Eigen::VectorXd xn = out.x[j] + law.grid.h * model.drift().value(out.x[j], mu);
        for (int i = 0; i < model.d; ++i) {
            xn += db[i] * model.diffusion(i).value(out.x[j], mu);
        }
        if (!xn.allFinite()) throw BlowUpError("decoupled state became non-finite", k + 1);
        out.x[j + 1] = xn;
        out.db[j] = db;
    }
    return out;
}

ParticleSystemPaths simulate_fixed_point(const CoefficientModel& model, const Eigen::VectorXd& x,
                                         int m, const TimeGrid& grid,
                                         const BrownianDriver& driver) {
    if (m < 2) throw ConfigError("fixed-point regime needs at least 2 particles");
    Eigen::MatrixXd theta0(m, x.size());
    theta0.rowwise() = x.transpose();
    return simulate_particles(model, theta0, grid, driver);
}

}  // namespace mvmc
