#pragma once

#include <Eigen/Dense>
#include <vector>

#include "mvmc/brownian.hpp"
#include "mvmc/grid.hpp"
#include "mvmc/model.hpp"

namespace mvmc {

// How the initial cloud / initial point is drawn.
struct InitialSampler {
    enum class Kind { delta, normal, uniform };
    Kind kind = Kind::delta;
    Eigen::VectorXd point;  // delta: the point; normal: the mean; uniform: lower corner
    Eigen::VectorXd scale;  // normal: per-coordinate std; uniform: per-coordinate width
    Eigen::VectorXd shift;  // added to every draw (finite-difference bumps); may be empty

    static InitialSampler delta(const Eigen::VectorXd& x);
    static InitialSampler normal(const Eigen::VectorXd& mean, const Eigen::VectorXd& std);
    static InitialSampler uniform(const Eigen::VectorXd& lo, const Eigen::VectorXd& width);

    // M x N matrix of initial positions, drawn from the `initial` stream.
    Eigen::MatrixXd sample(int m, int n, const BrownianDriver& driver) const;
};

// Interacting particle system on a uniform grid. states[k] holds the particle
// positions at node k (one row per particle); measures[k] is the matching
// empirical measure with the model's atoms prepared; increments[k] holds the
// Brownian increments used for the step k -> k+1 (one row per particle).
struct ParticleSystemPaths {
    TimeGrid grid;
    int M = 0;
    std::vector<Eigen::MatrixXd> states;
    std::vector<EmpiricalMeasure> measures;
    std::vector<Eigen::MatrixXd> increments;
};

// Euler scheme for the interacting system, driven by the `law` stream.
// start_step > 0 continues from the given states at that node (the flow
// property: restarting at node k with the stored states reproduces the tail
// bit for bit, because increments are a pure function of (seed, particle, k)).
ParticleSystemPaths simulate_particles(const CoefficientModel& model,
                                       const Eigen::MatrixXd& theta0, const TimeGrid& grid,
                                       const BrownianDriver& driver, int start_step = 0,
                                       std::uint32_t particle_id_offset = 0);

// One decoupled path: the state follows the frozen empirical law of `law`.
struct PathBundle {
    TimeGrid grid;
    int start_step = 0;               // grid node of x[0]
    int n_used = 0;                   // steps actually simulated
    std::vector<Eigen::VectorXd> x;   // n_used + 1 states; x[j] sits at node start_step + j
    std::vector<Eigen::VectorXd> db;  // n_used increments
};

// Simulate a decoupled path started at x0 (at node start_step) for n_use steps
// (-1 = to the end of the grid), reading noise from (stream, path_id).
PathBundle simulate_decoupled(const CoefficientModel& model, const Eigen::VectorXd& x0,
                              const ParticleSystemPaths& law, const BrownianDriver& driver,
                              std::uint32_t stream, std::uint32_t path_id, int n_use = -1,
                              int start_step = 0);

// Particle system for the fixed-point regime: every particle starts at x.
ParticleSystemPaths simulate_fixed_point(const CoefficientModel& model, const Eigen::VectorXd& x,
                                         int m, const TimeGrid& grid,
                                         const BrownianDriver& driver);

}  // namespace mvmc
