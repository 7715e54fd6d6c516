#pragma once

#include "mvmc/errors.hpp"

namespace mvmc {

// Uniform time grid on [0, t_end] with n_steps steps of width h = t_end / n_steps.
struct TimeGrid {
    double t_end = 0.0;
    int n_steps = 0;
    double h = 0.0;

    TimeGrid() = default;
    TimeGrid(double t, int n) : t_end(t), n_steps(n) {
        if (!(t > 0.0)) throw ConfigError("time horizon must be positive");
        if (n < 1) throw ConfigError("step count must be at least 1");
        h = t / static_cast<double>(n);
    }

    double time(int k) const { return t_end * static_cast<double>(k) / static_cast<double>(n_steps); }
};

}  // namespace mvmc
