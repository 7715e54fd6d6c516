#pragma once

#include <Eigen/Dense>
#include <cstdint>

namespace mvmc {

// Stream identifiers for the counter-based generator. Every consumer of
// randomness owns a distinct stream so that draws never collide and any path
// can be regenerated in isolation.
namespace streams {
constexpr std::uint32_t law = 1;         // interacting particle system, path id = particle
constexpr std::uint32_t decoupled = 2;   // decoupled Monte-Carlo paths, path id = sample
constexpr std::uint32_t initial = 3;     // initial-condition sampling, path id = particle
constexpr std::uint32_t aux_system = 4;  // law-level auxiliary copy paths, one per v
constexpr std::uint32_t aux_sample = 5;  // per-sample auxiliary copy paths

// Auxiliary streams are indexed by which element of the v-list they serve.
inline std::uint32_t indexed(std::uint32_t purpose, std::uint32_t v_index) {
    return (purpose << 16) | (v_index & 0xFFFFu);
}
}  // namespace streams

// Counter-based Gaussian source (Philox4x32-10 under the hood). A draw is a
// pure function of (seed, stream, path, step, coord), so simulations are
// reproducible regardless of evaluation order or thread count, and any stream
// can be replayed without generating the others.
class BrownianDriver {
public:
    explicit BrownianDriver(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t seed() const { return seed_; }

    // Raw 64 uniform bits for the given counter position.
    std::uint64_t bits(std::uint32_t stream, std::uint32_t path, std::uint32_t step,
                       std::uint32_t coord) const;

    // Uniform draw in the open interval (0, 1).
    double uniform(std::uint32_t stream, std::uint32_t path, std::uint32_t step,
                   std::uint32_t coord) const;

    // Standard normal draw.
    double gaussian(std::uint32_t stream, std::uint32_t path, std::uint32_t step,
                    std::uint32_t coord) const;

    // Brownian increment over a step of width h: sqrt(h) * (d independent normals).
    Eigen::VectorXd increment(std::uint32_t stream, std::uint32_t path, int step, int d,
                              double h) const;

private:
    std::uint64_t seed_;
};

// Inverse standard normal CDF, accurate to ~1e-15 (rational initial guess plus
// one Newton/Halley refinement). Exposed for tests.
double inverse_normal_cdf(double p);

}  // namespace mvmc
