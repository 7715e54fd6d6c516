#include "mvmc/brownian.hpp"

#include <array>
#include <cmath>

namespace mvmc {

namespace {

struct U32x4 {
    std::uint32_t v[4];
};

inline void philox_round(U32x4& ctr, std::uint32_t k0, std::uint32_t k1) {
    constexpr std::uint64_t M0 = 0xD2511F53ull;
    constexpr std::uint64_t M1 = 0xCD9E8D57ull;
    const std::uint64_t p0 = M0 * ctr.v[0];
    const std::uint64_t p1 = M1 * ctr.v[2];
    const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
    const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
    U32x4 out;
    out.v[0] = hi1 ^ ctr.v[1] ^ k0;
    out.v[1] = lo1;
    out.v[2] = hi0 ^ ctr.v[3] ^ k1;
    out.v[3] = lo0;
    ctr = out;
}

// Philox4x32-10: ten rounds with the Weyl key schedule.
inline U32x4 philox10(U32x4 ctr, std::uint32_t k0, std::uint32_t k1) {
    constexpr std::uint32_t W0 = 0x9E3779B9u;
    constexpr std::uint32_t W1 = 0xBB67AE85u;
    for (int r = 0; r < 10; ++r) {
        philox_round(ctr, k0, k1);
        k0 += W0;
        k1 += W1;
    }
    return ctr;
}

}  // namespace

std::uint64_t BrownianDriver::bits(std::uint32_t stream, std::uint32_t path, std::uint32_t step,
                                   std::uint32_t coord) const {
    U32x4 ctr{{step, path, coord, stream}};
    const U32x4 out = philox10(ctr, static_cast<std::uint32_t>(seed_),
                               static_cast<std::uint32_t>(seed_ >> 32));
    return (static_cast<std::uint64_t>(out.v[0]) << 32) | out.v[1];
}

double BrownianDriver::uniform(std::uint32_t stream, std::uint32_t path, std::uint32_t step,
                               std::uint32_t coord) const {
    const std::uint64_t x = bits(stream, path, step, coord);
    // 53 random bits mapped strictly inside (0, 1).
    return static_cast<double>(x >> 11) * 0x1.0p-53 + 0x1.0p-54;
}

double BrownianDriver::gaussian(std::uint32_t stream, std::uint32_t path, std::uint32_t step,
                                std::uint32_t coord) const {
    return inverse_normal_cdf(uniform(stream, path, step, coord));
}

Eigen::VectorXd BrownianDriver::increment(std::uint32_t stream, std::uint32_t path, int step,
                                          int d, double h) const {
    Eigen::VectorXd z(d);
    const double s = std::sqrt(h);
    for (int i = 0; i < d; ++i) {
        z[i] = s * gaussian(stream, path, static_cast<std::uint32_t>(step),
                            static_cast<std::uint32_t>(i));
    }
    return z;
}

double inverse_normal_cdf(double p) {
    // Rational approximation (relative error ~1e-9) refined by one Halley step
    // against the erfc-based CDF, which brings it to machine precision.
    static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                    -2.759285104469687e+02, 1.383577518672690e+02,
                                    -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                    -1.556989798598866e+02, 6.680131188771972e+01,
                                    -1.328068155288572e+01};
    static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                    -2.400758277161838e+00, -2.549732539343734e+00,
                                    4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                    2.445134137142996e+00, 3.754408661907416e+00};
    constexpr double p_low = 0.02425;

    double x;
    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - p_low) {
        const double q = p - 0.5;
        const double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log1p(-p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }

    const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
    const double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
    x = x - u / (1.0 + x * u / 2.0);
    return x;
}

}  // namespace mvmc
