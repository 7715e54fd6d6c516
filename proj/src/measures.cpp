#include "mvmc/measures.hpp"

#include <algorithm>
#include <cmath>

namespace mvmc {

EmpiricalMeasure::EmpiricalMeasure(Eigen::MatrixXd points) : pts(std::move(points)) {
    if (pts.rows() < 1 || pts.cols() < 1) {
        throw DimensionError("empirical measure needs at least one atom and one coordinate");
    }
    mean = pts.colwise().mean();
    second_moment = pts.rowwise().squaredNorm().mean();
}

double EmpiricalMeasure::integrate(
    const std::function<double(const Eigen::VectorXd&)>& phi) const {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
        acc += phi(pts.row(i).transpose());
    }
    return acc / static_cast<double>(pts.rows());
}

EmpiricalMeasure dirac_measure(const Eigen::VectorXd& x) {
    return EmpiricalMeasure(x.transpose());
}

EmpiricalMeasure constant_cloud(const Eigen::VectorXd& x, int m) {
    if (m < 1) throw DimensionError("cloud size must be positive");
    Eigen::MatrixXd pts(m, x.size());
    pts.rowwise() = x.transpose();
    return EmpiricalMeasure(std::move(pts));
}

double wasserstein2_1d(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
    if (a.dim() != 1 || b.dim() != 1) {
        throw DimensionError("wasserstein2_1d is only available for scalar measures");
    }
    if (a.size() != b.size()) {
        throw DimensionError("wasserstein2_1d needs equal atom counts");
    }
    std::vector<double> xs(a.pts.data(), a.pts.data() + a.size());
    std::vector<double> ys(b.pts.data(), b.pts.data() + b.size());
    std::sort(xs.begin(), xs.end());
    std::sort(ys.begin(), ys.end());
    double acc = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double d = xs[i] - ys[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(xs.size()));
}

}  // namespace mvmc
