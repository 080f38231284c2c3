#include "fine/metrics.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "fine/errors.hpp"
#include "fine/factorized.hpp"
#include "fine/rng.hpp"

namespace fine {

namespace {

Eigen::MatrixXd to_matrix(const GaussianStats& s) {
    Eigen::MatrixXd m(s.dim, s.dim);
    for (std::size_t i = 0; i < s.dim; ++i) {
        for (std::size_t j = 0; j < s.dim; ++j) m(i, j) = s.cov[i * s.dim + j];
    }
    return 0.5 * (m + m.transpose());
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
    const Eigen::VectorXd roots = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return eig.eigenvectors() * roots.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    if (a.dim != b.dim || a.mean.size() != a.dim || b.mean.size() != b.dim || a.cov.size() != a.dim * a.dim ||
        b.cov.size() != b.dim * b.dim) {
        throw ContractError("frechet_distance: dimension mismatch (" + std::to_string(a.dim) + " vs " +
                            std::to_string(b.dim) + ")");
    }
    double mean_term = 0.0;
    for (std::size_t i = 0; i < a.dim; ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
    const Eigen::MatrixXd ca = to_matrix(a);
    const Eigen::MatrixXd cb = to_matrix(b);
    const Eigen::MatrixXd root_a = psd_sqrt(ca);
    Eigen::MatrixXd inner = root_a * cb * root_a;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(inner, Eigen::EigenvaluesOnly);
    const double trace_root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double d = mean_term + ca.trace() + cb.trace() - 2.0 * trace_root;
    return std::max(0.0, d);
}

Tensor projection_matrix(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed) {
    Rng rng = Rng(seed).split(0x9E0);
    return random_orthonormal(in_dim, out_dim, rng);
}

GaussianStats feature_stats(const Tensor& samples, const Tensor* projection) {
    if (samples.rank() == 0 || samples.numel() == 0) throw ContractError("feature_stats: no samples");
    const std::size_t n = samples.dim(0);
    const std::size_t flat = samples.numel() / n;
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(samples.data().data(),
                                                                                               n, flat);
    Eigen::MatrixXd features;
    if (projection) {
        if (projection->rank() != 2 || projection->dim(0) != flat) {
            throw DimensionError("feature_stats: projection " + shape_str(projection->shape()) +
                                 " does not match flattened sample size " + std::to_string(flat));
        }
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> p(
            projection->data().data(), projection->dim(0), projection->dim(1));
        features = x * p;
    } else {
        features = x;
    }
    const auto dim = static_cast<std::size_t>(features.cols());
    const Eigen::RowVectorXd mu = features.colwise().mean();
    const Eigen::MatrixXd centered = features.rowwise() - mu;
    const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
    Eigen::MatrixXd cov = (centered.transpose() * centered) / denom;
    cov.diagonal().array() += kCovarianceRidge;

    GaussianStats stats;
    stats.dim = dim;
    stats.mean.assign(mu.data(), mu.data() + dim);
    stats.cov.resize(dim * dim);
    for (std::size_t i = 0; i < dim; ++i) {
        for (std::size_t j = 0; j < dim; ++j) stats.cov[i * dim + j] = cov(i, j);
    }
    return stats;
}

}  // namespace fine
