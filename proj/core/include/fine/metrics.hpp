#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fine/tensor.hpp"

namespace fine {

// Mean and covariance of a feature distribution; cov is row-major dim x dim.
struct GaussianStats {
    std::size_t dim = 0;
    std::vector<double> mean;
    std::vector<double> cov;
};

inline constexpr std::size_t kProjectionDim = 64;
inline constexpr double kCovarianceRidge = 1e-6;

// ||mu_a - mu_b||^2 + tr(Ca + Cb - 2 (Ca Cb)^(1/2)). The trace of the root is
// taken from the eigenvalues of Ca^(1/2) Cb Ca^(1/2), negatives clipped to 0.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

// Column-orthonormal [in_dim x out_dim] matrix from a fixed seed.
Tensor projection_matrix(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed);

// Flattens samples [n x ...], optionally multiplies by a projection, and fits
// mean and (n-1)-normalized covariance plus kCovarianceRidge * I.
GaussianStats feature_stats(const Tensor& samples, const Tensor* projection = nullptr);

}  // namespace fine
