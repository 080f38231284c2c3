#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fine/metrics.hpp"
#include "fine/ops.hpp"
#include "fine/rng.hpp"
#include "fine/tensor.hpp"

namespace fine::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = scale * rng.normal();
    return t;
}

// |a - b| / max(|a|, |b|, floor), maximized over entries.
inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-6) {
    double worst = a.size() == b.size() ? 0.0 : INFINITY;
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

// max |a - b| / max |b|, for whole gradient tensors.
inline double norm_rel_error(const std::vector<double>& a, const std::vector<double>& b) {
    double scale = 0.0;
    for (double v : b) scale = std::max(scale, std::abs(v));
    double worst = a.size() == b.size() ? 0.0 : INFINITY;
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst / std::max(scale, 1e-300);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double worst = a.size() == b.size() ? 0.0 : INFINITY;
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Analytic gradients of loss(inputs) from the tape versus central differences
// (eps 1e-5) for every input; returns the worst relative error.
inline double gradcheck(const LossFn& loss, const std::vector<Tensor>& inputs) {
    std::vector<Tensor> live;
    for (const Tensor& x : inputs) {
        Tensor c = x.clone();
        c.set_requires_grad(true);
        live.push_back(c);
    }
    {
        GradTape tape;
        TapeScope scope(tape);
        const Tensor l = loss(live);
        tape.backward(l);
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < live.size(); ++i) {
        const Tensor numeric = finite_diff_grad(
            [&](const Tensor& xi) {
                std::vector<Tensor> args = inputs;
                args[i] = xi;
                return loss(args).item();
            },
            inputs[i]);
        const std::vector<double> analytic = live[i].has_grad() ? live[i].grad() : std::vector<double>(inputs[i].numel());
        worst = std::max(worst, max_rel_error(analytic, numeric.values()));
    }
    return worst;
}

// Scalarizes a tensor-valued op by a fixed random weighting.
inline Tensor weighted_sum(const Tensor& y, const Tensor& w) { return ops::sum(ops::mul(y, w)); }

inline std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a[i * k + p] * b[p * n + j];
    return out;
}

// Cyclic Jacobi rotations on a symmetric row-major n x n matrix; eigenvalues ascending.
inline std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t n) {
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (apq == 0.0) continue;
                const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
    std::sort(eig.begin(), eig.end());
    return eig;
}

inline GaussianStats random_gaussian(std::size_t dim, Rng& rng) {
    GaussianStats g;
    g.dim = dim;
    for (std::size_t i = 0; i < dim; ++i) g.mean.push_back(rng.normal());
    std::vector<double> a(dim * dim);
    for (double& v : a) v = rng.normal();
    g.cov.assign(dim * dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i)
        for (std::size_t j = 0; j < dim; ++j)
            for (std::size_t k = 0; k < dim; ++k) g.cov[i * dim + j] += a[i * dim + k] * a[j * dim + k] / dim;
    return g;
}

// Frechet through a Cholesky factor: Ca Cb is similar to L^T Cb L for Ca = L L^T.
inline double frechet_oracle(const GaussianStats& a, const GaussianStats& b) {
    const std::size_t n = a.dim;
    std::vector<double> l(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            double s = a.cov[i * n + j];
            for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
            l[i * n + j] = i == j ? std::sqrt(s) : s / l[j * n + j];
        }
    std::vector<double> m(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < n; ++p)
                for (std::size_t q = 0; q < n; ++q) m[i * n + j] += l[p * n + i] * b.cov[p * n + q] * l[q * n + j];
    double root = 0.0;
    for (double e : jacobi_eigenvalues(m, n)) root += std::sqrt(std::max(e, 0.0));
    double out = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        out += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
        out += a.cov[i * n + i] + b.cov[i * n + i];
    }
    return out - 2.0 * root;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("fine_test_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace fine::test
