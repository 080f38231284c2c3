#include "fine/factorized.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

#include "fine/errors.hpp"
#include "fine/ops.hpp"

namespace fine {

std::string_view family_name(FamilyKind kind) {
    switch (kind) {
        case FamilyKind::qkv:
            return "qkv";
        case FamilyKind::o:
            return "o";
        case FamilyKind::in:
            return "in";
        case FamilyKind::out:
            return "out";
    }
    return "?";
}

FamilyKind family_from_name(std::string_view name) {
    for (FamilyKind kind : kFamilyKinds) {
        if (family_name(kind) == name) return kind;
    }
    throw ContractError("unknown weight family '" + std::string(name) + "'");
}

FamilyShape family_shape(FamilyKind kind, std::size_t width, std::size_t hidden) {
    switch (kind) {
        case FamilyKind::qkv:
            return {width, 3 * width};
        case FamilyKind::o:
            return {width, width};
        case FamilyKind::in:
            return {width, hidden};
        case FamilyKind::out:
            return {hidden, width};
    }
    return {0, 0};
}

std::size_t max_shared_rank(std::size_t width, std::size_t hidden) {
    std::size_t r = SIZE_MAX;
    for (FamilyKind kind : kFamilyKinds) {
        const FamilyShape s = family_shape(kind, width, hidden);
        r = std::min(r, std::min(s.rows, s.cols));
    }
    return r;
}

std::size_t default_rank(std::size_t width, std::size_t hidden) {
    return std::max<std::size_t>(1, max_shared_rank(width, hidden) / 2);
}

Tensor FactorizedFamily::expanded_sigma(std::size_t layer) const {
    if (layer >= sigma.size()) {
        throw IndexError("layer " + std::to_string(layer) + " out of range for depth " + std::to_string(sigma.size()));
    }
    return ops::expand_sigma(sigma[layer], rank, group);
}

Tensor FactorizedFamily::materialize(std::size_t layer) const {
    return ops::matmul(ops::scale_columns(U, expanded_sigma(layer)), ops::transpose(V));
}

void FactorizedFamily::freeze_factors(bool frozen) {
    U.set_requires_grad(!frozen);
    V.set_requires_grad(!frozen);
}

Tensor random_orthonormal(std::size_t rows, std::size_t cols, Rng& rng) {
    if (cols > rows) {
        throw ConfigError("cannot draw " + std::to_string(cols) + " orthonormal columns in dimension " +
                          std::to_string(rows));
    }
    Eigen::MatrixXd gaussian(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) gaussian(i, j) = rng.normal();
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
    const Eigen::MatrixXd& r = qr.matrixQR();
    Tensor out({rows, cols});
    for (std::size_t j = 0; j < cols; ++j) {
        const double sign = r(j, j) < 0.0 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < rows; ++i) out.at(i, j) = sign * q(i, j);
    }
    return out;
}

FamilySet init_shared_factors(std::size_t width, std::size_t hidden, std::size_t rank, std::size_t group,
                              std::size_t depth, Rng& rng) {
    const std::size_t limit = max_shared_rank(width, hidden);
    if (rank == 0 || rank > limit) {
        throw ConfigError("rank " + std::to_string(rank) + " outside [1, " + std::to_string(limit) +
                          "] for width " + std::to_string(width) + ", hidden " + std::to_string(hidden));
    }
    if (group == 0 || group > rank) {
        throw ConfigError("sigma group size " + std::to_string(group) + " outside [1, rank=" + std::to_string(rank) +
                          "]");
    }
    if (depth == 0) throw ConfigError("depth must be at least 1");

    const double sigma_sd = 1.0 / std::sqrt(static_cast<double>(rank));
    FamilySet families;
    for (FamilyKind kind : kFamilyKinds) {
        Rng family_rng = rng.split(static_cast<std::uint64_t>(kind));
        const FamilyShape shape = family_shape(kind, width, hidden);
        FactorizedFamily& f = families[static_cast<std::size_t>(kind)];
        f.kind = kind;
        f.rank = rank;
        f.group = group;
        Rng u_rng = family_rng.split(1);
        Rng v_rng = family_rng.split(2);
        Rng s_rng = family_rng.split(3);
        f.U = random_orthonormal(shape.rows, rank, u_rng);
        f.V = random_orthonormal(shape.cols, rank, v_rng);
        f.U.set_requires_grad(true);
        f.V.set_requires_grad(true);
        const std::size_t groups = sigma_group_count(rank, group);
        for (std::size_t l = 0; l < depth; ++l) {
            Tensor s({groups});
            for (double& v : s.data()) v = sigma_sd * s_rng.normal();
            s.set_requires_grad(true);
            f.sigma.push_back(s);
        }
    }
    return families;
}

std::vector<NamedTensor> Learngene::named_tensors() const {
    std::vector<NamedTensor> out;
    for (FamilyKind kind : kFamilyKinds) {
        const std::string suffix(family_name(kind));
        out.push_back({"U_" + suffix, u(kind)});
        out.push_back({"V_" + suffix, v(kind)});
    }
    return out;
}

Learngene extract_learngene(const FamilySet& families, LearngeneMeta meta) {
    Learngene lg;
    for (FamilyKind kind : kFamilyKinds) {
        const FactorizedFamily& f = families[static_cast<std::size_t>(kind)];
        if (f.kind != kind) throw ContractError("family set out of order");
        if (f.rank != meta.rank || f.group != meta.group) {
            throw ContractError("family " + std::string(family_name(kind)) + " has r=" + std::to_string(f.rank) +
                                ", s=" + std::to_string(f.group) + " but metadata says r=" +
                                std::to_string(meta.rank) + ", s=" + std::to_string(meta.group));
        }
        const FamilyShape shape = family_shape(kind, meta.width, meta.hidden);
        if (f.U.shape() != Shape{shape.rows, meta.rank} || f.V.shape() != Shape{shape.cols, meta.rank}) {
            throw ContractError("family " + std::string(family_name(kind)) + " factor shapes " +
                                shape_str(f.U.shape()) + "/" + shape_str(f.V.shape()) +
                                " inconsistent with width " + std::to_string(meta.width) + ", hidden " +
                                std::to_string(meta.hidden));
        }
        Tensor u = f.U.clone();
        Tensor v = f.V.clone();
        u.set_requires_grad(false);
        v.set_requires_grad(false);
        lg.U[static_cast<std::size_t>(kind)] = u;
        lg.V[static_cast<std::size_t>(kind)] = v;
    }
    lg.meta = meta;
    return lg;
}

std::size_t learngene_param_count(std::size_t width, std::size_t hidden, std::size_t rank) {
    std::size_t total = 0;
    for (FamilyKind kind : kFamilyKinds) {
        const FamilyShape s = family_shape(kind, width, hidden);
        total += rank * (s.rows + s.cols);
    }
    return total;
}

ParamCount count_params(const Learngene& learngene) {
    const std::size_t n = learngene_param_count(learngene.meta.width, learngene.meta.hidden, learngene.meta.rank);
    return {n, n, 0};
}

}  // namespace fine
