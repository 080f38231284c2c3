#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "fine/rng.hpp"
#include "fine/tensor.hpp"

namespace fine {

// The four per-block weight roles. Weights act on row vectors: x[.. x m1] * W[m1 x m2].
enum class FamilyKind { qkv = 0, o = 1, in = 2, out = 3 };

inline constexpr std::array<FamilyKind, 4> kFamilyKinds = {FamilyKind::qkv, FamilyKind::o, FamilyKind::in,
                                                           FamilyKind::out};

std::string_view family_name(FamilyKind kind);
FamilyKind family_from_name(std::string_view name);

struct FamilyShape {
    std::size_t rows;  // m1
    std::size_t cols;  // m2
};

// qkv -> (D, 3D), o -> (D, D), in -> (D, D'), out -> (D', D)
FamilyShape family_shape(FamilyKind kind, std::size_t width, std::size_t hidden);

inline std::size_t sigma_group_count(std::size_t rank, std::size_t group) { return (rank + group - 1) / group; }

// Largest rank every family admits.
std::size_t max_shared_rank(std::size_t width, std::size_t hidden);
// Half of max_shared_rank, at least 1.
std::size_t default_rank(std::size_t width, std::size_t hidden);

// Shared U[m1 x r], V[m2 x r] plus one grouped singular-value vector per layer.
// Layer weights exist only as materialize(l) = U * diag(expand(sigma[l])) * V^T.
struct FactorizedFamily {
    FamilyKind kind = FamilyKind::qkv;
    std::size_t rank = 0;
    std::size_t group = 1;
    Tensor U;
    Tensor V;
    std::vector<Tensor> sigma;

    std::size_t depth() const { return sigma.size(); }
    Tensor expanded_sigma(std::size_t layer) const;
    Tensor materialize(std::size_t layer) const;
    void freeze_factors(bool frozen);
};

using FamilySet = std::array<FactorizedFamily, 4>;

// Column-orthonormal U, V from seeded Gaussian draws; sigma groups ~ N(0, 1/r).
FamilySet init_shared_factors(std::size_t width, std::size_t hidden, std::size_t rank, std::size_t group,
                              std::size_t depth, Rng& rng);

// Orthonormalizes the columns of a seeded Gaussian [rows x cols] matrix (Householder QR, sign-fixed).
Tensor random_orthonormal(std::size_t rows, std::size_t cols, Rng& rng);

struct LearngeneMeta {
    std::size_t width = 0;
    std::size_t hidden = 0;
    std::size_t rank = 0;
    std::size_t group = 1;
    std::size_t condensation_steps = 0;
    std::uint64_t seed = 0;
    std::uint32_t format_version = 1;
};

// The depth-agnostic part of a factorized model: the four (U, V) pairs.
struct Learngene {
    std::array<Tensor, 4> U;
    std::array<Tensor, 4> V;
    LearngeneMeta meta;

    const Tensor& u(FamilyKind kind) const { return U[static_cast<std::size_t>(kind)]; }
    const Tensor& v(FamilyKind kind) const { return V[static_cast<std::size_t>(kind)]; }
    // "U_qkv", "V_qkv", ... in family order.
    std::vector<NamedTensor> named_tensors() const;
};

Learngene extract_learngene(const FamilySet& families, LearngeneMeta meta);

struct ParamCount {
    std::size_t total = 0;
    std::size_t transferred = 0;
    std::size_t trainable_at_init = 0;
};

// Sum over families of r * (m1 + m2).
std::size_t learngene_param_count(std::size_t width, std::size_t hidden, std::size_t rank);

ParamCount count_params(const Learngene& learngene);

}  // namespace fine
