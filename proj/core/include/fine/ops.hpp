#pragma once

#include <cstddef>
#include <span>

#include "fine/tensor.hpp"

// Differentiable primitives. Every op checks shapes and throws DimensionError
// naming the offending shapes; broadcasting exists only where the name says so
// (bias-add, tiled/grouped row adds, scalar scale).
namespace fine::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

// x[..., n] + bias[n]
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x[(g*T) x D] + rows[T x D], the T-row block repeated for every group g.
Tensor add_tiled(const Tensor& x, const Tensor& rows);
// x[(g*T) x D] + per_group[g x D], row i of per_group added to every row of block i.
Tensor add_per_group(const Tensor& x, const Tensor& per_group);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// mean((a - b)^2)
Tensor mse(const Tensor& a, const Tensor& b);

// Exact x * Phi(x).
Tensor gelu(const Tensor& x);
// Row-wise softmax of scale * x over the last axis, max-subtracted.
Tensor softmax_rows(const Tensor& x, double scale);
inline constexpr double kLayerNormEps = 1e-5;
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

// Output j equals grouped[j / group]; backward sums adjoints within each group.
Tensor expand_sigma(const Tensor& grouped, std::size_t rank, std::size_t group);
// m[r x c] with column j multiplied by s[j] (i.e. m * diag(s)).
Tensor scale_columns(const Tensor& m, const Tensor& s);

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows);

// Multi-head scaled dot-product self-attention over a packed projection.
// qkv is [(batch*tokens) x 3D] with column blocks q | k | v, each split into
// `heads` slices of width D/heads. Returns the concatenated head outputs,
// [(batch*tokens) x D], before the output projection.
Tensor attention(const Tensor& qkv, std::size_t batch, std::size_t tokens, std::size_t heads);

// x[n x c x h x h] -> [(n*T) x (c*p*p)], patches in raster order, each
// flattened as (channel, row, col).
Tensor patchify(const Tensor& x, std::size_t patch);
Tensor unpatchify(const Tensor& tokens, std::size_t n, std::size_t channels, std::size_t side, std::size_t patch);

}  // namespace fine::ops
