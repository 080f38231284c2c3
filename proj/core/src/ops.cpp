#include "fine/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numbers>

#include "fine/errors.hpp"

namespace fine::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

using ImplPtr = std::shared_ptr<TensorImpl>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (active_tape() == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

std::vector<double>& grad_of(const ImplPtr& impl) {
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
    return impl->grad;
}

Tensor output(Shape shape, bool track) {
    Tensor out(std::move(shape));
    out.set_requires_grad(track);
    return out;
}

void record(GradTape::Adjoint adjoint) { active_tape()->record(std::move(adjoint)); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

void require_rank2(const Tensor& a, const char* op) {
    if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

std::size_t last_extent(const Tensor& a) { return a.shape().back(); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    const bool track = tracking({&a, &b});
    Tensor out = output({m, n}, track);
    MutMap(out.data().data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
    if (track) {
        record([ai = a.impl(), bi = b.impl(), oi = out.impl(), m, k, n] {
            if (oi->grad.empty()) return;
            ConstMap g(oi->grad.data(), m, n);
            if (ai->requires_grad) {
                MutMap(grad_of(ai).data(), m, k).noalias() += g * ConstMap(bi->data.data(), k, n).transpose();
            }
            if (bi->requires_grad) {
                MutMap(grad_of(bi).data(), k, n).noalias() += ConstMap(ai->data.data(), m, k).transpose() * g;
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_rank2(a, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    const bool track = tracking({&a});
    Tensor out = output({n, m}, track);
    MutMap(out.data().data(), n, m) = ConstMap(a.data().data(), m, n).transpose();
    if (track) {
        record([ai = a.impl(), oi = out.impl(), m, n] {
            if (oi->grad.empty()) return;
            MutMap(grad_of(ai).data(), m, n) += ConstMap(oi->grad.data(), n, m).transpose();
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const bool track = tracking({&a, &b});
    Tensor out = output(a.shape(), track);
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    if (track) {
        record([ai = a.impl(), bi = b.impl(), oi = out.impl()] {
            if (oi->grad.empty()) return;
            for (const ImplPtr& in : {ai, bi}) {
                if (!in->requires_grad) continue;
                auto& g = grad_of(in);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const bool track = tracking({&a, &b});
    Tensor out = output(a.shape(), track);
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    if (track) {
        record([ai = a.impl(), bi = b.impl(), oi = out.impl()] {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) {
                auto& g = grad_of(ai);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                auto& g = grad_of(bi);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= oi->grad[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const bool track = tracking({&a, &b});
    Tensor out = output(a.shape(), track);
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    if (track) {
        record([ai = a.impl(), bi = b.impl(), oi = out.impl()] {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) {
                auto& g = grad_of(ai);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                auto& g = grad_of(bi);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * ai->data[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double factor) {
    const bool track = tracking({&a});
    Tensor out = output(a.shape(), track);
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * factor;
    if (track) {
        record([ai = a.impl(), oi = out.impl(), factor] {
            if (oi->grad.empty()) return;
            auto& g = grad_of(ai);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * factor;
        });
    }
    return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    const std::size_t n = last_extent(x);
    if (bias.rank() != 1 || bias.dim(0) != n) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / n;
    const bool track = tracking({&x, &bias});
    Tensor out = output(x.shape(), track);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] + bias[j];
    }
    if (track) {
        record([xi = x.impl(), bi = bias.impl(), oi = out.impl(), rows, n] {
            if (oi->grad.empty()) return;
            if (xi->requires_grad) {
                auto& g = grad_of(xi);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                auto& g = grad_of(bi);
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < n; ++j) g[j] += oi->grad[r * n + j];
                }
            }
        });
    }
    return out;
}

Tensor add_tiled(const Tensor& x, const Tensor& rows) {
    require_rank2(x, "add_tiled");
    require_rank2(rows, "add_tiled");
    const std::size_t block = rows.numel();
    if (x.dim(1) != rows.dim(1) || x.dim(0) % rows.dim(0) != 0) {
        throw DimensionError("add_tiled: cannot tile " + shape_str(rows.shape()) + " over " + shape_str(x.shape()));
    }
    const std::size_t groups = x.dim(0) / rows.dim(0);
    const bool track = tracking({&x, &rows});
    Tensor out = output(x.shape(), track);
    for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t i = 0; i < block; ++i) out[g * block + i] = x[g * block + i] + rows[i];
    }
    if (track) {
        record([xi = x.impl(), ri = rows.impl(), oi = out.impl(), groups, block] {
            if (oi->grad.empty()) return;
            if (xi->requires_grad) {
                auto& g = grad_of(xi);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
            }
            if (ri->requires_grad) {
                auto& g = grad_of(ri);
                for (std::size_t grp = 0; grp < groups; ++grp) {
                    for (std::size_t i = 0; i < block; ++i) g[i] += oi->grad[grp * block + i];
                }
            }
        });
    }
    return out;
}

Tensor add_per_group(const Tensor& x, const Tensor& per_group) {
    require_rank2(x, "add_per_group");
    require_rank2(per_group, "add_per_group");
    const std::size_t groups = per_group.dim(0), width = per_group.dim(1);
    if (x.dim(1) != width || x.dim(0) % groups != 0) {
        throw DimensionError("add_per_group: cannot broadcast " + shape_str(per_group.shape()) + " over " +
                             shape_str(x.shape()));
    }
    const std::size_t rows_per_group = x.dim(0) / groups;
    const bool track = tracking({&x, &per_group});
    Tensor out = output(x.shape(), track);
    for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t r = 0; r < rows_per_group; ++r) {
            const std::size_t base = (g * rows_per_group + r) * width;
            for (std::size_t j = 0; j < width; ++j) out[base + j] = x[base + j] + per_group[g * width + j];
        }
    }
    if (track) {
        record([xi = x.impl(), pi = per_group.impl(), oi = out.impl(), groups, rows_per_group, width] {
            if (oi->grad.empty()) return;
            if (xi->requires_grad) {
                auto& g = grad_of(xi);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
            }
            if (pi->requires_grad) {
                auto& g = grad_of(pi);
                for (std::size_t grp = 0; grp < groups; ++grp) {
                    for (std::size_t r = 0; r < rows_per_group; ++r) {
                        const std::size_t base = (grp * rows_per_group + r) * width;
                        for (std::size_t j = 0; j < width; ++j) g[grp * width + j] += oi->grad[base + j];
                    }
                }
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& a) {
    const bool track = tracking({&a});
    Tensor out = output({1}, track);
    double total = 0.0;
    for (double v : a.data()) total += v;
    out[0] = total;
    if (track) {
        record([ai = a.impl(), oi = out.impl()] {
            if (oi->grad.empty()) return;
            auto& g = grad_of(ai);
            for (double& v : g) v += oi->grad[0];
        });
    }
    return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    const bool track = tracking({&a, &b});
    Tensor out = output({1}, track);
    const double inv_n = 1.0 / static_cast<double>(a.numel());
    double total = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = a[i] - b[i];
        total += d * d;
    }
    out[0] = total * inv_n;
    if (track) {
        record([ai = a.impl(), bi = b.impl(), oi = out.impl(), inv_n] {
            if (oi->grad.empty()) return;
            const double g0 = oi->grad[0] * 2.0 * inv_n;
            if (ai->requires_grad) {
                auto& g = grad_of(ai);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * (ai->data[i] - bi->data[i]);
            }
            if (bi->requires_grad) {
                auto& g = grad_of(bi);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= g0 * (ai->data[i] - bi->data[i]);
            }
        });
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    const bool track = tracking({&x});
    Tensor out = output(x.shape(), track);
    const std::size_t n = x.numel();
    const double* in = x.data().data();
    double* y = out.data().data();
    // Phi(x) is kept for the adjoint; erf dominates the cost of this op.
    std::vector<double> cdf(n);
    for (std::size_t i = 0; i < n; ++i) {
        cdf[i] = 0.5 * (1.0 + std::erf(in[i] * (std::numbers::sqrt2 / 2.0)));
        y[i] = in[i] * cdf[i];
    }
    if (track) {
        record([xi = x.impl(), oi = out.impl(), cdf = std::move(cdf)] {
            if (oi->grad.empty()) return;
            auto& g = grad_of(xi);
            const double inv_sqrt_2pi = std::numbers::inv_sqrtpi / std::numbers::sqrt2;
            const double* v = xi->data.data();
            const double* dy = oi->grad.data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += dy[i] * (cdf[i] + v[i] * inv_sqrt_2pi * std::exp(-0.5 * v[i] * v[i]));
            }
        });
    }
    return out;
}

Tensor softmax_rows(const Tensor& x, double scale_factor) {
    if (!(scale_factor > 0.0)) throw ContractError("softmax_rows: scale must be positive");
    const std::size_t n = last_extent(x);
    const std::size_t rows = x.numel() / n;
    const bool track = tracking({&x});
    Tensor out = output(x.shape(), track);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * n;
        double* y = out.data().data() + r * n;
        const double peak = *std::max_element(in, in + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(scale_factor * (in[j] - peak));
            total += y[j];
        }
        for (std::size_t j = 0; j < n; ++j) y[j] /= total;
    }
    if (track) {
        record([xi = x.impl(), oi = out.impl(), rows, n, scale_factor] {
            if (oi->grad.empty()) return;
            auto& g = grad_of(xi);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = oi->data.data() + r * n;
                const double* dy = oi->grad.data() + r * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
                for (std::size_t j = 0; j < n; ++j) g[r * n + j] += scale_factor * y[j] * (dy[j] - dot);
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    const std::size_t d = last_extent(x);
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
        throw DimensionError("layer_norm: affine params " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                             " do not match " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    const bool track = tracking({&x, &gain, &bias});
    Tensor out = output(x.shape(), track);
    std::vector<double> normalized(x.numel());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += in[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
        for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (in[j] - mu) * inv_std[r];
            normalized[r * d + j] = xhat;
            out[r * d + j] = xhat * gain[j] + bias[j];
        }
    }
    if (track) {
        record([xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl(), xhat = std::move(normalized),
                inv_std = std::move(inv_std), rows, d] {
            if (oi->grad.empty()) return;
            const auto& dy = oi->grad;
            if (gi->requires_grad || bi->requires_grad) {
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) {
                        if (gi->requires_grad) grad_of(gi)[j] += dy[r * d + j] * xhat[r * d + j];
                        if (bi->requires_grad) grad_of(bi)[j] += dy[r * d + j];
                    }
                }
            }
            if (!xi->requires_grad) return;
            auto& g = grad_of(xi);
            const double inv_d = 1.0 / static_cast<double>(d);
            for (std::size_t r = 0; r < rows; ++r) {
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dxhat = dy[r * d + j] * gi->data[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat[r * d + j];
                }
                for (std::size_t j = 0; j < d; ++j) {
                    const double dxhat = dy[r * d + j] * gi->data[j];
                    g[r * d + j] += inv_std[r] * (dxhat - inv_d * sum_dxhat - inv_d * xhat[r * d + j] * sum_dxhat_xhat);
                }
            }
        });
    }
    return out;
}

Tensor expand_sigma(const Tensor& grouped, std::size_t rank, std::size_t group) {
    if (group == 0 || rank == 0) throw ContractError("expand_sigma: rank and group size must be positive");
    const std::size_t groups = (rank + group - 1) / group;
    if (grouped.rank() != 1 || grouped.dim(0) != groups) {
        throw ContractError("expand_sigma: expected " + std::to_string(groups) + " grouped values for r=" +
                            std::to_string(rank) + ", s=" + std::to_string(group) + ", got " +
                            shape_str(grouped.shape()));
    }
    const bool track = tracking({&grouped});
    Tensor out = output({rank}, track);
    for (std::size_t j = 0; j < rank; ++j) out[j] = grouped[j / group];
    if (track) {
        record([gi = grouped.impl(), oi = out.impl(), rank, group] {
            if (oi->grad.empty()) return;
            auto& g = grad_of(gi);
            for (std::size_t j = 0; j < rank; ++j) g[j / group] += oi->grad[j];
        });
    }
    return out;
}

Tensor scale_columns(const Tensor& m, const Tensor& s) {
    require_rank2(m, "scale_columns");
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    if (s.shape() != Shape{cols}) {
        throw DimensionError("scale_columns: scale " + shape_str(s.shape()) + " does not match " +
                             shape_str(m.shape()));
    }
    const bool track = tracking({&m, &s});
    Tensor out = output(m.shape(), track);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = m[r * cols + c] * s[c];
    }
    if (track) {
        record([mi = m.impl(), si = s.impl(), oi = out.impl(), rows, cols] {
            if (oi->grad.empty()) return;
            if (mi->requires_grad) {
                auto& g = grad_of(mi);
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += oi->grad[r * cols + c] * si->data[c];
                }
            }
            if (si->requires_grad) {
                auto& g = grad_of(si);
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) g[c] += oi->grad[r * cols + c] * mi->data[r * cols + c];
                }
            }
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows) {
    require_rank2(table, "gather_rows");
    const std::size_t width = table.dim(1);
    for (std::size_t r : rows) {
        if (r >= table.dim(0)) {
            throw IndexError("gather_rows: row " + std::to_string(r) + " out of range for " +
                             shape_str(table.shape()));
        }
    }
    const bool track = tracking({&table});
    Tensor out = output({rows.size(), width}, track);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * width), width,
                    out.data().begin() + static_cast<std::ptrdiff_t>(i * width));
    }
    if (track) {
        record([ti = table.impl(), oi = out.impl(), idx = std::vector<std::size_t>(rows.begin(), rows.end()), width] {
            if (oi->grad.empty()) return;
            auto& g = grad_of(ti);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                for (std::size_t j = 0; j < width; ++j) g[idx[i] * width + j] += oi->grad[i * width + j];
            }
        });
    }
    return out;
}

Tensor attention(const Tensor& qkv, std::size_t batch, std::size_t tokens, std::size_t heads) {
    require_rank2(qkv, "attention");
    if (heads == 0 || qkv.dim(0) != batch * tokens || qkv.dim(1) % (3 * heads) != 0) {
        throw DimensionError("attention: packed projection " + shape_str(qkv.shape()) + " incompatible with batch " +
                             std::to_string(batch) + ", tokens " + std::to_string(tokens) + ", heads " +
                             std::to_string(heads));
    }
    using Strided = Eigen::OuterStride<>;
    using ConstView = Eigen::Map<const RowMat, 0, Strided>;
    using MutView = Eigen::Map<RowMat, 0, Strided>;
    const std::size_t width = qkv.dim(1) / 3;
    const std::size_t head_dim = width / heads;
    const double score_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    const Eigen::Index stride = static_cast<Eigen::Index>(3 * width);
    const Eigen::Index tk = static_cast<Eigen::Index>(tokens), hd = static_cast<Eigen::Index>(head_dim);
    const bool track = tracking({&qkv});
    Tensor out = output({batch * tokens, width}, track);

    // probs[b][h] is a tokens x tokens row-stochastic matrix.
    std::vector<double> probs(batch * heads * tokens * tokens);
    const double* in = qkv.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        const double* base = in + b * tokens * 3 * width;
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t qo = h * head_dim, ko = width + qo, vo = 2 * width + qo;
            ConstView q(base + qo, tk, hd, Strided(stride));
            ConstView k(base + ko, tk, hd, Strided(stride));
            ConstView v(base + vo, tk, hd, Strided(stride));
            MutMap p(probs.data() + (b * heads + h) * tokens * tokens, tk, tk);
            p.noalias() = (q * k.transpose()) * score_scale;
            for (Eigen::Index i = 0; i < tk; ++i) {
                const double peak = p.row(i).maxCoeff();
                double total = 0.0;
                for (Eigen::Index j = 0; j < tk; ++j) {
                    p(i, j) = std::exp(p(i, j) - peak);
                    total += p(i, j);
                }
                p.row(i) /= total;
            }
            MutView z(out.data().data() + b * tokens * width + qo, tk, hd, Strided(static_cast<Eigen::Index>(width)));
            z.noalias() = p * v;
        }
    }
    if (track) {
        record([qi = qkv.impl(), oi = out.impl(), probs = std::move(probs), batch, tokens, heads, width, head_dim,
                score_scale, stride, tk, hd] {
            if (oi->grad.empty()) return;
            auto& g = grad_of(qi);
            RowMat dp(tk, tk);
            for (std::size_t b = 0; b < batch; ++b) {
                const double* base = qi->data.data() + b * tokens * 3 * width;
                double* gbase = g.data() + b * tokens * 3 * width;
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t qo = h * head_dim, ko = width + qo, vo = 2 * width + qo;
                    ConstView q(base + qo, tk, hd, Strided(stride));
                    ConstView k(base + ko, tk, hd, Strided(stride));
                    ConstView v(base + vo, tk, hd, Strided(stride));
                    MutView dq(gbase + qo, tk, hd, Strided(stride));
                    MutView dk(gbase + ko, tk, hd, Strided(stride));
                    MutView dv(gbase + vo, tk, hd, Strided(stride));
                    ConstMap p(probs.data() + (b * heads + h) * tokens * tokens, tk, tk);
                    ConstView dz(oi->grad.data() + b * tokens * width + qo, tk, hd,
                                 Strided(static_cast<Eigen::Index>(width)));
                    dv.noalias() += p.transpose() * dz;
                    dp.noalias() = dz * v.transpose();
                    // softmax adjoint, row by row, folded with the score scale
                    for (Eigen::Index i = 0; i < tk; ++i) {
                        const double dot = dp.row(i).dot(p.row(i));
                        dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot) * score_scale).matrix();
                    }
                    dq.noalias() += dp * k;
                    dk.noalias() += dp.transpose() * q;
                }
            }
        });
    }
    return out;
}

Tensor patchify(const Tensor& x, std::size_t patch) {
    if (x.rank() != 4 || x.dim(2) != x.dim(3)) {
        throw DimensionError("patchify: expected [n x c x h x h], got " + shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), c = x.dim(1), side = x.dim(2);
    if (patch == 0 || side % patch != 0) {
        throw ConfigError("patchify: image side " + std::to_string(side) + " not divisible by patch " +
                          std::to_string(patch));
    }
    const std::size_t grid = side / patch, tokens = grid * grid, token_len = c * patch * patch;
    // index map: out position -> in position
    std::vector<std::size_t> source(x.numel());
    for (std::size_t img = 0; img < n; ++img) {
        for (std::size_t gy = 0; gy < grid; ++gy) {
            for (std::size_t gx = 0; gx < grid; ++gx) {
                const std::size_t token = img * tokens + gy * grid + gx;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t py = 0; py < patch; ++py) {
                        for (std::size_t px = 0; px < patch; ++px) {
                            const std::size_t dst = token * token_len + ch * patch * patch + py * patch + px;
                            source[dst] = ((img * c + ch) * side + gy * patch + py) * side + gx * patch + px;
                        }
                    }
                }
            }
        }
    }
    const bool track = tracking({&x});
    Tensor out = output({n * tokens, token_len}, track);
    for (std::size_t i = 0; i < source.size(); ++i) out[i] = x[source[i]];
    if (track) {
        record([xi = x.impl(), oi = out.impl(), source = std::move(source)] {
            if (oi->grad.empty()) return;
            auto& g = grad_of(xi);
            for (std::size_t i = 0; i < source.size(); ++i) g[source[i]] += oi->grad[i];
        });
    }
    return out;
}

Tensor unpatchify(const Tensor& tokens, std::size_t n, std::size_t channels, std::size_t side, std::size_t patch) {
    if (patch == 0 || side % patch != 0) {
        throw ConfigError("unpatchify: image side " + std::to_string(side) + " not divisible by patch " +
                          std::to_string(patch));
    }
    const std::size_t grid = side / patch;
    if (tokens.rank() != 2 || tokens.dim(0) != n * grid * grid || tokens.dim(1) != channels * patch * patch) {
        throw DimensionError("unpatchify: token block " + shape_str(tokens.shape()) + " does not match image shape " +
                             shape_str({n, channels, side, side}) + " with patch " + std::to_string(patch));
    }
    const std::size_t token_len = channels * patch * patch;
    std::vector<std::size_t> target(tokens.numel());
    for (std::size_t img = 0; img < n; ++img) {
        for (std::size_t gy = 0; gy < grid; ++gy) {
            for (std::size_t gx = 0; gx < grid; ++gx) {
                const std::size_t token = img * grid * grid + gy * grid + gx;
                for (std::size_t ch = 0; ch < channels; ++ch) {
                    for (std::size_t py = 0; py < patch; ++py) {
                        for (std::size_t px = 0; px < patch; ++px) {
                            const std::size_t src = token * token_len + ch * patch * patch + py * patch + px;
                            target[src] = ((img * channels + ch) * side + gy * patch + py) * side + gx * patch + px;
                        }
                    }
                }
            }
        }
    }
    const bool track = tracking({&tokens});
    Tensor out = output({n, channels, side, side}, track);
    for (std::size_t i = 0; i < target.size(); ++i) out[target[i]] = tokens[i];
    if (track) {
        record([ti = tokens.impl(), oi = out.impl(), target = std::move(target)] {
            if (oi->grad.empty()) return;
            auto& g = grad_of(ti);
            for (std::size_t i = 0; i < target.size(); ++i) g[i] += oi->grad[target[i]];
        });
    }
    return out;
}

}  // namespace fine::ops
