#include "fine/dit.hpp"

#include <cmath>

#include "fine/errors.hpp"
#include "fine/ops.hpp"

namespace fine {

std::string_view backing_name(Backing backing) { return backing == Backing::plain ? "plain" : "factorized"; }

Backing backing_from_name(std::string_view name) {
    if (name == "plain") return Backing::plain;
    if (name == "factorized") return Backing::factorized;
    throw ConfigError("unknown backing '" + std::string(name) + "' (expected plain or factorized)");
}

void DiTConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("DiT config: " + msg); };
    if (image_size == 0 || channels == 0 || patch == 0 || width == 0 || hidden == 0 || heads == 0) {
        fail("extents must be positive");
    }
    if (image_size % patch != 0) {
        fail("image side " + std::to_string(image_size) + " not divisible by patch " + std::to_string(patch));
    }
    if (width % heads != 0) {
        fail("width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
    }
    if (depth == 0) fail("depth must be at least 1");
    if (time_features < 2 || time_features % 2 != 0) fail("time_features must be even and >= 2");
    if (diffusion_steps == 0) fail("diffusion_steps must be positive");
    if (backing == Backing::factorized) {
        const std::size_t limit = max_shared_rank(width, hidden);
        if (rank == 0 || rank > limit) {
            fail("rank " + std::to_string(rank) + " outside [1, " + std::to_string(limit) + "]");
        }
        if (group == 0 || group > rank) {
            fail("sigma group size " + std::to_string(group) + " outside [1, " + std::to_string(rank) + "]");
        }
    }
}

namespace {

Tensor param(Shape shape, double fill = 0.0) {
    Tensor t(std::move(shape), fill);
    t.set_requires_grad(true);
    return t;
}

}  // namespace

DiTModel::DiTModel(DiTConfig config) : config_(config) {
    config_.validate();
    const std::size_t d = config_.width;
    patch_weight = param({config_.token_len(), d});
    patch_bias = param({d});
    pos_embed = param({config_.tokens(), d});
    time_weight = param({config_.time_features, d});
    time_bias = param({d});
    class_table = param({config_.num_classes + 1, d});
    final_gain = param({d}, 1.0);
    final_bias = param({d});
    head_weight = param({d, config_.token_len()});
    head_bias = param({config_.token_len()});
    blocks.resize(config_.depth);
    for (BlockParams& b : blocks) {
        b.ln1_gain = param({d}, 1.0);
        b.ln1_bias = param({d});
        b.qkv_bias = param({3 * d});
        b.o_bias = param({d});
        b.ln2_gain = param({d}, 1.0);
        b.ln2_bias = param({d});
        b.in_bias = param({config_.hidden});
        b.out_bias = param({d});
        if (config_.backing == Backing::plain) {
            for (FamilyKind kind : kFamilyKinds) {
                const FamilyShape s = family_shape(kind, d, config_.hidden);
                b.weight[static_cast<std::size_t>(kind)] = param({s.rows, s.cols});
            }
        }
    }
    if (config_.backing == Backing::factorized) {
        for (FamilyKind kind : kFamilyKinds) {
            FactorizedFamily& f = families[static_cast<std::size_t>(kind)];
            const FamilyShape s = family_shape(kind, d, config_.hidden);
            f.kind = kind;
            f.rank = config_.rank;
            f.group = config_.group;
            f.U = param({s.rows, config_.rank});
            f.V = param({s.cols, config_.rank});
            for (std::size_t l = 0; l < config_.depth; ++l) {
                f.sigma.push_back(param({sigma_group_count(config_.rank, config_.group)}));
            }
        }
    }
}

Tensor DiTModel::block_weight(std::size_t layer, FamilyKind kind) const {
    if (layer >= blocks.size()) {
        throw IndexError("layer " + std::to_string(layer) + " out of range for depth " + std::to_string(blocks.size()));
    }
    if (config_.backing == Backing::factorized) return families[static_cast<std::size_t>(kind)].materialize(layer);
    return blocks[layer].weight[static_cast<std::size_t>(kind)];
}

Shape DiTModel::sample_shape() const { return {config_.channels, config_.image_size, config_.image_size}; }

Tensor timestep_features(std::span<const int> t, std::size_t features) {
    const std::size_t half = features / 2;
    Tensor out({t.size(), features});
    for (std::size_t i = 0; i < t.size(); ++i) {
        for (std::size_t k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
            const double angle = static_cast<double>(t[i]) * freq;
            out[i * features + k] = std::cos(angle);
            out[i * features + half + k] = std::sin(angle);
        }
    }
    return out;
}

Tensor attention_block(const Tensor& hseq, const Tensor& w_qkv, const Tensor& qkv_bias, const Tensor& w_o,
                       const Tensor& o_bias, std::size_t heads, std::size_t batch) {
    if (hseq.rank() != 2 || batch == 0 || hseq.dim(0) % batch != 0) {
        throw DimensionError("attention_block: sequence " + shape_str(hseq.shape()) + " does not split into " +
                             std::to_string(batch) + " sequences");
    }
    const std::size_t d = hseq.dim(1);
    if (w_qkv.shape() != Shape{d, 3 * d} || w_o.shape() != Shape{d, d}) {
        throw DimensionError("attention_block: weights " + shape_str(w_qkv.shape()) + "/" + shape_str(w_o.shape()) +
                             " do not match width " + std::to_string(d));
    }
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("attention_block: width " + std::to_string(d) + " not divisible by " +
                             std::to_string(heads) + " heads");
    }
    const Tensor qkv = ops::add_bias(ops::matmul(hseq, w_qkv), qkv_bias);
    const Tensor z = ops::attention(qkv, batch, hseq.dim(0) / batch, heads);
    return ops::add_bias(ops::matmul(z, w_o), o_bias);
}

Tensor attention_block(const Tensor& hseq, const Tensor& w_qkv, const Tensor& w_o, std::size_t heads,
                       std::size_t batch) {
    const std::size_t d = hseq.rank() == 2 ? hseq.dim(1) : 1;
    return attention_block(hseq, w_qkv, Tensor({3 * d}), w_o, Tensor({d}), heads, batch);
}

Tensor pff_block(const Tensor& u, const Tensor& w_in, const Tensor& b1, const Tensor& w_out, const Tensor& b2) {
    if (u.rank() != 2 || w_in.rank() != 2 || w_out.rank() != 2 || w_in.dim(0) != u.dim(1) ||
        w_out.dim(0) != w_in.dim(1) || w_out.dim(1) != u.dim(1)) {
        throw DimensionError("pff_block: shapes " + shape_str(u.shape()) + ", W_in " + shape_str(w_in.shape()) +
                             ", W_out " + shape_str(w_out.shape()) + " are incompatible");
    }
    return ops::add_bias(ops::matmul(ops::gelu(ops::add_bias(ops::matmul(u, w_in), b1)), w_out), b2);
}

Tensor DiTModel::forward(const Tensor& z_t, std::span<const int> t, std::span<const int> class_ids,
                         ForwardTrace* trace) const {
    const DiTConfig& c = config_;
    if (z_t.rank() != 4 || z_t.dim(1) != c.channels || z_t.dim(2) != c.image_size || z_t.dim(3) != c.image_size) {
        throw DimensionError("forward: input " + shape_str(z_t.shape()) + " does not match model image shape " +
                             shape_str({c.channels, c.image_size, c.image_size}));
    }
    const std::size_t n = z_t.dim(0);
    if (t.size() != n || class_ids.size() != n) {
        throw ContractError("forward: expected " + std::to_string(n) + " timesteps and class ids, got " +
                            std::to_string(t.size()) + " and " + std::to_string(class_ids.size()));
    }
    std::vector<std::size_t> class_rows(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (t[i] < 0 || static_cast<std::size_t>(t[i]) >= c.diffusion_steps) {
            throw ContractError("forward: timestep " + std::to_string(t[i]) + " outside [0, " +
                                std::to_string(c.diffusion_steps) + ")");
        }
        if (class_ids[i] == kUnconditional) {
            class_rows[i] = c.num_classes;
        } else if (class_ids[i] < 0 || static_cast<std::size_t>(class_ids[i]) >= c.num_classes) {
            throw ContractError("forward: class id " + std::to_string(class_ids[i]) + " outside [0, " +
                                std::to_string(c.num_classes) + ")");
        } else {
            class_rows[i] = static_cast<std::size_t>(class_ids[i]);
        }
    }

    Tensor h = ops::add_bias(ops::matmul(ops::patchify(z_t, c.patch), patch_weight), patch_bias);
    h = ops::add_tiled(h, pos_embed);
    const Tensor time_emb = ops::add_bias(ops::matmul(timestep_features(t, c.time_features), time_weight), time_bias);
    h = ops::add_per_group(h, ops::add(time_emb, ops::gather_rows(class_table, class_rows)));

    if (trace) trace->weights.assign(blocks.size(), {});
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const BlockParams& b = blocks[l];
        const Tensor w_qkv = block_weight(l, FamilyKind::qkv);
        const Tensor w_o = block_weight(l, FamilyKind::o);
        const Tensor w_in = block_weight(l, FamilyKind::in);
        const Tensor w_out = block_weight(l, FamilyKind::out);
        if (trace) trace->weights[l] = {w_qkv, w_o, w_in, w_out};
        h = ops::add(h, attention_block(ops::layer_norm(h, b.ln1_gain, b.ln1_bias), w_qkv, b.qkv_bias, w_o, b.o_bias,
                                        c.heads, n));
        h = ops::add(h, pff_block(ops::layer_norm(h, b.ln2_gain, b.ln2_bias), w_in, b.in_bias, w_out, b.out_bias));
    }
    const Tensor out = ops::add_bias(ops::matmul(ops::layer_norm(h, final_gain, final_bias), head_weight), head_bias);
    return ops::unpatchify(out, n, c.channels, c.image_size, c.patch);
}

Tensor DiTModel::forward(const Tensor& z_t, int t, std::optional<int> class_id) const {
    if (z_t.rank() != 3) throw DimensionError("forward: expected [c x h x h], got " + shape_str(z_t.shape()));
    const Tensor batch = z_t.reshaped({1, z_t.dim(0), z_t.dim(1), z_t.dim(2)});
    const int ts[1] = {t};
    const int cls[1] = {class_id.value_or(kUnconditional)};
    const Tensor out = forward(batch, ts, cls);
    return out.reshaped(z_t.shape());
}

std::vector<NamedTensor> DiTModel::parameters() const {
    std::vector<NamedTensor> out = {
        {"patch.weight", patch_weight}, {"patch.bias", patch_bias},   {"pos_embed", pos_embed},
        {"time.weight", time_weight},   {"time.bias", time_bias},     {"class_embed", class_table},
    };
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const BlockParams& b = blocks[l];
        const std::string p = "blocks." + std::to_string(l) + ".";
        out.push_back({p + "ln1.gain", b.ln1_gain});
        out.push_back({p + "ln1.bias", b.ln1_bias});
        out.push_back({p + "qkv.bias", b.qkv_bias});
        out.push_back({p + "o.bias", b.o_bias});
        out.push_back({p + "ln2.gain", b.ln2_gain});
        out.push_back({p + "ln2.bias", b.ln2_bias});
        out.push_back({p + "in.bias", b.in_bias});
        out.push_back({p + "out.bias", b.out_bias});
        if (config_.backing == Backing::plain) {
            for (FamilyKind kind : kFamilyKinds) {
                out.push_back({p + std::string(family_name(kind)) + ".weight", b.weight[static_cast<std::size_t>(kind)]});
            }
        }
    }
    if (config_.backing == Backing::factorized) {
        for (const FactorizedFamily& f : families) {
            const std::string p = "factors." + std::string(family_name(f.kind)) + ".";
            out.push_back({p + "U", f.U});
            out.push_back({p + "V", f.V});
            for (std::size_t l = 0; l < f.sigma.size(); ++l) out.push_back({p + "sigma." + std::to_string(l), f.sigma[l]});
        }
    }
    out.push_back({"final.gain", final_gain});
    out.push_back({"final.bias", final_bias});
    out.push_back({"head.weight", head_weight});
    out.push_back({"head.bias", head_bias});
    return out;
}

std::vector<Tensor> DiTModel::sigma_parameters() const {
    std::vector<Tensor> out;
    if (config_.backing != Backing::factorized) return out;
    for (const FactorizedFamily& f : families) out.insert(out.end(), f.sigma.begin(), f.sigma.end());
    return out;
}

DiTModel DiTModel::clone() const {
    DiTModel copy(config_);
    const auto src = parameters();
    const auto dst = copy.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
        std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), dst[i].tensor.impl()->data.begin());
        dst[i].tensor.impl()->requires_grad = src[i].tensor.requires_grad();
    }
    copy.transferred_params = transferred_params;
    return copy;
}

void DiTModel::set_trainable(bool trainable) {
    for (NamedTensor& p : parameters()) p.tensor.set_requires_grad(trainable);
}

void init_fresh_embeddings(DiTModel& model, Rng& rng) {
    auto he = [&](Tensor& w) {
        const double sd = std::sqrt(2.0 / static_cast<double>(w.dim(0)));
        for (double& v : w.data()) v = sd * rng.normal();
    };
    auto table = [&](Tensor& w) {
        for (double& v : w.data()) v = 0.02 * rng.normal();
    };
    auto fill = [](Tensor& w, double value) { std::fill(w.data().begin(), w.data().end(), value); };
    he(model.patch_weight);
    fill(model.patch_bias, 0.0);
    table(model.pos_embed);
    he(model.time_weight);
    fill(model.time_bias, 0.0);
    table(model.class_table);
    fill(model.final_gain, 1.0);
    fill(model.final_bias, 0.0);
    he(model.head_weight);
    fill(model.head_bias, 0.0);
}

ParamCount count_params(const DiTModel& model) {
    ParamCount count;
    for (const NamedTensor& p : model.parameters()) count.total += p.tensor.numel();
    const DiTConfig& c = model.config();
    if (c.backing == Backing::factorized) {
        count.transferred = model.transferred_params.value_or(learngene_param_count(c.width, c.hidden, c.rank));
        count.trainable_at_init = 4 * c.depth * sigma_group_count(c.rank, c.group);
    } else {
        count.transferred = model.transferred_params.value_or(0);
        count.trainable_at_init = count.total;
    }
    return count;
}

}  // namespace fine
