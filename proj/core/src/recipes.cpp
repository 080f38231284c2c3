#include "fine/recipes.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "fine/errors.hpp"
#include "fine/optim.hpp"

namespace fine {

namespace {

constexpr std::uint64_t kDataStreamTag = 0xDA7A;
constexpr std::uint64_t kNoiseTag = 0x0153;

std::vector<Tensor> all_tensors(const DiTModel& model) {
    std::vector<Tensor> out;
    for (const NamedTensor& p : model.parameters()) out.push_back(p.tensor);
    return out;
}

void zero_biases_unit_norms(DiTModel& model) {
    auto fill = [](Tensor& t, double v) { std::fill(t.data().begin(), t.data().end(), v); };
    for (BlockParams& b : model.blocks) {
        fill(b.ln1_gain, 1.0);
        fill(b.ln1_bias, 0.0);
        fill(b.qkv_bias, 0.0);
        fill(b.o_bias, 0.0);
        fill(b.ln2_gain, 1.0);
        fill(b.ln2_bias, 0.0);
        fill(b.in_bias, 0.0);
        fill(b.out_bias, 0.0);
    }
}

void copy_values(const Tensor& from, Tensor& to) {
    if (from.shape() != to.shape()) {
        throw IncompatibleError("cannot copy " + shape_str(from.shape()) + " into " + shape_str(to.shape()));
    }
    std::copy(from.data().begin(), from.data().end(), to.data().begin());
}

std::size_t steps_seed_tag(std::uint64_t seed) { return static_cast<std::size_t>(mix64(seed ^ kDataStreamTag)); }

}  // namespace

TrainStats train(DiTModel& model, const DeskDataset& data, const TrainConfig& config, const DiffusionSchedule& sched,
                 EmaModel* ema, const StepCallback& on_step) {
    if (model.config().diffusion_steps != sched.steps()) {
        throw IncompatibleError("model expects " + std::to_string(model.config().diffusion_steps) +
                                " diffusion steps, schedule has " + std::to_string(sched.steps()));
    }
    BatchStream stream(data, std::min(config.batch, data.size()), steps_seed_tag(config.seed));
    Rng noise_rng = Rng(config.seed).split(kNoiseTag);
    AdamW optimizer(all_tensors(model), {.lr = config.lr, .weight_decay = config.weight_decay});
    TrainStats stats;
    stats.curve.reserve(config.steps);
    double last_finite = 0.0;
    for (std::size_t step = 0; step < config.steps; ++step) {
        const Batch batch = stream.next();
        GradTape tape;
        double value = 0.0;
        {
            TapeScope scope(tape);
            const Tensor loss = ddpm_loss(model, batch.images, batch.labels, sched, noise_rng, config.class_drop);
            value = loss.item();
            if (!std::isfinite(value)) throw DivergenceError(step, last_finite);
            tape.backward(loss);
        }
        optimizer.step();
        if (ema) ema->update(model.parameters());
        last_finite = value;
        stats.curve.push_back({step, value});
        if (on_step) on_step(step, value, model);
    }
    return stats;
}

CondenseResult condense(const CondenseConfig& config, const DeskDataset& data, const DiffusionSchedule& sched,
                        const StepCallback& on_step) {
    if (config.model.backing != Backing::factorized) {
        throw ConfigError("condensation needs a factorized model configuration");
    }
    DiTModel aux(config.model);
    Rng rng = Rng(config.train.seed).split(0xC0DE);
    Rng factor_rng = rng.split(1);
    Rng embed_rng = rng.split(2);
    aux.families = init_shared_factors(config.model.width, config.model.hidden, config.model.rank, config.model.group,
                                       config.model.depth, factor_rng);
    init_fresh_embeddings(aux, embed_rng);
    zero_biases_unit_norms(aux);
    aux.set_trainable(true);

    TrainStats stats = train(aux, data, config.train, sched, nullptr, on_step);
    LearngeneMeta meta;
    meta.width = config.model.width;
    meta.hidden = config.model.hidden;
    meta.rank = config.model.rank;
    meta.group = config.model.group;
    meta.condensation_steps = config.train.steps;
    meta.seed = config.train.seed;
    Learngene lg = extract_learngene(aux.families, meta);
    return {std::move(lg), std::move(aux), std::move(stats)};
}

DiTModel instantiate(const Learngene& learngene, std::size_t depth, const DiTConfig& target, Rng& rng) {
    const LearngeneMeta& meta = learngene.meta;
    if (target.width != meta.width || target.hidden != meta.hidden) {
        throw IncompatibleError("learngene width D=" + std::to_string(meta.width) + ", D'=" +
                                std::to_string(meta.hidden) + " does not match model width D=" +
                                std::to_string(target.width) + ", D'=" + std::to_string(target.hidden));
    }
    DiTConfig config = target;
    config.depth = depth;
    config.backing = Backing::factorized;
    config.rank = meta.rank;
    config.group = meta.group;
    DiTModel model(config);

    Rng sigma_rng = rng.split(1);
    Rng embed_rng = rng.split(2);
    const double sigma_sd = 1.0 / std::sqrt(static_cast<double>(meta.rank));
    for (FamilyKind kind : kFamilyKinds) {
        FactorizedFamily& f = model.families[static_cast<std::size_t>(kind)];
        copy_values(learngene.u(kind), f.U);
        copy_values(learngene.v(kind), f.V);
        for (Tensor& s : f.sigma) {
            for (double& v : s.data()) v = sigma_sd * sigma_rng.normal();
        }
    }
    init_fresh_embeddings(model, embed_rng);
    zero_biases_unit_norms(model);
    model.set_trainable(true);
    for (FactorizedFamily& f : model.families) f.freeze_factors(true);
    return model;
}

std::vector<std::size_t> sigma_fit_indices(std::size_t n, const SigmaFitConfig& config) {
    if (n == 0) throw ContractError("sigma fit needs target data");
    const auto fraction_count = static_cast<std::size_t>(std::ceil(config.fit_fraction * static_cast<double>(n)));
    const std::size_t count = std::min(n, std::max(config.min_samples, fraction_count));
    std::vector<std::size_t> order = permutation(n, mix64(config.seed ^ 0x51F17));
    order.resize(count);
    return order;
}

SigmaFitResult sigma_fit(DiTModel& model, const SigmaFitConfig& config, const DeskDataset& target,
                         const DiffusionSchedule& sched) {
    if (model.config().backing != Backing::factorized) {
        throw ContractError("sigma_fit needs a factorized model");
    }
    if (target.size() == 0) throw ContractError("sigma_fit needs target data");
    SigmaFitResult result;
    result.fit_indices = sigma_fit_indices(target.size(), config);
    if (config.fit_steps > 0) {
        const DeskDataset fit_data = subset(target, result.fit_indices);
        model.set_trainable(false);
        for (Tensor& s : model.sigma_parameters()) s.set_requires_grad(true);
        TrainConfig tc;
        tc.steps = config.fit_steps;
        tc.batch = std::min(config.batch, fit_data.size());
        tc.lr = config.lr;
        tc.seed = config.seed;
        result.stats = train(model, fit_data, tc, sched);
    }
    model.set_trainable(true);
    return result;
}

DiTModel he_random_init(DiTConfig config, std::uint64_t seed) {
    config.backing = Backing::plain;
    DiTModel model(config);
    Rng rng = Rng(seed).split(0x4E);
    Rng block_rng = rng.split(1);
    Rng embed_rng = rng.split(2);
    for (BlockParams& b : model.blocks) {
        for (Tensor& w : b.weight) {
            const double sd = std::sqrt(2.0 / static_cast<double>(w.dim(0)));
            for (double& v : w.data()) v = sd * block_rng.normal();
        }
    }
    init_fresh_embeddings(model, embed_rng);
    zero_biases_unit_norms(model);
    model.set_trainable(true);
    return model;
}

namespace {

void check_same_width(const DiTConfig& source, const DiTConfig& target) {
    if (source.width != target.width || source.hidden != target.hidden || source.heads != target.heads ||
        source.image_size != target.image_size || source.channels != target.channels || source.patch != target.patch ||
        source.num_classes != target.num_classes || source.time_features != target.time_features ||
        source.diffusion_steps != target.diffusion_steps) {
        throw IncompatibleError("source model (D=" + std::to_string(source.width) + ", D'=" +
                                std::to_string(source.hidden) + ") is incompatible with target (D=" +
                                std::to_string(target.width) + ", D'=" + std::to_string(target.hidden) + ")");
    }
}

std::size_t block_param_count(const DiTConfig& c) {
    std::size_t n = 0;
    for (FamilyKind kind : kFamilyKinds) {
        const FamilyShape s = family_shape(kind, c.width, c.hidden);
        n += s.rows * s.cols;
    }
    // norms (4D) + biases (3D + D + D' + D)
    return n + 4 * c.width + 5 * c.width + c.hidden;
}

}  // namespace

DiTModel share_init(const DiTModel& source, const DiTConfig& target) {
    check_same_width(source.config(), target);
    if (source.depth() == 0) throw IncompatibleError("share_init needs a source with at least one block");
    DiTConfig config = target;
    config.backing = Backing::plain;
    DiTModel model(config);
    copy_values(source.patch_weight, model.patch_weight);
    copy_values(source.patch_bias, model.patch_bias);
    copy_values(source.pos_embed, model.pos_embed);
    copy_values(source.time_weight, model.time_weight);
    copy_values(source.time_bias, model.time_bias);
    copy_values(source.class_table, model.class_table);
    copy_values(source.final_gain, model.final_gain);
    copy_values(source.final_bias, model.final_bias);
    copy_values(source.head_weight, model.head_weight);
    copy_values(source.head_bias, model.head_bias);
    NoGradScope no_grad;
    for (std::size_t l = 0; l < model.depth(); ++l) {
        const std::size_t from = l % source.depth();
        const BlockParams& s = source.blocks[from];
        BlockParams& d = model.blocks[l];
        copy_values(s.ln1_gain, d.ln1_gain);
        copy_values(s.ln1_bias, d.ln1_bias);
        copy_values(s.qkv_bias, d.qkv_bias);
        copy_values(s.o_bias, d.o_bias);
        copy_values(s.ln2_gain, d.ln2_gain);
        copy_values(s.ln2_bias, d.ln2_bias);
        copy_values(s.in_bias, d.in_bias);
        copy_values(s.out_bias, d.out_bias);
        for (FamilyKind kind : kFamilyKinds) {
            copy_values(source.block_weight(from, kind), d.weight[static_cast<std::size_t>(kind)]);
        }
    }
    model.set_trainable(true);
    const std::size_t outer = count_params(model).total - model.depth() * block_param_count(config);
    model.transferred_params = outer + std::min(model.depth(), source.depth()) * block_param_count(config);
    return model;
}

Tensor truncated_svd(const Tensor& w, std::size_t rank) {
    if (w.rank() != 2) throw DimensionError("truncated_svd: expected a matrix, got " + shape_str(w.shape()));
    const std::size_t rows = w.dim(0), cols = w.dim(1);
    if (rank == 0 || rank > std::min(rows, cols)) {
        throw ConfigError("SVD rank " + std::to_string(rank) + " outside [1, " + std::to_string(std::min(rows, cols)) +
                          "] for a " + shape_str(w.shape()) + " matrix");
    }
    Eigen::MatrixXd m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) m(i, j) = w.at(i, j);
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto r = static_cast<Eigen::Index>(rank);
    const Eigen::MatrixXd approx = svd.matrixU().leftCols(r) * svd.singularValues().head(r).asDiagonal() *
                                   svd.matrixV().leftCols(r).transpose();
    Tensor out({rows, cols});
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) out.at(i, j) = approx(i, j);
    }
    return out;
}

std::size_t svd_transfer_param_count(std::size_t width, std::size_t hidden, std::size_t depth, std::size_t rank) {
    std::size_t per_layer = 0;
    for (FamilyKind kind : kFamilyKinds) {
        const FamilyShape s = family_shape(kind, width, hidden);
        per_layer += rank * (s.rows + s.cols + 1);
    }
    return depth * per_layer;
}

DiTModel svd_transfer_init(const DiTModel& source, const DiTConfig& target, std::size_t rank, Rng& rng) {
    check_same_width(source.config(), target);
    if (source.depth() < target.depth) {
        throw ConfigError("svd_transfer needs a source at least as deep as the target (" +
                          std::to_string(source.depth()) + " < " + std::to_string(target.depth) + ")");
    }
    const std::size_t limit = max_shared_rank(target.width, target.hidden);
    if (rank == 0 || rank > limit) {
        throw ConfigError("svd_transfer rank " + std::to_string(rank) + " outside [1, " + std::to_string(limit) + "]");
    }
    DiTConfig config = target;
    config.backing = Backing::plain;
    DiTModel model(config);
    Rng embed_rng = rng.split(2);
    init_fresh_embeddings(model, embed_rng);
    zero_biases_unit_norms(model);
    NoGradScope no_grad;
    for (std::size_t l = 0; l < model.depth(); ++l) {
        for (FamilyKind kind : kFamilyKinds) {
            copy_values(truncated_svd(source.block_weight(l, kind), rank),
                        model.blocks[l].weight[static_cast<std::size_t>(kind)]);
        }
    }
    model.set_trainable(true);
    model.transferred_params = svd_transfer_param_count(config.width, config.hidden, config.depth, rank);
    return model;
}

std::string recipe_name(RecipeKind kind) {
    switch (kind) {
        case RecipeKind::he_random:
            return "he";
        case RecipeKind::share_init:
            return "share";
        case RecipeKind::svd_transfer:
            return "svd";
        case RecipeKind::fine:
            return "fine";
    }
    return "?";
}

RecipeKind recipe_from_name(const std::string& name) {
    if (name == "he" || name == "he_random") return RecipeKind::he_random;
    if (name == "share" || name == "share_init") return RecipeKind::share_init;
    if (name == "svd" || name == "svd_transfer") return RecipeKind::svd_transfer;
    if (name == "fine") return RecipeKind::fine;
    throw ConfigError("unknown recipe '" + name + "' (expected he, share, svd or fine)");
}

namespace {

// Rank whose svd_transfer budget is nearest the learngene's transferred count.
std::size_t matched_svd_rank(const DiTConfig& target, std::size_t learngene_rank) {
    const double budget = static_cast<double>(learngene_param_count(target.width, target.hidden, learngene_rank));
    const double per_rank = static_cast<double>(svd_transfer_param_count(target.width, target.hidden, target.depth, 1));
    const auto nearest = static_cast<std::size_t>(std::llround(budget / per_rank));
    return std::clamp<std::size_t>(nearest, 1, max_shared_rank(target.width, target.hidden));
}

}  // namespace

Initialized apply_recipe(const InitRecipe& recipe, const DiTConfig& target, std::uint64_t seed,
                         const DeskDataset& target_data, const DiffusionSchedule& sched) {
    Rng rng = Rng(seed).split(0x1717);
    switch (recipe.kind) {
        case RecipeKind::he_random: {
            DiTModel m = he_random_init(target, seed);
            return {std::move(m), 0};
        }
        case RecipeKind::share_init: {
            if (!recipe.source) throw ConfigError("share recipe needs a source checkpoint");
            DiTModel m = share_init(*recipe.source, target);
            const std::size_t n = *m.transferred_params;
            return {std::move(m), n};
        }
        case RecipeKind::svd_transfer: {
            if (!recipe.source) throw ConfigError("svd recipe needs a source checkpoint");
            std::size_t rank = recipe.svd_rank;
            if (rank == 0) {
                if (!recipe.learngene) throw ConfigError("svd recipe needs a rank or a learngene to match");
                rank = matched_svd_rank(target, recipe.learngene->meta.rank);
            }
            DiTModel m = svd_transfer_init(*recipe.source, target, rank, rng);
            const std::size_t n = *m.transferred_params;
            return {std::move(m), n};
        }
        case RecipeKind::fine: {
            if (!recipe.learngene) throw ConfigError("fine recipe needs a learngene");
            DiTModel m = instantiate(*recipe.learngene, target.depth, target, rng);
            SigmaFitConfig fit = recipe.fit;
            fit.seed = mix64(seed ^ fit.seed);
            sigma_fit(m, fit, target_data, sched);
            if (recipe.freeze_learngene) {
                for (FactorizedFamily& f : m.families) f.freeze_factors(true);
            }
            const std::size_t n = count_params(m).transferred;
            return {std::move(m), n};
        }
    }
    throw ConfigError("unhandled recipe");
}

}  // namespace fine
