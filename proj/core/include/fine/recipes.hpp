#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fine/data.hpp"
#include "fine/diffusion.hpp"
#include "fine/dit.hpp"
#include "fine/factorized.hpp"

namespace fine {

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch = 16;
    double lr = 1e-4;
    double weight_decay = 0.0;
    double ema_decay = kEmaDecay;
    double class_drop = kClassDropProbability;
    std::uint64_t seed = 0;
};

struct LossPoint {
    std::size_t step;
    double loss;
};

struct TrainStats {
    std::vector<LossPoint> curve;  // one point per optimizer step
};

using StepCallback = std::function<void(std::size_t step, double loss, const DiTModel& model)>;

// Minimizes the DDPM loss with AdamW over every parameter whose requires_grad
// flag is set. Data order comes from BatchStream(data, batch, seed); timesteps
// and noise from an independent split of the same seed. Throws
// DivergenceError on a non-finite loss.
TrainStats train(DiTModel& model, const DeskDataset& data, const TrainConfig& config, const DiffusionSchedule& sched,
                 EmaModel* ema = nullptr, const StepCallback& on_step = {});

struct CondenseConfig {
    DiTConfig model;  // backing must be factorized
    TrainConfig train;
};

struct CondenseResult {
    Learngene learngene;
    DiTModel aux;
    TrainStats stats;
};

// Trains a factorized auxiliary model end to end (U, V, every sigma, biases,
// norms, embeddings) and extracts its shared factors.
CondenseResult condense(const CondenseConfig& config, const DeskDataset& data, const DiffusionSchedule& sched,
                        const StepCallback& on_step = {});

// Factorized model of the requested depth around a learngene: U, V copied and
// frozen, sigma ~ N(0, 1/r), zero biases, unit norms, fresh embeddings.
// `target` supplies everything but rank/group/backing, which come from the learngene.
DiTModel instantiate(const Learngene& learngene, std::size_t depth, const DiTConfig& target, Rng& rng);

struct SigmaFitConfig {
    std::size_t fit_steps = 300;
    double fit_fraction = 0.01;
    std::size_t min_samples = 64;
    double lr = 1e-2;
    std::size_t batch = 16;
    std::uint64_t seed = 0;
};

struct SigmaFitResult {
    std::vector<std::size_t> fit_indices;  // rows of the target set used by the fit
    TrainStats stats;
};

// Indices of the target samples a fit with this config would draw.
std::vector<std::size_t> sigma_fit_indices(std::size_t n, const SigmaFitConfig& config);

// Optimizes only the grouped singular values on a small slice of target data.
// Afterwards every parameter (U, V included) is trainable again.
SigmaFitResult sigma_fit(DiTModel& model, const SigmaFitConfig& config, const DeskDataset& target,
                         const DiffusionSchedule& sched);

// Plain model: N(0, 2/fan_in) weight matrices, zero biases, unit norms.
DiTModel he_random_init(DiTConfig config, std::uint64_t seed);

// Plain model whose blocks cycle through the source blocks in order
// (block l <- source block l mod L_src); embeddings and head copied.
DiTModel share_init(const DiTModel& source, const DiTConfig& target);

// Best rank-r approximation (truncated SVD).
Tensor truncated_svd(const Tensor& w, std::size_t rank);

// Plain model whose block weights are per-layer rank-r truncations of the
// first `depth` source blocks. Biases, norms and embeddings start fresh, so
// only the truncated factors carry knowledge.
DiTModel svd_transfer_init(const DiTModel& source, const DiTConfig& target, std::size_t rank, Rng& rng);

// depth * sum over families of r * (m1 + m2 + 1)
std::size_t svd_transfer_param_count(std::size_t width, std::size_t hidden, std::size_t depth, std::size_t rank);

enum class RecipeKind { he_random, share_init, svd_transfer, fine };

std::string recipe_name(RecipeKind kind);
RecipeKind recipe_from_name(const std::string& name);

struct InitRecipe {
    RecipeKind kind = RecipeKind::he_random;
    std::shared_ptr<const DiTModel> source;       // share_init, svd_transfer
    std::size_t svd_rank = 0;                     // svd_transfer; 0 = match the learngene budget
    std::shared_ptr<const Learngene> learngene;   // fine
    SigmaFitConfig fit;                           // fine
    bool freeze_learngene = false;                // fine: keep U, V frozen after the fit

    std::string id() const { return recipe_name(kind); }
};

struct Initialized {
    DiTModel model;
    std::size_t params_transferred = 0;
};

// Builds the initial model for one (recipe, target config, seed).
Initialized apply_recipe(const InitRecipe& recipe, const DiTConfig& target, std::uint64_t seed,
                         const DeskDataset& target_data, const DiffusionSchedule& sched);

}  // namespace fine
