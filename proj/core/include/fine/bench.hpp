#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fine/data.hpp"
#include "fine/diffusion.hpp"
#include "fine/metrics.hpp"
#include "fine/recipes.hpp"

namespace fine {

inline constexpr std::size_t kMovingAverageWindow = 100;
inline constexpr double kTargetLossFactor = 1.05;

struct BenchResult {
    std::string recipe;
    std::size_t depth = 0;
    std::uint64_t seed = 0;
    std::uint64_t stream_seed = 0;  // data-order / noise seed shared by every recipe at this seed
    std::optional<std::size_t> steps_to_target;
    std::vector<LossPoint> curve;
    std::optional<double> frechet;
    std::size_t params_transferred = 0;
    std::string error;  // non-empty for failed rows

    bool failed() const { return !error.empty(); }
};

// Mean of losses (step - window, step]; nullopt until `window` losses exist.
std::vector<std::optional<double>> moving_average(std::span<const LossPoint> curve, std::size_t window);
// First step whose trailing moving average is <= target.
std::optional<std::size_t> steps_to_target(std::span<const LossPoint> curve, double target,
                                           std::size_t window = kMovingAverageWindow);
std::optional<double> best_moving_average(std::span<const LossPoint> curve, std::size_t window = kMovingAverageWindow);

struct BenchSettings {
    DiTConfig model;               // width etc.; depth is overridden per run
    TrainConfig train;             // steps and seed are overridden per run
    std::size_t frechet_samples = 1024;  // 0 skips the Frechet surrogate
    std::uint64_t projection_seed = 0;
};

using BenchProgress = std::function<void(const BenchResult& finished)>;

// Every (recipe, depth, seed): initialize, train with the seed's shared data
// stream, record the loss curve and end-of-run Frechet surrogate against the
// target data. Without an explicit target loss, each depth uses
// kTargetLossFactor times the worst-seed best moving average of the he runs.
std::vector<BenchResult> run_benchmark(const std::vector<InitRecipe>& recipes, std::span<const std::size_t> depths,
                                       std::span<const std::uint64_t> seeds, std::size_t train_steps,
                                       std::optional<double> target_loss, const DeskDataset& target_data,
                                       const DiffusionSchedule& sched, const BenchSettings& settings,
                                       const BenchProgress& progress = {});

// Fills steps_to_target from the curves, per depth.
void assign_targets(std::vector<BenchResult>& results, std::optional<double> target_loss);

// Frechet surrogate of n model samples (half per class when conditional) against reference stats.
double sample_frechet(const DiTModel& model, const DiffusionSchedule& sched, const GaussianStats& reference,
                      const Tensor& projection, std::size_t n, std::uint64_t seed);

struct MeanSd {
    double mean = 0.0;
    double sd = 0.0;
    std::size_t count = 0;  // values that entered the aggregate
};

struct SummaryRow {
    std::string recipe;
    std::size_t depth = 0;
    std::size_t runs = 0;
    std::size_t failed = 0;
    MeanSd steps_to_target;  // over runs that reached the target
    MeanSd frechet;
    std::size_t params_transferred = 0;
};

// One row per (recipe, depth), sorted by (recipe, depth). Missing values
// ("not reached", skipped metric) are left out of the aggregates.
std::vector<SummaryRow> aggregate_report(const std::vector<BenchResult>& results);

std::string curves_csv(const std::vector<BenchResult>& results);
std::string summary_csv(const std::vector<BenchResult>& results);
std::string aggregate_csv(const std::vector<SummaryRow>& rows);
std::string aggregate_markdown(const std::vector<SummaryRow>& rows);

// steps_to_target(baseline) / steps_to_target(candidate) for every (depth,
// seed) where both reached the target.
struct Speedup {
    std::size_t depth;
    std::uint64_t seed;
    double ratio;
};
std::vector<Speedup> speedups(const std::vector<BenchResult>& results, const std::string& baseline,
                              const std::string& candidate);

}  // namespace fine
