#include "fine/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "fine/errors.hpp"
#include "fine/metrics.hpp"

namespace fine {

namespace {

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

MeanSd mean_sd(const std::vector<double>& values) {
    MeanSd out;
    out.count = values.size();
    if (values.empty()) return out;
    double total = 0.0;
    for (double v : values) total += v;
    out.mean = total / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - out.mean) * (v - out.mean);
        out.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return out;
}

}  // namespace

std::vector<std::optional<double>> moving_average(std::span<const LossPoint> curve, std::size_t window) {
    std::vector<std::optional<double>> out(curve.size());
    if (window == 0) return out;
    for (std::size_t i = window - 1; i < curve.size(); ++i) {
        double total = 0.0;
        for (std::size_t j = i + 1 - window; j <= i; ++j) total += curve[j].loss;
        out[i] = total / static_cast<double>(window);
    }
    return out;
}

std::optional<std::size_t> steps_to_target(std::span<const LossPoint> curve, double target, std::size_t window) {
    const auto ma = moving_average(curve, window);
    for (std::size_t i = 0; i < ma.size(); ++i) {
        if (ma[i] && *ma[i] <= target) return curve[i].step + 1;
    }
    return std::nullopt;
}

std::optional<double> best_moving_average(std::span<const LossPoint> curve, std::size_t window) {
    std::optional<double> best;
    for (const auto& v : moving_average(curve, window)) {
        if (v && (!best || *v < *best)) best = v;
    }
    return best;
}

double sample_frechet(const DiTModel& model, const DiffusionSchedule& sched, const GaussianStats& reference,
                      const Tensor& projection, std::size_t n, std::uint64_t seed) {
    const std::size_t classes = std::max<std::size_t>(1, model.config().num_classes);
    Rng rng = Rng(seed).split(0xF8EC);
    const Shape item = model.sample_shape();
    Tensor all({n, item[0], item[1], item[2]});
    const std::size_t per = shape_numel(item);
    std::size_t filled = 0;
    for (std::size_t k = 0; k < classes; ++k) {
        const std::size_t count = n / classes + (k < n % classes ? 1 : 0);
        if (count == 0) continue;
        const int cls = model.config().num_classes == 0 ? kUnconditional : static_cast<int>(k);
        const Tensor block = sample(model, sched, count, cls, rng);
        std::copy(block.data().begin(), block.data().end(),
                  all.data().begin() + static_cast<std::ptrdiff_t>(filled * per));
        filled += count;
    }
    return frechet_distance(feature_stats(all, &projection), reference);
}

void assign_targets(std::vector<BenchResult>& results, std::optional<double> target_loss) {
    std::map<std::size_t, double> per_depth;
    if (!target_loss) {
        for (const BenchResult& r : results) {
            if (r.failed() || r.recipe != recipe_name(RecipeKind::he_random)) continue;
            const auto best = best_moving_average(r.curve);
            if (!best) continue;
            auto [it, inserted] = per_depth.emplace(r.depth, *best);
            if (!inserted) it->second = std::max(it->second, *best);
        }
    }
    for (BenchResult& r : results) {
        r.steps_to_target.reset();
        if (r.failed()) continue;
        double target = 0.0;
        if (target_loss) {
            target = *target_loss;
        } else {
            const auto it = per_depth.find(r.depth);
            if (it == per_depth.end()) continue;
            target = kTargetLossFactor * it->second;
        }
        r.steps_to_target = steps_to_target(r.curve, target);
    }
}

std::vector<BenchResult> run_benchmark(const std::vector<InitRecipe>& recipes, std::span<const std::size_t> depths,
                                       std::span<const std::uint64_t> seeds, std::size_t train_steps,
                                       std::optional<double> target_loss, const DeskDataset& target_data,
                                       const DiffusionSchedule& sched, const BenchSettings& settings,
                                       const BenchProgress& progress) {
    if (!target_loss) {
        const bool has_he = std::any_of(recipes.begin(), recipes.end(),
                                        [](const InitRecipe& r) { return r.kind == RecipeKind::he_random; });
        if (!has_he) throw ConfigError("benchmark without a target loss needs the he recipe to derive one");
    }
    const std::size_t flat = target_data.images.numel() / target_data.size();
    const Tensor projection = projection_matrix(flat, std::min(kProjectionDim, flat), settings.projection_seed);
    GaussianStats reference;
    if (settings.frechet_samples > 0) reference = feature_stats(target_data.images, &projection);

    std::vector<BenchResult> results;
    for (const InitRecipe& recipe : recipes) {
        for (std::size_t depth : depths) {
            for (std::uint64_t seed : seeds) {
                BenchResult r;
                r.recipe = recipe.id();
                r.depth = depth;
                r.seed = seed;
                r.stream_seed = seed;
                try {
                    DiTConfig target = settings.model;
                    target.depth = depth;
                    Initialized init = apply_recipe(recipe, target, seed, target_data, sched);
                    r.params_transferred = init.params_transferred;
                    TrainConfig tc = settings.train;
                    tc.steps = train_steps;
                    tc.seed = r.stream_seed;
                    r.curve = train(init.model, target_data, tc, sched).curve;
                    if (settings.frechet_samples > 0) {
                        r.frechet = sample_frechet(init.model, sched, reference, projection, settings.frechet_samples,
                                                   seed);
                    }
                } catch (const Error& e) {
                    r.error = e.what();
                }
                results.push_back(std::move(r));
                if (progress) progress(results.back());
            }
        }
    }
    assign_targets(results, target_loss);
    return results;
}

std::vector<SummaryRow> aggregate_report(const std::vector<BenchResult>& results) {
    std::map<std::pair<std::string, std::size_t>, std::vector<const BenchResult*>> groups;
    for (const BenchResult& r : results) groups[{r.recipe, r.depth}].push_back(&r);
    std::vector<SummaryRow> rows;
    for (const auto& [key, members] : groups) {
        SummaryRow row;
        row.recipe = key.first;
        row.depth = key.second;
        row.runs = members.size();
        std::vector<double> steps, frechet;
        for (const BenchResult* r : members) {
            if (r->failed()) {
                ++row.failed;
                continue;
            }
            row.params_transferred = r->params_transferred;
            if (r->steps_to_target) steps.push_back(static_cast<double>(*r->steps_to_target));
            if (r->frechet) frechet.push_back(*r->frechet);
        }
        row.steps_to_target = mean_sd(steps);
        row.frechet = mean_sd(frechet);
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string curves_csv(const std::vector<BenchResult>& results) {
    std::string out = "recipe,depth,seed,step,loss\n";
    for (const BenchResult& r : results) {
        for (const LossPoint& p : r.curve) {
            out += r.recipe + "," + std::to_string(r.depth) + "," + std::to_string(r.seed) + "," +
                   std::to_string(p.step) + "," + num(p.loss) + "\n";
        }
    }
    return out;
}

std::string summary_csv(const std::vector<BenchResult>& results) {
    std::string out = "recipe,depth,seed,steps_to_target,frechet,params_transferred\n";
    for (const BenchResult& r : results) {
        out += r.recipe + "," + std::to_string(r.depth) + "," + std::to_string(r.seed) + "," +
               (r.steps_to_target ? std::to_string(*r.steps_to_target) : std::string("NA")) + "," +
               (r.frechet ? num(*r.frechet) : std::string("NA")) + "," + std::to_string(r.params_transferred) + "\n";
    }
    return out;
}

std::string aggregate_csv(const std::vector<SummaryRow>& rows) {
    std::string out =
        "recipe,depth,runs,failed,reached,steps_mean,steps_sd,frechet_mean,frechet_sd,params_transferred\n";
    auto cell = [](const MeanSd& m, bool sd) {
        if (m.count == 0) return std::string("NA");
        return num(sd ? m.sd : m.mean);
    };
    for (const SummaryRow& row : rows) {
        out += row.recipe + "," + std::to_string(row.depth) + "," + std::to_string(row.runs) + "," +
               std::to_string(row.failed) + "," + std::to_string(row.steps_to_target.count) + "," +
               cell(row.steps_to_target, false) + "," + cell(row.steps_to_target, true) + "," +
               cell(row.frechet, false) + "," + cell(row.frechet, true) + "," +
               std::to_string(row.params_transferred) + "\n";
    }
    return out;
}

std::string aggregate_markdown(const std::vector<SummaryRow>& rows) {
    std::ostringstream os;
    os << "| Recipe | Depth | Steps to target | Frechet | Para. | Reached |\n";
    os << "|---|---|---|---|---|---|\n";
    auto cell = [](const MeanSd& m) {
        if (m.count == 0) return std::string("n/a");
        return num(m.mean) + " ± " + num(m.sd);
    };
    for (const SummaryRow& row : rows) {
        os << "| " << row.recipe << " | " << row.depth << " | " << cell(row.steps_to_target) << " | "
           << cell(row.frechet) << " | " << row.params_transferred << " | " << row.steps_to_target.count << "/"
           << row.runs << " |\n";
    }
    return os.str();
}

std::vector<Speedup> speedups(const std::vector<BenchResult>& results, const std::string& baseline,
                              const std::string& candidate) {
    std::vector<Speedup> out;
    for (const BenchResult& b : results) {
        if (b.recipe != baseline || !b.steps_to_target) continue;
        for (const BenchResult& c : results) {
            if (c.recipe != candidate || c.depth != b.depth || c.seed != b.seed || !c.steps_to_target) continue;
            out.push_back({b.depth, b.seed,
                           static_cast<double>(*b.steps_to_target) / static_cast<double>(*c.steps_to_target)});
        }
    }
    return out;
}

}  // namespace fine
