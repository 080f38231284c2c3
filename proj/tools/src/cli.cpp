#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "config.hpp"
#include "fine/bench.hpp"
#include "fine/data.hpp"
#include "fine/diffusion.hpp"
#include "fine/errors.hpp"
#include "fine/io_util.hpp"
#include "fine/recipes.hpp"
#include "fine/serialize.hpp"

#ifndef FINE_VERSION
#define FINE_VERSION "unknown"
#endif

namespace fine::cli {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kLogEvery = 50;

struct Context {
    std::ostream& out;
    std::ostream& err;
    std::vector<std::string> args;
};

std::string info_value(const MetaList& info, const std::string& key, const std::string& fallback = "") {
    for (const auto& [k, v] : info) {
        if (k == key) return v;
    }
    return fallback;
}

void set_info(MetaList& info, const std::string& key, const std::string& value) {
    for (auto& [k, v] : info) {
        if (k == key) {
            v = value;
            return;
        }
    }
    info.emplace_back(key, value);
}

std::string quoted(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
    }
    return out + "\"";
}

// <out>.run.meta next to the primary output: resolved config plus the command
// line, enough to replay the run with --config.
void write_run_meta(const Context& ctx, const std::string& command, const fs::path& primary, const RunConfig& config,
                    const std::vector<std::string>& outputs) {
    std::ostringstream os;
    os << to_toml(config) << "\n[run]\ncommand = " << quoted(command) << "\nversion = " << quoted(FINE_VERSION)
       << "\nargs = [";
    for (std::size_t i = 0; i < ctx.args.size(); ++i) os << (i ? ", " : "") << quoted(ctx.args[i]);
    os << "]\noutputs = [";
    for (std::size_t i = 0; i < outputs.size(); ++i) os << (i ? ", " : "") << quoted(outputs[i]);
    os << "]\n";
    fs::path meta = primary;
    meta += ".run.meta";
    write_file_atomic(meta, os.str());
}

DeskDataset load_data(const DataConfig& d, std::size_t side) {
    if (!d.dir.empty()) return load_image_dir(d.dir);
    return make_dataset(d.name, d.n, side, d.seed);
}

std::string curve_csv(const std::string& recipe, std::size_t depth, std::uint64_t seed,
                      const std::vector<LossPoint>& curve, std::size_t offset) {
    BenchResult r;
    r.recipe = recipe;
    r.depth = depth;
    r.seed = seed;
    r.curve = curve;
    for (LossPoint& p : r.curve) p.step += offset;
    return curves_csv({r});
}

StepCallback progress_printer(std::ostream& out, const char* label, std::size_t offset = 0) {
    return [&out, label, offset](std::size_t step, double loss, const DiTModel&) {
        if ((step + 1) % kLogEvery == 0) {
            char buf[96];
            std::snprintf(buf, sizeof buf, "%s step %zu loss %.6f\n", label, step + offset + 1, loss);
            out << buf << std::flush;
        }
    };
}

RunConfig base_config(const std::string& path) { return path.empty() ? RunConfig{} : load_config(path); }

// ---------------------------------------------------------------- condense

struct CondenseArgs {
    std::string config, out, aux_out, log, dataset;
    std::optional<std::size_t> steps, depth;
    std::optional<std::uint64_t> seed;
};

int cmd_condense(const Context& ctx, const CondenseArgs& a) {
    RunConfig cfg = base_config(a.config);
    cfg.model.backing = Backing::factorized;
    if (a.depth) cfg.model.depth = *a.depth;
    if (a.steps) cfg.train.steps = *a.steps;
    if (a.seed) cfg.train.seed = *a.seed;
    if (!a.dataset.empty()) cfg.data.name = a.dataset;
    cfg.model.validate();

    const DeskDataset data = load_data(cfg.data, cfg.model.image_size);
    const DiffusionSchedule sched(cfg.model.diffusion_steps);
    CondenseResult res = condense({cfg.model, cfg.train}, data, sched, progress_printer(ctx.out, "condense"));
    save_learngene(a.out, res.learngene);
    std::vector<std::string> outputs = {a.out};
    if (!a.aux_out.empty()) {
        save_checkpoint(a.aux_out, res.aux, nullptr, cfg.train.seed, cfg.train.steps,
                        {{"recipe", "condense"}, {"data.name", cfg.data.name}});
        outputs.push_back(a.aux_out);
    }
    if (!a.log.empty()) {
        write_file_atomic(a.log, curve_csv("condense", cfg.model.depth, cfg.train.seed, res.stats.curve, 0));
        outputs.push_back(a.log);
    }
    write_run_meta(ctx, "condense", a.out, cfg, outputs);
    ctx.out << "learngene written to " << a.out << " (" << count_params(res.learngene).transferred
            << " parameters)\n";
    return kExitOk;
}

// -------------------------------------------------------------------- init

struct InitArgs {
    std::string config, learngene, source, dataset, out, recipe = "fine";
    std::optional<std::size_t> depth, fit_steps, rank, n;
    std::optional<std::uint64_t> seed, data_seed;
    bool freeze = false;
};

int cmd_init(const Context& ctx, const InitArgs& a) {
    RunConfig cfg = base_config(a.config);
    if (a.depth) cfg.model.depth = *a.depth;
    if (a.fit_steps) cfg.fit.fit_steps = *a.fit_steps;
    if (a.seed) cfg.train.seed = *a.seed;
    if (!a.dataset.empty()) cfg.data.name = a.dataset;
    if (a.n) cfg.data.n = *a.n;
    if (a.data_seed) cfg.data.seed = *a.data_seed;

    InitRecipe recipe;
    recipe.kind = recipe_from_name(a.recipe);
    recipe.fit = cfg.fit;
    recipe.freeze_learngene = a.freeze;
    recipe.svd_rank = a.rank.value_or(cfg.bench.svd_rank);
    if (!a.learngene.empty()) {
        recipe.learngene = std::make_shared<Learngene>(load_learngene(a.learngene));
    }
    if (!a.source.empty()) {
        recipe.source = std::make_shared<DiTModel>(std::move(load_checkpoint(a.source).model));
    }
    if (recipe.kind == RecipeKind::fine && !recipe.learngene) throw ConfigError("init --recipe fine needs --learngene");
    if ((recipe.kind == RecipeKind::share_init || recipe.kind == RecipeKind::svd_transfer) && !recipe.source) {
        throw ConfigError("init --recipe " + a.recipe + " needs --source");
    }

    const DeskDataset data = load_data(cfg.data, cfg.model.image_size);
    const DiffusionSchedule sched(cfg.model.diffusion_steps);
    Initialized init = apply_recipe(recipe, cfg.model, cfg.train.seed, data, sched);
    MetaList info = {{"recipe", recipe.id()},
                     {"data.name", cfg.data.name},
                     {"data.n", std::to_string(cfg.data.n)},
                     {"data.seed", std::to_string(cfg.data.seed)},
                     {"data.dir", cfg.data.dir},
                     {"freeze_learngene", a.freeze ? "1" : "0"}};
    save_checkpoint(a.out, init.model, nullptr, cfg.train.seed, 0, info);
    cfg.model = init.model.config();
    write_run_meta(ctx, "init", a.out, cfg, {a.out});
    const ParamCount count = count_params(init.model);
    ctx.out << recipe.id() << " model at depth " << init.model.depth() << " written to " << a.out
            << " (total " << count.total << ", transferred " << init.params_transferred << ", trainable at init "
            << count.trainable_at_init << ")\n";
    return kExitOk;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
    std::string config, from, out, log, dataset;
    std::optional<std::size_t> steps, batch;
    std::optional<double> lr;
    std::optional<std::uint64_t> seed;
    bool freeze = false;
};

int cmd_train(const Context& ctx, const TrainArgs& a) {
    RunConfig cfg = base_config(a.config);
    Checkpoint ck = load_checkpoint(a.from);
    cfg.model = ck.model.config();
    cfg.train.seed = a.seed.value_or(ck.seed);
    if (a.steps) cfg.train.steps = *a.steps;
    if (a.batch) cfg.train.batch = *a.batch;
    if (a.lr) cfg.train.lr = *a.lr;
    // data identity travels with the checkpoint unless overridden
    if (a.config.empty()) {
        cfg.data.name = info_value(ck.info, "data.name", cfg.data.name);
        cfg.data.n = std::stoul(info_value(ck.info, "data.n", std::to_string(cfg.data.n)));
        cfg.data.seed = std::stoull(info_value(ck.info, "data.seed", std::to_string(cfg.data.seed)));
        cfg.data.dir = info_value(ck.info, "data.dir", cfg.data.dir);
    }
    if (!a.dataset.empty()) {
        cfg.data.name = a.dataset;
        cfg.data.dir.clear();
    }
    const bool freeze = a.freeze || info_value(ck.info, "freeze_learngene") == "1";
    if (freeze && cfg.model.backing == Backing::factorized) {
        for (FactorizedFamily& f : ck.model.families) f.freeze_factors(true);
    }

    const DeskDataset data = load_data(cfg.data, cfg.model.image_size);
    const DiffusionSchedule sched(cfg.model.diffusion_steps);
    EmaModel ema = ck.ema ? std::move(*ck.ema) : EmaModel(ck.model.parameters(), cfg.train.ema_decay);
    const std::size_t start = ck.step;
    TrainConfig tc = cfg.train;
    // a resumed run must not replay the data order of its first segment
    if (start > 0) tc.seed = mix64(cfg.train.seed ^ start);
    const TrainStats stats = train(ck.model, data, tc, sched, &ema, progress_printer(ctx.out, "train", start));

    MetaList info = ck.info;
    set_info(info, "data.name", cfg.data.name);
    set_info(info, "data.n", std::to_string(cfg.data.n));
    set_info(info, "data.seed", std::to_string(cfg.data.seed));
    set_info(info, "data.dir", cfg.data.dir);
    save_checkpoint(a.out, ck.model, &ema, cfg.train.seed, start + cfg.train.steps, info);
    std::vector<std::string> outputs = {a.out};
    if (!a.log.empty()) {
        write_file_atomic(a.log, curve_csv(info_value(info, "recipe", "train"), cfg.model.depth, cfg.train.seed,
                                           stats.curve, start));
        outputs.push_back(a.log);
    }
    write_run_meta(ctx, "train", a.out, cfg, outputs);
    const auto best = best_moving_average(stats.curve);
    ctx.out << "trained " << cfg.train.steps << " steps (total " << start + cfg.train.steps << ")";
    if (best) ctx.out << ", best 100-step mean loss " << *best;
    ctx.out << "\n";
    return kExitOk;
}

// ------------------------------------------------------------------ sample

struct SampleArgs {
    std::string from, out, cls = "all";
    std::size_t n = 64;
    std::uint64_t seed = 0;
    bool ema = false;
};

int cmd_sample(const Context& ctx, const SampleArgs& a) {
    Checkpoint ck = load_checkpoint(a.from);
    if (a.ema) {
        if (!ck.ema) throw FormatError(a.from + ": checkpoint has no EMA weights");
        ck.ema->copy_to(ck.model.parameters());
    }
    const DiTConfig& c = ck.model.config();
    const DiffusionSchedule sched(c.diffusion_steps);
    if (a.n == 0) throw ConfigError("--n must be positive");

    // (class id, count) blocks in output order
    std::vector<std::pair<int, std::size_t>> plan;
    if (a.cls == "all" && c.num_classes > 0) {
        for (std::size_t k = 0; k < c.num_classes; ++k) {
            const std::size_t count = a.n / c.num_classes + (k < a.n % c.num_classes ? 1 : 0);
            if (count > 0) plan.emplace_back(static_cast<int>(k), count);
        }
    } else if (a.cls == "all" || a.cls == "none") {
        plan.emplace_back(kUnconditional, a.n);
    } else {
        int k = 0;
        try {
            std::size_t used = 0;
            k = std::stoi(a.cls, &used);
            if (used != a.cls.size()) throw std::invalid_argument(a.cls);
        } catch (const std::exception&) {
            throw ConfigError("--class must be 'all', 'none' or a class index, got '" + a.cls + "'");
        }
        if (k < 0 || static_cast<std::size_t>(k) >= c.num_classes) {
            throw ConfigError("--class " + a.cls + " outside [0, " + std::to_string(c.num_classes) + ")");
        }
        plan.emplace_back(k, a.n);
    }

    Rng rng = Rng(a.seed).split(0x5A);
    const Shape item = ck.model.sample_shape();
    Tensor grid({a.n, item[0], item[1], item[2]});
    const std::size_t per = shape_numel(item);
    std::size_t filled = 0;
    for (const auto& [cls, count] : plan) {
        const Tensor block = sample(ck.model, sched, count, cls, rng);
        std::copy(block.data().begin(), block.data().end(),
                  grid.data().begin() + static_cast<std::ptrdiff_t>(filled * per));
        filled += count;
    }
    write_imgr(a.out, grid);
    RunConfig cfg;
    cfg.model = c;
    cfg.train.seed = a.seed;
    write_run_meta(ctx, "sample", a.out, cfg, {a.out});
    ctx.out << "wrote " << a.n << " samples to " << a.out << (a.ema ? " (EMA weights)" : "") << "\n";
    return kExitOk;
}

// ------------------------------------------------------------------- bench

struct BenchArgs {
    std::string config, out, recipes, depths, dataset, learngene, source;
    std::optional<std::size_t> seeds, steps, frechet_samples, rank;
    std::optional<double> target_loss;
};

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* flag) {
    std::vector<T> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if constexpr (std::is_same_v<T, std::string>) {
            out.push_back(item);
        } else {
            std::size_t used = 0;
            unsigned long long v = 0;
            try {
                v = std::stoull(item, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != item.size()) {
                throw ConfigError(std::string(flag) + ": '" + item + "' is not a non-negative integer");
            }
            out.push_back(static_cast<T>(v));
        }
    }
    if (out.empty()) throw ConfigError(std::string(flag) + " needs at least one value");
    return out;
}

fs::path sibling(const fs::path& out, const std::string& suffix) {
    fs::path p = out;
    p.replace_extension();
    p += suffix;
    return p;
}

int cmd_bench(const Context& ctx, const BenchArgs& a) {
    RunConfig cfg = base_config(a.config);
    BenchConfig& b = cfg.bench;
    if (!a.recipes.empty()) b.recipes = parse_list<std::string>(a.recipes, "--recipes");
    if (!a.depths.empty()) b.depths = parse_list<std::size_t>(a.depths, "--depths");
    if (a.seeds) {
        if (*a.seeds == 0) throw ConfigError("--seeds must be at least 1");
        b.seeds.clear();
        for (std::uint64_t s = 0; s < *a.seeds; ++s) b.seeds.push_back(s);
    }
    if (a.steps) b.steps = *a.steps;
    if (a.frechet_samples) b.frechet_samples = *a.frechet_samples;
    if (a.rank) b.svd_rank = *a.rank;
    if (a.target_loss) b.target_loss = a.target_loss;
    if (!a.dataset.empty()) cfg.data.name = a.dataset;

    std::shared_ptr<const Learngene> learngene;
    std::shared_ptr<const DiTModel> source;
    if (!a.learngene.empty()) learngene = std::make_shared<Learngene>(load_learngene(a.learngene));
    if (!a.source.empty()) source = std::make_shared<DiTModel>(std::move(load_checkpoint(a.source).model));

    std::vector<InitRecipe> recipes;
    for (const std::string& name : b.recipes) {
        InitRecipe r;
        r.kind = recipe_from_name(name);
        r.fit = cfg.fit;
        r.svd_rank = b.svd_rank;
        r.learngene = learngene;
        r.source = source;
        if (r.kind == RecipeKind::fine && !learngene) throw ConfigError("bench recipe fine needs --learngene");
        if ((r.kind == RecipeKind::share_init || r.kind == RecipeKind::svd_transfer) && !source) {
            throw ConfigError("bench recipe " + name + " needs --source");
        }
        recipes.push_back(std::move(r));
    }

    const DeskDataset data = load_data(cfg.data, cfg.model.image_size);
    const DiffusionSchedule sched(cfg.model.diffusion_steps);
    BenchSettings settings;
    settings.model = cfg.model;
    settings.train = cfg.train;
    settings.frechet_samples = b.frechet_samples;
    settings.projection_seed = b.projection_seed;
    auto results = run_benchmark(recipes, b.depths, b.seeds, b.steps, b.target_loss, data, sched, settings,
                                 [&ctx](const BenchResult& r) {
                                     ctx.out << "run " << r.recipe << " depth " << r.depth << " seed " << r.seed
                                             << (r.failed() ? " FAILED: " + r.error : " done") << "\n"
                                             << std::flush;
                                 });

    const fs::path out = a.out;
    const fs::path curves = sibling(out, ".curves.csv");
    const fs::path aggregate = sibling(out, ".aggregate.csv");
    const fs::path report = sibling(out, ".md");
    const auto rows = aggregate_report(results);
    write_file_atomic(out, summary_csv(results));
    write_file_atomic(curves, curves_csv(results));
    write_file_atomic(aggregate, aggregate_csv(rows));
    write_file_atomic(report, aggregate_markdown(rows));
    write_run_meta(ctx, "bench", out, cfg, {out.string(), curves.string(), aggregate.string(), report.string()});

    ctx.out << aggregate_markdown(rows);
    for (const std::string& name : b.recipes) {
        const std::string cand = recipe_name(recipe_from_name(name));
        if (cand == "he") continue;
        for (const Speedup& s : speedups(results, "he", cand)) {
            ctx.out << "speedup he/" << cand << " depth " << s.depth << " seed " << s.seed << ": " << s.ratio << "\n";
        }
    }
    const bool any_failed = std::any_of(results.begin(), results.end(), [](const BenchResult& r) { return r.failed(); });
    return any_failed ? kExitFailure : kExitOk;
}

// ----------------------------------------------------------------- inspect

void print_container(std::ostream& out, const Container& c) {
    out << "magic: " << c.magic << "\nversion: " << c.version << "\nheader:\n";
    for (const auto& [k, v] : c.meta) out << "  " << k << " = " << v << "\n";
    out << "tensors: " << c.tensors.size() << "\n";
    for (const NamedTensor& t : c.tensors) {
        out << "  " << t.name << " f64 " << shape_str(t.tensor.shape()) << " (" << t.tensor.numel() << ")\n";
    }
}

void print_counts(std::ostream& out, const ParamCount& count) {
    out << "params: total " << count.total << ", transferred " << count.transferred << ", trainable_at_init "
        << count.trainable_at_init << "\n";
}

int cmd_inspect(const Context& ctx, const std::string& path) {
    const std::string magic = peek_magic(path);
    if (magic == kLearngeneMagic) {
        const Container c = read_container(path, kLearngeneMagic);
        print_container(ctx.out, c);
        print_counts(ctx.out, count_params(learngene_from_container(c, path)));
    } else if (magic == kCheckpointMagic) {
        print_container(ctx.out, read_container(path, kCheckpointMagic));
        print_counts(ctx.out, count_params(load_checkpoint(path).model));
    } else if (magic == "IMGR") {
        const Tensor images = read_imgr(path);
        ctx.out << "magic: IMGR\nimages: " << shape_str(images.shape()) << "\n";
    } else {
        throw FormatError(path + ": unrecognised file (magic '" + magic + "')");
    }
    return kExitOk;
}

int dispatch(const Context& ctx) {
    CLI::App app{"FINE learngene toolkit: condense, initialize, train and benchmark factorized diffusion transformers",
                 "fine"};
    app.require_subcommand(1);
    app.set_version_flag("--version", FINE_VERSION);

    CondenseArgs ca;
    CLI::App* condense_cmd = app.add_subcommand("condense", "train a factorized auxiliary model and extract its learngene");
    condense_cmd->add_option("--config", ca.config, "TOML run configuration");
    condense_cmd->add_option("--out", ca.out, "learngene output (.lgne)")->required();
    condense_cmd->add_option("--aux-out", ca.aux_out, "also write the auxiliary checkpoint");
    condense_cmd->add_option("--log", ca.log, "loss curve CSV");
    condense_cmd->add_option("--dataset", ca.dataset, "shapes-A, shapes-B or gauss-mix");
    condense_cmd->add_option("--steps", ca.steps, "training steps");
    condense_cmd->add_option("--depth", ca.depth, "auxiliary model depth");
    condense_cmd->add_option("--seed", ca.seed, "run seed");

    InitArgs ia;
    CLI::App* init_cmd = app.add_subcommand("init", "initialize a model of any depth (fine: instantiate + sigma fit)");
    init_cmd->add_option("--config", ia.config, "TOML run configuration");
    init_cmd->add_option("--recipe", ia.recipe, "he, share, svd or fine")->capture_default_str();
    init_cmd->add_option("--learngene", ia.learngene, "learngene file (fine, or svd budget matching)");
    init_cmd->add_option("--source", ia.source, "source checkpoint (share, svd)");
    init_cmd->add_option("--rank", ia.rank, "svd rank (default: match the learngene budget)");
    init_cmd->add_option("--depth", ia.depth, "target depth");
    init_cmd->add_option("--dataset", ia.dataset, "target dataset");
    init_cmd->add_option("--n", ia.n, "target dataset size");
    init_cmd->add_option("--data-seed", ia.data_seed, "target dataset generator seed");
    init_cmd->add_option("--fit-steps", ia.fit_steps, "sigma-only fit steps");
    init_cmd->add_option("--seed", ia.seed, "run seed");
    init_cmd->add_flag("--freeze-learngene", ia.freeze, "keep U and V frozen in later training");
    init_cmd->add_option("--out", ia.out, "checkpoint output (.fine)")->required();

    TrainArgs ta;
    CLI::App* train_cmd = app.add_subcommand("train", "standard training with EMA");
    train_cmd->add_option("--config", ta.config, "TOML run configuration");
    train_cmd->add_option("--from", ta.from, "input checkpoint")->required();
    train_cmd->add_option("--steps", ta.steps, "training steps");
    train_cmd->add_option("--batch", ta.batch, "batch size");
    train_cmd->add_option("--lr", ta.lr, "learning rate");
    train_cmd->add_option("--seed", ta.seed, "run seed (default: the checkpoint's)");
    train_cmd->add_option("--dataset", ta.dataset, "dataset (default: the checkpoint's)");
    train_cmd->add_flag("--freeze-learngene", ta.freeze, "keep U and V frozen");
    train_cmd->add_option("--out", ta.out, "checkpoint output")->required();
    train_cmd->add_option("--log", ta.log, "loss curve CSV");

    SampleArgs sa;
    CLI::App* sample_cmd = app.add_subcommand("sample", "ancestral sampling to an IMGR image block");
    sample_cmd->add_option("--from", sa.from, "checkpoint")->required();
    sample_cmd->add_option("--n", sa.n, "number of images")->capture_default_str();
    sample_cmd->add_option("--out", sa.out, "output .imgr")->required();
    sample_cmd->add_option("--class", sa.cls, "'all' (split evenly), 'none' (unconditional) or a class index")
        ->capture_default_str();
    sample_cmd->add_option("--seed", sa.seed, "sampling seed")->capture_default_str();
    sample_cmd->add_flag("--ema", sa.ema, "use the EMA weights");

    BenchArgs ba;
    CLI::App* bench_cmd = app.add_subcommand("bench", "convergence benchmark across recipes, depths and seeds");
    bench_cmd->add_option("--config", ba.config, "TOML run configuration");
    bench_cmd->add_option("--recipes", ba.recipes, "comma list of he, share, svd, fine");
    bench_cmd->add_option("--depths", ba.depths, "comma list of depths");
    bench_cmd->add_option("--seeds", ba.seeds, "number of seeds (0..n-1)");
    bench_cmd->add_option("--steps", ba.steps, "training steps per run");
    bench_cmd->add_option("--dataset", ba.dataset, "target dataset");
    bench_cmd->add_option("--learngene", ba.learngene, "learngene for the fine recipe");
    bench_cmd->add_option("--source", ba.source, "source checkpoint for share and svd");
    bench_cmd->add_option("--rank", ba.rank, "svd rank (default: match the learngene budget)");
    bench_cmd->add_option("--target-loss", ba.target_loss, "fixed target (default: derived from he runs)");
    bench_cmd->add_option("--frechet-samples", ba.frechet_samples, "samples for the Frechet surrogate (0 skips)");
    bench_cmd->add_option("--out", ba.out, "per-run summary CSV")->required();

    std::string inspect_path;
    CLI::App* inspect_cmd = app.add_subcommand("inspect", "print header, tensor index and parameter counts");
    inspect_cmd->add_option("path", inspect_path, "checkpoint, learngene or image file")->required();

    std::vector<std::string> reversed(ctx.args.rbegin(), ctx.args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        ctx.out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        ctx.out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::CallForVersion&) {
        ctx.out << FINE_VERSION << "\n";
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        ctx.err << "fine: " << e.what() << "\n";
        CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        ctx.err << sub->help();
        return kExitUsage;
    }

    if (condense_cmd->parsed()) return cmd_condense(ctx, ca);
    if (init_cmd->parsed()) return cmd_init(ctx, ia);
    if (train_cmd->parsed()) return cmd_train(ctx, ta);
    if (sample_cmd->parsed()) return cmd_sample(ctx, sa);
    if (bench_cmd->parsed()) return cmd_bench(ctx, ba);
    return cmd_inspect(ctx, inspect_path);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    const Context ctx{out, err, args};
    try {
        return dispatch(ctx);
    } catch (const DivergenceError& e) {
        err << "fine: diverged: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const FormatError& e) {
        err << "fine: " << e.what() << "\n";
        return kExitFile;
    } catch (const IncompatibleError& e) {
        err << "fine: " << e.what() << "\n";
        return kExitFile;
    } catch (const fs::filesystem_error& e) {
        err << "fine: " << e.what() << "\n";
        return kExitFile;
    } catch (const Error& e) {
        err << "fine: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "fine: unexpected failure: " << e.what() << "\n";
        return kExitFailure;
    }
}

}  // namespace fine::cli
