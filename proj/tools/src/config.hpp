#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fine/bench.hpp"
#include "fine/dit.hpp"
#include "fine/recipes.hpp"

namespace fine::cli {

struct DataConfig {
    std::string name = "shapes-A";
    std::size_t n = 4096;
    std::uint64_t seed = 0;
    std::string dir;  // non-empty: load *.imgr files instead of generating
};

struct BenchConfig {
    std::vector<std::string> recipes = {"he", "fine"};
    std::vector<std::size_t> depths = {6};
    std::vector<std::uint64_t> seeds = {0, 1, 2};
    std::size_t steps = 6000;
    std::optional<double> target_loss;
    std::size_t frechet_samples = 1024;
    std::uint64_t projection_seed = 0;
    std::size_t svd_rank = 0;  // 0 = match the learngene budget
};

// Mirrors the typed configs one to one. Tables: [model], [train], [fit],
// [data], [bench]; [run] is written by run.meta sidecars and ignored on read.
struct RunConfig {
    DiTConfig model;
    TrainConfig train;
    SigmaFitConfig fit;
    DataConfig data;
    BenchConfig bench;
};

// Unknown tables or keys and mistyped values are ConfigErrors.
RunConfig parse_config(std::string_view text, const std::string& source);
RunConfig load_config(const std::filesystem::path& path);

// TOML rendering of every field; parse_config(to_toml(c)) == c.
std::string to_toml(const RunConfig& config);

}  // namespace fine::cli
