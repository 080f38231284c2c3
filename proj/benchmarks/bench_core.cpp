#include <benchmark/benchmark.h>

#include "fine/diffusion.hpp"
#include "fine/metrics.hpp"
#include "fine/ops.hpp"
#include "fine/recipes.hpp"
#include "fine/runtime.hpp"

using namespace fine;

namespace {

Tensor gaussian(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.normal();
    return t;
}

DiTConfig desk(Backing backing) {
    DiTConfig c;
    c.backing = backing;
    return c;
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    const Tensor a = gaussian({n, 64}, rng), b = gaussian({64, 256}, rng);
    for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * 64 * 256));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(256)->Arg(1024);

void BM_Attention(benchmark::State& state) {
    Rng rng(2);
    const Tensor qkv = gaussian({16 * 16, 3 * 64}, rng);
    for (auto _ : state) benchmark::DoNotOptimize(ops::attention(qkv, 16, 16, 4));
}
BENCHMARK(BM_Attention);

void BM_Materialize(benchmark::State& state) {
    Rng rng(3);
    const FamilySet fs = init_shared_factors(64, 256, 32, 4, 6, rng);
    for (auto _ : state)
        for (const FactorizedFamily& f : fs) benchmark::DoNotOptimize(f.materialize(3));
}
BENCHMARK(BM_Materialize);

void BM_Forward(benchmark::State& state) {
    const DiTModel m = he_random_init(desk(Backing::plain), 0);
    Rng rng(4);
    const auto n = static_cast<std::size_t>(state.range(0));
    const Tensor z = gaussian({n, 1, 8, 8}, rng);
    const std::vector<int> t(n, 200), cls(n, 1);
    NoGradScope no_grad;
    for (auto _ : state) benchmark::DoNotOptimize(m.forward(z, t, cls));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Forward)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_TrainSteps(benchmark::State& state) {
    const bool factorized = state.range(0) != 0;
    const DeskDataset data = make_dataset("shapes-A", 256, 8, 0);
    const DiffusionSchedule sched;
    TrainConfig tc;
    tc.steps = 10;
    for (auto _ : state) {
        state.PauseTiming();
        DiTModel m = factorized ? DiTModel(desk(Backing::factorized)) : he_random_init(desk(Backing::plain), 0);
        if (factorized) {
            Rng rng(5);
            init_fresh_embeddings(m, rng);
            m.families = init_shared_factors(64, 256, 32, 4, 6, rng);
            m.set_trainable(true);
        }
        state.ResumeTiming();
        benchmark::DoNotOptimize(train(m, data, tc, sched));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(tc.steps));
    state.SetLabel(factorized ? "factorized, 10 steps" : "plain, 10 steps");
}
BENCHMARK(BM_TrainSteps)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_Frechet(benchmark::State& state) {
    Rng rng(6);
    const Tensor x = gaussian({1024, 1, 8, 8}, rng), y = gaussian({1024, 1, 8, 8}, rng);
    const GaussianStats a = feature_stats(x), b = feature_stats(y);
    for (auto _ : state) benchmark::DoNotOptimize(frechet_distance(a, b));
}
BENCHMARK(BM_Frechet);

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    benchmark::Initialize(&argc, argv);
    if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
    benchmark::RunSpecifiedBenchmarks();
    benchmark::Shutdown();
    return 0;
}
