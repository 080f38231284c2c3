#include <cmath>
#include <memory>

#include "doctest.h"
#include "fine/data.hpp"
#include "fine/errors.hpp"
#include "fine/ops.hpp"
#include "fine/recipes.hpp"
#include "test_support.hpp"

using namespace fine;
using fine::test::random_tensor;

namespace {

DiTConfig small(Backing backing = Backing::plain, std::size_t depth = 2) {
    DiTConfig c;
    c.width = 8;
    c.hidden = 16;
    c.heads = 2;
    c.depth = depth;
    c.time_features = 4;
    c.diffusion_steps = 20;
    c.backing = backing;
    c.rank = 4;
    c.group = 2;
    return c;
}

Learngene random_learngene(std::uint64_t seed) {
    Rng rng(seed);
    const FamilySet fs = init_shared_factors(8, 16, 4, 2, 1, rng);
    LearngeneMeta meta;
    meta.width = 8;
    meta.hidden = 16;
    meta.rank = 4;
    meta.group = 2;
    return extract_learngene(fs, meta);
}

std::vector<std::vector<double>> snapshot(const DiTModel& m) {
    std::vector<std::vector<double>> out;
    for (const NamedTensor& p : m.parameters()) out.push_back(p.tensor.values());
    return out;
}

bool is_sigma(const std::string& name) { return name.find(".sigma.") != std::string::npos; }

double frobenius(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

const DiffusionSchedule& sched20() {
    static const DiffusionSchedule s(20);
    return s;
}

}  // namespace

TEST_CASE("one learngene instantiates at every depth") {
    const Learngene lg = random_learngene(1);
    Rng rng(2);
    for (std::size_t depth : {4, 6, 8, 10, 12}) {
        const DiTModel m = instantiate(lg, depth, small(), rng);
        CHECK(m.depth() == depth);
        CHECK(m.config().backing == Backing::factorized);
        CHECK(count_params(m).transferred == learngene_param_count(8, 16, 4));
        for (FamilyKind kind : kFamilyKinds) {
            const auto& f = m.families[static_cast<std::size_t>(kind)];
            CHECK(f.U.values() == lg.u(kind).values());
            CHECK(!f.U.shares_storage(lg.u(kind)));
            CHECK(!f.U.requires_grad());
            CHECK(!f.V.requires_grad());
            CHECK(f.sigma.size() == depth);
        }
        CHECK(std::all_of(m.blocks.begin(), m.blocks.end(),
                          [](const BlockParams& b) { return b.ln1_gain[0] == 1.0 && b.in_bias[0] == 0.0; }));
    }
    DiTConfig wide = small();
    wide.hidden = 32;
    try {
        instantiate(lg, 4, wide, rng);
        FAIL("expected an incompatibility");
    } catch (const IncompatibleError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("D'=16") != std::string::npos);
        CHECK(msg.find("D'=32") != std::string::npos);
    }
}

TEST_CASE("instantiated sigma draws have variance 1/r") {
    const Learngene lg = random_learngene(3);
    Rng rng(4);
    const DiTModel m = instantiate(lg, 200, small(), rng);
    double sq = 0.0;
    std::size_t n = 0;
    for (const Tensor& s : m.sigma_parameters())
        for (double v : s.data()) {
            sq += v * v;
            ++n;
        }
    CHECK(std::abs(sq / n - 0.25) < 0.025);
}

TEST_CASE("frozen factors survive a training step while sigma moves") {
    const DeskDataset data = make_dataset("shapes-A", 256, 8, 5);
    Rng rng(6);
    DiTModel m = instantiate(random_learngene(5), 3, small(), rng);
    const DiTModel before = m.clone();
    TrainConfig tc;
    tc.steps = 1;
    tc.lr = 1e-2;
    train(m, data, tc, sched20());
    for (std::size_t k = 0; k < 4; ++k) {
        CHECK(m.families[k].U.values() == before.families[k].U.values());
        CHECK(m.families[k].V.values() == before.families[k].V.values());
        CHECK(m.families[k].sigma[0].values() != before.families[k].sigma[0].values());
    }
}

TEST_CASE("sigma_fit touches exactly the sigma set") {
    const DeskDataset data = make_dataset("shapes-B", 256, 8, 7);
    Rng rng(8);
    DiTModel m = instantiate(random_learngene(7), 2, small(), rng);
    const auto names = m.parameters();
    const auto before = snapshot(m);
    SigmaFitConfig fit;
    fit.fit_steps = 3;
    const SigmaFitResult r = sigma_fit(m, fit, data, sched20());
    CHECK(r.fit_indices.size() == 64);
    CHECK(r.stats.curve.size() == 3);
    const auto after = snapshot(m);
    std::size_t moved = 0;
    for (std::size_t i = 0; i < names.size(); ++i) {
        CAPTURE(names[i].name);
        if (is_sigma(names[i].name)) {
            moved += after[i] != before[i];
        } else {
            CHECK(after[i] == before[i]);
        }
    }
    CHECK(moved == m.sigma_parameters().size());
    for (const NamedTensor& p : m.parameters()) CHECK(p.tensor.requires_grad());

    DiTModel same = instantiate(random_learngene(7), 2, small(), rng);
    const auto untouched = snapshot(same);
    fit.fit_steps = 0;
    sigma_fit(same, fit, data, sched20());
    CHECK(snapshot(same) == untouched);

    DiTModel plain = he_random_init(small(), 0);
    CHECK_THROWS_AS(sigma_fit(plain, fit, data, sched20()), ContractError);
    DeskDataset empty = data;
    empty.labels.clear();
    CHECK_THROWS_AS(sigma_fit(same, fit, empty, sched20()), ContractError);
}

TEST_CASE("sigma fit slice size") {
    SigmaFitConfig fit;
    CHECK(sigma_fit_indices(4096, fit).size() == 64);
    CHECK(sigma_fit_indices(10000, fit).size() == 100);
    CHECK(sigma_fit_indices(40, fit).size() == 40);
    CHECK(sigma_fit_indices(4096, fit) == sigma_fit_indices(4096, fit));
}

TEST_CASE("he init statistics") {
    DiTConfig c = small();
    c.width = 64;
    c.hidden = 256;
    c.heads = 4;
    const DiTModel m = he_random_init(c, 9);
    const Tensor& w = m.blocks[0].weight[static_cast<std::size_t>(FamilyKind::in)];  // 64 x 256
    double sq = 0.0;
    for (double v : w.data()) sq += v * v;
    CHECK(std::abs(sq / w.numel() / (2.0 / 64.0) - 1.0) < 0.1);
    CHECK(snapshot(he_random_init(c, 9)) == snapshot(m));
    const auto& w1 = m.blocks[1].weight[static_cast<std::size_t>(FamilyKind::in)];
    CHECK(test::max_abs_diff(w.data(), w1.data()) > 0.0);
    CHECK(m.blocks[0].qkv_bias[0] == 0.0);
}

TEST_CASE("share init cycles source blocks") {
    const DiTModel source = he_random_init(small(Backing::plain, 3), 10);
    const DiTModel same = share_init(source, small(Backing::plain, 3));
    CHECK(snapshot(same) == snapshot(source));

    const DiTModel deep = share_init(source, small(Backing::plain, 6));
    for (std::size_t l = 0; l < 6; ++l)
        for (std::size_t k = 0; k < 4; ++k) CHECK(deep.blocks[l].weight[k].values() == source.blocks[l % 3].weight[k].values());
    CHECK(deep.head_weight.values() == source.head_weight.values());
    CHECK(count_params(deep).transferred == count_params(source).total);

    const DeskDataset data = make_dataset("shapes-A", 256, 8, 11);
    Rng rng(12);
    const std::vector<int> labels(data.labels.begin(), data.labels.begin() + 8);
    const std::size_t idx[] = {0, 1, 2, 3, 4, 5, 6, 7};
    const double loss = ddpm_loss(deep, gather_images(data, idx), labels, sched20(), rng).item();
    CHECK(std::isfinite(loss));

    DiTConfig wide = small();
    wide.width = 16;
    CHECK_THROWS_AS(share_init(source, wide), IncompatibleError);
}

TEST_CASE("truncated svd is the best rank-r approximation") {
    Rng rng(13);
    const std::size_t m = 6, n = 5;
    const Tensor w = random_tensor({m, n}, rng);
    std::vector<double> gram(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t k = 0; k < m; ++k) gram[i * n + j] += w[k * n + i] * w[k * n + j];
    const std::vector<double> eig = test::jacobi_eigenvalues(gram, n);  // squared singular values, ascending

    CHECK(frobenius(truncated_svd(w, 5).values(), w.values()) < 1e-8);
    for (std::size_t r = 1; r <= 4; ++r) {
        const Tensor approx = truncated_svd(w, r);
        double tail = 0.0;
        for (std::size_t k = 0; k + r < n; ++k) tail += eig[k];
        CHECK(std::abs(frobenius(approx.values(), w.values()) - std::sqrt(tail)) < 1e-9);

        // a shared-basis fit with the optimal diagonal never does better
        for (int trial = 0; trial < 20; ++trial) {
            const Tensor u = random_orthonormal(m, r, rng), v = random_orthonormal(n, r, rng);
            std::vector<double> fit(m * n, 0.0);
            for (std::size_t c = 0; c < r; ++c) {
                double s = 0.0;
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) s += u[i * r + c] * w[i * n + j] * v[j * r + c];
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) fit[i * n + j] += s * u[i * r + c] * v[j * r + c];
            }
            CHECK(frobenius(approx.values(), w.values()) <= frobenius(fit, w.values()) + 1e-12);
        }
    }
    CHECK_THROWS_AS(truncated_svd(w, 6), ConfigError);
    CHECK_THROWS_AS(truncated_svd(w, 0), ConfigError);
    CHECK_THROWS_AS(truncated_svd(Tensor({5}), 1), DimensionError);
}

TEST_CASE("svd transfer") {
    const DiTModel source = he_random_init(small(Backing::plain, 4), 14);
    Rng rng(15);
    const DiTModel full = svd_transfer_init(source, small(Backing::plain, 3), 8, rng);
    for (std::size_t l = 0; l < 3; ++l)
        for (std::size_t k = 0; k < 4; ++k)
            CHECK(frobenius(full.blocks[l].weight[k].values(), source.blocks[l].weight[k].values()) < 1e-8);

    const DiTModel low = svd_transfer_init(source, small(Backing::plain, 2), 2, rng);
    CHECK(low.blocks[1].weight[0].values() == truncated_svd(source.blocks[1].weight[0], 2).values());
    CHECK(count_params(low).transferred == svd_transfer_param_count(8, 16, 2, 2));
    // qkv 8+24, o 8+8, in 8+16, out 16+8, plus r per family
    CHECK(svd_transfer_param_count(8, 16, 2, 2) == 2 * 2 * (32 + 16 + 24 + 24 + 4));
    for (std::size_t depth = 2; depth <= 12; ++depth)
        CHECK(svd_transfer_param_count(8, 16, depth, 4) > learngene_param_count(8, 16, 4));

    CHECK_THROWS_AS(svd_transfer_init(source, small(Backing::plain, 5), 2, rng), ConfigError);
    CHECK_THROWS_AS(svd_transfer_init(source, small(Backing::plain, 2), 9, rng), ConfigError);
}

TEST_CASE("recipe dispatch") {
    CHECK(recipe_from_name("fine") == RecipeKind::fine);
    CHECK(recipe_name(RecipeKind::he_random) == "he");
    CHECK_THROWS_AS(recipe_from_name("kaiming"), ConfigError);

    const DeskDataset data = make_dataset("shapes-A", 256, 8, 16);
    InitRecipe fine;
    fine.kind = RecipeKind::fine;
    fine.fit.fit_steps = 2;
    CHECK_THROWS_AS(apply_recipe(fine, small(), 0, data, sched20()), ConfigError);
    fine.learngene = std::make_shared<Learngene>(random_learngene(17));
    const Initialized a = apply_recipe(fine, small(), 3, data, sched20());
    const Initialized b = apply_recipe(fine, small(), 3, data, sched20());
    CHECK(snapshot(a.model) == snapshot(b.model));
    CHECK(a.params_transferred == learngene_param_count(8, 16, 4));
    CHECK(a.model.families[0].U.requires_grad());
    fine.freeze_learngene = true;
    CHECK(!apply_recipe(fine, small(), 3, data, sched20()).model.families[0].U.requires_grad());

    InitRecipe svd;
    svd.kind = RecipeKind::svd_transfer;
    svd.source = std::make_shared<DiTModel>(he_random_init(small(), 18));
    CHECK_THROWS_AS(apply_recipe(svd, small(), 0, data, sched20()), ConfigError);
    svd.learngene = fine.learngene;
    const Initialized s = apply_recipe(svd, small(), 0, data, sched20());
    // budget 384 against 2 * 100 per rank
    CHECK(s.params_transferred == svd_transfer_param_count(8, 16, 2, 2));
}
