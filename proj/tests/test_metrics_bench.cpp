#include <cmath>

#include "doctest.h"
#include "fine/bench.hpp"
#include "fine/errors.hpp"
#include "fine/metrics.hpp"
#include "test_support.hpp"

using namespace fine;
using fine::test::random_tensor;

namespace {

std::vector<LossPoint> curve_of(const std::vector<double>& losses) {
    std::vector<LossPoint> c;
    for (std::size_t i = 0; i < losses.size(); ++i) c.push_back({i, losses[i]});
    return c;
}

}  // namespace

TEST_CASE("frechet distance sanity") {
    Rng rng(1);
    const GaussianStats g = test::random_gaussian(5, rng);
    CHECK(std::abs(frechet_distance(g, g)) < 1e-8);

    GaussianStats n0{1, {0.0}, {1.0}}, n1{1, {1.0}, {1.0}};
    CHECK(std::abs(frechet_distance(n0, n1) - 1.0) < 1e-12);
    GaussianStats wide{1, {0.0}, {4.0}};
    CHECK(std::abs(frechet_distance(n0, wide) - 1.0) < 1e-12);

    for (int trial = 0; trial < 10; ++trial) {
        const GaussianStats a = test::random_gaussian(5, rng), b = test::random_gaussian(5, rng);
        const double ab = frechet_distance(a, b);
        CHECK(std::abs(ab - frechet_distance(b, a)) < 1e-8);
        CHECK(std::abs(ab - test::frechet_oracle(a, b)) < 1e-6);
        CHECK(ab >= 0.0);
    }
    CHECK_THROWS_AS(frechet_distance(n0, g), ContractError);
}

TEST_CASE("feature statistics") {
    Rng rng(2);
    const Tensor constant({10, 1, 2, 2}, 0.5);
    const GaussianStats c = feature_stats(constant);
    CHECK(c.dim == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(c.mean[i] == doctest::Approx(0.5));
        for (std::size_t j = 0; j < 4; ++j) CHECK(c.cov[i * 4 + j] == doctest::Approx(i == j ? kCovarianceRidge : 0.0));
    }

    const Tensor x = random_tensor({50, 1, 2, 2}, rng);
    Tensor reversed({50, 1, 2, 2});
    for (std::size_t i = 0; i < 50; ++i) std::copy_n(x.data().begin() + 4 * i, 4, reversed.data().begin() + 4 * (49 - i));
    const GaussianStats fx = feature_stats(x), fr = feature_stats(reversed);
    CHECK(test::max_abs_diff(fx.mean, fr.mean) < 1e-12);
    CHECK(test::max_abs_diff(fx.cov, fr.cov) < 1e-12);

    const Tensor proj = projection_matrix(128, 64, 3);
    CHECK(proj.shape() == Shape{128, 64});
    CHECK(proj.values() == projection_matrix(128, 64, 3).values());
    double gram_err = 0.0;
    for (std::size_t i = 0; i < 64; ++i)
        for (std::size_t j = 0; j < 64; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 128; ++k) s += proj[k * 64 + i] * proj[k * 64 + j];
            gram_err = std::max(gram_err, std::abs(s - (i == j ? 1.0 : 0.0)));
        }
    CHECK(gram_err < 1e-12);

    const Tensor big = random_tensor({10000, 2, 8, 8}, rng);
    const GaussianStats p = feature_stats(big, &proj);
    CHECK(p.dim == 64);
    for (std::size_t i = 0; i < 64; ++i) {
        CHECK(std::abs(p.mean[i]) < 0.05);
        for (std::size_t j = 0; j < 64; ++j) CHECK(std::abs(p.cov[i * 64 + j] - (i == j ? 1.0 : 0.0)) < 0.05);
    }
    CHECK_THROWS_AS(feature_stats(Tensor()), ContractError);
    CHECK_THROWS_AS(feature_stats(x, &proj), DimensionError);
}

TEST_CASE("moving average and steps to target") {
    const auto c = curve_of({4, 3, 2, 1, 0.5, 0.5});
    const auto ma = moving_average(c, 2);
    CHECK(!ma[0]);
    CHECK(*ma[1] == 3.5);
    CHECK(*ma[5] == 0.5);
    CHECK(moving_average(c, 10)[5] == std::nullopt);
    CHECK(*best_moving_average(c, 2) == 0.5);
    CHECK(*steps_to_target(c, 2.5, 2) == 3);  // first window at step index 2
    CHECK(!steps_to_target(c, 0.1, 2));

    Rng rng(4);
    std::vector<double> noisy;
    for (int i = 0; i < 1000; ++i) noisy.push_back(1.0 / (1 + 0.01 * i) + 0.1 * rng.normal());
    const auto curve = curve_of(noisy);
    std::optional<std::size_t> previous;
    for (double target = 0.2; target <= 1.2; target += 0.01) {
        const auto s = steps_to_target(curve, target);
        if (previous) {
            REQUIRE(s);
            CHECK(*s <= *previous);
        }
        if (s) previous = s;
    }
}

TEST_CASE("aggregation treats unreached targets as missing") {
    std::vector<BenchResult> rs(4);
    rs[0].recipe = "fine", rs[0].depth = 6, rs[0].seed = 0, rs[0].steps_to_target = 100, rs[0].frechet = 2.0;
    rs[1].recipe = "fine", rs[1].depth = 6, rs[1].seed = 1, rs[1].frechet = 4.0;
    rs[2].recipe = "he", rs[2].depth = 6, rs[2].seed = 0, rs[2].steps_to_target = 300;
    rs[3].recipe = "he", rs[3].depth = 4, rs[3].seed = 0, rs[3].error = "boom";
    for (auto& r : rs) r.params_transferred = r.recipe == "fine" ? 32768 : 0;

    const auto rows = aggregate_report(rs);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].recipe == "fine");
    CHECK(rows[1].recipe == "he");
    CHECK(rows[1].depth == 4);
    CHECK(rows[1].failed == 1);
    CHECK(rows[0].steps_to_target.count == 1);
    CHECK(rows[0].steps_to_target.mean == 100.0);
    CHECK(rows[0].steps_to_target.sd == 0.0);
    CHECK(rows[0].frechet.mean == 3.0);
    CHECK(rows[0].frechet.sd == doctest::Approx(std::sqrt(2.0)));

    CHECK(summary_csv(rs).rfind("recipe,depth,seed,steps_to_target,frechet,params_transferred\nfine,6,0,100,2,32768\n"
                                "fine,6,1,NA,4,32768\n", 0) == 0);
    const std::string md = aggregate_markdown(rows);
    CHECK(md.find("| fine | 6 | 100 ± 0 | 3 ± 1.414213562 | 32768 | 1/2 |") != std::string::npos);
    CHECK(aggregate_csv(rows).find("he,4,1,1,0,NA,NA,NA,NA,0") != std::string::npos);

    const auto sp = speedups(rs, "he", "fine");
    REQUIRE(sp.size() == 1);
    CHECK(sp[0].ratio == 3.0);
}

TEST_CASE("curve csv schema and derived targets") {
    std::vector<BenchResult> rs(2);
    rs[0].recipe = "he", rs[0].depth = 2, rs[0].curve = curve_of(std::vector<double>(150, 1.0));
    rs[1].recipe = "fine", rs[1].depth = 2;
    std::vector<double> falling(150);
    for (std::size_t i = 0; i < 150; ++i) falling[i] = 2.0 - i / 100.0;
    rs[1].curve = curve_of(falling);
    CHECK(curves_csv({rs[0]}).rfind("recipe,depth,seed,step,loss\nhe,2,0,0,1\nhe,2,0,1,1\n", 0) == 0);

    assign_targets(rs, std::nullopt);
    CHECK(*rs[0].steps_to_target == 100);
    // target 1.05: the trailing mean over [i-99, i] is 2.495 - i/100
    CHECK(*rs[1].steps_to_target == 146);
    assign_targets(rs, 0.5);
    CHECK(!rs[0].steps_to_target);
}
