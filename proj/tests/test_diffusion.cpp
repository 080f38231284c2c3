#include <cmath>

#include "doctest.h"
#include "fine/diffusion.hpp"
#include "fine/errors.hpp"
#include "fine/factorized.hpp"
#include "fine/ops.hpp"
#include "test_support.hpp"

using namespace fine;
using fine::test::random_tensor;

namespace {

// Perfect noise predictor for data concentrated at 0: z_t = sqrt(1 - abar_t) eps.
class DeltaOracle : public NoisePredictor {
public:
    explicit DeltaOracle(const DiffusionSchedule& sched) : sched_(sched) {}
    Tensor predict_noise(const Tensor& z, std::span<const int> t, std::span<const int>) const override {
        ++calls;
        Tensor out(z.shape());
        const std::size_t per = z.numel() / t.size();
        for (std::size_t i = 0; i < z.numel(); ++i)
            out[i] = z[i] / std::sqrt(1.0 - sched_.alpha_bar(static_cast<std::size_t>(t[i / per])));
        return out;
    }
    Shape sample_shape() const override { return {1, 4, 4}; }
    mutable std::size_t calls = 0;

private:
    const DiffusionSchedule& sched_;
};

class ZeroModel : public NoisePredictor {
public:
    Tensor predict_noise(const Tensor& z, std::span<const int>, std::span<const int>) const override {
        return Tensor(z.shape());
    }
    Shape sample_shape() const override { return {1, 4, 4}; }
};

// Returns the pinned noise, so the loss vanishes.
class EchoModel : public NoisePredictor {
public:
    explicit EchoModel(Tensor eps) : eps_(std::move(eps)) {}
    Tensor predict_noise(const Tensor&, std::span<const int>, std::span<const int>) const override { return eps_; }
    Shape sample_shape() const override { return {1, 4, 4}; }

private:
    Tensor eps_;
};

DiTConfig tiny_factorized() {
    DiTConfig c;
    c.image_size = 4;
    c.width = 8;
    c.hidden = 16;
    c.heads = 2;
    c.depth = 2;
    c.time_features = 4;
    c.diffusion_steps = 20;
    c.backing = Backing::factorized;
    c.rank = 4;
    c.group = 2;
    return c;
}

}  // namespace

TEST_CASE("linear schedule") {
    const DiffusionSchedule s;
    CHECK(s.steps() == 400);
    CHECK(s.beta_start() == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(s.beta_end() == doctest::Approx(2e-2).epsilon(1e-12));
    double prod = 1.0;
    for (std::size_t t = 0; t < s.steps(); ++t) {
        prod *= s.alpha(t);
        CHECK(std::abs(s.alpha_bar(t) - prod) < 1e-12);
        const double a = std::sqrt(s.alpha_bar(t)), b = std::sqrt(1.0 - s.alpha_bar(t));
        CHECK(std::abs(a * a + b * b - 1.0) < 1e-12);
    }
    CHECK(std::abs(s.beta(200) - s.beta(199) - (2e-2 - 1e-4) / 399.0) < 1e-15);
}

TEST_CASE("q_sample") {
    const DiffusionSchedule s;
    Rng rng(7);
    const Tensor z0 = random_tensor({2, 1, 4, 4}, rng), eps = random_tensor({2, 1, 4, 4}, rng);
    const Tensor near = q_sample(z0, 0, eps, s);
    CHECK(test::max_abs_diff(near.data(), z0.data()) < 5 * std::sqrt(s.beta(0)));

    const Tensor zero = q_sample(Tensor(z0.shape()), 123, eps, s);
    for (std::size_t i = 0; i < eps.numel(); ++i) CHECK(zero[i] == std::sqrt(1.0 - s.alpha_bar(123)) * eps[i]);

    const int ts[] = {5, 300};
    const Tensor mixed = q_sample(z0, ts, eps, s);
    CHECK(mixed[0] == q_sample(z0, 5, eps, s)[0]);
    CHECK(mixed[20] == q_sample(z0, 300, eps, s)[20]);

    CHECK_THROWS_AS(q_sample(z0, 0, Tensor({2, 1, 4, 3}), s), DimensionError);
    CHECK_THROWS_AS(q_sample(z0, 400, eps, s), ContractError);
}

TEST_CASE("q_sample preserves unit variance") {
    const DiffusionSchedule s;
    Rng rng(8);
    const std::size_t n = 100000;
    for (int t : {0, 150, 399}) {
        const Tensor z0 = random_tensor({n}, rng), eps = random_tensor({n}, rng);
        const Tensor z = q_sample(z0, t, eps, s);
        double sum = 0, sq = 0;
        for (double v : z.data()) {
            sum += v;
            sq += v * v;
        }
        const double mean = sum / n, var = sq / n - mean * mean;
        CHECK(std::abs(var - 1.0) < 0.05);
    }
}

TEST_CASE("ddpm loss with stub models") {
    const DiffusionSchedule s(20);
    Rng rng(9);
    const Tensor z0 = random_tensor({8, 1, 4, 4}, rng);
    const std::vector<int> cls(8, 1);
    const NoiseDraw draw = draw_noise(z0.shape(), cls, s, rng);
    CHECK(ddpm_loss(EchoModel(draw.eps), z0, draw, s).item() == 0.0);

    double total = 0.0;
    const int reps = 200;
    const Tensor big = random_tensor({64, 1, 4, 4}, rng);
    const std::vector<int> big_cls(64, 0);
    for (int i = 0; i < reps; ++i) total += ddpm_loss(ZeroModel(), big, big_cls, s, rng).item();
    CHECK(std::abs(total / reps - 1.0) < 0.01);
}

TEST_CASE("noise draws: timestep range and condition dropout rate") {
    const DiffusionSchedule s(50);
    Rng rng(10);
    const std::size_t n = 20000;
    const std::vector<int> cls(n, 1);
    const NoiseDraw d = draw_noise({n, 1, 2, 2}, cls, s, rng);
    std::size_t dropped = 0;
    for (std::size_t i = 0; i < n; ++i) {
        CHECK((d.t[i] >= 0 && d.t[i] < 50));
        dropped += d.class_ids[i] == kUnconditional;
    }
    CHECK(std::abs(static_cast<double>(dropped) / n - 0.1) < 0.01);
    CHECK(draw_noise({n, 1, 2, 2}, cls, s, rng, 0.0).class_ids == cls);
}

TEST_CASE("ddpm loss gradient with respect to a sigma group") {
    const DiffusionSchedule s(20);
    Rng rng(11);
    DiTModel m(tiny_factorized());
    init_fresh_embeddings(m, rng);
    m.families = init_shared_factors(8, 16, 4, 2, 2, rng);
    for (NamedTensor& p : m.parameters())
        for (double& v : p.tensor.data())
            if (v == 0.0) v = 0.1 * rng.normal();
    const Tensor z0 = random_tensor({4, 1, 4, 4}, rng);
    const std::vector<int> cls = {0, 1, 0, 1};
    const NoiseDraw draw = draw_noise(z0.shape(), cls, s, rng);

    Tensor sigma = m.families[1].sigma[1];
    m.set_trainable(false);
    sigma.set_requires_grad(true);
    {
        GradTape tape;
        TapeScope scope(tape);
        tape.backward(ddpm_loss(m, z0, draw, s));
    }
    const Tensor numeric = finite_diff_grad([&](const Tensor&) { return ddpm_loss(m, z0, draw, s).item(); }, sigma);
    CHECK(test::max_rel_error(sigma.grad(), numeric.values()) < 1e-4);
}

TEST_CASE("sampling") {
    const DiffusionSchedule s(50);
    DeltaOracle oracle(s);
    Rng a(12), b(12);
    const Tensor x = sample(oracle, s, 6, 0, a, 4);
    CHECK(x.shape() == Shape{6, 1, 4, 4});
    CHECK(oracle.calls == 2 * 50);
    double mean_abs = 0.0;
    for (double v : x.data()) mean_abs += std::abs(v);
    CHECK(mean_abs / x.numel() < 0.1);
    CHECK(sample(oracle, s, 6, 0, b, 4).values() == x.values());

    Rng c(13), d(13);
    const Tensor y = sample(ZeroModel(), s, 3, 1, c);
    CHECK(y.values() == sample(ZeroModel(), s, 3, 1, d).values());
}

TEST_CASE("ema closed form") {
    Tensor p({3}, std::vector<double>{1.0, -2.0, 0.5});
    std::vector<NamedTensor> params = {{"p", p}};
    EmaModel ema(params, 0.9);
    CHECK(EmaModel(params).decay() == 0.9999);
    Tensor& shadow = ema.shadow()[0].tensor;
    const std::vector<double> s0 = {4.0, 0.0, -1.0};
    std::copy(s0.begin(), s0.end(), shadow.data().begin());
    const int k = 25;
    for (int i = 0; i < k; ++i) ema.update(params);
    const double dk = std::pow(0.9, k);
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(shadow[i] - (dk * s0[i] + (1 - dk) * p[i])) < 1e-12);

    EmaModel instant(params, 0.0);
    p[0] = 9.0;
    instant.update(params);
    CHECK(instant.shadow()[0].tensor.values() == p.values());

    Tensor other({3});
    instant.copy_to({{"p", other}});
    CHECK(other.values() == p.values());

    CHECK_THROWS_AS(ema.update({{"q", p}}), ContractError);
    CHECK_THROWS_AS(ema.update({{"p", Tensor({4})}}), ContractError);
    CHECK_THROWS_AS(EmaModel(params, 1.5), ConfigError);
}
