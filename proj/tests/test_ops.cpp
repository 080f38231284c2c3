#include <cmath>
#include <numbers>

#include "doctest.h"
#include "fine/errors.hpp"
#include "fine/ops.hpp"
#include "test_support.hpp"

using namespace fine;
using fine::test::gradcheck;
using fine::test::random_tensor;
using fine::test::weighted_sum;

namespace {

constexpr int kInstances = 20;
constexpr double kTol = 1e-4;

// naive per-head reference for the fused attention op
std::vector<double> attention_oracle(const Tensor& qkv, std::size_t batch, std::size_t tokens, std::size_t heads) {
    const std::size_t width = qkv.dim(1) / 3, hd = width / heads;
    std::vector<double> out(batch * tokens * width, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < tokens; ++i) {
                std::vector<double> s(tokens);
                for (std::size_t j = 0; j < tokens; ++j) {
                    double dot = 0;
                    for (std::size_t c = 0; c < hd; ++c)
                        dot += qkv.at(b * tokens + i, h * hd + c) * qkv.at(b * tokens + j, width + h * hd + c);
                    s[j] = dot / std::sqrt(static_cast<double>(hd));
                }
                double z = 0;
                for (double& v : s) z += (v = std::exp(v));
                for (std::size_t j = 0; j < tokens; ++j)
                    for (std::size_t c = 0; c < hd; ++c)
                        out[(b * tokens + i) * width + h * hd + c] +=
                            s[j] / z * qkv.at(b * tokens + j, 2 * width + h * hd + c);
            }
    return out;
}

}  // namespace

TEST_CASE("matmul matches the triple loop and rejects bad shapes") {
    Rng rng(1);
    for (int k = 0; k < 5; ++k) {
        const Tensor a = random_tensor({3 + static_cast<std::size_t>(k), 4}, rng), b = random_tensor({4, 5}, rng);
        CHECK(test::max_abs_diff(ops::matmul(a, b).data(), test::naive_matmul(a, b)) < 1e-12);
    }
    CHECK_THROWS_AS(ops::matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
    CHECK_THROWS_AS(ops::add(Tensor({2, 3}), Tensor({3, 2})), DimensionError);
}

TEST_CASE("elementwise primitives match finite differences") {
    Rng rng(2);
    for (int k = 0; k < kInstances; ++k) {
        const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), w = random_tensor({3, 4}, rng);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::add(in[0], in[1]), w); }, {a, b}) < kTol);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::sub(in[0], in[1]), w); }, {a, b}) < kTol);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::mul(in[0], in[1]), w); }, {a, b}) < kTol);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::scale(in[0], -1.7), w); }, {a}) < kTol);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::gelu(in[0]), w); }, {a}) < kTol);
        CHECK(gradcheck([&](const auto& in) { return ops::mean(in[0]); }, {a}) < kTol);
        CHECK(gradcheck([&](const auto& in) { return ops::mse(in[0], in[1]); }, {a, b}) < kTol);
    }
}

TEST_CASE("matrix primitives match finite differences") {
    Rng rng(3);
    for (int k = 0; k < kInstances; ++k) {
        const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
        const Tensor w35 = random_tensor({3, 5}, rng), w43 = random_tensor({4, 3}, rng), w34 = random_tensor({3, 4}, rng);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::matmul(in[0], in[1]), w35); }, {a, b}) < kTol);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::transpose(in[0]), w43); }, {a}) < kTol);
        const Tensor bias = random_tensor({4}, rng), rows = random_tensor({1, 4}, rng);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::add_bias(in[0], in[1]), w34); }, {a, bias}) < kTol);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::add_tiled(in[0], in[1]), w34); }, {a, rows}) < kTol);
        const Tensor groups = random_tensor({3, 4}, rng);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::add_per_group(in[0], in[1]), w34); },
                        {a, groups}) < kTol);
        const Tensor gain = random_tensor({4}, rng);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::layer_norm(in[0], in[1], in[2]), w34); },
                        {a, gain, bias}) < kTol);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::softmax_rows(in[0], 0.7), w34); }, {a}) < kTol);
        const Tensor s = random_tensor({4}, rng);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::scale_columns(in[0], in[1]), w34); }, {a, s}) <
              kTol);
        const Tensor g = random_tensor({2}, rng), w8 = random_tensor({8}, rng);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::expand_sigma(in[0], 8, 4), w8); }, {g}) < kTol);
        const std::size_t idx[] = {2, 0, 2};
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::gather_rows(in[0], idx), w34); }, {a}) < kTol);
    }
}

TEST_CASE("attention matches the per-head loop and finite differences") {
    Rng rng(4);
    for (int k = 0; k < kInstances; ++k) {
        const std::size_t batch = 2, tokens = 3, heads = 2, width = 4;
        const Tensor qkv = random_tensor({batch * tokens, 3 * width}, rng);
        CHECK(test::max_abs_diff(ops::attention(qkv, batch, tokens, heads).data(),
                                 attention_oracle(qkv, batch, tokens, heads)) < 1e-12);
        const Tensor w = random_tensor({batch * tokens, width}, rng);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::attention(in[0], batch, tokens, heads), w); },
                        {qkv}) < kTol);
    }
    CHECK_THROWS_AS(ops::attention(Tensor({5, 12}), 2, 3, 2), DimensionError);
}

TEST_CASE("patchify and unpatchify are inverse permutations") {
    Rng rng(5);
    const Tensor x = random_tensor({2, 3, 4, 4}, rng);
    const Tensor tokens = ops::patchify(x, 2);
    CHECK(tokens.shape() == Shape{8, 12});
    // token 1 of image 0 is the top-right patch; its first entries are channel 0 rows 0..1, cols 2..3
    CHECK(tokens.at(1, 0) == x[2]);
    CHECK(tokens.at(1, 1) == x[3]);
    CHECK(tokens.at(1, 2) == x[6]);
    const Tensor back = ops::unpatchify(tokens, 2, 3, 4, 2);
    CHECK(back.values() == x.values());
    const Tensor w = random_tensor({8, 12}, rng), w2 = random_tensor({2, 3, 4, 4}, rng);
    for (int k = 0; k < kInstances; ++k) {
        const Tensor xi = random_tensor({2, 3, 4, 4}, rng);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::patchify(in[0], 2), w); }, {xi}) < kTol);
        const Tensor ti = random_tensor({8, 12}, rng);
        CHECK(gradcheck([&](const auto& in) { return weighted_sum(ops::unpatchify(in[0], 2, 3, 4, 2), w2); }, {ti}) <
              kTol);
    }
    CHECK_THROWS_AS(ops::patchify(Tensor({1, 1, 5, 5}), 2), ConfigError);
}

TEST_CASE("softmax rows are stochastic and overflow-safe") {
    Rng rng(6);
    const Tensor x = random_tensor({6, 7}, rng, 30.0);
    const Tensor y = ops::softmax_rows(x, 1.0);
    for (std::size_t r = 0; r < 6; ++r) {
        double total = 0;
        for (std::size_t c = 0; c < 7; ++c) {
            CHECK(y.at(r, c) >= 0.0);
            CHECK(y.at(r, c) <= 1.0);
            total += y.at(r, c);
        }
        CHECK(std::abs(total - 1.0) < 1e-12);
    }
    const Tensor big = ops::softmax_rows(Tensor({1, 2}, std::vector<double>{1000.0, 0.0}), 1.0);
    CHECK(std::abs(big[0] - 1.0) < 1e-12);
    CHECK(std::abs(big[1]) < 1e-12);
    CHECK_THROWS_AS(ops::softmax_rows(x, 0.0), ContractError);
}

TEST_CASE("gelu values") {
    const Tensor y = ops::gelu(Tensor({3}, std::vector<double>{0.0, 1.0, 8.0}));
    CHECK(y[0] == 0.0);
    CHECK(std::abs(y[1] - 0.8413447460685429) < 1e-12);
    CHECK(std::abs(y[2] - 8.0) < 1e-9);
}

TEST_CASE("layer norm output has zero mean and unit variance per row") {
    Rng rng(7);
    const Tensor x = random_tensor({4, 16}, rng, 3.0);
    const Tensor y = ops::layer_norm(x, Tensor({16}, 1.0), Tensor({16}, 0.0));
    for (std::size_t r = 0; r < 4; ++r) {
        double mu = 0, var = 0;
        for (std::size_t c = 0; c < 16; ++c) mu += y.at(r, c) / 16;
        for (std::size_t c = 0; c < 16; ++c) var += (y.at(r, c) - mu) * (y.at(r, c) - mu) / 16;
        CHECK(std::abs(mu) < 1e-12);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("composite chain matches finite differences") {
    Rng rng(8);
    for (int k = 0; k < kInstances; ++k) {
        const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 4}, rng), c = random_tensor({4, 2}, rng);
        const Tensor w = random_tensor({3, 2}, rng);
        auto f = [&](const auto& in) {
            return weighted_sum(ops::matmul(ops::gelu(ops::softmax_rows(ops::matmul(in[0], in[1]), 1.0)), in[2]), w);
        };
        CHECK(gradcheck(f, {a, b, c}) < kTol);
    }
}

TEST_CASE("gradients accumulate over shared inputs and replay deterministically") {
    Rng rng(9);
    const Tensor a = random_tensor({3, 3}, rng);
    auto run = [&] {
        Tensor x = a.clone();
        x.set_requires_grad(true);
        GradTape tape;
        TapeScope scope(tape);
        const Tensor l = ops::sum(ops::matmul(ops::gelu(ops::matmul(x, x)), x));
        tape.backward(l);
        return x.grad();
    };
    const auto g1 = run(), g2 = run();
    CHECK(g1 == g2);
    CHECK(gradcheck([](const auto& in) { return ops::sum(ops::matmul(ops::gelu(ops::matmul(in[0], in[0])), in[0])); },
                    {a}) < kTol);
}

TEST_CASE("backward needs a scalar loss and no tape means no recording") {
    GradTape tape;
    CHECK_THROWS_AS(tape.backward(Tensor({2})), ContractError);
    Tensor x({2, 2}, 1.0);
    x.set_requires_grad(true);
    {
        NoGradScope none;
        const Tensor y = ops::matmul(x, x);
        CHECK(!y.requires_grad());
    }
    CHECK(active_tape() == nullptr);
}
