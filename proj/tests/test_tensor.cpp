#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "metalora/ops.hpp"
#include "metalora/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace metalora;
using Tensor64 = TensorT<double>;
using mltest::gradcheck;

namespace {

Tensor64 rand_tensor(Shape shape, std::mt19937& rng, bool rg = true, double stddev = 1.0) {
    return Tensor64::randn(std::move(shape), rng, 0.0, stddev, rg);
}

} // namespace

TEST_CASE("matmul basic values") {
    auto eye = Tensor64::from_data({2, 2}, {1, 0, 0, 1});
    auto a = Tensor64::from_data({2, 2}, {1, 2, 3, 4});
    auto r = matmul(eye, a);
    for (int i = 0; i < 4; ++i) CHECK(r.data()[i] == a.data()[i]);

    auto b = Tensor64::from_data({2, 2}, {1, 0, 0, 0});
    auto c = Tensor64::from_data({2, 1}, {0, 5});
    auto z = matmul(b, c);
    CHECK(z.data()[0] == 0.0);
    CHECK(z.data()[1] == 0.0);

    CHECK_THROWS_AS(matmul(c, a), dimension_error);
    CHECK_THROWS_AS(matmul(Tensor64::zeros({2, 3}), Tensor64::zeros({2, 3})), dimension_error);
}

TEST_CASE("matmul gradients vs finite differences, 20 seeds") {
    for (uint32_t seed = 0; seed < 20; ++seed) {
        std::mt19937 rng(seed);
        auto a = rand_tensor({3, 4}, rng);
        auto b = rand_tensor({4, 2}, rng);
        auto w = rand_tensor({3, 2}, rng, false);
        double err = gradcheck([&] { return sum(mul(matmul(a, b), w)); }, {a, b});
        CHECK(err < 1e-4);
    }
}

TEST_CASE("matmul gradient structure: d sum(a*b) / da equals b summed over columns") {
    std::mt19937 rng(7);
    auto a = rand_tensor({3, 4}, rng);
    auto b = rand_tensor({4, 2}, rng, false);
    auto loss = sum(matmul(a, b));
    loss.backward();
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 4; ++k) {
            double expect = b.data()[k * 2 + 0] + b.data()[k * 2 + 1];
            CHECK(a.grad()[i * 4 + k] == doctest::Approx(expect).epsilon(1e-12));
        }
}

TEST_CASE("softmax values") {
    auto u = softmax(Tensor64::from_data({3}, {0, 0, 0}), 0);
    for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

    auto s = softmax(Tensor64::from_data({2}, {1000.0, 1000.0 + std::log(3.0)}), 0);
    CHECK(s.data()[0] == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(s.data()[1] == doctest::Approx(0.75).epsilon(1e-9));
}

TEST_CASE("softmax rows sum to one and shift invariance") {
    std::mt19937 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        auto x = rand_tensor({4, 6}, rng, false, 3.0);
        auto y = softmax(x, 1);
        for (int i = 0; i < 4; ++i) {
            double s = 0;
            for (int j = 0; j < 6; ++j) s += y.data()[i * 6 + j];
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
        auto shifted = x.detach();
        for (auto& v : shifted.data()) v += 17.5;
        auto y2 = softmax(shifted, 1);
        for (size_t i = 0; i < y.data().size(); ++i)
            CHECK(y.data()[i] == doctest::Approx(y2.data()[i]).epsilon(1e-10));
    }
}

TEST_CASE("softmax jacobian vs finite differences, 20 seeds") {
    for (uint32_t seed = 100; seed < 120; ++seed) {
        std::mt19937 rng(seed);
        auto x = rand_tensor({5}, rng);
        auto w = rand_tensor({5}, rng, false);
        double err = gradcheck([&] { return sum(mul(softmax(x, 0), w)); }, {x});
        CHECK(err < 1e-4);
    }
}

TEST_CASE("layernorm of constant vector is zero before affine") {
    auto x = Tensor64::full({6}, 3.25);
    auto gamma = Tensor64::full({6}, 1.0);
    auto beta = Tensor64::zeros({6});
    auto y = layernorm(x, gamma, beta);
    for (double v : y.data()) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("gelu(0) == 0") {
    auto y = gelu(Tensor64::from_data({3}, {0.0, 1.0, -1.0}));
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] > 0.0);
    CHECK(y.data()[2] < 0.0);
}

TEST_CASE("elementwise and affine primitive gradients, 20 seeds each") {
    for (uint32_t seed = 0; seed < 20; ++seed) {
        std::mt19937 rng(900 + seed);
        auto x = rand_tensor({3, 5}, rng);
        auto gamma = rand_tensor({5}, rng, true, 0.5);
        auto beta = rand_tensor({5}, rng, true, 0.5);
        auto w = rand_tensor({3, 5}, rng, false);
        CHECK(gradcheck([&] { return sum(mul(layernorm(x, gamma, beta), w)); },
                        {x, gamma, beta}) < 1e-4);

        auto g = rand_tensor({7}, rng);
        auto gw = rand_tensor({7}, rng, false);
        CHECK(gradcheck([&] { return sum(mul(gelu(g), gw)); }, {g}) < 1e-4);

        auto lx = rand_tensor({2, 4}, rng);
        auto lw = rand_tensor({4, 3}, rng);
        auto lb = rand_tensor({3}, rng);
        auto lm = rand_tensor({2, 3}, rng, false);
        CHECK(gradcheck([&] { return sum(mul(linear(lx, lw, lb), lm)); }, {lx, lw, lb}) < 1e-4);

        auto a = rand_tensor({4, 3}, rng);
        auto b = rand_tensor({4, 3}, rng);
        CHECK(gradcheck([&] { return sum(mul(a, b)); }, {a, b}) < 1e-4);
        CHECK(gradcheck([&] { return mean(sub(a, b)); }, {a, b}) < 1e-4);
        CHECK(gradcheck([&] { return l2norm(sub(a, b)); }, {a, b}) < 1e-4);
        CHECK(gradcheck([&] { return sum(scale(transpose(a), 2.5)); }, {a}) < 1e-4);
    }
}

TEST_CASE("shape op gradients, 20 seeds") {
    for (uint32_t seed = 0; seed < 20; ++seed) {
        std::mt19937 rng(300 + seed);
        auto x = rand_tensor({5, 4}, rng);
        auto w1 = rand_tensor({3, 4}, rng, false);
        CHECK(gradcheck([&] { return sum(mul(take_rows(x, {4, 0, 2}), w1)); }, {x}) < 1e-4);

        auto w2 = rand_tensor({5, 2}, rng, false);
        CHECK(gradcheck([&] { return sum(mul(slice_cols(x, 1, 2), w2)); }, {x}) < 1e-4);

        auto y = rand_tensor({2, 4}, rng);
        auto w3 = rand_tensor({7, 4}, rng, false);
        CHECK(gradcheck([&] { return sum(mul(concat_rows<double>({x, y}), w3)); }, {x, y}) < 1e-4);

        auto z = rand_tensor({5, 3}, rng);
        auto w4 = rand_tensor({5, 7}, rng, false);
        CHECK(gradcheck([&] { return sum(mul(concat_cols<double>({x, z}), w4)); }, {x, z}) < 1e-4);

        auto b = rand_tensor({3, 2, 2}, rng);
        auto w5 = rand_tensor({2, 2}, rng, false);
        CHECK(gradcheck([&] { return sum(mul(select_outer(b, 1), w5)); }, {b}) < 1e-4);

        auto w6 = rand_tensor({20}, rng, false);
        CHECK(gradcheck([&] { return sum(mul(reshape(x, {20}), w6)); }, {x}) < 1e-4);
    }
}

TEST_CASE("cross entropy values") {
    auto sat = cross_entropy(Tensor64::from_data({1, 2}, {1e6, -1e6}), {0});
    CHECK(sat.item() == doctest::Approx(0.0).epsilon(1e-12));

    const int c = 5;
    auto uni = cross_entropy(Tensor64::zeros({2, c}), {1, 4});
    CHECK(uni.item() == doctest::Approx(std::log(static_cast<double>(c))).epsilon(1e-12));

    CHECK_THROWS_AS(cross_entropy(Tensor64::zeros({1, 3}), {3}), index_error);
    CHECK_THROWS_AS(cross_entropy(Tensor64::zeros({1, 3}), {-1}), index_error);
}

TEST_CASE("cross entropy nonnegative and gradient, 20 seeds") {
    for (uint32_t seed = 0; seed < 20; ++seed) {
        std::mt19937 rng(500 + seed);
        auto logits = rand_tensor({4, 3}, rng, true, 2.0);
        std::vector<int> targets = {0, 2, 1, 1};
        CHECK(cross_entropy(logits, targets).item() >= 0.0);
        CHECK(gradcheck([&] { return cross_entropy(logits, targets); }, {logits}) < 1e-4);
    }
}

TEST_CASE("kl divergence values") {
    std::mt19937 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        auto logits = rand_tensor({3, 4}, rng, false, 2.0);
        auto p = softmax(logits, 1);
        CHECK(kl_divergence(p, p).item() < 1e-9);
        CHECK(kl_divergence(p, p).item() >= 0.0);
    }

    auto s = Tensor64::from_data({1, 2}, {0.5, 0.5});
    auto t = Tensor64::from_data({1, 2}, {1.0, 0.0});
    auto v = kl_divergence(s, t);
    CHECK(std::isfinite(v.item()));
    CHECK(v.item() == doctest::Approx(std::log(2.0)).epsilon(1e-9));

    auto s2 = Tensor64::from_data({1, 2}, {0.25, 0.75});
    auto t2 = Tensor64::from_data({1, 2}, {0.5, 0.5});
    double expect = 0.5 * std::log(0.5 / 0.25) + 0.5 * std::log(0.5 / 0.75);
    CHECK(kl_divergence(s2, t2).item() == doctest::Approx(expect).epsilon(1e-6));
    CHECK(kl_divergence(s2, t2).item() == doctest::Approx(0.14384).epsilon(1e-3));

    auto bad = Tensor64::from_data({1, 2}, {0.7, 0.7});
    CHECK_THROWS_AS(kl_divergence(bad, t2), validation_error);
    CHECK_THROWS_AS(kl_divergence(t2, bad), validation_error);
}

TEST_CASE("kl divergence gradient flows to student only") {
    std::mt19937 rng(12);
    for (uint32_t seed = 0; seed < 20; ++seed) {
        auto sl = rand_tensor({3, 4}, rng);
        auto tl = rand_tensor({3, 4}, rng);
        auto loss_fn = [&] { return kl_divergence(softmax(sl, 1), softmax(tl, 1)); };
        CHECK(gradcheck(loss_fn, {sl}) < 1e-4);
        sl.zero_grad();
        tl.zero_grad();
        auto loss = loss_fn();
        loss.backward();
        CHECK(sl.has_grad());
        CHECK_FALSE(tl.has_grad()); // teacher side detached
    }
}

TEST_CASE("conv2d and channel statistics gradients, 20 seeds") {
    for (uint32_t seed = 0; seed < 20; ++seed) {
        std::mt19937 rng(700 + seed);
        auto x = rand_tensor({2, 2, 5, 5}, rng);
        auto w = rand_tensor({3, 2, 3, 3}, rng, true, 0.4);
        auto b = rand_tensor({3}, rng, true, 0.1);
        auto wm = rand_tensor({2, 3, 2, 2}, rng, false);
        CHECK(gradcheck([&] { return sum(mul(conv2d(x, w, b, 2), wm)); }, {x, w, b}) < 1e-4);

        auto cw = rand_tensor({2}, rng, false);
        auto xc = rand_tensor({3, 2, 4, 4}, rng);
        CHECK(gradcheck([&] { return sum(mul(channel_mean(xc), cw)); }, {xc}) < 1e-4);
        CHECK(gradcheck([&] { return sum(mul(channel_std(xc), cw)); }, {xc}) < 1e-4);
    }
}

TEST_CASE("prototype distance logits gradient, 20 seeds") {
    for (uint32_t seed = 0; seed < 20; ++seed) {
        std::mt19937 rng(800 + seed);
        auto e = rand_tensor({6}, rng);
        auto c = rand_tensor({4, 6}, rng);
        auto w = rand_tensor({4}, rng, false);
        CHECK(gradcheck([&] { return sum(mul(neg_distance_logits(e, c), w)); }, {e, c}) < 1e-4);
        CHECK(gradcheck([&] { return sum(mul(neg_sq_distance_logits(e, c), w)); }, {e, c}) < 1e-4);
        CHECK(gradcheck([&] { return sum(mul(softmax(neg_distance_logits(e, c), 0), w)); },
                        {e, c}) < 1e-4);
    }
}

TEST_CASE("whole-graph backward equals finite differences on a 2-layer network") {
    for (uint32_t seed = 0; seed < 5; ++seed) {
        std::mt19937 rng(40 + seed);
        auto x = rand_tensor({3, 4}, rng);
        auto w1 = rand_tensor({4, 6}, rng, true, 0.5);
        auto b1 = rand_tensor({6}, rng, true, 0.1);
        auto w2 = rand_tensor({6, 3}, rng, true, 0.5);
        auto b2 = rand_tensor({3}, rng, true, 0.1);
        std::vector<int> targets = {0, 1, 2};
        auto loss_fn = [&] {
            auto h = gelu(linear(x, w1, b1));
            return cross_entropy(linear(h, w2, b2), targets);
        };
        CHECK(gradcheck(loss_fn, {x, w1, b1, w2, b2}) < 1e-4);
    }
}

TEST_CASE("backward populates every reachable requires_grad tensor") {
    std::mt19937 rng(1);
    auto a = rand_tensor({2, 2}, rng);
    auto b = rand_tensor({2, 2}, rng);
    auto c = rand_tensor({2, 2}, rng, false);
    auto loss = sum(add(mul(a, b), c));
    loss.backward();
    CHECK(a.has_grad());
    CHECK(b.has_grad());
    CHECK_FALSE(c.has_grad());
}

TEST_CASE("gradient accumulates across backward calls until cleared") {
    auto a = Tensor64::from_data({2}, {1.0, 2.0}, true);
    sum(a).backward();
    sum(a).backward();
    CHECK(a.grad()[0] == doctest::Approx(2.0));
    a.zero_grad();
    sum(a).backward();
    CHECK(a.grad()[0] == doctest::Approx(1.0));
}

TEST_CASE("no-grad guard suppresses graph construction") {
    auto a = Tensor64::from_data({2}, {1.0, 2.0}, true);
    NoGradGuard ng;
    auto s = sum(a);
    CHECK_FALSE(s.requires_grad());
}

TEST_CASE("operations are deterministic given the seed") {
    auto run = [] {
        std::mt19937 rng(99);
        auto a = Tensor64::randn({4, 4}, rng);
        auto b = Tensor64::randn({4, 4}, rng);
        return matmul(softmax(a, 1), gelu(b)).data();
    };
    CHECK(run() == run());
}
