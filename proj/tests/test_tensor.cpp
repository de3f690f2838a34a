#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mtladapt/tensor.hpp"
#include "test_helpers.hpp"

using namespace mtladapt;
using mtltest::bitwise_equal;
using mtltest::grad_rel_err;
using mtltest::max_abs_diff;
using mtltest::random_tensor;

TEST_CASE("matmul identity and hand arithmetic") {
    const Tensor I = Tensor::identity(2);
    const Tensor m = Tensor::from_values({2, 2}, {3, 4, 5, 6});
    CHECK(bitwise_equal(matmul(I, m), m));

    const Tensor a = Tensor::from_values({1, 2}, {1, 2});
    const Tensor b = Tensor::from_values({2, 1}, {3, 4});
    CHECK(matmul(a, b)(0, 0) == 11.0);

    // dimension error names both shapes
    try {
        matmul(b, m);
        FAIL("expected dimension error");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x1]") != std::string::npos);
        CHECK(msg.find("[2x2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient of sum(A*B) matches column-sum closed form and finite differences") {
    std::mt19937_64 rng(7);
    Tensor a = random_tensor({3, 4}, rng, true);
    Tensor b = random_tensor({4, 5}, rng, true);
    Tensor loss = sum(matmul(a, b));
    backward(loss);

    // d sum(A·B) / dA[i,t] = sum_j B[t,j], independent of i
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t t = 0; t < 4; ++t) {
            double col_sum = 0.0;
            for (std::size_t j = 0; j < 5; ++j) col_sum += b(t, j);
            CHECK(a.grad()[i * 4 + t] == doctest::Approx(col_sum).epsilon(1e-12));
        }
    }

    Tensor fd = finite_diff_grad(
        [&](const Tensor& x) {
            NoGradGuard ng;
            return sum(matmul(x, b)).scalar();
        },
        a, 1e-5);
    Tensor analytic = Tensor::from_values({3, 4}, {a.grad().begin(), a.grad().end()});
    CHECK(grad_rel_err(analytic, fd) < 1e-6);
}

TEST_CASE("softmax_with_temperature examples") {
    const Tensor sym = softmax_with_temperature(Tensor::from_values({2}, {0, 0}), 1.0);
    CHECK(sym(0) == 0.5);
    CHECK(sym(1) == 0.5);

    const Tensor closed = softmax_with_temperature(Tensor::from_values({2}, {std::log(2.0), 0.0}), 1.0);
    CHECK(closed(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(closed(1) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

    const Tensor sharp = softmax_with_temperature(Tensor::from_values({2}, {1, 0}), 0.01);
    CHECK(sharp(0) > 0.999);

    CHECK_THROWS_AS(softmax_with_temperature(Tensor::from_values({2}, {1, 0}), 0.0), std::invalid_argument);
    CHECK_THROWS_AS(softmax_with_temperature(Tensor::from_values({2}, {1, 0}), -1.0), std::invalid_argument);
}

TEST_CASE("softmax_with_temperature sums to one and is permutation equivariant") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t n = 2 + trial % 6;
        Tensor v = random_tensor({n}, rng, false, 3.0);
        const double tau = 0.01 + uniform_double(rng, 0.0, 2.0);
        Tensor s = softmax_with_temperature(v, tau);
        double total = 0.0;
        for (double x : s.values()) {
            CHECK(x >= 0.0);
            total += x;
        }
        CHECK(std::abs(total - 1.0) < 1e-12);

        // reversal permutation
        std::vector<double> rev(v.values().rbegin(), v.values().rend());
        Tensor s_rev = softmax_with_temperature(Tensor::from_values({n}, rev), tau);
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(s(i) == doctest::Approx(s_rev(n - 1 - i)).epsilon(1e-14));
        }
    }
}

TEST_CASE("elementwise trivia") {
    CHECK(relu(Tensor::from_values({1}, {-1.0})).scalar() == 0.0);
    CHECK(gelu(Tensor::from_values({1}, {0.0})).scalar() == 0.0);

    Tensor x = Tensor::from_values({1}, {2.0}, true);
    backward(relu(x));
    CHECK(x.grad()[0] == 1.0);

    CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), std::invalid_argument);
}

TEST_CASE("cross_entropy uniform and extreme logits") {
    const Tensor uniform = cross_entropy(Tensor::from_values({1, 2}, {0, 0}), {0});
    CHECK(uniform.scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-14));

    // high-precision oracle: log(1 + exp(-1000)) == 0 to double precision
    const Tensor extreme = cross_entropy(Tensor::from_values({1, 2}, {1000, 0}), {0});
    CHECK(std::isfinite(extreme.scalar()));
    CHECK(extreme.scalar() == 0.0);

    CHECK_THROWS_AS(cross_entropy(Tensor::zeros({1, 2}), {2}), std::out_of_range);
}

TEST_CASE("cross_entropy gradient matches finite differences on random 3x4 logits") {
    std::mt19937_64 rng(23);
    Tensor logits = random_tensor({3, 4}, rng, true);
    const std::vector<std::size_t> labels = {1, 0, 3};
    backward(cross_entropy(logits, labels));
    Tensor analytic = Tensor::from_values({3, 4}, {logits.grad().begin(), logits.grad().end()});
    Tensor fd = finite_diff_grad(
        [&](const Tensor& x) { return cross_entropy(x, labels).scalar(); }, logits, 1e-5);
    CHECK(grad_rel_err(analytic, fd) < 1e-6);
}

TEST_CASE("backward on scalar chains") {
    Tensor x = Tensor::from_values({1}, {3.0}, true);
    backward(mul(x, x));
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-14));

    Tensor a = Tensor::from_values({1}, {2.0}, true);
    Tensor b = Tensor::from_values({1}, {5.0}, true);
    backward(mul(a, b));
    CHECK(a.grad()[0] == 5.0);
    CHECK(b.grad()[0] == 2.0);

    CHECK_THROWS_AS(backward(Tensor::zeros({2})), std::invalid_argument);
}

TEST_CASE("finite_diff_grad basics") {
    std::mt19937_64 rng(3);
    Tensor x = random_tensor({2, 3}, rng);
    Tensor ones = finite_diff_grad([](const Tensor& t) { return sum(t).scalar(); }, x, 1e-5);
    for (double v : ones.values()) {
        CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
    }

    Tensor c = Tensor::from_values({1}, {2.0});
    Tensor cube = finite_diff_grad(
        [](const Tensor& t) {
            const double v = t.values()[0];
            return v * v * v;
        },
        c, 1e-5);
    CHECK(cube.scalar() == doctest::Approx(12.0).epsilon(1e-6));
    CHECK(c.scalar() == 2.0);  // restored

    CHECK_THROWS_AS(finite_diff_grad([](const Tensor&) { return 0.0; }, c, 0.0), std::invalid_argument);
}

TEST_CASE("backward agrees with finite differences on a softmax composite") {
    std::mt19937_64 rng(31);
    Tensor v = random_tensor({5}, rng, true);
    auto f = [](const Tensor& t) {
        Tensor s = softmax_with_temperature(t, 0.7);
        return sum(mul(s, s)).scalar();
    };
    backward(sum(mul(softmax_with_temperature(v, 0.7), softmax_with_temperature(v, 0.7))));
    Tensor analytic = Tensor::from_values({5}, {v.grad().begin(), v.grad().end()});
    Tensor fd = finite_diff_grad(f, v, 1e-5);
    CHECK(grad_rel_err(analytic, fd) < 1e-5);
}

namespace {

// builds loss(x) as a Tensor graph; used both for backward and the oracle
using LossFn = std::function<Tensor(const Tensor&)>;

void gradient_check(Tensor& x, const LossFn& loss_fn, double tol = 1e-5) {
    x.zero_grad();
    backward(loss_fn(x));
    Tensor analytic = Tensor::from_values(x.shape(), {x.grad().begin(), x.grad().end()});
    Tensor fd = finite_diff_grad([&](const Tensor& t) { return loss_fn(t).scalar(); }, x, 1e-5);
    CHECK(grad_rel_err(analytic, fd) < tol);
}

}  // namespace

TEST_CASE("property: every differentiable op passes a randomized gradient check") {
    // >= 20 seeds over shapes up to 8x8, rel err < 1e-5
    for (std::uint64_t seed = 0; seed < 22; ++seed) {
        std::mt19937_64 rng(1000 + seed);
        const std::size_t m = 1 + seed % 8, n = 1 + (seed * 3 + 1) % 8, k = 1 + (seed * 5 + 2) % 8;

        {
            Tensor a = random_tensor({m, k}, rng, true);
            Tensor b = random_tensor({k, n}, rng, true);
            gradient_check(a, [&](const Tensor& x) { return mean(gelu(matmul(x, b))); });
            gradient_check(b, [&](const Tensor& x) { return mean(gelu(matmul(a, x))); });
        }
        {
            Tensor a = random_tensor({m, n}, rng, true);
            Tensor b = random_tensor({m, n}, rng, true);
            gradient_check(a, [&](const Tensor& x) {
                return mean(mul(exp(scalar_mul(x, 0.3)), add(x, b)));
            });
        }
        {
            Tensor a = random_tensor({m, n}, rng, true);
            // keep away from the relu kink so central differences are clean
            for (auto& v : a.values()) {
                if (std::abs(v) < 1e-2) v += 0.05;
            }
            Tensor shift = Tensor::full({n, m}, 4.0);
            gradient_check(a, [&](const Tensor& x) {
                Tensor pos = log(add(relu(transpose(x)), shift));
                return sum(layer_norm_rows(softmax_rows(pos)));
            });
        }
        {
            Tensor a = random_tensor({m, n}, rng, true);
            Tensor b = random_tensor({n, k}, rng, true);
            gradient_check(a, [&](const Tensor& x) { return mean(matmul_nt(x, transpose(b))); });
            gradient_check(b, [&](const Tensor& x) { return sum(matmul_nt(a, transpose(x))); });
        }
    }
}

TEST_CASE("gradient checks for indexing and broadcast ops") {
    std::mt19937_64 rng(57);
    Tensor x3 = random_tensor({3, 2, 4}, rng, true);
    gradient_check(x3, [](const Tensor& t) {
        Tensor pooled = mean_over_seq(t);
        Tensor one = select_batch(t, 1);
        return add(sum(gelu(pooled)), mean(one));
    });

    Tensor x2 = random_tensor({5, 3}, rng, true);
    gradient_check(x2, [](const Tensor& t) {
        Tensor g = gather_rows(t, {4, 0, 0, 2});
        return sum(mul(g, g));
    });

    Tensor bias = random_tensor({3}, rng, true);
    gradient_check(bias, [&](const Tensor& b) { return mean(exp(add_row_broadcast(x2, b))); });

    Tensor w = random_tensor({3}, rng, true);
    std::vector<Tensor> parts;
    for (int i = 0; i < 3; ++i) parts.push_back(random_tensor({2, 2}, rng, false));
    gradient_check(w, [&](const Tensor& t) { return sum(gelu(weighted_sum(parts, t))); });

    Tensor m = random_tensor({4, 3}, rng, true);
    gradient_check(m, [](const Tensor& t) {
        Tensor r = row(t, 2);
        return sum(mul(r, r));
    });

    Tensor src = random_tensor({2, 3}, rng, true);
    gradient_check(src, [](const Tensor& t) {
        Tensor sc = scatter_rows({t}, {{3, 1}}, 5);
        return mean(gelu(sc));
    });

    Tensor stacked_in = random_tensor({2, 3}, rng, true);
    gradient_check(stacked_in, [](const Tensor& t) {
        Tensor s = stack_batch({t, t});
        return mean(reshape(s, {4, 3}));
    });
}

TEST_CASE("zero_grad then backward is bitwise idempotent") {
    std::mt19937_64 rng(99);
    Tensor a = random_tensor({4, 4}, rng, true);
    Tensor b = random_tensor({4, 4}, rng, true);
    auto run = [&]() {
        a.zero_grad();
        b.zero_grad();
        backward(mean(gelu(matmul(a, b))));
        return std::vector<double>{a.grad().begin(), a.grad().end()};
    };
    const auto g1 = run();
    const auto g2 = run();
    CHECK(g1 == g2);
}

TEST_CASE("matmul associativity within 1e-9 relative on random 4x4 chains") {
    std::mt19937_64 rng(123);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor a = random_tensor({4, 4}, rng);
        Tensor b = random_tensor({4, 4}, rng);
        Tensor c = random_tensor({4, 4}, rng);
        Tensor left = matmul(matmul(a, b), c);
        Tensor right = matmul(a, matmul(b, c));
        for (std::size_t i = 0; i < left.size(); ++i) {
            const double denom = std::max(1.0, std::abs(left.values()[i]));
            CHECK(std::abs(left.values()[i] - right.values()[i]) / denom < 1e-9);
        }
    }
}

TEST_CASE("grads accumulate across uses of a leaf; caller zeroes explicitly") {
    Tensor x = Tensor::from_values({1}, {4.0}, true);
    backward(add(mul(x, x), x));  // x^2 + x, d/dx = 9
    CHECK(x.grad()[0] == doctest::Approx(9.0).epsilon(1e-14));

    // a second, separate graph adds into the same leaf grad
    backward(scalar_mul(x, 3.0));
    CHECK(x.grad()[0] == doctest::Approx(12.0).epsilon(1e-14));

    x.zero_grad();
    backward(add(mul(x, x), x));
    CHECK(x.grad()[0] == doctest::Approx(9.0).epsilon(1e-14));
}

TEST_CASE("no-grad mode records no graph") {
    Tensor x = Tensor::from_values({1}, {2.0}, true);
    {
        NoGradGuard ng;
        Tensor y = mul(x, x);
        CHECK_FALSE(y.requires_grad());
    }
    Tensor z = mul(x, x);
    CHECK(z.requires_grad());
}
