// Copyright 2026 MATE Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <thread>

#include "mate/rng.hpp"
#include "mate/tensor.hpp"
#include "support/oracles.hpp"

using mate::Tensor;

namespace {

Tensor random_tensor(mate::Shape shape, mate::RngStream& rng, bool requires_grad,
                     double lo = -1.0, double hi = 1.0) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::leaf(std::move(shape), std::move(v), requires_grad);
}

/// FD-checks grad of dot(f(x), w) for a fixed random weighting w.
template <typename OpFn>
double unary_grad_err(OpFn&& op, Tensor x, mate::RngStream& rng) {
    Tensor probe;
    {
        mate::NoGradGuard ng;
        probe = op(x);
    }
    Tensor w = random_tensor(probe.shape(), rng, false);
    auto build = [&] {
        Tensor y = op(x);
        return y.ndim() == 2 ? mate::sum(mate::mul(y, w)) : mate::dot(y, w);
    };
    return oracles::finite_difference_check(build, {{"x", x}}).max_rel_err;
}

}  // namespace

TEST_CASE("matmul forward matches hand cases") {
    Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
    Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
    Tensor r = mate::matmul(eye, a);
    CHECK(r.value() == std::vector<double>{1, 2, 3, 4});

    Tensor proj = Tensor::matrix(2, 2, {1, 0, 0, 0});
    Tensor v = Tensor::matrix(2, 1, {5, 7});
    Tensor pv = mate::matmul(proj, v);
    CHECK(pv.at(0, 0) == 5.0);
    CHECK(pv.at(1, 0) == 0.0);
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
    Tensor a = Tensor::matrix(2, 3, std::vector<double>(6, 1.0));
    Tensor b = Tensor::matrix(2, 2, std::vector<double>(4, 1.0));
    CHECK_THROWS_MATCHES(mate::matmul(a, b), mate::DimensionError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("[2x3]") &&
                             Catch::Matchers::ContainsSubstring("[2x2]")));
}

TEST_CASE("matmul gradient matches finite differences") {
    mate::RngStream rng(7, "matmul-grad");
    for (int trial = 0; trial < 3; ++trial) {
        Tensor a = random_tensor({3, 3}, rng, true);
        Tensor b = random_tensor({3, 3}, rng, true);
        auto build = [&] { return mate::sum(mate::matmul(a, b)); };
        auto res = oracles::finite_difference_check(build, {{"a", a}, {"b", b}});
        INFO(res.worst);
        CHECK(res.max_rel_err < 1e-6);
    }
}

TEST_CASE("softmax basics") {
    Tensor u = mate::softmax(Tensor::from_vector({0, 0, 0, 0}), 1.0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(u.at(i) == Catch::Approx(0.25));

    for (double c : {-3.5, 0.0, 12.0}) {
        Tensor s = mate::softmax(Tensor::from_vector({c, c + std::log(3.0)}), 1.0);
        CHECK(s.at(0) == Catch::Approx(0.25).margin(1e-12));
        CHECK(s.at(1) == Catch::Approx(0.75).margin(1e-12));
    }
}

TEST_CASE("softmax survives extreme inputs") {
    // oracle: shift-invariance gives softmax([1000, 0]) == softmax([0, -1000])
    // = [1/(1+e^-1000), e^-1000/(1+e^-1000)], i.e. [1, 0] to double precision
    Tensor s = mate::softmax(Tensor::from_vector({1000.0, 0.0}), 1.0);
    CHECK(std::isfinite(s.at(0)));
    CHECK(s.at(0) == Catch::Approx(1.0).margin(1e-15));
    CHECK(s.at(1) >= 0.0);
    CHECK(s.at(1) < 1e-300);
    CHECK(s.at(0) + s.at(1) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("softmax errors") {
    Tensor x = Tensor::from_vector({1.0, 2.0});
    CHECK_THROWS_AS(mate::softmax(x, 0.0), mate::ParameterError);
    CHECK_THROWS_AS(mate::softmax(x, -1.0), mate::ParameterError);
    Tensor bad = Tensor::from_vector({std::nan(""), 0.0});
    CHECK_THROWS_AS(mate::softmax(bad, 1.0), mate::NumericError);
}

TEST_CASE("softmax output is a probability vector", "[property]") {
    mate::RngStream rng(11, "softmax-prop");
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + rng.uniform_int(12);
        Tensor x = random_tensor({n}, rng, false, -50.0, 50.0);
        const double tau = rng.uniform(0.05, 5.0);
        Tensor p = mate::softmax(x, tau);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(p.at(i) > 0.0);
            total += p.at(i);
        }
        CHECK(total == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("l2_normalize basics") {
    Tensor y = mate::l2_normalize(Tensor::from_vector({3, 4}));
    CHECK(y.at(0) == Catch::Approx(0.6));
    CHECK(y.at(1) == Catch::Approx(0.8));

    Tensor unit = Tensor::from_vector({0.6, 0.0, 0.8});
    Tensor same = mate::l2_normalize(unit);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(same.at(i) == Catch::Approx(unit.at(i)).margin(1e-15));

    CHECK_THROWS_AS(mate::l2_normalize(Tensor::from_vector({0.0, 0.0})),
                    mate::NumericError);
}

TEST_CASE("l2_normalize gradient near unit norm") {
    mate::RngStream rng(13, "l2norm-grad");
    for (int trial = 0; trial < 5; ++trial) {
        Tensor x = random_tensor({6}, rng, true, 0.2, 0.6);
        double err = unary_grad_err([](const Tensor& t) { return mate::l2_normalize(t); },
                                    x, rng);
        CHECK(err < 1e-6);
    }
}

TEST_CASE("backward on identity and quadratic") {
    Tensor x = Tensor::scalar(3.0, true);
    mate::backward(x);
    CHECK(x.grad()[0] == 1.0);

    Tensor v = Tensor::from_vector({1.0, -2.0, 0.5}, true);
    Tensor loss = mate::sum(mate::mul(v, v));
    mate::backward(loss);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(v.grad()[i] == Catch::Approx(2.0 * v.at(i)));
}

TEST_CASE("backward rejects non-scalar roots") {
    Tensor v = Tensor::from_vector({1.0, 2.0}, true);
    CHECK_THROWS_AS(mate::backward(mate::scale(v, 2.0)), mate::UsageError);
}

TEST_CASE("backward accumulates over shared subexpressions") {
    Tensor x = Tensor::from_vector({0.7, -0.3}, true);
    Tensor s = mate::scale(x, 2.0);
    Tensor loss = mate::add(mate::dot(s, s), mate::dot(s, x));  // 4|x|^2 + 2|x|^2
    mate::backward(loss);
    for (std::size_t i = 0; i < 2; ++i)
        CHECK(x.grad()[i] == Catch::Approx(12.0 * x.at(i)).margin(1e-12));
}

TEST_CASE("repeated backward accumulates into leaves, resets intermediates") {
    Tensor x = Tensor::from_vector({1.0, 2.0}, true);
    Tensor loss = mate::sum(mate::mul(x, x));
    mate::backward(loss);
    mate::backward(loss);
    for (std::size_t i = 0; i < 2; ++i)
        CHECK(x.grad()[i] == Catch::Approx(4.0 * x.at(i)));
}

TEST_CASE("slice_prefix semantics and composition", "[property]") {
    mate::RngStream rng(17, "slice");
    Tensor x = random_tensor({10}, rng, false);
    Tensor s3 = mate::slice_prefix(x, 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(s3.at(i) == x.at(i));

    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t d2 = 1 + rng.uniform_int(10);
        const std::size_t d1 = 1 + rng.uniform_int(d2);
        Tensor a = mate::slice_prefix(mate::slice_prefix(x, d2), d1);
        Tensor b = mate::slice_prefix(x, d1);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < d1; ++i) CHECK(a.at(i) == b.at(i));
    }

    CHECK_THROWS_AS(mate::slice_prefix(x, 0), mate::ParameterError);
    CHECK_THROWS_AS(mate::slice_prefix(x, 11), mate::ParameterError);
}

TEST_CASE("slice_prefix backward scatters into leading dims only") {
    Tensor x = Tensor::from_vector({1.0, 2.0, 3.0, 4.0}, true);
    Tensor loss = mate::sum(mate::slice_prefix(x, 2));
    mate::backward(loss);
    CHECK(x.grad() == std::vector<double>{1.0, 1.0, 0.0, 0.0});
}

TEST_CASE("every differentiable op passes finite-difference checks", "[property]") {
    mate::RngStream rng(23, "op-grads");
    const int points = 10;
    for (int trial = 0; trial < points; ++trial) {
        double worst = 0.0;

        Tensor v = random_tensor({5}, rng, true, 0.3, 1.5);  // positive domain
        worst = std::max(worst, unary_grad_err([](const Tensor& t) { return mate::log(t); }, v, rng));
        worst = std::max(worst, unary_grad_err([](const Tensor& t) { return mate::sqrt(t); }, v, rng));

        Tensor u = random_tensor({5}, rng, true);
        worst = std::max(worst, unary_grad_err([](const Tensor& t) { return mate::exp(t); }, u, rng));
        worst = std::max(worst, unary_grad_err([](const Tensor& t) { return mate::tanh(t); }, u, rng));
        worst = std::max(worst, unary_grad_err([](const Tensor& t) { return mate::softplus(t); }, u, rng));
        worst = std::max(worst, unary_grad_err([](const Tensor& t) { return mate::scale(t, -2.5); }, u, rng));
        worst = std::max(worst, unary_grad_err([](const Tensor& t) { return mate::add_scalar(t, 0.7); }, u, rng));
        worst = std::max(worst, unary_grad_err([](const Tensor& t) { return mate::softmax(t, 0.7); }, u, rng));
        worst = std::max(worst, unary_grad_err(
            [](const Tensor& t) { return mate::clamp_min(t, 0.1); }, u, rng));

        Tensor m = random_tensor({4, 3}, rng, true);
        worst = std::max(worst, unary_grad_err([](const Tensor& t) { return mate::transpose(t); }, m, rng));
        worst = std::max(worst, unary_grad_err([](const Tensor& t) { return mate::mean_rows(t); }, m, rng));
        worst = std::max(worst, unary_grad_err([](const Tensor& t) { return mate::softmax_rows(t, 1.3); }, m, rng));
        worst = std::max(worst, unary_grad_err([](const Tensor& t) { return mate::std_rows(t); }, m, rng));
        worst = std::max(worst, unary_grad_err([](const Tensor& t) { return mate::select_row(t, 2); }, m, rng));

        Tensor a = random_tensor({6}, rng, true);
        Tensor b = random_tensor({6}, rng, true);
        {
            auto build = [&] {
                Tensor c = mate::concat(mate::add(a, b), mate::mul(a, b));
                return mate::add(mate::mean(c), mate::dot(mate::sub(a, b), a));
            };
            auto res = oracles::finite_difference_check(build, {{"a", a}, {"b", b}});
            worst = std::max(worst, res.max_rel_err);
        }
        {
            Tensor x = random_tensor({4}, rng, true);
            Tensor w = random_tensor({4, 3}, rng, true);
            Tensor w2 = random_tensor({4, 3}, rng, true);
            auto build = [&] {
                return mate::sum(mate::matvec(w2, mate::vecmat(x, w)));
            };
            auto res = oracles::finite_difference_check(
                build, {{"x", x}, {"w", w}, {"w2", w2}});
            worst = std::max(worst, res.max_rel_err);
        }
        {
            std::vector<Tensor> rows{random_tensor({3}, rng, true),
                                     random_tensor({3}, rng, true),
                                     random_tensor({3}, rng, true)};
            auto build = [&] { return mate::sum(mate::stack_rows(rows)); };
            auto res = oracles::finite_difference_check(
                build, {{"r0", rows[0]}, {"r1", rows[1]}, {"r2", rows[2]}});
            worst = std::max(worst, res.max_rel_err);
        }

        INFO("trial " << trial);
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("NoGradGuard suppresses recording") {
    Tensor x = Tensor::from_vector({1.0, 2.0}, true);
    Tensor y;
    {
        mate::NoGradGuard ng;
        y = mate::sum(mate::mul(x, x));
    }
    CHECK_FALSE(y.requires_grad());
    mate::backward(y);  // no-op
    CHECK_FALSE(x.has_grad());
}

TEST_CASE("detach cuts the tape") {
    Tensor x = Tensor::from_vector({2.0, -1.0}, true);
    Tensor d = mate::mul(x, x).detach();
    CHECK_FALSE(d.requires_grad());
    CHECK(d.at(0) == 4.0);
}

TEST_CASE("values are sendable across threads with independent graphs") {
    Tensor shared = Tensor::from_vector({1.0, 2.0, 3.0});
    std::vector<double> results(4, 0.0);
    std::vector<std::thread> workers;
    for (int k = 0; k < 4; ++k) {
        workers.emplace_back([&, k] {
            Tensor local = Tensor::from_vector(shared.value(), true);
            Tensor loss = mate::sum(mate::scale(mate::mul(local, local), k + 1.0));
            mate::backward(loss);
            results[k] = local.grad()[1];  // 2 * 2 * (k+1)
        });
    }
    for (auto& w : workers) w.join();
    for (int k = 0; k < 4; ++k) CHECK(results[k] == Catch::Approx(4.0 * (k + 1)));
}
