#include <cmath>
#include <numbers>

#include "doctest.h"
#include "durit/autodiff.hpp"
#include "grad_cases.hpp"

using namespace durit;

namespace {

Tensor param(Shape s, std::vector<double> v) {
    return Tensor(std::move(s), std::move(v), true);
}

}  // namespace

TEST_CASE("matmul with identity and add with zero leave the operand unchanged") {
    Graph g;
    Var a = g.constant(Tensor::matrix(2, 2, {1.5, -2.0, 0.25, 4.0}));
    Var eye = g.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
    const std::vector<double> want = a.value().data;
    // Copy out: adding nodes may move earlier node storage.
    const std::vector<double> prod = matmul(eye, a).value().data;
    const std::vector<double> sum0 = add(a, g.constant(Tensor::zeros({2, 2}))).value().data;
    CHECK(prod == want);
    CHECK(sum0 == want);
}

TEST_CASE("relu of [-1, 2]") {
    Graph g;
    CHECK(relu(g.constant(Tensor::vector({-1.0, 2.0}))).value().data == std::vector<double>{0.0, 2.0});
}

TEST_CASE("softmax with temperature") {
    Graph g;
    auto sm = [&](std::vector<double> v, double tau) {
        return softmax_with_temperature(g.constant(Tensor::vector(std::move(v))), tau).value().data;
    };
    const auto half = sm({1.0, 1.0}, 2.0);
    CHECK(half[0] == doctest::Approx(0.5));
    CHECK(half[1] == doctest::Approx(0.5));
    const auto third = sm({std::log(2.0), 0.0}, 1.0);
    CHECK(std::abs(third[0] - 2.0 / 3.0) < 1e-15);
    CHECK(std::abs(third[1] - 1.0 / 3.0) < 1e-15);
    const auto base = sm({0.3, -1.2}, 0.7);
    const auto shifted = sm({0.3 + 5.0, -1.2 + 5.0}, 0.7);
    CHECK(std::abs(base[0] - shifted[0]) < 1e-14);
    CHECK(std::abs(base[1] - shifted[1]) < 1e-14);
}

TEST_CASE("cross entropy values and gradient") {
    {
        Graph g;
        Var l = cross_entropy(g.constant(Tensor::matrix(1, 4, {0.0, 0.0, 0.0, 0.0})), 2);
        CHECK(std::abs(l.item() - std::log(4.0)) < 1e-15);
    }
    {
        Graph g;
        Var l = cross_entropy(g.constant(Tensor::matrix(1, 3, {0.0, 800.0, 0.0})), 1);
        CHECK(l.item() == doctest::Approx(0.0));
    }
    {
        Tensor x = param({1, 2}, {0.0, 0.0});
        Graph g;
        g.backward(cross_entropy(g.parameter(x), 0));
        CHECK(std::abs(x.grad[0] + 0.5) < 1e-15);
        CHECK(std::abs(x.grad[1] - 0.5) < 1e-15);
    }
}

TEST_CASE("cross entropy keeps relative precision on saturated rows") {
    // Long double oracle for lse - x_t; the target is the argmax so the loss is tiny.
    Rng rng = make_rng(12);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> row(6);
        for (double& v : row) {
            v = -4.0 + 8.0 * uniform01(rng);
        }
        row[3] = 20.0 + 20.0 * uniform01(rng);
        long double rest = 0.0L;
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (j != 3) {
                rest += std::exp(static_cast<long double>(row[j]) - static_cast<long double>(row[3]));
            }
        }
        const double oracle = static_cast<double>(std::log1p(rest));
        Graph g;
        const double got = cross_entropy(g.constant(Tensor::matrix(1, 6, row)), 3).item();
        CHECK(std::abs(got - oracle) <= 1e-12 * oracle);
    }
}

TEST_CASE("kl divergence") {
    Graph g;
    Var p = g.constant(Tensor::vector({0.2, 0.3, 0.5}));
    CHECK(kl_divergence(p, p).item() == 0.0);
    Var l = kl_divergence(g.constant(Tensor::vector({1.0, 0.0})), g.constant(Tensor::vector({0.5, 0.5})));
    CHECK(std::abs(l.item() - std::numbers::ln2) < 1e-15);

    Rng rng = make_rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor a = testing::random_tensor({2, 5}, rng, -4.0, 4.0, false);
        Tensor b = testing::random_tensor({2, 5}, rng, -4.0, 4.0, false);
        Graph h;
        Var k = kl_divergence(softmax_with_temperature(h.constant(a), 1.0),
                              softmax_with_temperature(h.constant(b), 1.0));
        CHECK(k.item() >= 0.0);
    }
}

TEST_CASE("backward basics") {
    Tensor w = param({3}, {0.5, -1.0, 2.0});
    {
        Graph g;
        g.backward(sum(g.parameter(w)));
        CHECK(w.grad == std::vector<double>{1.0, 1.0, 1.0});
    }
    Tensor s = param({1}, {3.0});
    {
        Graph g;
        Var x = g.parameter(s);
        g.backward(sum(mul(x, x)));
        CHECK(s.grad[0] == 6.0);
    }
}

TEST_CASE("parameter gradients accumulate until zero_grad") {
    Tensor w = param({2}, {1.0, 2.0});
    for (int i = 0; i < 2; ++i) {
        Graph g;
        g.backward(sum(g.parameter(w)));
    }
    CHECK(w.grad == std::vector<double>{2.0, 2.0});
    w.zero_grad();
    CHECK_FALSE(w.has_grad());
}

TEST_CASE("detach contract") {
    Tensor q = param({1, 3}, {0.1, 0.2, 0.3});
    Tensor k = param({1, 3}, {1.0, -1.0, 0.5});
    Graph g;
    Var dq = detach(g.parameter(q));
    CHECK(dq.value().data == q.data);
    CHECK(detach(dq).value().data == q.data);
    CHECK_FALSE(detach(dq).requires_grad());
    g.backward(sum(mul(detach(dq), g.parameter(k))));
    CHECK_FALSE(q.has_grad());
    REQUIRE(k.has_grad());
    CHECK(k.grad == q.data);
}

TEST_CASE("AdamW decoupled decay and determinism") {
    {
        Tensor w = param({1}, {1.0});
        w.grad = {0.0};
        AdamW opt({&w}, AdamWConfig{.lr = 0.1, .weight_decay = 0.01});
        opt.step();
        CHECK(std::abs(w.data[0] - 0.999) < 1e-15);
    }
    {
        Tensor w = param({2}, {1.0, -3.0});
        w.grad = {0.0, 0.0};
        AdamW opt({&w}, AdamWConfig{.lr = 0.1, .weight_decay = 0.0});
        opt.step();
        CHECK(w.data == std::vector<double>{1.0, -3.0});
    }
    auto trajectory = [] {
        Rng rng = make_rng(11);
        Tensor w = testing::random_tensor({4}, rng);
        AdamW opt({&w}, AdamWConfig{});
        std::vector<double> out;
        for (int t = 0; t < 20; ++t) {
            opt.zero_grad();
            Graph g;
            Var x = g.parameter(w);
            g.backward(sum(mul(x, x)));
            opt.step();
            out.insert(out.end(), w.data.begin(), w.data.end());
        }
        return out;
    };
    CHECK(trajectory() == trajectory());
}

TEST_CASE("gradient norm clipping") {
    Tensor a = param({2}, {0.0, 0.0});
    Tensor b = param({1}, {0.0});
    a.grad = {3.0, 0.0};
    b.grad = {4.0};
    std::vector<Tensor*> ps{&a, &b};
    CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(5.0));
    CHECK(a.grad[0] == doctest::Approx(0.6));
    CHECK(b.grad[0] == doctest::Approx(0.8));
}

TEST_CASE("finite difference checker on closed forms") {
    Tensor w = param({1}, {3.0});
    std::vector<Tensor*> ps{&w};
    const auto sq = finite_difference_check(
        [&](Graph& g) {
            Var x = g.parameter(w);
            return sum(mul(x, x));
        },
        ps);
    CHECK(sq.max_rel_error < 1e-6);
    const auto c = finite_difference_check(
        [&](Graph& g) {
            g.parameter(w);
            return g.constant(Tensor::scalar(2.5));
        },
        ps);
    CHECK(c.max_rel_error == 0.0);
}

TEST_CASE("every op passes the finite difference check") {
    for (const auto& c : testing::op_grad_cases()) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            CAPTURE(c.name);
            CAPTURE(seed);
            CHECK(c.run(seed).max_rel_error < 1e-4);
        }
    }
}

TEST_CASE("full model loss on a short batch passes the finite difference check") {
    for (const auto& c : testing::loss_grad_cases()) {
        CAPTURE(c.name);
        CHECK(c.run(7).max_rel_error < 1e-4);
    }
}
