#include <cmath>

#include "doctest.h"
#include "durit/codebook.hpp"
#include "grad_cases.hpp"

using namespace durit;

namespace {

Codebook fixed(std::vector<double> rows, std::size_t n, std::size_t d, double tau) {
    Codebook cb;
    cb.tau_sim = tau;
    cb.templates = Tensor({n, d}, rows, true);
    cb.keys = Tensor({n, d}, std::move(rows), true);
    return cb;
}

double cosine(const std::vector<double>& a, const double* b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / std::sqrt(na * nb);
}

}  // namespace

TEST_CASE("codebook initialisation") {
    const Codebook a = init_codebook(32, 64, 0.02, 9);
    const Codebook b = init_codebook(32, 64, 0.02, 9);
    CHECK(a.templates.data == b.templates.data);
    CHECK(a.keys.data == b.keys.data);
    CHECK(a.templates.data != a.keys.data);

    double sum = 0.0, sq = 0.0;
    for (double v : a.templates.data) {
        sum += v;
        sq += v * v;
    }
    const double n = static_cast<double>(a.templates.size());
    const double mean = sum / n;
    const double sd = std::sqrt(sq / n - mean * mean);
    CHECK(std::abs(mean) < 4.0 * 0.02 / std::sqrt(n));
    CHECK(std::abs(sd - 0.02) < 0.02 * 0.05);

    Codebook c1 = init_codebook(1, 8, 0.02, 1);
    Rng rng = make_rng(1);
    Graph g;
    Var z = l2_normalize(g.constant(testing::random_tensor({1, 8}, rng, -1.0, 1.0, false)));
    CHECK(template_sim_loss(g, z, c1, 0).item() == 0.0);
    CHECK(key_sim_loss(g, z, c1, 0).item() == 0.0);
}

TEST_CASE("train-time selection is the cluster label") {
    const Codebook cb = init_codebook(5, 4, 0.02, 1);
    CHECK(select_template_train(cb, 0) == 0);
    CHECK(select_template_train(cb, 4) == 4);
    CHECK_THROWS(select_template_train(cb, 5));
    CHECK_THROWS(select_template_train(cb, -1));
}

TEST_CASE("inference-time selection") {
    const Codebook cb = fixed({1, 0, 0, 1}, 2, 2, 1.0);
    const std::vector<double> q{1.0, 0.0};
    CHECK(select_template_infer(cb, q) == 0);
    const std::vector<double> tie{1.0, 1.0};
    CHECK(select_template_infer(cb, tie) == 0);

    Rng rng = make_rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const Codebook r = init_codebook(8, 6, 1.0, 100 + static_cast<std::uint64_t>(trial));
        std::vector<double> x(6);
        for (double& v : x) {
            v = normal01(rng);
        }
        int best = 0;
        for (int i = 1; i < 8; ++i) {
            if (cosine(x, r.keys.data.data() + i * 6) > cosine(x, r.keys.data.data() + best * 6)) {
                best = i;
            }
        }
        CHECK(select_template_infer(r, x) == best);
    }
}

TEST_CASE("template and key InfoNCE values") {
    Codebook cb = fixed({1, 0, 0, 1}, 2, 2, 1.0);
    const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    {
        Graph g;
        Var z = g.constant(Tensor::matrix(1, 2, {1.0, 0.0}));
        CHECK(std::abs(template_sim_loss(g, z, cb, 0).item() - 0.3133) < 1e-4);
        CHECK(std::abs(template_sim_loss(g, z, cb, 0).item() - expect) < 1e-15);
    }
    {
        Tensor q = Tensor::matrix(1, 2, {1.0, 0.0});
        q.requires_grad = true;
        Graph g;
        Var loss = key_sim_loss(g, g.parameter(q), cb, 0);
        CHECK(std::abs(loss.item() - expect) < 1e-15);
        g.backward(loss);
        CHECK_FALSE(q.has_grad());
        CHECK(cb.keys.has_grad());
        CHECK_FALSE(cb.templates.has_grad());
    }
    {
        Codebook same = fixed({0.3, -1, 0.3, -1, 0.3, -1}, 3, 2, 0.1);
        Rng rng = make_rng(2);
        for (int i = 0; i < 10; ++i) {
            Graph g;
            Var z = l2_normalize(g.constant(testing::random_tensor({1, 2}, rng, -1, 1, false)));
            CHECK(template_sim_loss(g, z, same, i % 3).item() == doctest::Approx(std::log(3.0)));
        }
    }
    {
        Rng rng = make_rng(4);
        for (int i = 0; i < 100; ++i) {
            Codebook r = init_codebook(6, 5, 1.0, 50 + static_cast<std::uint64_t>(i));
            Graph g;
            Var z = l2_normalize(g.constant(testing::random_tensor({1, 5}, rng, -1, 1, false)));
            CHECK(template_sim_loss(g, z, r, i % 6).item() > 0.0);
        }
    }
}

TEST_CASE("one key step raises the cosine to the assigned key") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Codebook cb = init_codebook(4, 8, 0.5, seed);
        Rng rng = make_rng(seed, {fnv1a("query")});
        std::vector<double> q(8);
        for (double& v : q) {
            v = normal01(rng);
        }
        const int label = static_cast<int>(seed % 4);
        const double before = cosine(q, cb.keys.data.data() + label * 8);
        AdamW opt(cb.parameters(), AdamWConfig{.lr = 1e-2, .weight_decay = 0.0});
        opt.zero_grad();
        Graph g;
        g.backward(key_sim_loss(g, l2_normalize(g.constant(Tensor::matrix(1, 8, q))), cb, label));
        cb.templates.grad.assign(cb.templates.size(), 0.0);
        opt.step();
        CHECK(cosine(q, cb.keys.data.data() + label * 8) > before);
    }
}

TEST_CASE("trained keys recover separated clusters on held-out queries") {
    const int n = 4;
    const std::size_t d = 16;
    Rng rng = make_rng(21);
    std::vector<std::vector<double>> centres(n, std::vector<double>(d));
    for (auto& c : centres) {
        for (double& v : c) {
            v = normal01(rng);
        }
    }
    auto draw = [&](int label) {
        std::vector<double> x = centres[static_cast<std::size_t>(label)];
        for (double& v : x) {
            v += 0.3 * normal01(rng);
        }
        return x;
    };
    Codebook cb = init_codebook(n, static_cast<int>(d), 0.02, 5);
    AdamW opt({&cb.keys}, AdamWConfig{.lr = 1e-2});
    for (int step = 0; step < 200; ++step) {
        opt.zero_grad();
        for (int b = 0; b < 8; ++b) {
            const int label = static_cast<int>(uniform_int(rng, 0, n - 1));
            Graph g;
            g.backward(scale(key_sim_loss(g, l2_normalize(g.constant(Tensor::matrix(1, d, draw(label)))), cb,
                                          label),
                             1.0 / 8.0));
        }
        opt.step();
    }
    int agree = 0;
    const int held_out = 400;
    for (int i = 0; i < held_out; ++i) {
        const int label = i % n;
        agree += select_template_infer(cb, draw(label)) == label;
    }
    CHECK(agree >= held_out * 95 / 100);
}
