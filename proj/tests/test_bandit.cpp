#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "doctest.h"
#include "durit/bandit.hpp"

using namespace durit;

namespace {

BanditEnv two_arm(double a, double b) {
    BanditEnv env;
    env.num_states = 1;
    env.num_actions = 2;
    env.means = {a, b};
    return env;
}

}  // namespace

TEST_CASE("regret bound formula") {
    CHECK(std::abs(regret_bound(4, 2, 1000, 1) - std::sqrt(8000.0 * std::log(1000.0))) < 1e-9);
    CHECK(std::abs(regret_bound(4, 2, 1000, 1) - 235.1) < 0.05);
    const double e = std::numbers::e;
    CHECK(std::abs(regret_bound(3, 5, e, 2.0) - 2.0 * std::sqrt(15.0 * e)) < 1e-12);
    for (double alpha : {0.25, 0.5, 0.125}) {
        const double r = regret_bound(64 * alpha, 8, 1e5, 8) / regret_bound(64, 8, 1e5, 8);
        CHECK(std::abs(r - std::sqrt(alpha)) < 1e-12);
    }
    CHECK_THROWS(regret_bound(4, 2, 1.5, 1));
    CHECK_THROWS(regret_bound(0, 2, 100, 1));
}

TEST_CASE("equal arms give zero regret") {
    BanditEnv env;
    env.num_states = 3;
    env.num_actions = 4;
    env.means.assign(12, 0.4);
    Rng rng = make_rng(2);
    const RegretTrace t = run_ucb(env, 5000, rng);
    for (double r : t.cumulative) {
        CHECK(r == 0.0);
    }
}

TEST_CASE("trace accounting") {
    const BanditEnv env = random_env(5, 3, 11);
    Rng rng = make_rng(4);
    const std::int64_t T = 20000;
    const RegretTrace t = run_ucb(env, T, rng);
    REQUIRE(t.cumulative.size() == static_cast<std::size_t>(T));
    CHECK(std::accumulate(t.pulls.begin(), t.pulls.end(), std::int64_t{0}) == T);
    CHECK(std::accumulate(t.visits.begin(), t.visits.end(), std::int64_t{0}) == T);
    for (std::size_t i = 1; i < t.cumulative.size(); ++i) {
        CHECK(t.cumulative[i] >= t.cumulative[i - 1]);
    }
    // Per-pair decomposition, summed in a different order from the trace.
    CHECK(std::abs(decomposed_regret(env, t) - t.cumulative.back()) <= 1e-9 * t.cumulative.back());
    double root_sum = 0.0;
    for (std::int64_t v : t.visits) {
        root_sum += std::sqrt(static_cast<double>(v));
    }
    CHECK(root_sum <= std::sqrt(5.0 * static_cast<double>(T)));

    Rng again = make_rng(4);
    CHECK(run_ucb(env, T, again).cumulative == t.cumulative);
    Rng small = make_rng(1);
    CHECK_THROWS(run_ucb(env, 14, small));
}

TEST_CASE("two arms: regret per round falls below 2% by ten thousand rounds") {
    const BanditEnv env = two_arm(0.9, 0.1);
    double at_1e3 = 0.0, at_1e4 = 0.0;
    const int seeds = 100;
    for (int s = 0; s < seeds; ++s) {
        Rng rng = make_rng(500, {static_cast<std::uint64_t>(s)});
        const RegretTrace t = run_ucb(env, 10000, rng);
        at_1e3 += t.cumulative[999];
        at_1e4 += t.cumulative.back();
    }
    at_1e3 /= seeds;
    at_1e4 /= seeds;
    CHECK(at_1e4 / 1e4 < 0.02);
    CHECK(at_1e4 / 1e4 < at_1e3 / 1e3);
}

TEST_CASE("environments and merging") {
    const BanditEnv tiered = tiered_env(8, 4, 3, 0.05, 0.5);
    for (int s = 0; s < 8; ++s) {
        for (int a = 0; a < 3; ++a) {
            CHECK(tiered.mean(s, a) == tiered.mean(s % 4, a));
        }
    }
    for (int s = 0; s < 4; ++s) {
        double worst = 1.0;
        for (int a = 0; a < 3; ++a) {
            worst = std::min(worst, tiered.mean(s, a));
        }
        const double gap = tiered.best(s) - worst;
        CHECK(gap >= 0.05 - 1e-12);
        CHECK(gap <= 0.5 + 1e-12);
    }

    const std::vector<int> map = exact_merge_map(tiered, 0.5);
    const BanditEnv merged = merge_states(tiered, map);
    CHECK(merged.num_states == 4);
    CHECK(merged.state_probs.empty());  // equal classes stay uniform
    const BanditEnv six = tiered_env(6, 2, 2, 0.1, 0.3);
    const std::vector<int> uneven{0, 1, 2, 1, 0, 1};
    const BanditEnv m3 = merge_states(six, uneven);
    REQUIRE(m3.state_probs.size() == 3);
    CHECK(std::abs(m3.state_probs[0] - 2.0 / 6.0) < 1e-15);
    CHECK(std::abs(m3.state_probs[1] - 3.0 / 6.0) < 1e-15);
    CHECK(std::abs(m3.state_probs[2] - 1.0 / 6.0) < 1e-15);
    CHECK_THROWS(exact_merge_map(tiered, 0.3));     // 2.4 states
    CHECK_THROWS(exact_merge_map(tiered, 0.25));    // fewer classes than distinct rows
    const std::vector<int> lossy{0, 0, 1, 1, 2, 2, 3, 3};
    CHECK_THROWS(merge_states(tiered, lossy));

    BanditEnv bad = two_arm(0.5, 1.2);
    CHECK_THROWS(validate(bad));
}

TEST_CASE("compression sweep at alpha one") {
    const BanditEnv env = tiered_env(8, 2, 2, 0.1, 0.4);
    const std::vector<double> alphas{1.0, 0.5, 0.25};
    const auto rows = compression_sweep(env, alphas, 4000, 4, 3);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].ratio == 1.0);
    CHECK(rows[0].num_states == 8);
    CHECK(rows[2].num_states == 2);
    CHECK(rows[2].bound_ratio == 0.5);
    CHECK(rows[0].mean_regret == mean_final_regret(env, 4000, 4, 3));
}
