#pragma once

// State-wise UCB1 over a finite set of states, each with its own arms, and
// the regret measurements used to check the O(sqrt(|Q| |A| T ln T)) bound
// and its shrinkage when identical states are merged.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "durit/rng.hpp"

namespace durit {

struct BanditEnv {
    int num_states = 0;
    int num_actions = 0;
    std::vector<double> means;        // [num_states x num_actions], row-major, in [0, 1]
    std::vector<double> state_probs;  // empty = uniform
    std::optional<std::vector<int>> merge_map;

    double mean(int s, int a) const {
        return means[static_cast<std::size_t>(s) * static_cast<std::size_t>(num_actions) +
                     static_cast<std::size_t>(a)];
    }
    double best(int s) const;
};

void validate(const BanditEnv& env);

// Means drawn uniformly from [0, 1].
BanditEnv random_env(int num_states, int num_actions, std::uint64_t seed);

// num_states states cycling through num_distinct reward rows (state s uses
// row s % num_distinct). Row r has one best arm at 0.5 + gap_r / 2 and the
// others at 0.5 - gap_r / 2, with gaps spaced geometrically over
// [gap_min, gap_max].
BanditEnv tiered_env(int num_states, int num_distinct, int num_actions, double gap_min,
                     double gap_max);

// Collapses states through a surjection onto [0, P). Every class must hold
// identical reward rows; the merged state probability is the class total.
BanditEnv merge_states(const BanditEnv& env, std::span<const int> merge_map);

// A merge map onto round(alpha * num_states) classes that only joins states
// with identical rows. Throws if alpha * num_states is not integral or is
// smaller than the number of distinct rows.
std::vector<int> exact_merge_map(const BanditEnv& env, double alpha);

struct RegretTrace {
    std::vector<double> cumulative;  // R_t for t = 1..T (pseudo-regret)
    std::vector<std::int64_t> pulls;   // N_T(s, a), row-major
    std::vector<std::int64_t> visits;  // T_s
};

// Independent UCB1 per state: round robin over unplayed arms, then
// argmax mean + sqrt(2 ln t_s / N(s, a)), lowest index on ties. Bernoulli
// rewards. Requires T >= |Q| |A|.
RegretTrace run_ucb(const BanditEnv& env, std::int64_t T, Rng& rng);

double regret_bound(double num_states, double num_actions, double T, double C);

// sum over (s, a) of gap(s, a) * N_T(s, a).
double decomposed_regret(const BanditEnv& env, const RegretTrace& trace);

struct CompressionRow {
    double alpha = 1.0;
    int num_states = 0;
    double mean_regret = 0.0;
    double ratio = 1.0;        // mean_regret / mean_regret at alpha = 1
    double bound_ratio = 1.0;  // sqrt(alpha)
};

// Mean final regret over seeds for every alpha; seed k of every alpha uses
// the same stream tags so rows differ only through the merge.
std::vector<CompressionRow> compression_sweep(const BanditEnv& base, std::span<const double> alphas,
                                              std::int64_t T, int seeds, std::uint64_t seed);

// Mean final regret of run_ucb over seeds.
double mean_final_regret(const BanditEnv& env, std::int64_t T, int seeds, std::uint64_t seed);

std::string regret_csv(const RegretTrace& trace, std::int64_t stride);
std::string compression_csv(std::span<const CompressionRow> rows);

}  // namespace durit
