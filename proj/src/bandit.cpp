#include "durit/bandit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>

namespace durit {

double BanditEnv::best(int s) const {
    double b = mean(s, 0);
    for (int a = 1; a < num_actions; ++a) {
        b = std::max(b, mean(s, a));
    }
    return b;
}

void validate(const BanditEnv& env) {
    if (env.num_states < 1 || env.num_actions < 1) {
        throw std::invalid_argument("bandit env: need at least one state and one action");
    }
    const std::size_t n =
        static_cast<std::size_t>(env.num_states) * static_cast<std::size_t>(env.num_actions);
    if (env.means.size() != n) {
        throw std::invalid_argument("bandit env: expected " + std::to_string(n) + " means, got " +
                                    std::to_string(env.means.size()));
    }
    for (double m : env.means) {
        if (!(m >= 0.0 && m <= 1.0)) {
            throw std::invalid_argument("bandit env: mean outside [0, 1]");
        }
    }
    if (!env.state_probs.empty()) {
        if (env.state_probs.size() != static_cast<std::size_t>(env.num_states)) {
            throw std::invalid_argument("bandit env: state_probs size mismatch");
        }
        double total = 0.0;
        for (double p : env.state_probs) {
            if (!(p >= 0.0)) {
                throw std::invalid_argument("bandit env: negative state probability");
            }
            total += p;
        }
        if (std::abs(total - 1.0) > 1e-9) {
            throw std::invalid_argument("bandit env: state probabilities sum to " +
                                        std::to_string(total));
        }
    }
    if (env.merge_map) {
        const auto& mm = *env.merge_map;
        if (mm.size() != static_cast<std::size_t>(env.num_states)) {
            throw std::invalid_argument("bandit env: merge_map size mismatch");
        }
        const int P = mm.empty() ? 0 : *std::max_element(mm.begin(), mm.end()) + 1;
        std::vector<bool> hit(static_cast<std::size_t>(P), false);
        for (int c : mm) {
            if (c < 0) {
                throw std::invalid_argument("bandit env: negative merge class");
            }
            hit[static_cast<std::size_t>(c)] = true;
        }
        if (std::find(hit.begin(), hit.end(), false) != hit.end()) {
            throw std::invalid_argument("bandit env: merge_map is not onto [0, P)");
        }
    }
}

BanditEnv random_env(int num_states, int num_actions, std::uint64_t seed) {
    BanditEnv env;
    env.num_states = num_states;
    env.num_actions = num_actions;
    Rng rng = make_rng(seed, {fnv1a("bandit-env"), static_cast<std::uint64_t>(num_states),
                              static_cast<std::uint64_t>(num_actions)});
    env.means.resize(static_cast<std::size_t>(num_states) * static_cast<std::size_t>(num_actions));
    for (double& m : env.means) {
        m = uniform01(rng);
    }
    validate(env);
    return env;
}

BanditEnv tiered_env(int num_states, int num_distinct, int num_actions, double gap_min,
                     double gap_max) {
    if (num_distinct < 1 || num_distinct > num_states || num_actions < 2 || !(gap_min > 0.0) ||
        !(gap_max >= gap_min) || !(gap_max <= 1.0)) {
        throw std::invalid_argument("tiered_env: invalid sizes or gap range");
    }
    BanditEnv env;
    env.num_states = num_states;
    env.num_actions = num_actions;
    env.means.resize(static_cast<std::size_t>(num_states) * static_cast<std::size_t>(num_actions));
    for (int s = 0; s < num_states; ++s) {
        const int r = s % num_distinct;
        const double t = num_distinct == 1 ? 0.0 : static_cast<double>(r) / (num_distinct - 1);
        const double gap = gap_min * std::pow(gap_max / gap_min, t);
        const int best_arm = r % num_actions;
        for (int a = 0; a < num_actions; ++a) {
            env.means[static_cast<std::size_t>(s * num_actions + a)] =
                a == best_arm ? 0.5 + gap / 2.0 : 0.5 - gap / 2.0;
        }
    }
    validate(env);
    return env;
}

BanditEnv merge_states(const BanditEnv& env, std::span<const int> merge_map) {
    BanditEnv probe = env;
    probe.merge_map = std::vector<int>(merge_map.begin(), merge_map.end());
    validate(probe);
    const int P = *std::max_element(merge_map.begin(), merge_map.end()) + 1;
    BanditEnv out;
    out.num_states = P;
    out.num_actions = env.num_actions;
    out.means.assign(static_cast<std::size_t>(P) * static_cast<std::size_t>(env.num_actions), -1.0);
    out.state_probs.assign(static_cast<std::size_t>(P), 0.0);
    const double uniform = 1.0 / env.num_states;
    for (int s = 0; s < env.num_states; ++s) {
        const int c = merge_map[static_cast<std::size_t>(s)];
        for (int a = 0; a < env.num_actions; ++a) {
            double& dst = out.means[static_cast<std::size_t>(c * env.num_actions + a)];
            const double src = env.mean(s, a);
            if (dst >= 0.0 && dst != src) {
                throw std::invalid_argument("merge_states: state " + std::to_string(s) +
                                            " differs from its class " + std::to_string(c));
            }
            dst = src;
        }
        out.state_probs[static_cast<std::size_t>(c)] +=
            env.state_probs.empty() ? uniform : env.state_probs[static_cast<std::size_t>(s)];
    }
    // Drop the distribution when it is uniform so sampling takes the same path.
    bool is_uniform = true;
    for (double p : out.state_probs) {
        if (std::abs(p - 1.0 / P) > 1e-12) {
            is_uniform = false;
        }
    }
    if (is_uniform) {
        out.state_probs.clear();
    }
    validate(out);
    return out;
}

std::vector<int> exact_merge_map(const BanditEnv& env, double alpha) {
    validate(env);
    const double target = alpha * env.num_states;
    const long k = std::lround(target);
    if (!(alpha > 0.0 && alpha <= 1.0) || std::abs(target - static_cast<double>(k)) > 1e-9) {
        throw std::invalid_argument("exact_merge_map: alpha * |Q| = " + std::to_string(target) +
                                    " is not a positive integer");
    }
    // Group states by identical rows, in order of first appearance.
    std::map<std::vector<double>, int> row_group;
    std::vector<std::vector<int>> groups;
    for (int s = 0; s < env.num_states; ++s) {
        std::vector<double> row(env.means.begin() + s * env.num_actions,
                                env.means.begin() + (s + 1) * env.num_actions);
        auto [it, inserted] = row_group.try_emplace(row, static_cast<int>(groups.size()));
        if (inserted) {
            groups.emplace_back();
        }
        groups[static_cast<std::size_t>(it->second)].push_back(s);
    }
    const long d = static_cast<long>(groups.size());
    if (k < d) {
        throw std::invalid_argument("exact_merge_map: " + std::to_string(k) +
                                    " classes cannot separate " + std::to_string(d) +
                                    " distinct reward rows");
    }
    std::vector<int> parts(groups.size(), 1);
    long extra = k - d;
    while (extra > 0) {
        bool progressed = false;
        for (std::size_t g = 0; g < groups.size() && extra > 0; ++g) {
            if (parts[g] < static_cast<int>(groups[g].size())) {
                ++parts[g];
                --extra;
                progressed = true;
            }
        }
        if (!progressed) {
            break;
        }
    }
    std::vector<int> map(static_cast<std::size_t>(env.num_states), 0);
    int next = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        for (std::size_t i = 0; i < groups[g].size(); ++i) {
            map[static_cast<std::size_t>(groups[g][i])] = next + static_cast<int>(i) % parts[g];
        }
        next += parts[g];
    }
    return map;
}

RegretTrace run_ucb(const BanditEnv& env, std::int64_t T, Rng& rng) {
    validate(env);
    const int S = env.num_states;
    const int A = env.num_actions;
    if (T < static_cast<std::int64_t>(S) * A) {
        throw std::invalid_argument("run_ucb: T = " + std::to_string(T) + " is below |Q||A| = " +
                                    std::to_string(static_cast<std::int64_t>(S) * A));
    }
    std::vector<double> cdf;
    if (!env.state_probs.empty()) {
        double c = 0.0;
        for (double p : env.state_probs) {
            c += p;
            cdf.push_back(c);
        }
    }
    std::vector<double> best(static_cast<std::size_t>(S));
    for (int s = 0; s < S; ++s) {
        best[static_cast<std::size_t>(s)] = env.best(s);
    }
    RegretTrace tr;
    tr.cumulative.resize(static_cast<std::size_t>(T));
    tr.pulls.assign(static_cast<std::size_t>(S) * A, 0);
    tr.visits.assign(static_cast<std::size_t>(S), 0);
    std::vector<double> reward_sum(static_cast<std::size_t>(S) * A, 0.0);
    double regret = 0.0;
    for (std::int64_t t = 0; t < T; ++t) {
        int s = 0;
        if (cdf.empty()) {
            s = static_cast<int>(uniform_int(rng, 0, S - 1));
        } else {
            const double u = uniform01(rng);
            s = static_cast<int>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
            s = std::min(s, S - 1);
        }
        const std::size_t base = static_cast<std::size_t>(s) * A;
        std::int64_t& ts = tr.visits[static_cast<std::size_t>(s)];
        ++ts;
        int arm = -1;
        for (int a = 0; a < A; ++a) {
            if (tr.pulls[base + static_cast<std::size_t>(a)] == 0) {
                arm = a;
                break;
            }
        }
        if (arm < 0) {
            const double log_t = std::log(static_cast<double>(ts));
            double best_ucb = -1.0;
            for (int a = 0; a < A; ++a) {
                const double n = static_cast<double>(tr.pulls[base + static_cast<std::size_t>(a)]);
                const double ucb =
                    reward_sum[base + static_cast<std::size_t>(a)] / n + std::sqrt(2.0 * log_t / n);
                if (ucb > best_ucb) {
                    best_ucb = ucb;
                    arm = a;
                }
            }
        }
        const double mu = env.mean(s, arm);
        reward_sum[base + static_cast<std::size_t>(arm)] += uniform01(rng) < mu ? 1.0 : 0.0;
        ++tr.pulls[base + static_cast<std::size_t>(arm)];
        regret += best[static_cast<std::size_t>(s)] - mu;
        tr.cumulative[static_cast<std::size_t>(t)] = regret;
    }
    return tr;
}

double regret_bound(double num_states, double num_actions, double T, double C) {
    if (!(num_states > 0.0) || !(num_actions > 0.0) || !(C > 0.0) || !(T >= 2.0)) {
        throw std::invalid_argument("regret_bound: arguments must be positive with T >= 2");
    }
    return C * std::sqrt(num_states * num_actions * T * std::log(T));
}

double decomposed_regret(const BanditEnv& env, const RegretTrace& trace) {
    double total = 0.0;
    for (int s = 0; s < env.num_states; ++s) {
        const double b = env.best(s);
        for (int a = 0; a < env.num_actions; ++a) {
            total += (b - env.mean(s, a)) *
                     static_cast<double>(trace.pulls[static_cast<std::size_t>(s * env.num_actions + a)]);
        }
    }
    return total;
}

double mean_final_regret(const BanditEnv& env, std::int64_t T, int seeds, std::uint64_t seed) {
    if (seeds < 1) {
        throw std::invalid_argument("mean_final_regret: need at least one seed");
    }
    double total = 0.0;
    for (int k = 0; k < seeds; ++k) {
        Rng rng = make_rng(seed, {fnv1a("ucb-run"), static_cast<std::uint64_t>(k)});
        total += run_ucb(env, T, rng).cumulative.back();
    }
    return total / seeds;
}

std::vector<CompressionRow> compression_sweep(const BanditEnv& base, std::span<const double> alphas,
                                              std::int64_t T, int seeds, std::uint64_t seed) {
    const double r1 = mean_final_regret(base, T, seeds, seed);
    std::vector<CompressionRow> rows;
    for (double alpha : alphas) {
        CompressionRow row;
        row.alpha = alpha;
        if (alpha == 1.0) {
            row.num_states = base.num_states;
            row.mean_regret = r1;
        } else {
            const std::vector<int> mm = exact_merge_map(base, alpha);
            const BanditEnv merged = merge_states(base, mm);
            row.num_states = merged.num_states;
            row.mean_regret = mean_final_regret(merged, T, seeds, seed);
        }
        row.ratio = r1 > 0.0 ? row.mean_regret / r1 : 1.0;
        row.bound_ratio = std::sqrt(alpha);
        rows.push_back(row);
    }
    return rows;
}

std::string regret_csv(const RegretTrace& trace, std::int64_t stride) {
    if (stride < 1) {
        throw std::invalid_argument("regret_csv: stride must be positive");
    }
    std::ostringstream os;
    os << "t,regret\n";
    const auto T = static_cast<std::int64_t>(trace.cumulative.size());
    char buf[64];
    for (std::int64_t t = stride; t <= T; t += stride) {
        std::snprintf(buf, sizeof buf, "%lld,%.17g\n", static_cast<long long>(t),
                      trace.cumulative[static_cast<std::size_t>(t - 1)]);
        os << buf;
    }
    return os.str();
}

std::string compression_csv(std::span<const CompressionRow> rows) {
    std::ostringstream os;
    os << "alpha,num_states,mean_regret,ratio,sqrt_alpha\n";
    char buf[160];
    for (const CompressionRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%.17g,%d,%.17g,%.17g,%.17g\n", r.alpha, r.num_states,
                      r.mean_regret, r.ratio, r.bound_ratio);
        os << buf;
    }
    return os.str();
}

}  // namespace durit
