// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
// criterion fails. Desk-scale runs are kept under acceptance_runs/ (or
// $DURIT_ACCEPTANCE_DIR) and resumed when already complete.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "durit/bandit.hpp"
#include "durit/evaluate.hpp"
#include "durit/pipeline.hpp"
#include "grad_cases.hpp"

using namespace durit;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

std::string fmtd(double v, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

std::string fmte(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

fs::path run_root() {
    const char* env = std::getenv("DURIT_ACCEPTANCE_DIR");
    return env != nullptr ? fs::path(env) : fs::path("acceptance_runs");
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------- 1

Outcome gradients() {
    const int seeds = 20;
    double worst = 0.0;
    std::string worst_name;
    int cases = 0;
    auto sweep = [&](const std::vector<testing::GradCase>& list) {
        for (const auto& c : list) {
            ++cases;
            for (int s = 0; s < seeds; ++s) {
                const double e = c.run(static_cast<std::uint64_t>(s)).max_rel_error;
                if (!(e <= worst)) {
                    worst = e;
                    worst_name = c.name;
                }
            }
        }
    };
    sweep(testing::op_grad_cases());
    sweep(testing::loss_grad_cases());
    return {worst < 1e-4, std::to_string(cases) + " cases x " + std::to_string(seeds) +
                              " seeds, worst rel error " + fmte(worst) + " (" + worst_name + ")"};
}

// ---------------------------------------------------------------- 2

Outcome loss_identities() {
    std::vector<std::string> bad;
    Rng rng = make_rng(2024, {fnv1a("acceptance-identities")});
    for (int trial = 0; trial < 20; ++trial) {
        Tensor sl = testing::random_tensor({6, 11}, rng, -4.0, 4.0, true);
        const Tensor tl = testing::random_tensor({6, 11}, rng, -4.0, 4.0, false);
        std::vector<int> targets(6);
        for (int& t : targets) {
            t = static_cast<int>(uniform_int(rng, 0, 10));
        }
        Graph g;
        Var s = g.parameter(sl);
        if (distill_loss(s, tl, targets, 0.0, 1.0).item() != cross_entropy(s, targets).item()) {
            bad.push_back("lambda=0 vs CE");
        }
        Var p = softmax_with_temperature(s, 1.0);
        if (kl_divergence(p, p).item() != 0.0) {
            bad.push_back("KL(p||p)");
        }
        Codebook one = init_codebook(1, 11, 0.5, static_cast<std::uint64_t>(trial));
        Var z = l2_normalize(g.constant(testing::random_tensor({1, 11}, rng, -1.0, 1.0, false)));
        if (template_sim_loss(g, z, one, 0).item() != 0.0 || key_sim_loss(g, z, one, 0).item() != 0.0) {
            bad.push_back("InfoNCE n=1");
        }
    }
    // alpha1 = alpha2 = 0 leaves the policy loss.
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        TransformerLM mapper(testing::grad_model_config(), seed);
        Codebook cb = init_codebook(4, testing::grad_model_config().d_model, 0.02, seed);
        ProblemInstance inst = testing::grad_instance(seed);
        inst.cluster_label = static_cast<int>(seed % 4);
        const std::vector<double> row = cb.template_row(*inst.cluster_label);
        const Injection inj{template_position(inst.surface), &row};
        RolloutGroup group = rollout_group(mapper, mapper_prompt(inst.surface), 4,
                                           DecodeConfig::sampled(1.0, 6, vocab().eos()), seed, inj);
        group.rewards = {1.0, 0.0, 0.5, 0.0};
        group.advantages = group_advantages(group.rewards);
        attach_reference(group, mapper, inj);
        Graph g;
        const auto t = mapper_loss(g, mapper, cb, group, inst, *inst.cluster_label,
                                   avg_word_embedding(mapper, inst.surface), GrpoConfig{}, 0.0, 0.0);
        if (t.total.item() != t.pg.item()) {
            bad.push_back("alpha=0 total vs pg");
        }
    }
    Graph g;
    Tensor s = Tensor::matrix(1, 2, {0.0, 0.0});
    s.requires_grad = true;
    const std::vector<int> target{0};
    const double worked =
        distill_loss(g.parameter(s), Tensor::matrix(1, 2, {std::log(3.0), 0.0}), target, 0.5, 1.0).item();
    if (std::abs(worked - 0.41191) > 1e-4) {
        bad.push_back("worked example");
    }
    std::string d = "worked example " + fmtd(worked, 5);
    for (const auto& b : bad) {
        d += "; failed: " + b;
    }
    return {bad.empty(), d};
}

// ---------------------------------------------------------------- 3

Outcome advantages() {
    bool ok = true;
    auto near = [&](const std::vector<double>& a, const std::vector<double>& e) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            ok = ok && std::abs(a[i] - e[i]) < 1e-4;
        }
    };
    near(group_advantages(std::vector<double>{1, 1, 1, 1}), {0, 0, 0, 0});
    near(group_advantages(std::vector<double>{1, 0, 1, 0}), {1, -1, 1, -1});
    near(group_advantages(std::vector<double>{1, 0, 0, 0}), {1.7321, -0.5774, -0.5774, -0.5774});
    const bool examples = ok;

    // Zero-variance guard: constant rewards give exact zeros.
    bool guard = true;
    for (double c : {0.0, 0.3, 1.0, -7.5}) {
        for (double a : group_advantages(std::vector<double>(8, c))) {
            guard = guard && a == 0.0;
        }
    }
    Rng rng = make_rng(77, {fnv1a("acceptance-adv")});
    double worst_sum = 0.0, worst_inv = 0.0;
    for (int trial = 0; trial < 2000; ++trial) {
        const auto G = static_cast<std::size_t>(uniform_int(rng, 2, 32));
        std::vector<double> r(G);
        for (double& x : r) {
            x = trial % 2 == 0 ? static_cast<double>(uniform_int(rng, 0, 1)) : normal01(rng);
        }
        const auto a = group_advantages(r);
        worst_sum = std::max(worst_sum, std::abs(std::accumulate(a.begin(), a.end(), 0.0)) /
                                            static_cast<double>(G));
        const double shift = 20.0 * normal01(rng);
        const double sc = 0.05 + 10.0 * uniform01(rng);
        std::vector<double> r2 = r;
        for (double& x : r2) {
            x = sc * x + shift;
        }
        const auto a2 = group_advantages(r2);
        for (std::size_t i = 0; i < G; ++i) {
            worst_inv = std::max(worst_inv, std::abs(a[i] - a2[i]));
        }
    }
    // Sums of G rounded terms: zero up to one rounding unit per element.
    const bool pass = examples && guard && worst_sum <= 1e-12 && worst_inv < 1e-9;
    return {pass, std::string("examples ") + (examples ? "ok" : "off") + ", guard " +
                      (guard ? "ok" : "off") + ", max |sum|/G " + fmte(worst_sum) +
                      ", max invariance gap " + fmte(worst_inv)};
}

// ---------------------------------------------------------------- 4

Outcome bandit() {
    const std::int64_t T = 100000;
    const int seeds = 50;
    bool bound_ok = true;
    bool sublinear = true;
    std::string cells;
    for (int Q : {4, 16, 64}) {
        for (int A : {2, 8}) {
            const BanditEnv env = random_env(Q, A, static_cast<std::uint64_t>(Q * 100 + A));
            double r3 = 0.0, r4 = 0.0, r5 = 0.0;
            for (int k = 0; k < seeds; ++k) {
                Rng rng = make_rng(static_cast<std::uint64_t>(Q * 100 + A),
                                   {fnv1a("acceptance-ucb"), static_cast<std::uint64_t>(k)});
                const RegretTrace t = run_ucb(env, T, rng);
                r3 += t.cumulative[999];
                r4 += t.cumulative[9999];
                r5 += t.cumulative.back();
            }
            r3 /= seeds;
            r4 /= seeds;
            r5 /= seeds;
            const double bound = regret_bound(Q, A, static_cast<double>(T), 8.0);
            bound_ok = bound_ok && r5 <= bound;
            sublinear = sublinear && r4 / 1e4 < r3 / 1e3 && r5 / 1e5 < r4 / 1e4;
            cells += " Q" + std::to_string(Q) + "A" + std::to_string(A) + ":" + fmtd(r5, 0) + "/" +
                     fmtd(bound, 0);
        }
    }
    const BanditEnv tiered = tiered_env(64, 16, 2, 0.05, 0.5);
    const std::vector<double> alphas{1.0, 0.5, 0.25};
    const auto rows = compression_sweep(tiered, alphas, T, seeds, 4);
    const double ratio = rows.back().ratio;
    const bool compress = ratio >= 0.375 && ratio <= 0.625;
    return {bound_ok && sublinear && compress,
            "regret/bound" + cells + "; sublinear " + (sublinear ? "yes" : "no") +
                "; ratio at alpha 0.25 = " + fmtd(ratio, 3) + " (alpha 0.5: " +
                fmtd(rows[1].ratio, 3) + ")"};
}

// ---------------------------------------------------------------- desk runs

struct DeskSeed {
    nlohmann::json durit;
    nlohmann::json baseline;
    std::vector<double> durit_curve;
    std::vector<double> baseline_curve;
    fs::path durit_dir;
    PipelineConfig cfg;
};

std::vector<double> read_curve(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    std::vector<double> out;
    while (std::getline(in, line)) {
        out.push_back(std::stod(line.substr(line.find(',') + 1)));
    }
    return out;
}

DeskSeed desk_seed(std::uint64_t seed) {
    DeskSeed d;
    PipelineConfig cfg = load_config((fs::path(DURIT_SOURCE_DIR) / "configs" / "desk.cfg").string());
    cfg.seed = seed;
    cfg.out_dir = (run_root() / ("desk_s" + std::to_string(seed))).string();
    RunOptions opts;
    opts.resume = true;
    const auto t0 = std::chrono::steady_clock::now();
    run_pipeline(cfg, opts);
    PipelineConfig base = cfg;
    base.out_dir = (run_root() / ("baseline_s" + std::to_string(seed))).string();
    RunOptions bopts;
    bopts.resume = true;
    bopts.warmup_from = (fs::path(cfg.out_dir) / "warmup.ckpt").string();
    run_baseline(base, bopts);
    std::fprintf(stderr, "desk seed %llu ready after %.0f s\n", static_cast<unsigned long long>(seed),
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    d.durit = read_summary(cfg.out_dir);
    d.baseline = read_summary(base.out_dir);
    for (int k = 1; k <= cfg.iterations; ++k) {
        const std::string f = "reward_curve_iter" + std::to_string(k) + ".csv";
        const auto a = read_curve(fs::path(cfg.out_dir) / f);
        const auto b = read_curve(fs::path(base.out_dir) / f);
        d.durit_curve.insert(d.durit_curve.end(), a.begin(), a.end());
        d.baseline_curve.insert(d.baseline_curve.end(), b.begin(), b.end());
    }
    d.durit_dir = cfg.out_dir;
    d.cfg = cfg;
    return d;
}

double mean_of(const std::vector<DeskSeed>& runs, const std::function<double(const DeskSeed&)>& f) {
    double s = 0.0;
    for (const auto& r : runs) {
        s += f(r);
    }
    return s / static_cast<double>(runs.size());
}

// ---------------------------------------------------------------- 5

Outcome end_to_end(const std::vector<DeskSeed>& runs) {
    const double acc_d = mean_of(runs, [](const DeskSeed& r) { return r.durit["accuracy"]["test_orig"].get<double>(); });
    const double acc_b = mean_of(runs, [](const DeskSeed& r) { return r.baseline["accuracy"]["test_orig"].get<double>(); });
    auto drop = [](const nlohmann::json& s) {
        return s["delta_pct"].is_null() ? 100.0 : std::abs(s["delta_pct"].get<double>());
    };
    const double drop_d = mean_of(runs, [&](const DeskSeed& r) { return drop(r.durit); });
    const double drop_b = mean_of(runs, [&](const DeskSeed& r) { return drop(r.baseline); });
    std::string per;
    for (const auto& r : runs) {
        per += " " + fmtd(r.durit["accuracy"]["test_orig"].get<double>(), 2) + "/" +
               fmtd(r.baseline["accuracy"]["test_orig"].get<double>(), 2);
    }
    const bool a = acc_d >= acc_b + 2.0;
    const bool b = drop_d < drop_b;
    return {a && b, "(a) test_orig DURIT " + fmtd(acc_d, 2) + " vs GRPO-only " + fmtd(acc_b, 2) +
                        (a ? " ok" : " short") + " [per seed" + per + "]; (b) |delta%| " +
                        fmtd(drop_d, 2) + " vs " + fmtd(drop_b, 2) + (b ? " ok" : " not smaller")};
}

// ---------------------------------------------------------------- 6

double brute_knn(const EmbeddingMatrix& z, int k) {
    double total = 0.0;
    for (std::size_t i = 0; i < z.rows; ++i) {
        std::vector<double> d;
        for (std::size_t j = 0; j < z.rows; ++j) {
            if (j == i) {
                continue;
            }
            double s = 0.0;
            for (std::size_t c = 0; c < z.dim; ++c) {
                const double t = z.row(i)[c] - z.row(j)[c];
                s += t * t;
            }
            d.push_back(std::sqrt(s));
        }
        std::sort(d.begin(), d.end());
        double s = 0.0;
        for (int t = 0; t < k; ++t) {
            s += d[static_cast<std::size_t>(t)];
        }
        total += s / k;
    }
    return total / static_cast<double>(z.rows);
}

Outcome compaction(const std::vector<DeskSeed>& runs) {
    const double o = mean_of(runs, [](const DeskSeed& r) { return r.durit["knn5"]["original"].get<double>(); });
    const double m = mean_of(runs, [](const DeskSeed& r) { return r.durit["knn5"]["mapped"].get<double>(); });
    // Rebuild the embeddings of every seed and compare against the all-pairs oracle.
    bool exact = true;
    for (const auto& r : runs) {
        LoadedRun lr = open_run(r.cfg);
        const auto mapped = build_mapped_dataset(lr.mapper, lr.codebook, lr.corpus.test_orig,
                                                 r.cfg.mapper_max_new_tokens);
        std::vector<std::vector<int>> oi, mi;
        std::vector<std::string> ids;
        for (std::size_t i = 0; i < mapped.size(); ++i) {
            oi.push_back(reasoner_prompt(lr.corpus.test_orig[i].surface));
            mi.push_back(reasoner_prompt(mapped[i].mapped));
            ids.push_back(lr.corpus.test_orig[i].id);
        }
        const EmbeddingMatrix zo = embed_inputs(lr.reasoner, oi, ids);
        const EmbeddingMatrix zm = embed_inputs(lr.reasoner, mi, ids);
        exact = exact && zo.rows <= 300 && knn_mean_distance(zo, 5) == brute_knn(zo, 5) &&
                knn_mean_distance(zm, 5) == brute_knn(zm, 5) &&
                knn_mean_distance(zo, 5) == r.durit["knn5"]["original"].get<double>() &&
                knn_mean_distance(zm, 5) == r.durit["knn5"]["mapped"].get<double>();
    }
    return {m < o && exact, "5-NN mean original " + fmtd(o) + ", mapped " + fmtd(m) +
                                "; oracle agreement " + (exact ? "exact" : "BROKEN")};
}

// ---------------------------------------------------------------- 7

Outcome filter_soundness(const std::vector<DeskSeed>& runs) {
    std::size_t pairs = 0, verified = 0, audits = 0, audited = 0;
    bool counters = true;
    for (const auto& r : runs) {
        const RunManifest m = RunManifest::from_json(
            nlohmann::ordered_json::parse(slurp(r.durit_dir / "manifest.json")));
        for (int k = 1; k <= r.cfg.iterations; ++k) {
            const std::string it = "iter" + std::to_string(k);
            const StageRecord* s2 = m.find(it + ".step2");
            if (s2 == nullptr) {
                counters = false;
                continue;
            }
            if (!s2->metrics.value("skipped", false)) {
                counters = counters && s2->metrics["audits_passed"] == s2->metrics["audits_expected"] &&
                           s2->metrics["d2_reverified"] == s2->metrics["d2_size"];
            }
            std::ifstream in(r.durit_dir / ("d2_" + it + ".jsonl"));
            std::string line;
            while (std::getline(in, line)) {
                const auto j = nlohmann::json::parse(line);
                const ProblemInstance inst = from_jsonl(line);
                DistillPair p;
                p.id = inst.id;
                p.original = inst.surface;
                p.mapped = vocab().encode(j["mapped_surface"].get<std::string>());
                p.response = vocab().encode(j["response"].get<std::string>());
                ++pairs;
                verified += is_correct(p.response, inst) ? 1 : 0;
                ++audited;
                audits += prefix_audit(p) ? 1 : 0;
            }
        }
    }
    return {pairs > 0 && verified == pairs && audits == audited && counters,
            std::to_string(verified) + "/" + std::to_string(pairs) + " D2 pairs re-verify, " +
                std::to_string(audits) + "/" + std::to_string(audited) + " prefix audits, stage counters " +
                (counters ? "consistent" : "INCONSISTENT")};
}

// ---------------------------------------------------------------- 8

std::vector<double> seed_mean_curve(const std::vector<DeskSeed>& runs, bool durit) {
    std::vector<double> out;
    for (const auto& r : runs) {
        const auto& c = durit ? r.durit_curve : r.baseline_curve;
        if (out.empty()) {
            out.assign(c.size(), 0.0);
        }
        for (std::size_t i = 0; i < c.size() && i < out.size(); ++i) {
            out[i] += c[i] / static_cast<double>(runs.size());
        }
    }
    return out;
}

Outcome reward_curves(const std::vector<DeskSeed>& runs) {
    const std::vector<double> d = seed_mean_curve(runs, true);
    const std::vector<double> b = seed_mean_curve(runs, false);
    if (d.empty() || d.size() != b.size()) {
        return {false, "reward curves missing or of different lengths"};
    }
    const std::size_t n = b.size();
    // Single steps are noisy: both the target and the running level use a
    // trailing window of a tenth of the run.
    const std::size_t w = std::max<std::size_t>(1, n / 10);
    auto trailing = [&](const std::vector<double>& c, std::size_t end) {
        double s = 0.0;
        for (std::size_t i = end - w; i < end; ++i) {
            s += c[i];
        }
        return s / static_cast<double>(w);
    };
    const double target = trailing(b, n);
    std::size_t reached = 0;
    for (std::size_t end = w; end <= n; ++end) {
        if (trailing(d, end) >= target) {
            reached = end;
            break;
        }
    }
    const bool pass = reached > 0 && 2 * reached <= n;
    return {pass, "baseline final reward " + fmtd(target, 3) + " over the last " + std::to_string(w) +
                      " of " + std::to_string(n) + " steps; DURIT " +
                      (reached > 0 ? "reaches it at step " + std::to_string(reached) +
                                         " (" + fmtd(100.0 * reached / n, 1) + "%)"
                                   : std::string("never reaches it (final ") + fmtd(trailing(d, n), 3) + ")")};
}

// ---------------------------------------------------------------- 9

Outcome determinism() {
    PipelineConfig cfg = load_config((fs::path(DURIT_SOURCE_DIR) / "configs" / "tiny.cfg").string());
    std::vector<std::string> summaries;
    for (const char* name : {"tiny_a", "tiny_b"}) {
        cfg.out_dir = (run_root() / name).string();
        fs::remove_all(cfg.out_dir);
        RunOptions o;
        o.verbose = false;
        run_pipeline(cfg, o);
        summaries.push_back(slurp(fs::path(cfg.out_dir) / "summary.json"));
    }
    const bool same = !summaries[0].empty() && summaries[0] == summaries[1];
    return {same, "two tiny runs, summary.json " + std::to_string(summaries[0].size()) + " bytes, " +
                      (same ? "identical" : "DIFFERENT")};
}

}  // namespace

int main() {
    int failures = 0;
    auto report = [&](int id, const char* name, const std::function<Outcome()>& f) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = f();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s %d %s: %s [%.0f s]\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
        std::fflush(stdout);
        failures += o.pass ? 0 : 1;
    };
    report(1, "gradient correctness", gradients);
    report(2, "loss identities", loss_identities);
    report(3, "advantage properties", advantages);
    report(4, "state-wise UCB regret and compression", bandit);

    std::vector<DeskSeed> runs;
    std::string desk_error;
    try {
        for (std::uint64_t seed : {1, 2, 3}) {
            runs.push_back(desk_seed(seed));
        }
    } catch (const std::exception& e) {
        desk_error = e.what();
    }
    auto desk = [&](Outcome (*f)(const std::vector<DeskSeed>&)) {
        return [&, f]() -> Outcome {
            if (!desk_error.empty()) {
                return {false, "desk runs failed: " + desk_error};
            }
            return f(runs);
        };
    };
    report(5, "DURIT vs GRPO-only on the desk corpus", desk(end_to_end));
    report(6, "embedding compaction", desk(compaction));
    report(7, "self-distillation filter soundness", desk(filter_soundness));
    report(8, "reward-curve efficiency", desk(reward_curves));
    report(9, "determinism", determinism);
    std::printf("%d of 9 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
