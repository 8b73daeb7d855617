// Command-line front end. Every subcommand accepts --config, --seed and
// --out; stage subcommands continue a run found in --out.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "durit/bandit.hpp"
#include "durit/config.hpp"
#include "durit/corpus.hpp"
#include "durit/evaluate.hpp"
#include "durit/distill.hpp"
#include "durit/pipeline.hpp"

namespace fs = std::filesystem;
using namespace durit;

namespace {

struct Common {
    std::string config;
    std::int64_t seed = -1;
    std::string out;
    std::vector<std::string> overrides;
    bool allow_mismatch = false;
    bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "Configuration file (key = value lines)");
    app->add_option("--seed", c.seed, "Master seed, overrides pipeline.seed");
    app->add_option("--out", c.out, "Run directory, overrides pipeline.out_dir");
    app->add_option("--set", c.overrides, "Extra key=value overrides")->take_all();
    app->add_flag("--allow-hash-mismatch", c.allow_mismatch,
                  "Load checkpoints written under a different configuration");
    app->add_flag("--quiet", c.quiet, "Suppress progress messages");
}

PipelineConfig resolve(const Common& c) {
    PipelineConfig cfg = c.config.empty() ? default_config() : load_config(c.config);
    for (const std::string& kv : c.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("--set expects key=value, got " + kv);
        }
        set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (c.seed >= 0) {
        cfg.seed = static_cast<std::uint64_t>(c.seed);
    }
    if (!c.out.empty()) {
        cfg.out_dir = c.out;
    }
    validate(cfg);
    return cfg;
}

RunOptions options(const Common& c, bool resume, const std::string& stop_after = {}) {
    RunOptions o;
    o.resume = resume;
    o.allow_hash_mismatch = c.allow_mismatch;
    o.stop_after = stop_after;
    o.verbose = !c.quiet;
    return o;
}

void write_file(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
    std::ofstream out(p);
    if (!out) {
        throw std::runtime_error("cannot write " + p.string());
    }
    out << text;
}

void print_manifest(const RunManifest& m) {
    for (const StageRecord& s : m.stages) {
        std::printf("%-14s %8.1f s  %s\n", s.name.c_str(), s.seconds, s.checkpoint.c_str());
    }
}

int bandit_sim(const Common& c, std::int64_t T, int seeds) {
    const std::uint64_t seed = c.seed >= 0 ? static_cast<std::uint64_t>(c.seed) : 1;
    const fs::path out = c.out.empty() ? fs::path("runs/bandit") : fs::path(c.out);
    fs::create_directories(out);
    std::string grid = "states,actions,T,mean_regret,bound_c8,regret_per_round\n";
    for (int S : {4, 16, 64}) {
        for (int A : {2, 8}) {
            const BanditEnv env = random_env(S, A, seed);
            const double r = mean_final_regret(env, T, seeds, seed);
            const double b = regret_bound(S, A, static_cast<double>(T), 8.0);
            char buf[200];
            std::snprintf(buf, sizeof buf, "%d,%d,%lld,%.17g,%.17g,%.17g\n", S, A,
                          static_cast<long long>(T), r, b, r / static_cast<double>(T));
            grid += buf;
            std::printf("|Q|=%-3d |A|=%d  mean R_T=%10.2f  8*sqrt(QAT lnT)=%10.2f\n", S, A, r, b);
        }
    }
    write_file(out / "regret_grid.csv", grid);
    Rng rng = make_rng(seed, {fnv1a("trace")});
    const RegretTrace tr = run_ucb(random_env(16, 2, seed), T, rng);
    write_file(out / "regret_trace.csv", regret_csv(tr, std::max<std::int64_t>(1, T / 1000)));
    const BanditEnv base = tiered_env(64, 16, 2, 0.05, 0.5);
    const std::vector<double> alphas = {1.0, 0.5, 0.25};
    const auto rows = compression_sweep(base, alphas, T, seeds, seed);
    write_file(out / "compression.csv", compression_csv(rows));
    for (const CompressionRow& r : rows) {
        std::printf("alpha=%.2f  |P|=%-3d  mean R_T=%10.2f  ratio=%.3f  sqrt(alpha)=%.3f\n", r.alpha,
                    r.num_states, r.mean_regret, r.ratio, r.bound_ratio);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Problem-space mapping, self-distillation and GRPO on a synthetic arithmetic corpus"};
    app.require_subcommand(1);

    struct Sub {
        const char* name;
        const char* help;
        const char* stop_after;  // nullptr: custom handling
    };
    const Sub stage_subs[] = {
        {"generate-corpus", "Generate and write the corpus splits", "corpus"},
        {"warmup", "Warm-start the mapper and the reasoner", "warmup"},
        {"train-mapper", "Run through Step I (mapper GRPO) of iteration 1", "iter1.step1"},
        {"distill", "Run through Step II (self-distillation) of iteration 1", "iter1.step2"},
        {"train-rl", "Run through Step III (reasoner GRPO) of iteration 1", "iter1.step3"},
    };
    std::vector<Common> commons(std::size(stage_subs));
    std::vector<CLI::App*> stage_apps;
    for (std::size_t i = 0; i < std::size(stage_subs); ++i) {
        CLI::App* s = app.add_subcommand(stage_subs[i].name, stage_subs[i].help);
        add_common(s, commons[i]);
        stage_apps.push_back(s);
    }

    Common pipe_c;
    bool resume = false;
    CLI::App* pipe = app.add_subcommand("run-pipeline", "Run every stage of every iteration");
    add_common(pipe, pipe_c);
    pipe->add_flag("--resume", resume, "Continue the run in --out from its last intact stage");

    Common base_c;
    std::string warmup_from;
    bool base_resume = false;
    CLI::App* base = app.add_subcommand("baseline-grpo", "Step III only from the shared warm-up");
    add_common(base, base_c);
    base->add_option("--warmup-from", warmup_from, "Warm-up checkpoint of the full pipeline run");
    base->add_flag("--resume", base_resume, "Continue the baseline run in --out");

    Common eval_c;
    std::string eval_set = "test_orig";
    CLI::App* eval = app.add_subcommand("eval", "Greedy accuracy of the latest reasoner");
    add_common(eval, eval_c);
    eval->add_option("--split", eval_set, "test_orig or test_perturbed")
        ->check(CLI::IsMember({"test_orig", "test_perturbed"}));

    Common rob_c;
    CLI::App* rob = app.add_subcommand("robustness", "Accuracy drop under perturbation");
    add_common(rob, rob_c);

    Common emb_c;
    CLI::App* emb = app.add_subcommand("embeddings", "5-NN distances and PCA of reasoner states");
    add_common(emb, emb_c);

    Common bandit_c;
    std::int64_t bandit_T = 100000;
    int bandit_seeds = 50;
    CLI::App* bandit = app.add_subcommand("bandit-sim", "State-wise UCB regret experiments");
    add_common(bandit, bandit_c);
    bandit->add_option("--rounds", bandit_T, "Rounds T")->check(CLI::PositiveNumber);
    bandit->add_option("--seeds", bandit_seeds, "Seeds per cell")->check(CLI::PositiveNumber);

    Common sweep_c;
    std::vector<double> lambdas = {0.0, 0.05, 0.1, 0.2, 0.5, 1.0};
    CLI::App* sweep = app.add_subcommand("sweep-lambda", "Accuracy as a function of lambda");
    add_common(sweep, sweep_c);
    sweep->add_option("--lambdas", lambdas, "Values to try")->delimiter(',');

    CLI11_PARSE(app, argc, argv);

    try {
        for (std::size_t i = 0; i < stage_apps.size(); ++i) {
            if (stage_apps[i]->parsed()) {
                const PipelineConfig cfg = resolve(commons[i]);
                print_manifest(run_pipeline(cfg, options(commons[i], true, stage_subs[i].stop_after)));
                return 0;
            }
        }
        if (pipe->parsed()) {
            const PipelineConfig cfg = resolve(pipe_c);
            print_manifest(run_pipeline(cfg, options(pipe_c, resume)));
            if (cfg.iterations > 0) {
                std::cout << read_summary(cfg.out_dir).dump(2) << '\n';
            }
            return 0;
        }
        if (base->parsed()) {
            const PipelineConfig cfg = resolve(base_c);
            RunOptions o = options(base_c, base_resume);
            o.warmup_from = warmup_from;
            print_manifest(run_baseline(cfg, o));
            std::cout << read_summary(cfg.out_dir).dump(2) << '\n';
            return 0;
        }
        if (eval->parsed()) {
            const PipelineConfig cfg = resolve(eval_c);
            LoadedRun run = open_run(cfg, eval_c.allow_mismatch);
            const auto& set = eval_set == "test_orig" ? run.corpus.test_orig : run.corpus.test_perturbed;
            const EvalResult r = evaluate_model(run.reasoner, set, cfg.eval_max_new_tokens);
            write_file(fs::path(cfg.out_dir) / ("eval_" + eval_set + "_" + run.last_stage + ".csv"),
                       eval_csv(r));
            std::printf("%s accuracy after %s: %.2f\n", eval_set.c_str(), run.last_stage.c_str(),
                        r.accuracy);
            return 0;
        }
        if (rob->parsed()) {
            const PipelineConfig cfg = resolve(rob_c);
            LoadedRun run = open_run(cfg, rob_c.allow_mismatch);
            const RobustnessReport r = robustness_report(run.reasoner, run.corpus.test_orig,
                                                         run.corpus.test_perturbed,
                                                         cfg.eval_max_new_tokens);
            std::printf("Acc_orig %.2f  Acc_symb %.2f  delta%% ", r.acc_orig, r.acc_symb);
            if (r.delta_pct) {
                std::printf("%+.2f\n", *r.delta_pct);
            } else {
                std::printf("undefined (Acc_orig is 0)\n");
            }
            return 0;
        }
        if (emb->parsed()) {
            const PipelineConfig cfg = resolve(emb_c);
            LoadedRun run = open_run(cfg, emb_c.allow_mismatch);
            const auto mapped = build_mapped_dataset(run.mapper, run.codebook, run.corpus.test_orig,
                                                     cfg.mapper_max_new_tokens);
            std::vector<std::vector<int>> q;
            for (const MappedRecord& m : mapped) {
                q.push_back(m.mapped);
            }
            const EmbeddingReport r = embedding_report(run.reasoner, run.corpus.test_orig, q);
            write_file(fs::path(cfg.out_dir) / "pca_original.csv", pca_csv(r.pca_original, r.ids));
            write_file(fs::path(cfg.out_dir) / "pca_mapped.csv", pca_csv(r.pca_mapped, r.ids));
            std::printf("5-NN mean distance: original %.6f  mapped %.6f\n", r.knn_original,
                        r.knn_mapped);
            return 0;
        }
        if (bandit->parsed()) {
            return bandit_sim(bandit_c, bandit_T, bandit_seeds);
        }
        if (sweep->parsed()) {
            const PipelineConfig cfg = resolve(sweep_c);
            const auto rows = sweep_lambda(cfg, lambdas, options(sweep_c, true));
            std::cout << lambda_csv(rows);
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
