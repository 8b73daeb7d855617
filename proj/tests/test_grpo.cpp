#include <cmath>
#include <numeric>

#include "doctest.h"
#include "durit/grpo.hpp"
#include "grad_cases.hpp"

using namespace durit;

namespace {

std::vector<int> enc(const char* s) { return vocab().encode(s); }

}  // namespace

TEST_CASE("group advantages worked examples") {
    CHECK(group_advantages(std::vector<double>{1, 1, 1, 1}) == std::vector<double>{0, 0, 0, 0});
    const auto a = group_advantages(std::vector<double>{1, 0, 1, 0});
    const std::vector<double> ea{1, -1, 1, -1};
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(std::abs(a[i] - ea[i]) < 1e-4);
    }
    const auto b = group_advantages(std::vector<double>{1, 0, 0, 0});
    const std::vector<double> eb{1.7321, -0.5774, -0.5774, -0.5774};
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(std::abs(b[i] - eb[i]) < 1e-4);
    }
}

TEST_CASE("group advantage properties") {
    Rng rng = make_rng(17);
    for (int trial = 0; trial < 500; ++trial) {
        const auto G = static_cast<std::size_t>(uniform_int(rng, 2, 16));
        std::vector<double> r(G);
        for (double& x : r) {
            x = trial % 2 == 0 ? static_cast<double>(uniform_int(rng, 0, 1)) : normal01(rng);
        }
        const auto a = group_advantages(r);
        const double s = std::accumulate(a.begin(), a.end(), 0.0);
        CHECK(std::abs(s) <= 1e-12 * static_cast<double>(G));

        const double shift = 10.0 * normal01(rng);
        const double sc = 0.1 + 5.0 * uniform01(rng);
        std::vector<double> r2 = r;
        for (double& x : r2) {
            x = sc * x + shift;
        }
        const auto a2 = group_advantages(r2);
        for (std::size_t i = 0; i < G; ++i) {
            CHECK(std::abs(a[i] - a2[i]) < 1e-9);
        }
    }
    CHECK(group_advantages(std::vector<double>{0.3, 0.3 + 1e-10}) == std::vector<double>{0, 0});
}

TEST_CASE("mapper reward from counts") {
    CHECK(combine_mapper_reward(3, 8, false).total == 0.375);
    CHECK(combine_mapper_reward(0, 8, false).total == 0.0);
    const MapperReward leak = combine_mapper_reward(8, 8, true);
    CHECK(leak.accuracy == 1.0);
    CHECK(leak.cheating == -1.0);
    CHECK(leak.total == 0.0);
    CHECK_THROWS(combine_mapper_reward(9, 8, false));
}

TEST_CASE("reasoner reward") {
    ProblemInstance inst;
    inst.canonical = *parse_canonical_string("((3+4)*2)");
    CHECK(reasoner_reward(enc("7 times 2 is 14 . #### 14"), inst) == 1.0);
    CHECK(reasoner_reward(enc("#### 13"), inst) == 0.0);
    CHECK(reasoner_reward(enc("7 times 2 is 14 ."), inst) == 0.0);
}

TEST_CASE("rollout groups") {
    TransformerLM m(testing::grad_model_config(), 3);
    const ProblemInstance inst = testing::grad_instance(3);
    const std::vector<int> prompt = reasoner_prompt(inst.surface);
    const int eos = vocab().eos();

    const RolloutGroup greedy = rollout_group(m, prompt, 4, DecodeConfig::greedy(8, eos), 1);
    for (const Completion& c : greedy.completions) {
        CHECK(c.tokens == greedy.completions[0].tokens);
    }
    const auto sampled = DecodeConfig::sampled(1.0, 8, eos);
    const RolloutGroup a = rollout_group(m, prompt, 6, sampled, 42);
    const RolloutGroup b = rollout_group(m, prompt, 6, sampled, 42);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(a.completions[i].tokens == b.completions[i].tokens);
        const auto fresh = sequence_logprob(m, prompt, a.completions[i].tokens);
        for (std::size_t t = 0; t < fresh.size(); ++t) {
            CHECK(std::abs(fresh[t] - a.completions[i].logprobs[t]) <= 1e-12);
        }
    }
}

TEST_CASE("GRPO loss") {
    TransformerLM m(testing::grad_model_config(), 5);
    const ProblemInstance inst = testing::grad_instance(5);
    const std::vector<int> prompt = reasoner_prompt(inst.surface);
    GrpoConfig cfg;

    SUBCASE("zero advantages against an identical reference") {
        RolloutGroup group = rollout_group(m, prompt, 4, DecodeConfig::sampled(1.0, 6, vocab().eos()), 9);
        group.advantages.assign(4, 0.0);
        attach_reference(group, m);
        Graph g;
        CHECK(grpo_loss(g, m, group, cfg).item() == 0.0);
    }
    SUBCASE("single one-token completion with unit advantage") {
        RolloutGroup group = rollout_group(m, prompt, 1, DecodeConfig::sampled(1.0, 1, vocab().eos()), 9);
        REQUIRE(group.completions[0].tokens.size() == 1);
        group.advantages = {1.0};
        cfg.kl_coef = 0.0;
        Graph g;
        CHECK(grpo_loss(g, m, group, cfg).item() == -1.0);
    }
    SUBCASE("zero advantages without KL give zero gradient") {
        RolloutGroup group = rollout_group(m, prompt, 4, DecodeConfig::sampled(1.0, 6, vocab().eos()), 9);
        group.advantages.assign(4, 0.0);
        cfg.kl_coef = 0.0;
        zero_grads(m.parameters());
        Graph g;
        g.backward(grpo_loss(g, m, group, cfg));
        for (Tensor* p : m.parameters()) {
            for (double v : p->grad) {
                CHECK(v == 0.0);
            }
        }
    }
    SUBCASE("a step on a positive-advantage completion raises its log-probability") {
        RolloutGroup group = rollout_group(m, prompt, 1, DecodeConfig::sampled(1.0, 6, vocab().eos()), 11);
        group.advantages = {1.0};
        cfg.kl_coef = 0.0;
        const auto& toks = group.completions[0].tokens;
        const auto before = sequence_logprob(m, prompt, toks);
        AdamW opt(m.parameters(), AdamWConfig{.lr = 1e-4, .weight_decay = 0.0});
        opt.zero_grad();
        Graph g;
        g.backward(grpo_loss(g, m, group, cfg));
        opt.step();
        const auto after = sequence_logprob(m, prompt, toks);
        CHECK(std::accumulate(after.begin(), after.end(), 0.0) >
              std::accumulate(before.begin(), before.end(), 0.0));
    }
}

TEST_CASE("mapper total loss") {
    TransformerLM mapper(testing::grad_model_config(), 8);
    Codebook cb = init_codebook(4, testing::grad_model_config().d_model, 0.02, 8);
    std::vector<ProblemInstance> batch{testing::grad_instance(8), testing::grad_instance(9)};
    std::vector<RolloutGroup> groups;
    std::vector<std::vector<double>> queries;
    GrpoConfig cfg;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        batch[i].cluster_label = static_cast<int>(i) + 1;
        const std::vector<double> row = cb.template_row(*batch[i].cluster_label);
        RolloutGroup g = rollout_group(mapper, mapper_prompt(batch[i].surface), 4,
                                       DecodeConfig::sampled(1.0, 6, vocab().eos()), 20 + i,
                                       Injection{template_position(batch[i].surface), &row});
        g.rewards = {0.0, 1.0, 0.5, 0.25};
        g.advantages = group_advantages(g.rewards);
        attach_reference(g, mapper, Injection{template_position(batch[i].surface), &row});
        groups.push_back(std::move(g));
        queries.push_back(avg_word_embedding(mapper, batch[i].surface));
    }

    SUBCASE("zero weights reduce to the policy loss and the parts recombine") {
        for (std::size_t i = 0; i < batch.size(); ++i) {
            Graph g;
            const auto t0 = mapper_loss(g, mapper, cb, groups[i], batch[i], *batch[i].cluster_label,
                                        queries[i], cfg, 0.0, 0.0);
            CHECK(t0.total.item() == t0.pg.item());
            const auto t = mapper_loss(g, mapper, cb, groups[i], batch[i], *batch[i].cluster_label,
                                       queries[i], cfg, 1e-3, 1e-2);
            CHECK(t.total.item() == t.pg.item() + 1e-3 * t.key.item() + 1e-2 * t.templ.item());
        }
    }
    SUBCASE("with a frozen policy term the codebook losses descend") {
        cfg.kl_coef = 0.0;
        for (RolloutGroup& g : groups) {
            g.advantages.assign(g.advantages.size(), 0.0);
        }
        std::vector<Tensor*> params = mapper.parameters();
        for (Tensor* p : cb.parameters()) {
            params.push_back(p);
        }
        AdamW opt(params, AdamWConfig{.lr = 1e-3});
        double prev = 1e300;
        for (int step = 0; step < 10; ++step) {
            opt.zero_grad();
            double aux = 0.0;
            for (std::size_t i = 0; i < batch.size(); ++i) {
                Graph g;
                const auto t = mapper_loss(g, mapper, cb, groups[i], batch[i], *batch[i].cluster_label,
                                           queries[i], cfg, 1e-3, 1e-2);
                aux += 1e-3 * t.key.item() + 1e-2 * t.templ.item();
                g.backward(t.total);
            }
            CHECK(aux < prev);
            prev = aux;
            opt.step();
        }
    }
    SUBCASE("mapper step refuses unlabelled instances") {
        TransformerLM ref = mapper;
        Codebook ref_cb = cb;
        TransformerLM reasoner(testing::grad_model_config(), 1);
        std::vector<Tensor*> params = mapper.parameters();
        AdamW opt(params, AdamWConfig{});
        MapperStepContext ctx{mapper, cb, ref, ref_cb, reasoner, opt};
        std::vector<ProblemInstance> bad{testing::grad_instance(1)};
        CHECK_THROWS(mapper_step(ctx, bad, cfg, 2, DecodeConfig::sampled(0.7, 4, vocab().eos()), 1e-3,
                                 1e-2, 1));
    }
}

TEST_CASE("reasoner step is deterministic for a fixed seed") {
    std::vector<ProblemInstance> batch{testing::grad_instance(1), testing::grad_instance(2)};
    auto run = [&] {
        TransformerLM m(testing::grad_model_config(), 4);
        TransformerLM ref = m;
        AdamW opt(m.parameters(), AdamWConfig{.lr = 1e-3});
        GrpoConfig cfg;
        cfg.group_size = 4;
        cfg.max_new_tokens = 6;
        std::vector<double> trace;
        for (std::uint64_t s = 0; s < 3; ++s) {
            const LossBreakdown lb = reasoner_step(m, ref, opt, batch, cfg, s);
            trace.push_back(lb.total);
            trace.push_back(lb.grad_norm);
        }
        trace.insert(trace.end(), m.parameters()[2]->data.begin(), m.parameters()[2]->data.end());
        return trace;
    };
    CHECK(run() == run());
}
