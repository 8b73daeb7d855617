#include "durit/grpo.hpp"

#include <cmath>
#include <stdexcept>

namespace durit {

void validate(const GrpoConfig& cfg) {
    if (cfg.group_size < 2) {
        throw std::invalid_argument("grpo config: group_size must be at least 2");
    }
    if (!(cfg.clip_eps > 0.0 && cfg.clip_eps < 1.0)) {
        throw std::invalid_argument("grpo config: clip_eps must lie in (0, 1)");
    }
    if (cfg.kl_coef < 0.0) {
        throw std::invalid_argument("grpo config: kl_coef must be nonnegative");
    }
    if (!(cfg.lr > 0.0) || cfg.batch_size < 1 || cfg.epochs < 0 || !(cfg.temperature > 0.0) ||
        cfg.max_new_tokens < 1 || !(cfg.grad_clip > 0.0)) {
        throw std::invalid_argument("grpo config: invalid lr, batch, epochs, decode or clip setting");
    }
}

RolloutGroup rollout_group(const TransformerLM& policy, std::span<const int> prompt, int G,
                           const DecodeConfig& decode, std::uint64_t base_seed,
                           const Injection& inj) {
    if (G < 1) {
        throw std::invalid_argument("rollout_group: G must be positive");
    }
    RolloutGroup group;
    group.prompt.assign(prompt.begin(), prompt.end());
    for (int i = 0; i < G; ++i) {
        Rng rng = make_rng(base_seed, {fnv1a("rollout"), static_cast<std::uint64_t>(i)});
        group.completions.push_back(sample_completion(policy, prompt, decode, rng, inj));
    }
    return group;
}

std::vector<double> group_advantages(std::span<const double> rewards) {
    const std::size_t n = rewards.size();
    if (n == 0) {
        return {};
    }
    double mean = 0.0;
    for (double r : rewards) {
        mean += r;
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double r : rewards) {
        var += (r - mean) * (r - mean);
    }
    const double sd = std::sqrt(var / static_cast<double>(n));
    std::vector<double> adv(n, 0.0);
    if (sd < 1e-8) {
        return adv;
    }
    for (std::size_t i = 0; i < n; ++i) {
        adv[i] = (rewards[i] - mean) / sd;
    }
    return adv;
}

void attach_reference(RolloutGroup& group, TransformerLM& ref_policy, const Injection& inj) {
    group.ref_logprobs.clear();
    for (const Completion& c : group.completions) {
        group.ref_logprobs.push_back(sequence_logprob(ref_policy, group.prompt, c.tokens, inj));
    }
}

Var grpo_loss(Graph& g, TransformerLM& policy, const RolloutGroup& group, const GrpoConfig& cfg,
              const GraphInjection& inj) {
    const std::size_t G = group.completions.size();
    if (G == 0 || group.advantages.size() != G) {
        throw std::invalid_argument("grpo_loss: advantages missing for " + std::to_string(G) +
                                    " completions");
    }
    const bool use_kl = cfg.kl_coef != 0.0;
    if (use_kl && group.ref_logprobs.size() != G) {
        throw std::invalid_argument("grpo_loss: reference log-probabilities missing");
    }
    std::vector<Var> per_seq;
    for (std::size_t i = 0; i < G; ++i) {
        const Completion& c = group.completions[i];
        const std::size_t T = c.tokens.size();
        if (c.logprobs.size() != T) {
            throw std::invalid_argument("grpo_loss: old log-probabilities misaligned");
        }
        Var lp = completion_logprobs(g, policy, group.prompt, c.tokens, inj);
        Var old = g.constant(Tensor::vector(c.logprobs));
        Var adv = g.constant(Tensor::vector(std::vector<double>(T, group.advantages[i])));
        Var ratio = exp(sub(lp, old));
        Var surr1 = mul(ratio, adv);
        Var surr2 = mul(clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), adv);
        Var tok = scale(minimum(surr1, surr2), -1.0);
        if (use_kl) {
            const std::vector<double>& ref = group.ref_logprobs[i];
            if (ref.size() != T) {
                throw std::invalid_argument("grpo_loss: reference log-probabilities misaligned");
            }
            Var diff = sub(g.constant(Tensor::vector(ref)), lp);
            Var ones = g.constant(Tensor::vector(std::vector<double>(T, 1.0)));
            Var k3 = sub(sub(exp(diff), diff), ones);
            tok = add(tok, scale(k3, cfg.kl_coef));
        }
        per_seq.push_back(reshape(mean(tok), {1, 1}));
    }
    return mean(concat(per_seq));
}

MapperReward combine_mapper_reward(int correct, int N, bool leak) {
    if (N < 1 || correct < 0 || correct > N) {
        throw std::invalid_argument("combine_mapper_reward: need 0 <= correct <= N, N >= 1");
    }
    MapperReward r;
    r.accuracy = static_cast<double>(correct) / static_cast<double>(N);
    r.cheating = leak ? kCheatingPenalty : 0.0;
    r.total = r.accuracy + r.cheating;
    return r;
}

MapperReward mapper_reward(const ProblemInstance& original, std::span<const int> mapped,
                           const TransformerLM& frozen_reasoner, int N, const DecodeConfig& decode,
                           std::uint64_t base_seed) {
    if (N < 1) {
        throw std::invalid_argument("mapper_reward: N must be positive");
    }
    const std::vector<int> prompt = reasoner_prompt(mapped);
    int correct = 0;
    // A mapping too long for the reasoner's context cannot be answered.
    if (prompt.size() < static_cast<std::size_t>(frozen_reasoner.config().max_context)) {
        for (int i = 0; i < N; ++i) {
            Rng rng = make_rng(base_seed, {fnv1a("reward"), static_cast<std::uint64_t>(i)});
            const Completion c = sample_completion(frozen_reasoner, prompt, decode, rng);
            if (is_correct(c.tokens, original)) {
                ++correct;
            }
        }
    }
    return combine_mapper_reward(correct, N, detect_leak(original, mapped));
}

double reasoner_reward(std::span<const int> response, const ProblemInstance& inst) {
    return is_correct(response, inst) ? 1.0 : 0.0;
}

MapperLossTerms mapper_loss(Graph& g, TransformerLM& mapper, Codebook& cb,
                            const RolloutGroup& group, const ProblemInstance& inst, int label,
                            std::span<const double> query, const GrpoConfig& cfg, double alpha1,
                            double alpha2) {
    const auto row = static_cast<std::size_t>(select_template_train(cb, label));
    Var trow = slice_rows(g.parameter(cb.templates), row, row + 1);
    MapperLossTerms t;
    t.pg = grpo_loss(g, mapper, group, cfg, GraphInjection{template_position(inst.surface), trow});
    Var z = mean_pool_hidden(g, mapper, clustering_text(inst));
    t.templ = template_sim_loss(g, z, cb, label);
    t.key = key_sim_loss(g, g.constant(Tensor::vector({query.begin(), query.end()})), cb, label);
    t.total = add(add(t.pg, scale(t.key, alpha1)), scale(t.templ, alpha2));
    return t;
}

namespace {

double finish_step(std::vector<Tensor*>& params, AdamW& opt, double clip) {
    const double norm = clip_grad_norm(params, clip);
    opt.step();
    return norm;
}

}  // namespace

LossBreakdown mapper_step(MapperStepContext& ctx, std::span<const ProblemInstance> batch,
                          const GrpoConfig& cfg, int reward_samples,
                          const DecodeConfig& reward_decode, double alpha1, double alpha2,
                          std::uint64_t step_seed) {
    if (batch.empty()) {
        throw std::invalid_argument("mapper_step: empty batch");
    }
    for (const ProblemInstance& inst : batch) {
        if (!inst.cluster_label) {
            throw std::invalid_argument("mapper_step: instance " + inst.id + " has no cluster label");
        }
    }
    const Vocab& V = vocab();
    const DecodeConfig map_decode =
        DecodeConfig::sampled(cfg.temperature, cfg.max_new_tokens, V.eos());
    ctx.optimizer.zero_grad();
    std::vector<Tensor*> params = ctx.optimizer.params();
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    LossBreakdown out;
    double reward_sum = 0.0;
    std::size_t reward_count = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const ProblemInstance& inst = batch[b];
        const int label = select_template_train(ctx.codebook, *inst.cluster_label);
        const std::uint64_t seed =
            make_rng(step_seed, {fnv1a("mapper-instance"), static_cast<std::uint64_t>(b)})();
        const std::vector<int> prompt = mapper_prompt(inst.surface);
        const int pos = template_position(inst.surface);
        const std::vector<double> row = ctx.codebook.template_row(label);
        const std::vector<double> ref_row = ctx.ref_codebook.template_row(label);

        RolloutGroup group = rollout_group(ctx.mapper, prompt, cfg.group_size, map_decode, seed,
                                           Injection{pos, &row});
        for (std::size_t i = 0; i < group.completions.size(); ++i) {
            const std::vector<int> mapped = strip_eos(group.completions[i].tokens);
            const MapperReward r =
                mapper_reward(inst, mapped, ctx.reasoner, reward_samples, reward_decode,
                              make_rng(seed, {fnv1a("reward-seed"), i})());
            group.rewards.push_back(r.total);
            reward_sum += r.total;
            ++reward_count;
        }
        group.advantages = group_advantages(group.rewards);
        if (cfg.kl_coef != 0.0) {
            attach_reference(group, ctx.ref_mapper, Injection{pos, &ref_row});
        }

        Graph g;
        const MapperLossTerms t =
            mapper_loss(g, ctx.mapper, ctx.codebook, group, inst, label,
                        avg_word_embedding(ctx.mapper, inst.surface), cfg, alpha1, alpha2);
        g.backward(scale(t.total, inv_b));
        out.pg += t.pg.item() * inv_b;
        out.key += t.key.item() * inv_b;
        out.templ += t.templ.item() * inv_b;
    }
    out.total = out.pg + alpha1 * out.key + alpha2 * out.templ;
    out.mean_reward = reward_count > 0 ? reward_sum / static_cast<double>(reward_count) : 0.0;
    out.grad_norm = finish_step(params, ctx.optimizer, cfg.grad_clip);
    return out;
}

LossBreakdown reasoner_step(TransformerLM& reasoner, TransformerLM& ref_reasoner, AdamW& optimizer,
                            std::span<const ProblemInstance> batch, const GrpoConfig& cfg,
                            std::uint64_t step_seed) {
    if (batch.empty()) {
        throw std::invalid_argument("reasoner_step: empty batch");
    }
    const DecodeConfig decode =
        DecodeConfig::sampled(cfg.temperature, cfg.max_new_tokens, vocab().eos());
    optimizer.zero_grad();
    std::vector<Tensor*> params = optimizer.params();
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    LossBreakdown out;
    double reward_sum = 0.0;
    std::size_t reward_count = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const ProblemInstance& inst = batch[b];
        const std::uint64_t seed =
            make_rng(step_seed, {fnv1a("reasoner-instance"), static_cast<std::uint64_t>(b)})();
        RolloutGroup group =
            rollout_group(reasoner, reasoner_prompt(inst.surface), cfg.group_size, decode, seed);
        for (const Completion& c : group.completions) {
            group.rewards.push_back(reasoner_reward(c.tokens, inst));
            reward_sum += group.rewards.back();
            ++reward_count;
        }
        group.advantages = group_advantages(group.rewards);
        if (cfg.kl_coef != 0.0) {
            attach_reference(group, ref_reasoner);
        }
        Graph g;
        Var loss = grpo_loss(g, reasoner, group, cfg);
        g.backward(scale(loss, inv_b));
        out.pg += loss.item() * inv_b;
    }
    out.total = out.pg;
    out.mean_reward = reward_count > 0 ? reward_sum / static_cast<double>(reward_count) : 0.0;
    out.grad_norm = finish_step(params, optimizer, cfg.grad_clip);
    return out;
}

}  // namespace durit
