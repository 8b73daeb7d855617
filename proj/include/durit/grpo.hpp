#pragma once

// Group Relative Policy Optimization: group rollouts, group-normalised
// advantages, the clipped-ratio loss with a per-token KL penalty towards a
// frozen reference policy, and the mapper and reasoner training steps.

#include <cstdint>
#include <span>
#include <vector>

#include "durit/autodiff.hpp"
#include "durit/codebook.hpp"
#include "durit/corpus.hpp"
#include "durit/model.hpp"

namespace durit {

struct GrpoConfig {
    int group_size = 8;
    double clip_eps = 0.2;
    double kl_coef = 0.001;
    double lr = 1e-4;
    int batch_size = 8;
    int epochs = 1;
    double temperature = 0.7;
    int max_new_tokens = 28;
    double grad_clip = 1.0;
};

void validate(const GrpoConfig& cfg);

struct RolloutGroup {
    std::vector<int> prompt;
    std::vector<Completion> completions;          // tokens + old log-probabilities
    std::vector<double> rewards;
    std::vector<double> advantages;
    std::vector<std::vector<double>> ref_logprobs;  // per completion
};

// G samples, completion g drawn from its own stream derived from base_seed.
RolloutGroup rollout_group(const TransformerLM& policy, std::span<const int> prompt, int G,
                           const DecodeConfig& decode, std::uint64_t base_seed,
                           const Injection& inj = {});

// (r - mean) / population std, or all zeros when std < 1e-8.
std::vector<double> group_advantages(std::span<const double> rewards);

void attach_reference(RolloutGroup& group, TransformerLM& ref_policy, const Injection& inj = {});

// Mean over completions of the token-mean of
//   -min(rho A, clip(rho, 1-eps, 1+eps) A) + kl_coef * k3(policy || ref)
// with rho = exp(logprob - old_logprob).
Var grpo_loss(Graph& g, TransformerLM& policy, const RolloutGroup& group, const GrpoConfig& cfg,
              const GraphInjection& inj = {});

struct MapperReward {
    double accuracy = 0.0;
    double cheating = 0.0;
    double total = 0.0;
};

inline constexpr double kCheatingPenalty = -1.0;

MapperReward combine_mapper_reward(int correct, int N, bool leak);

// accuracy = fraction of N sampled reasoner answers to mapped that are
// correct; cheating = -1 when the mapping leaks the answer.
MapperReward mapper_reward(const ProblemInstance& original, std::span<const int> mapped,
                           const TransformerLM& frozen_reasoner, int N, const DecodeConfig& decode,
                           std::uint64_t base_seed);

double reasoner_reward(std::span<const int> response, const ProblemInstance& inst);

struct LossBreakdown {
    double pg = 0.0;
    double key = 0.0;
    double templ = 0.0;
    double total = 0.0;
    double mean_reward = 0.0;
    double grad_norm = 0.0;
};

struct MapperLossTerms {
    Var pg;
    Var key;
    Var templ;
    Var total;  // pg + alpha1 * key + alpha2 * templ
};

// Loss graph for one labelled instance whose group was sampled from
// mapper_prompt(inst.surface) with template `label` injected. query is the
// detached key-selection vector, avg_word_embedding(mapper, inst.surface).
MapperLossTerms mapper_loss(Graph& g, TransformerLM& mapper, Codebook& cb,
                            const RolloutGroup& group, const ProblemInstance& inst, int label,
                            std::span<const double> query, const GrpoConfig& cfg, double alpha1,
                            double alpha2);

struct MapperStepContext {
    TransformerLM& mapper;
    Codebook& codebook;
    TransformerLM& ref_mapper;
    const Codebook& ref_codebook;
    const TransformerLM& reasoner;
    AdamW& optimizer;  // over mapper + codebook parameters
};

// One optimiser step on L_pg + alpha1 L_key + alpha2 L_template over a batch
// of labelled instances. Throws if an instance has no cluster label.
LossBreakdown mapper_step(MapperStepContext& ctx, std::span<const ProblemInstance> batch,
                          const GrpoConfig& cfg, int reward_samples,
                          const DecodeConfig& reward_decode, double alpha1, double alpha2,
                          std::uint64_t step_seed);

// One GRPO step on the reasoner with correctness reward.
LossBreakdown reasoner_step(TransformerLM& reasoner, TransformerLM& ref_reasoner, AdamW& optimizer,
                            std::span<const ProblemInstance> batch, const GrpoConfig& cfg,
                            std::uint64_t step_seed);

}  // namespace durit
