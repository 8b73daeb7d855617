#pragma once

// Supervised next-token training used to warm-start both models before the
// reinforcement stages: the reasoner on question -> worked solution, the
// mapper on question -> canonical rendering.

#include <cstdint>
#include <span>
#include <vector>

#include "durit/autodiff.hpp"
#include "durit/codebook.hpp"
#include "durit/corpus.hpp"
#include "durit/model.hpp"

namespace durit {

struct SftExample {
    std::vector<int> prompt;
    std::vector<int> target;   // loss is taken on these tokens only
    int template_index = -1;   // codebook row injected at template_pos, -1 = none
    int template_pos = -1;
};

// [bos] Q [sep] -> solution ending "#### a" [eos].
std::vector<SftExample> reasoner_sft_examples(std::span<const ProblemInstance> instances);

// [bos] Q [tpl] [sep] -> canonical rendering [eos]. Templates are drawn
// uniformly: clusters do not exist yet, so the mapper learns to work with
// any template row.
std::vector<SftExample> mapper_sft_examples(std::span<const ProblemInstance> instances,
                                            int n_templates, std::uint64_t seed);

// Mean token cross-entropy of one example.
Var sft_loss(Graph& g, TransformerLM& model, const SftExample& ex, const Codebook* cb = nullptr);

// One pass in seeded shuffle order, one optimiser step per batch, gradient
// norm clipped to 1. Returns the mean example loss.
double sft_epoch(TransformerLM& model, std::span<const SftExample> examples, AdamW& optimizer,
                 int batch_size, std::uint64_t seed, const Codebook* cb = nullptr);

}  // namespace durit
