#pragma once

// Greedy-decoding accuracy, robustness under perturbation, and hidden-state
// geometry of the reasoner on original versus mapped questions.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "durit/codebook.hpp"
#include "durit/corpus.hpp"
#include "durit/embed.hpp"
#include "durit/model.hpp"

namespace durit {

struct EvalRow {
    std::string id;
    bool correct = false;
    std::optional<int> predicted;
    int gold = 0;
};

struct EvalResult {
    double accuracy = 0.0;  // percent
    std::vector<EvalRow> rows;
};

// 100 * correct / |instances| with greedy decoding on [bos] Q [sep].
EvalResult evaluate_model(const TransformerLM& model, std::span<const ProblemInstance> instances,
                          int max_new_tokens);

// Same, but the reasoner reads questions[i] in place of instances[i].surface.
EvalResult evaluate_inputs(const TransformerLM& model, std::span<const ProblemInstance> instances,
                           const std::vector<std::vector<int>>& questions, int max_new_tokens);

// 100 * (acc_symb - acc_orig) / acc_orig; undefined when acc_orig is 0.
std::optional<double> relative_drop(double acc_orig, double acc_symb);

struct RobustnessReport {
    double acc_orig = 0.0;
    double acc_symb = 0.0;
    std::optional<double> delta_pct;
};

RobustnessReport robustness_report(const TransformerLM& model,
                                   std::span<const ProblemInstance> test_orig,
                                   std::span<const ProblemInstance> test_perturbed,
                                   int max_new_tokens);

struct EmbeddingReport {
    double knn_original = 0.0;
    double knn_mapped = 0.0;
    PcaResult pca_original;
    PcaResult pca_mapped;
    std::vector<std::string> ids;
};

// Reasoner mean-pooled hidden states of [bos] Q [sep] and [bos] Q' [sep],
// with 5-NN means and 2-D PCA coordinates per variant.
EmbeddingReport embedding_report(TransformerLM& reasoner, std::span<const ProblemInstance> instances,
                                 const std::vector<std::vector<int>>& mapped, int k = 5);

std::string eval_csv(const EvalResult& r);
std::string pca_csv(const PcaResult& p, std::span<const std::string> ids);

}  // namespace durit
