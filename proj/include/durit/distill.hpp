#pragma once

// Self-distillation: map every question with the trained mapper, keep the
// reasoner's correct answers to the mapped questions, then train the
// reasoner on the original question against a frozen copy of itself that
// reads the mapped question.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "durit/autodiff.hpp"
#include "durit/codebook.hpp"
#include "durit/corpus.hpp"
#include "durit/model.hpp"

namespace durit {

struct DistillConfig {
    double lambda = 0.2;
    double tau = 1.0;
    int samples = 8;             // responses drawn per mapped question
    int max_per_instance = 4;    // correct responses kept per question
    int epochs = 5;
    double lr = 1e-5;
    int batch_size = 8;
    double temperature = 0.7;
    int max_new_tokens = 28;
};

void validate(const DistillConfig& cfg);

struct MappedRecord {
    std::string id;
    std::vector<int> original;
    std::vector<int> mapped;
    int template_index = 0;
    bool truncated = false;  // mapper hit its length limit before the end token
};

// Greedy mapping of every instance, template chosen from the question's
// averaged word embedding. The result is aligned with instances.
std::vector<MappedRecord> build_mapped_dataset(const TransformerLM& mapper, const Codebook& codebook,
                                               std::span<const ProblemInstance> instances,
                                               int max_new_tokens);

struct DistillPair {
    std::string id;
    std::vector<int> original;
    std::vector<int> mapped;
    std::vector<int> response;  // includes the end token when emitted
    bool correct = false;
};

// Samples cfg.samples responses to each mapped question and keeps up to
// cfg.max_per_instance correct ones, in sampling order.
std::vector<DistillPair> build_filtered_pairs(const TransformerLM& reasoner,
                                              std::span<const ProblemInstance> instances,
                                              std::span<const MappedRecord> mapped,
                                              const DistillConfig& cfg, std::uint64_t seed);

// Mean over response positions of
//   (1 - lambda) * -log ps(target) + lambda * KL(pt || ps)
// with both distributions softmax(logits / tau). Teacher logits are constants.
Var distill_loss(Var student_logits, const Tensor& teacher_logits, std::span<const int> targets,
                 double lambda, double tau);

// Teacher reads [bos] Q' [sep] y, student reads [bos] Q [sep] y.
std::vector<int> teacher_input(const DistillPair& p);
std::vector<int> student_input(const DistillPair& p);
// True when both inputs end in the same response and start with their own
// question prompt.
bool prefix_audit(const DistillPair& p);

struct DistillStats {
    double mean_loss = 0.0;
    std::size_t pairs = 0;
    std::size_t steps = 0;
    std::size_t audits_passed = 0;
};

// One pass over pairs in seeded shuffle order; throws if an audit fails.
DistillStats distill_epoch(TransformerLM& student, TransformerLM& teacher,
                           std::span<const DistillPair> pairs, const DistillConfig& cfg,
                           AdamW& optimizer, std::uint64_t seed);

// Mean loss over pairs without updating anything.
double distill_mean_loss(TransformerLM& student, TransformerLM& teacher,
                         std::span<const DistillPair> pairs, const DistillConfig& cfg);

// Corpus line with mapped_surface, response and teacher_id appended.
std::string distill_jsonl(const ProblemInstance& inst, std::span<const int> mapped,
                          std::span<const int> response, const std::string& teacher_id);

}  // namespace durit
