#pragma once

// Run configuration: a flat "key = value" text file with dotted section
// names. Unknown keys are errors. The hash covers every key except the
// output directory, so relocating a run does not invalidate checkpoints.

#include <cstdint>
#include <string>
#include <string_view>

#include "durit/corpus.hpp"
#include "durit/distill.hpp"
#include "durit/grpo.hpp"
#include "durit/model.hpp"

namespace durit {

struct WarmupConfig {
    int reasoner_examples = 3000;  // 0 = whole train split
    int reasoner_epochs = 2;
    double reasoner_lr = 1e-3;
    int mapper_examples = 200;
    int mapper_epochs = 30;
    double mapper_lr = 1e-3;
    int batch_size = 16;
};

struct PipelineConfig {
    CorpusSpec corpus;
    ModelConfig mapper;
    ModelConfig reasoner;
    WarmupConfig warmup;
    int codebook_size = 32;
    double tau_sim = 0.1;
    GrpoConfig step1;
    int step1_subset = 0;           // instances per Step I epoch, 0 = all
    int reward_samples = 8;
    double reward_temperature = 0.7;
    DistillConfig step2;
    int step2_subset = 0;           // instances mapped per iteration, 0 = all
    GrpoConfig step3;
    int step3_subset = 0;           // instances per Step III epoch, 0 = all
    double alpha1 = 1e-3;
    double alpha2 = 1e-2;
    int iterations = 1;
    int mapper_max_new_tokens = 48;
    int eval_max_new_tokens = 28;
    std::uint64_t seed = 1;
    std::string out_dir = "runs/default";
};

PipelineConfig default_config();
void validate(const PipelineConfig& cfg);

// Applies "key = value" lines on top of base. '#' starts a comment.
PipelineConfig parse_config(std::string_view text, const PipelineConfig& base = default_config());
PipelineConfig load_config(const std::string& path);
// Sets one key from its textual value; throws on unknown keys or bad values.
void set_config_value(PipelineConfig& cfg, std::string_view key, std::string_view value);

// Every key with its value, one per line, with notes.
std::string render_config(const PipelineConfig& cfg);
// Sorted key=value lines without comments or the output directory.
std::string canonical_config(const PipelineConfig& cfg);
std::uint64_t config_hash(const PipelineConfig& cfg);
std::string hash_hex(std::uint64_t h);

}  // namespace durit
