#pragma once

// End-to-end orchestration. A run owns one output directory and moves
// through named stages:
//   corpus, warmup, then per iteration k: iterk.cluster, iterk.step1
//   (mapper GRPO), iterk.step2 (self-distillation), iterk.step3 (reasoner
//   GRPO), and finally eval.
// Every model-producing stage writes a checkpoint; the manifest records
// completed stages so a run can resume from the longest intact prefix.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "durit/codebook.hpp"
#include "durit/config.hpp"
#include "durit/corpus.hpp"
#include "durit/model.hpp"

namespace durit {

struct StageRecord {
    std::string name;
    std::string checkpoint;  // relative to the run directory, empty if none
    nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
    double seconds = 0.0;
};

struct RunManifest {
    std::uint64_t config_hash = 0;
    std::string kind = "durit";  // or "baseline"
    std::vector<StageRecord> stages;
    std::vector<std::string> files;

    const StageRecord* find(const std::string& name) const;
    nlohmann::ordered_json to_json() const;
    static RunManifest from_json(const nlohmann::ordered_json& j);
};

struct RunOptions {
    bool resume = false;
    bool allow_hash_mismatch = false;
    std::string stop_after;       // stage name; empty = run everything
    std::string warmup_from;      // baseline: checkpoint to start from
    bool verbose = true;
};

std::vector<std::string> pipeline_stages(const PipelineConfig& cfg);
std::vector<std::string> baseline_stages(const PipelineConfig& cfg);

RunManifest run_pipeline(const PipelineConfig& cfg, const RunOptions& opts = {});

// Step III only, from the shared warm-up checkpoint, with the same number
// of Step III passes and the same batch order as the full pipeline.
RunManifest run_baseline(const PipelineConfig& cfg, const RunOptions& opts = {});

struct LambdaRow {
    double lambda = 0.0;
    std::size_t d2_size = 0;
    double acc_orig = 0.0;
    double acc_symb = 0.0;
    std::optional<double> delta_pct;
};

// Runs (or resumes) the pipeline through iter1.step1, then repeats Step II
// and Step III of iteration 1 once per lambda from that shared state.
std::vector<LambdaRow> sweep_lambda(const PipelineConfig& cfg, std::span<const double> lambdas,
                                    const RunOptions& opts = {});
std::string lambda_csv(std::span<const LambdaRow> rows);

// State restored from the latest checkpoint of a finished or partial run.
struct LoadedRun {
    RunManifest manifest;
    Corpus corpus;
    TransformerLM mapper;
    TransformerLM reasoner;
    Codebook codebook;
    std::string last_stage;
};

LoadedRun open_run(const PipelineConfig& cfg, bool allow_hash_mismatch = false);

// The deterministic part of a run: summary.json contents.
nlohmann::ordered_json read_summary(const std::string& out_dir);

}  // namespace durit
