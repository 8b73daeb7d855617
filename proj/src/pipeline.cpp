#include "durit/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "durit/checkpoint.hpp"
#include "durit/distill.hpp"
#include "durit/embed.hpp"
#include "durit/evaluate.hpp"
#include "durit/grpo.hpp"
#include "durit/warmup.hpp"

namespace fs = std::filesystem;

namespace durit {

using json = nlohmann::ordered_json;

// ---- manifest ------------------------------------------------------------------

const StageRecord* RunManifest::find(const std::string& name) const {
    for (const StageRecord& s : stages) {
        if (s.name == name) {
            return &s;
        }
    }
    return nullptr;
}

json RunManifest::to_json() const {
    json j;
    j["config_hash"] = hash_hex(config_hash);
    j["kind"] = kind;
    j["stages"] = json::array();
    for (const StageRecord& s : stages) {
        j["stages"].push_back(
            {{"name", s.name}, {"checkpoint", s.checkpoint}, {"metrics", s.metrics}, {"seconds", s.seconds}});
    }
    j["files"] = files;
    return j;
}

RunManifest RunManifest::from_json(const json& j) {
    RunManifest m;
    m.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
    m.kind = j.at("kind").get<std::string>();
    for (const json& s : j.at("stages")) {
        StageRecord r;
        r.name = s.at("name").get<std::string>();
        r.checkpoint = s.at("checkpoint").get<std::string>();
        r.metrics = s.at("metrics");
        r.seconds = s.at("seconds").get<double>();
        m.stages.push_back(std::move(r));
    }
    m.files = j.at("files").get<std::vector<std::string>>();
    return m;
}

std::vector<std::string> pipeline_stages(const PipelineConfig& cfg) {
    std::vector<std::string> s = {"corpus", "warmup"};
    for (int k = 1; k <= cfg.iterations; ++k) {
        const std::string p = "iter" + std::to_string(k) + ".";
        for (const char* step : {"cluster", "step1", "step2", "step3"}) {
            s.push_back(p + step);
        }
    }
    if (cfg.iterations > 0) {
        s.push_back("eval");
    }
    return s;
}

std::vector<std::string> baseline_stages(const PipelineConfig& cfg) {
    std::vector<std::string> s = {"corpus", "warmup"};
    for (int k = 1; k <= cfg.iterations; ++k) {
        s.push_back("iter" + std::to_string(k) + ".step3");
    }
    s.push_back("eval");
    return s;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) {
            throw std::runtime_error("cannot write " + tmp.string());
        }
        out << text;
        if (!out) {
            throw std::runtime_error("failed writing " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open " + path.string());
    }
    return json::parse(in);
}

std::string fmt(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

json optional_number(const std::optional<double>& v) {
    return v ? json(*v) : json(nullptr);
}

// Exclusive ownership of a run directory for the lifetime of the object.
class RunLock {
public:
    explicit RunLock(const fs::path& dir) : path_(dir / "run.lock") {
        std::FILE* f = std::fopen(path_.c_str(), "wx");
        if (f == nullptr) {
            throw std::runtime_error("run directory " + dir.string() +
                                     " is locked by another process (remove " + path_.string() +
                                     " if that process is gone)");
        }
        std::fclose(f);
    }
    ~RunLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    fs::path path_;
};

std::uint64_t stage_seed(std::uint64_t seed, const std::string& stage, std::uint64_t extra = 0) {
    return make_rng(seed, {fnv1a("stage"), fnv1a(stage), extra})();
}

// The first n instances of a seeded permutation; n = 0 means all of them.
std::vector<ProblemInstance> sample_subset(std::span<const ProblemInstance> all, int n,
                                           std::uint64_t seed) {
    std::vector<std::size_t> order(all.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng(seed, {fnv1a("subset")});
    shuffle(order.begin(), order.end(), rng);
    const std::size_t take =
        n == 0 ? all.size() : std::min(all.size(), static_cast<std::size_t>(n));
    std::vector<ProblemInstance> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        out.push_back(all[order[i]]);
    }
    return out;
}

class Run {
public:
    Run(const PipelineConfig& cfg, const RunOptions& opts, std::string kind)
        : cfg_(cfg), opts_(opts), dir_(cfg.out_dir), hash_(config_hash(cfg)) {
        validate(cfg_);
        manifest_.config_hash = hash_;
        manifest_.kind = std::move(kind);
        mapper_ = TransformerLM(cfg_.mapper, stage_seed(cfg_.seed, "mapper-init"));
        reasoner_ = TransformerLM(cfg_.reasoner, stage_seed(cfg_.seed, "reasoner-init"));
        codebook_ = init_codebook(cfg_.codebook_size, cfg_.mapper.d_model, cfg_.mapper.init_std,
                                  stage_seed(cfg_.seed, "codebook-init"), cfg_.tau_sim);
    }

    // Runs the listed stages, reusing the longest intact prefix on resume.
    RunManifest execute(const std::vector<std::string>& stages) {
        fs::create_directories(dir_);
        RunLock lock(dir_);
        const fs::path mpath = dir_ / "manifest.json";
        std::size_t reuse = 0;
        if (fs::exists(mpath)) {
            if (!opts_.resume) {
                throw std::runtime_error(dir_.string() +
                                         " already holds a run; pass --resume to continue it");
            }
            RunManifest old = RunManifest::from_json(read_json(mpath));
            if (old.config_hash != hash_ && !opts_.allow_hash_mismatch) {
                throw std::runtime_error("run in " + dir_.string() + " used config " +
                                         hash_hex(old.config_hash) + ", current config is " +
                                         hash_hex(hash_));
            }
            if (old.kind != manifest_.kind) {
                throw std::runtime_error(dir_.string() + " holds a " + old.kind + " run");
            }
            while (reuse < stages.size() && reuse < old.stages.size() &&
                   old.stages[reuse].name == stages[reuse] && intact(old.stages[reuse])) {
                ++reuse;
            }
            old.stages.resize(reuse);
            manifest_.stages = old.stages;
            manifest_.files = old.files;
            if (reuse > 0) {
                restore(manifest_.stages);
            }
        }
        for (std::size_t i = 0; i < reuse; ++i) {
            log("reusing stage " + stages[i]);
            if (stages[i] == opts_.stop_after) {
                return manifest_;
            }
        }
        for (std::size_t i = reuse; i < stages.size(); ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            log("stage " + stages[i]);
            StageRecord rec = run_stage(stages[i]);
            rec.name = stages[i];
            rec.seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            manifest_.stages.push_back(std::move(rec));
            save_manifest();
            log("stage " + stages[i] + " done in " + fmt(manifest_.stages.back().seconds) + " s");
            if (stages[i] == opts_.stop_after) {
                break;
            }
        }
        return manifest_;
    }

    // Loads state from an arbitrary stage checkpoint (used by sweeps).
    void load_stage_state(const StageRecord& rec) { restore_checkpoint(rec.checkpoint); }

    Corpus& corpus() { return corpus_; }
    TransformerLM& mapper() { return mapper_; }
    TransformerLM& reasoner() { return reasoner_; }
    Codebook& codebook() { return codebook_; }
    const PipelineConfig& config() const { return cfg_; }
    const fs::path& dir() const { return dir_; }
    std::uint64_t hash() const { return hash_; }

    json distill_stage(int k, const DistillConfig& dcfg, const std::string& tag);
    json rl_stage(int k, const std::string& tag);
    json eval_stage(bool with_mapper);

    void log(const std::string& msg) const {
        if (opts_.verbose) {
            std::cerr << "[" << manifest_.kind << " " << dir_.filename().string() << "] " << msg
                      << '\n';
        }
    }

private:
    bool intact(const StageRecord& rec) const {
        if (rec.name == "corpus") {
            return fs::exists(dir_ / "train.jsonl") && fs::exists(dir_ / "test_orig.jsonl") &&
                   fs::exists(dir_ / "test_perturbed.jsonl");
        }
        if (rec.name == "eval") {
            return fs::exists(dir_ / "summary.json");
        }
        if (rec.checkpoint.empty() || !fs::exists(dir_ / rec.checkpoint)) {
            return false;
        }
        try {
            load_checkpoint((dir_ / rec.checkpoint).string(), hash_, opts_.allow_hash_mismatch);
        } catch (const CheckpointError&) {
            return false;
        }
        return true;
    }

    void restore(const std::vector<StageRecord>& done) {
        corpus_.train = read_jsonl((dir_ / "train.jsonl").string());
        corpus_.test_orig = read_jsonl((dir_ / "test_orig.jsonl").string());
        corpus_.test_perturbed = read_jsonl((dir_ / "test_perturbed.jsonl").string());
        for (auto it = done.rbegin(); it != done.rend(); ++it) {
            if (!it->checkpoint.empty()) {
                restore_checkpoint(it->checkpoint);
                return;
            }
        }
    }

    void restore_checkpoint(const std::string& rel) {
        const Checkpoint ck =
            load_checkpoint((dir_ / rel).string(), hash_, opts_.allow_hash_mismatch);
        restore_model(ck, "mapper", mapper_);
        restore_model(ck, "reasoner", reasoner_);
        restore_codebook(ck, "codebook", codebook_);
        for (ProblemInstance& inst : corpus_.train) {
            inst.cluster_label.reset();
        }
        if (ck.has("labels")) {
            const Tensor& t = ck.block("labels");
            if (t.data.size() != corpus_.train.size()) {
                throw CheckpointError(rel + " holds labels for a different training split");
            }
            for (std::size_t i = 0; i < t.data.size(); ++i) {
                corpus_.train[i].cluster_label = static_cast<int>(t.data[i]);
            }
        }
    }

    std::string save_state(const std::string& stage) {
        Checkpoint ck;
        ck.config_hash = hash_;
        add_model(ck, "mapper", mapper_);
        add_codebook(ck, "codebook", codebook_);
        add_model(ck, "reasoner", reasoner_);
        if (!corpus_.train.empty() && corpus_.train.front().cluster_label) {
            std::vector<double> labels;
            for (const ProblemInstance& inst : corpus_.train) {
                labels.push_back(static_cast<double>(*inst.cluster_label));
            }
            ck.blocks.emplace_back("labels", Tensor::vector(std::move(labels)));
        }
        const std::string rel = stage + ".ckpt";
        save_checkpoint((dir_ / rel).string(), ck);
        return rel;
    }

    void add_file(const std::string& rel) {
        if (std::find(manifest_.files.begin(), manifest_.files.end(), rel) == manifest_.files.end()) {
            manifest_.files.push_back(rel);
        }
    }

    void write_file(const std::string& rel, const std::string& text) {
        write_text(dir_ / rel, text);
        add_file(rel);
    }

    void save_manifest() { write_text(dir_ / "manifest.json", manifest_.to_json().dump(2) + "\n"); }

    StageRecord run_stage(const std::string& name) {
        StageRecord rec;
        if (name == "corpus") {
            rec.metrics = corpus_stage();
            return rec;
        }
        if (name == "warmup") {
            rec.metrics = warmup_stage();
            rec.checkpoint = save_state(name);
            return rec;
        }
        if (name == "eval") {
            rec.metrics = eval_stage(manifest_.kind == "durit");
            return rec;
        }
        const auto dot = name.find('.');
        const int k = std::stoi(name.substr(4, dot - 4));
        const std::string step = name.substr(dot + 1);
        if (step == "cluster") {
            rec.metrics = cluster_stage(k);
        } else if (step == "step1") {
            rec.metrics = mapper_stage(k);
        } else if (step == "step2") {
            rec.metrics = distill_stage(k, cfg_.step2, "");
        } else if (step == "step3") {
            rec.metrics = rl_stage(k, "");
        } else {
            throw std::logic_error("unknown stage " + name);
        }
        rec.checkpoint = save_state(name);
        return rec;
    }

    json corpus_stage() {
        corpus_ = generate_corpus(cfg_.corpus);
        write_jsonl((dir_ / "train.jsonl").string(), corpus_.train);
        write_jsonl((dir_ / "test_orig.jsonl").string(), corpus_.test_orig);
        write_jsonl((dir_ / "test_perturbed.jsonl").string(), corpus_.test_perturbed);
        for (const char* f : {"train.jsonl", "test_orig.jsonl", "test_perturbed.jsonl"}) {
            add_file(f);
        }
        return {{"train", corpus_.train.size()},
                {"test_orig", corpus_.test_orig.size()},
                {"test_perturbed", corpus_.test_perturbed.size()}};
    }

    json warmup_stage() {
        if (!opts_.warmup_from.empty()) {
            const Checkpoint ck =
                load_checkpoint(opts_.warmup_from, hash_, opts_.allow_hash_mismatch);
            restore_model(ck, "mapper", mapper_);
            restore_model(ck, "reasoner", reasoner_);
            restore_codebook(ck, "codebook", codebook_);
            json m;
            m["imported_from"] = opts_.warmup_from;
            m["test_orig_accuracy"] =
                evaluate_model(reasoner_, corpus_.test_orig, cfg_.eval_max_new_tokens).accuracy;
            return m;
        }
        const WarmupConfig& w = cfg_.warmup;
        const std::uint64_t seed = stage_seed(cfg_.seed, "warmup");
        json m;

        const std::vector<ProblemInstance> r_set =
            sample_subset(corpus_.train, w.reasoner_examples, seed ^ 1);
        const std::vector<SftExample> r_ex = reasoner_sft_examples(r_set);
        AdamW r_opt(reasoner_.parameters(), AdamWConfig{.lr = w.reasoner_lr});
        json r_losses = json::array();
        for (int e = 0; e < w.reasoner_epochs; ++e) {
            const double loss = sft_epoch(reasoner_, r_ex, r_opt, w.batch_size,
                                          make_rng(seed, {fnv1a("reasoner"), static_cast<std::uint64_t>(e)})());
            r_losses.push_back(loss);
            log("reasoner warm-up epoch " + std::to_string(e + 1) + " loss " + fmt(loss));
        }

        const std::vector<ProblemInstance> m_set =
            sample_subset(corpus_.train, w.mapper_examples, seed ^ 2);
        const std::vector<SftExample> m_ex =
            mapper_sft_examples(m_set, codebook_.size(), seed ^ 3);
        AdamW m_opt(mapper_.parameters(), AdamWConfig{.lr = w.mapper_lr});
        json m_losses = json::array();
        for (int e = 0; e < w.mapper_epochs; ++e) {
            const double loss = sft_epoch(mapper_, m_ex, m_opt, w.batch_size,
                                          make_rng(seed, {fnv1a("mapper"), static_cast<std::uint64_t>(e)})(),
                                          &codebook_);
            m_losses.push_back(loss);
        }
        if (!m_losses.empty()) {
            log("mapper warm-up final loss " + fmt(m_losses.back().get<double>()));
        }
        m["reasoner_examples"] = r_ex.size();
        m["reasoner_loss"] = r_losses;
        m["mapper_examples"] = m_ex.size();
        m["mapper_loss"] = m_losses;
        const EvalResult ev =
            evaluate_model(reasoner_, corpus_.test_orig, cfg_.eval_max_new_tokens);
        m["test_orig_accuracy"] = ev.accuracy;
        log("warm-up reasoner test accuracy " + fmt(ev.accuracy));
        return m;
    }

    json cluster_stage(int k) {
        const EmbeddingMatrix z = embed_dataset(mapper_, corpus_.train);
        Rng rng = make_rng(stage_seed(cfg_.seed, "cluster", static_cast<std::uint64_t>(k)));
        const ClusterAssignment ca = cluster(z, cfg_.codebook_size, rng);
        std::ostringstream csv;
        csv << "id,label\n";
        for (std::size_t i = 0; i < corpus_.train.size(); ++i) {
            corpus_.train[i].cluster_label = ca.labels[i];
            csv << corpus_.train[i].id << ',' << ca.labels[i] << '\n';
        }
        write_file("clusters_iter" + std::to_string(k) + ".csv", csv.str());
        json m;
        m["iterations"] = ca.iterations;
        m["objective"] = ca.objective.empty() ? json(nullptr) : json(ca.objective.back());
        return m;
    }

    json mapper_stage(int k) {
        const GrpoConfig& g = cfg_.step1;
        const std::uint64_t seed = stage_seed(cfg_.seed, "step1", static_cast<std::uint64_t>(k));
        std::vector<Tensor*> params = mapper_.parameters();
        for (Tensor* t : codebook_.parameters()) {
            params.push_back(t);
        }
        AdamW opt(params, AdamWConfig{.lr = g.lr});
        const DecodeConfig reward_decode =
            DecodeConfig::sampled(cfg_.reward_temperature, cfg_.eval_max_new_tokens, vocab().eos());
        std::ostringstream csv;
        csv << "step,mean_reward,pg,key,template,total,grad_norm\n";
        std::size_t step = 0;
        double last_reward = 0.0;
        for (int e = 0; e < g.epochs; ++e) {
            const std::uint64_t eseed = make_rng(seed, {fnv1a("epoch"), static_cast<std::uint64_t>(e)})();
            const std::vector<ProblemInstance> data =
                sample_subset(corpus_.train, cfg_.step1_subset, eseed);
            TransformerLM ref_mapper = mapper_;
            const Codebook ref_cb = codebook_;
            TransformerLM frozen = reasoner_;
            MapperStepContext ctx{mapper_, codebook_, ref_mapper, ref_cb, frozen, opt};
            for (std::size_t b = 0; b < data.size(); b += static_cast<std::size_t>(g.batch_size)) {
                const std::size_t end = std::min(data.size(), b + static_cast<std::size_t>(g.batch_size));
                const std::span<const ProblemInstance> batch(data.data() + b, end - b);
                const LossBreakdown lb = mapper_step(
                    ctx, batch, g, cfg_.reward_samples, reward_decode, cfg_.alpha1, cfg_.alpha2,
                    make_rng(eseed, {fnv1a("batch"), b})());
                ++step;
                csv << step << ',' << fmt(lb.mean_reward) << ',' << fmt(lb.pg) << ',' << fmt(lb.key)
                    << ',' << fmt(lb.templ) << ',' << fmt(lb.total) << ',' << fmt(lb.grad_norm)
                    << '\n';
                last_reward = lb.mean_reward;
                if (step % 10 == 0) {
                    log("step1 step " + std::to_string(step) + " reward " + fmt(lb.mean_reward));
                }
            }
        }
        write_file("step1_iter" + std::to_string(k) + ".csv", csv.str());
        json m;
        m["steps"] = step;
        m["final_mean_reward"] = last_reward;
        return m;
    }

    PipelineConfig cfg_;
    RunOptions opts_;
    fs::path dir_;
    std::uint64_t hash_;
    RunManifest manifest_;
    Corpus corpus_;
    TransformerLM mapper_;
    TransformerLM reasoner_;
    Codebook codebook_;
};

json Run::distill_stage(int k, const DistillConfig& dcfg, const std::string& tag) {
    const std::uint64_t seed = stage_seed(cfg_.seed, "step2", static_cast<std::uint64_t>(k));
    const std::string suffix = "iter" + std::to_string(k) + tag;
    const std::vector<ProblemInstance> data = sample_subset(corpus_.train, cfg_.step2_subset, seed);
    const std::vector<MappedRecord> d1 =
        build_mapped_dataset(mapper_, codebook_, data, cfg_.mapper_max_new_tokens);
    std::size_t truncated = 0;
    std::size_t preserved = 0;
    std::string d1_text;
    for (std::size_t i = 0; i < d1.size(); ++i) {
        truncated += d1[i].truncated ? 1 : 0;
        const auto parsed = parse_surface(d1[i].mapped);
        if (parsed && parsed->canonical.ops == data[i].canonical.ops) {
            ++preserved;
        }
        d1_text += distill_jsonl(data[i], d1[i].mapped, {}, "") + "\n";
    }
    const std::vector<DistillPair> d2 =
        build_filtered_pairs(reasoner_, data, d1, dcfg, make_rng(seed, {fnv1a("filter")})());
    std::string d2_text;
    std::size_t reverified = 0;
    for (const DistillPair& p : d2) {
        const auto it = std::find_if(data.begin(), data.end(),
                                     [&](const ProblemInstance& x) { return x.id == p.id; });
        if (is_correct(p.response, *it)) {
            ++reverified;
        }
        d2_text += distill_jsonl(*it, p.mapped, p.response, "reasoner-pre-" + suffix) + "\n";
    }
    write_file("d1_" + suffix + ".jsonl", d1_text);
    write_file("d2_" + suffix + ".jsonl", d2_text);

    json m;
    m["d1_size"] = d1.size();
    m["d1_truncated"] = truncated;
    m["d1_skeleton_preserved"] = d1.empty() ? 0.0 : static_cast<double>(preserved) / d1.size();
    m["d2_size"] = d2.size();
    m["d2_reverified"] = reverified;
    log("D1 " + std::to_string(d1.size()) + " (skeleton kept " + std::to_string(preserved) +
        "), D2 " + std::to_string(d2.size()));
    if (d2.empty()) {
        log("warning: no correct responses to mapped questions, skipping self-distillation");
        m["skipped"] = true;
        return m;
    }
    m["skipped"] = false;
    TransformerLM teacher = reasoner_;
    AdamW opt(reasoner_.parameters(), AdamWConfig{.lr = dcfg.lr});
    m["loss_before"] = distill_mean_loss(reasoner_, teacher, d2, dcfg);
    std::ostringstream csv;
    csv << "epoch,mean_loss,steps\n";
    std::size_t audits = 0;
    json losses = json::array();
    for (int e = 0; e < dcfg.epochs; ++e) {
        const DistillStats st = distill_epoch(reasoner_, teacher, d2, dcfg, opt,
                                              make_rng(seed, {fnv1a("epoch"), static_cast<std::uint64_t>(e)})());
        audits += st.audits_passed;
        losses.push_back(st.mean_loss);
        csv << e + 1 << ',' << fmt(st.mean_loss) << ',' << st.steps << '\n';
        log("distill epoch " + std::to_string(e + 1) + " loss " + fmt(st.mean_loss));
    }
    write_file("step2_" + suffix + ".csv", csv.str());
    m["epoch_loss"] = losses;
    m["audits_passed"] = audits;
    m["audits_expected"] = d2.size() * static_cast<std::size_t>(dcfg.epochs);
    return m;
}

json Run::rl_stage(int k, const std::string& tag) {
    const GrpoConfig& g = cfg_.step3;
    // Same seed for the full pipeline and the baseline: identical batch order.
    const std::uint64_t seed = stage_seed(cfg_.seed, "step3", static_cast<std::uint64_t>(k));
    AdamW opt(reasoner_.parameters(), AdamWConfig{.lr = g.lr});
    std::ostringstream rewards;
    rewards << "step,mean_reward\n";
    std::ostringstream trace;
    trace << "step,mean_reward,loss,grad_norm\n";
    std::size_t step = 0;
    json curve = json::array();
    for (int e = 0; e < g.epochs; ++e) {
        const std::uint64_t eseed = make_rng(seed, {fnv1a("epoch"), static_cast<std::uint64_t>(e)})();
        const std::vector<ProblemInstance> data =
            sample_subset(corpus_.train, cfg_.step3_subset, eseed);
        TransformerLM ref = reasoner_;
        for (std::size_t b = 0; b < data.size(); b += static_cast<std::size_t>(g.batch_size)) {
            const std::size_t end = std::min(data.size(), b + static_cast<std::size_t>(g.batch_size));
            const std::span<const ProblemInstance> batch(data.data() + b, end - b);
            const LossBreakdown lb =
                reasoner_step(reasoner_, ref, opt, batch, g, make_rng(eseed, {fnv1a("batch"), b})());
            ++step;
            rewards << step << ',' << fmt(lb.mean_reward) << '\n';
            trace << step << ',' << fmt(lb.mean_reward) << ',' << fmt(lb.total) << ','
                  << fmt(lb.grad_norm) << '\n';
            curve.push_back(lb.mean_reward);
            if (step % 10 == 0) {
                log("step3 step " + std::to_string(step) + " reward " + fmt(lb.mean_reward));
            }
        }
    }
    const std::string suffix = "iter" + std::to_string(k) + tag;
    write_file("reward_curve_" + suffix + ".csv", rewards.str());
    write_file("step3_" + suffix + ".csv", trace.str());
    json m;
    m["steps"] = step;
    m["reward_curve"] = curve;
    return m;
}

json Run::eval_stage(bool with_mapper) {
    const int max_new = cfg_.eval_max_new_tokens;
    const EvalResult orig = evaluate_model(reasoner_, corpus_.test_orig, max_new);
    const EvalResult symb = evaluate_model(reasoner_, corpus_.test_perturbed, max_new);
    write_file("eval_test_orig.csv", eval_csv(orig));
    write_file("eval_test_perturbed.csv", eval_csv(symb));
    json s;
    s["config_hash"] = hash_hex(hash_);
    s["kind"] = manifest_.kind;
    json acc;
    if (const StageRecord* w = manifest_.find("warmup")) {
        acc["warmup_test_orig"] = w->metrics.at("test_orig_accuracy");
    }
    acc["test_orig"] = orig.accuracy;
    acc["test_perturbed"] = symb.accuracy;
    json knn = nullptr;
    if (with_mapper) {
        const std::vector<MappedRecord> mapped = build_mapped_dataset(
            mapper_, codebook_, corpus_.test_orig, cfg_.mapper_max_new_tokens);
        std::vector<std::vector<int>> q;
        for (const MappedRecord& r : mapped) {
            q.push_back(r.mapped);
        }
        acc["test_orig_mapped_input"] = evaluate_inputs(reasoner_, corpus_.test_orig, q, max_new).accuracy;
        const EmbeddingReport er = embedding_report(reasoner_, corpus_.test_orig, q);
        write_file("pca_original.csv", pca_csv(er.pca_original, er.ids));
        write_file("pca_mapped.csv", pca_csv(er.pca_mapped, er.ids));
        knn = {{"original", er.knn_original}, {"mapped", er.knn_mapped}};
    }
    s["accuracy"] = acc;
    s["delta_pct"] = optional_number(relative_drop(orig.accuracy, symb.accuracy));
    s["knn5"] = knn;
    json steps = json::object();
    for (const StageRecord& r : manifest_.stages) {
        if (r.metrics.contains("d2_size")) {
            steps[r.name] = {{"d2_size", r.metrics["d2_size"]}};
        }
        if (r.metrics.contains("reward_curve")) {
            const json& c = r.metrics["reward_curve"];
            steps[r.name] = {{"steps", c.size()},
                             {"final_mean_reward", c.empty() ? json(nullptr) : c.back()}};
        }
    }
    s["stages"] = steps;
    write_file("summary.json", s.dump(2) + "\n");
    log("test accuracy " + fmt(orig.accuracy) + ", perturbed " + fmt(symb.accuracy));
    return s;
}

}  // namespace

RunManifest run_pipeline(const PipelineConfig& cfg, const RunOptions& opts) {
    Run run(cfg, opts, "durit");
    return run.execute(pipeline_stages(cfg));
}

RunManifest run_baseline(const PipelineConfig& cfg, const RunOptions& opts) {
    Run run(cfg, opts, "baseline");
    return run.execute(baseline_stages(cfg));
}

std::vector<LambdaRow> sweep_lambda(const PipelineConfig& cfg, std::span<const double> lambdas,
                                    const RunOptions& opts) {
    if (cfg.iterations < 1) {
        throw std::invalid_argument("sweep_lambda: needs at least one iteration");
    }
    RunOptions base_opts = opts;
    base_opts.resume = true;
    base_opts.stop_after = "iter1.step1";
    Run run(cfg, base_opts, "durit");
    const RunManifest m = run.execute(pipeline_stages(cfg));
    const StageRecord* s1 = m.find("iter1.step1");
    if (s1 == nullptr) {
        throw std::logic_error("sweep_lambda: Step I did not complete");
    }
    std::vector<LambdaRow> rows;
    for (double lambda : lambdas) {
        run.load_stage_state(*s1);
        DistillConfig d = cfg.step2;
        d.lambda = lambda;
        validate(d);
        const std::string tag = "_lambda" + fmt(lambda);
        run.log("lambda " + fmt(lambda));
        const json dm = run.distill_stage(1, d, tag);
        run.rl_stage(1, tag);
        LambdaRow row;
        row.lambda = lambda;
        row.d2_size = dm.at("d2_size").get<std::size_t>();
        const RobustnessReport rr =
            robustness_report(run.reasoner(), run.corpus().test_orig, run.corpus().test_perturbed,
                              cfg.eval_max_new_tokens);
        row.acc_orig = rr.acc_orig;
        row.acc_symb = rr.acc_symb;
        row.delta_pct = rr.delta_pct;
        rows.push_back(row);
    }
    write_text(fs::path(cfg.out_dir) / "sweep_lambda.csv", lambda_csv(rows));
    return rows;
}

std::string lambda_csv(std::span<const LambdaRow> rows) {
    std::ostringstream os;
    os << "lambda,d2_size,acc_test_orig,acc_test_perturbed,delta_pct\n";
    for (const LambdaRow& r : rows) {
        os << fmt(r.lambda) << ',' << r.d2_size << ',' << fmt(r.acc_orig) << ',' << fmt(r.acc_symb)
           << ',' << (r.delta_pct ? fmt(*r.delta_pct) : std::string()) << '\n';
    }
    return os.str();
}

LoadedRun open_run(const PipelineConfig& cfg, bool allow_hash_mismatch) {
    const fs::path dir(cfg.out_dir);
    LoadedRun out;
    out.manifest = RunManifest::from_json(read_json(dir / "manifest.json"));
    const std::uint64_t h = config_hash(cfg);
    if (out.manifest.config_hash != h && !allow_hash_mismatch) {
        throw std::runtime_error("run in " + dir.string() + " used config " +
                                 hash_hex(out.manifest.config_hash) + ", current config is " +
                                 hash_hex(h));
    }
    out.corpus.train = read_jsonl((dir / "train.jsonl").string());
    out.corpus.test_orig = read_jsonl((dir / "test_orig.jsonl").string());
    out.corpus.test_perturbed = read_jsonl((dir / "test_perturbed.jsonl").string());
    out.mapper = TransformerLM(cfg.mapper, 0);
    out.reasoner = TransformerLM(cfg.reasoner, 0);
    out.codebook = init_codebook(cfg.codebook_size, cfg.mapper.d_model, cfg.mapper.init_std, 0,
                                 cfg.tau_sim);
    for (auto it = out.manifest.stages.rbegin(); it != out.manifest.stages.rend(); ++it) {
        if (!it->checkpoint.empty()) {
            const Checkpoint ck = load_checkpoint((dir / it->checkpoint).string(),
                                                  out.manifest.config_hash, false);
            restore_model(ck, "mapper", out.mapper);
            restore_model(ck, "reasoner", out.reasoner);
            restore_codebook(ck, "codebook", out.codebook);
            out.last_stage = it->name;
            return out;
        }
    }
    throw std::runtime_error("run in " + dir.string() + " has no checkpoint yet");
}

json read_summary(const std::string& out_dir) {
    return read_json(fs::path(out_dir) / "summary.json");
}

}  // namespace durit
