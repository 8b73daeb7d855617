#include "durit/distill.hpp"

#include <algorithm>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace durit {

void validate(const DistillConfig& cfg) {
    if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0)) {
        throw std::invalid_argument("distill config: lambda must lie in [0, 1]");
    }
    if (!(cfg.tau > 0.0)) {
        throw std::invalid_argument("distill config: tau must be positive");
    }
    if (cfg.samples < 1 || cfg.max_per_instance < 1 || cfg.epochs < 0 || !(cfg.lr > 0.0) ||
        cfg.batch_size < 1 || !(cfg.temperature > 0.0) || cfg.max_new_tokens < 1) {
        throw std::invalid_argument("distill config: invalid sampling or optimiser setting");
    }
}

std::vector<MappedRecord> build_mapped_dataset(const TransformerLM& mapper, const Codebook& codebook,
                                               std::span<const ProblemInstance> instances,
                                               int max_new_tokens) {
    const Vocab& V = vocab();
    const DecodeConfig decode = DecodeConfig::greedy(max_new_tokens, V.eos());
    std::vector<MappedRecord> out;
    out.reserve(instances.size());
    for (const ProblemInstance& inst : instances) {
        MappedRecord rec;
        rec.id = inst.id;
        rec.original = inst.surface;
        rec.template_index =
            select_template_infer(codebook, avg_word_embedding(mapper, inst.surface));
        const std::vector<double> row = codebook.template_row(rec.template_index);
        Rng unused = make_rng(0, {});
        const Completion c =
            sample_completion(mapper, mapper_prompt(inst.surface), decode, unused,
                              Injection{template_position(inst.surface), &row});
        rec.truncated = c.tokens.empty() || c.tokens.back() != V.eos();
        rec.mapped = strip_eos(c.tokens);
        out.push_back(std::move(rec));
    }
    return out;
}

std::vector<DistillPair> build_filtered_pairs(const TransformerLM& reasoner,
                                              std::span<const ProblemInstance> instances,
                                              std::span<const MappedRecord> mapped,
                                              const DistillConfig& cfg, std::uint64_t seed) {
    if (instances.size() != mapped.size()) {
        throw std::invalid_argument("build_filtered_pairs: " + std::to_string(instances.size()) +
                                    " instances but " + std::to_string(mapped.size()) +
                                    " mapped records");
    }
    const DecodeConfig decode =
        DecodeConfig::sampled(cfg.temperature, cfg.max_new_tokens, vocab().eos());
    const auto ctx = static_cast<std::size_t>(reasoner.config().max_context);
    std::vector<DistillPair> out;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const ProblemInstance& inst = instances[i];
        const MappedRecord& rec = mapped[i];
        if (rec.id != inst.id) {
            throw std::invalid_argument("build_filtered_pairs: misaligned ids " + inst.id + " and " +
                                        rec.id);
        }
        const std::vector<int> prompt = reasoner_prompt(rec.mapped);
        // Both the teacher and the student inputs must fit with the response.
        const std::size_t longest = std::max(prompt.size(), inst.surface.size() + 2);
        if (longest + static_cast<std::size_t>(cfg.max_new_tokens) > ctx) {
            continue;
        }
        int kept = 0;
        for (int s = 0; s < cfg.samples && kept < cfg.max_per_instance; ++s) {
            Rng rng = make_rng(seed, {fnv1a("distill-sample"), i, static_cast<std::uint64_t>(s)});
            Completion c = sample_completion(reasoner, prompt, decode, rng);
            if (!is_correct(c.tokens, inst)) {
                continue;
            }
            DistillPair p;
            p.id = inst.id;
            p.original = inst.surface;
            p.mapped = rec.mapped;
            p.response = std::move(c.tokens);
            p.correct = true;
            out.push_back(std::move(p));
            ++kept;
        }
    }
    return out;
}

Var distill_loss(Var student_logits, const Tensor& teacher_logits, std::span<const int> targets,
                 double lambda, double tau) {
    if (!(lambda >= 0.0 && lambda <= 1.0) || !(tau > 0.0)) {
        throw std::invalid_argument("distill_loss: lambda must lie in [0, 1] and tau be positive");
    }
    const Shape& ss = student_logits.value().shape;
    if (ss != teacher_logits.shape) {
        throw std::invalid_argument("distill_loss: student logits " + shape_string(ss) +
                                    " vs teacher logits " + shape_string(teacher_logits.shape));
    }
    if (targets.empty() || targets.size() != student_logits.value().rows()) {
        throw std::invalid_argument("distill_loss: need one target per response position, got " +
                                    std::to_string(targets.size()));
    }
    Graph& g = *student_logits.graph();
    Var ce;
    if (lambda < 1.0 && tau == 1.0) {
        // Same op as plain SFT, so lambda = 0 reproduces it bit for bit.
        ce = cross_entropy(student_logits, targets);
    } else if (lambda < 1.0) {
        Var lp = gather(log_softmax(student_logits, tau), targets);
        ce = scale(mean(lp), -1.0);
    }
    Var kl;
    if (lambda > 0.0) {
        Var pt = softmax_with_temperature(g.constant(teacher_logits), tau);
        Var ps = softmax_with_temperature(student_logits, tau);
        kl = kl_divergence(pt, ps);
    }
    if (lambda == 0.0) {
        return ce;
    }
    if (lambda == 1.0) {
        return kl;
    }
    return add(scale(ce, 1.0 - lambda), scale(kl, lambda));
}

std::vector<int> teacher_input(const DistillPair& p) {
    return concat_tokens(reasoner_prompt(p.mapped), p.response);
}

std::vector<int> student_input(const DistillPair& p) {
    return concat_tokens(reasoner_prompt(p.original), p.response);
}

bool prefix_audit(const DistillPair& p) {
    if (p.response.empty()) {
        return false;
    }
    const std::vector<int> t = teacher_input(p);
    const std::vector<int> s = student_input(p);
    const std::vector<int> tp = reasoner_prompt(p.mapped);
    const std::vector<int> sp = reasoner_prompt(p.original);
    const std::size_t r = p.response.size();
    return t.size() == tp.size() + r && s.size() == sp.size() + r &&
           std::equal(tp.begin(), tp.end(), t.begin()) &&
           std::equal(sp.begin(), sp.end(), s.begin()) &&
           std::equal(t.end() - static_cast<std::ptrdiff_t>(r), t.end(),
                      s.end() - static_cast<std::ptrdiff_t>(r));
}

namespace {

Var pair_loss(Graph& g, TransformerLM& student, TransformerLM& teacher, const DistillPair& p,
              const DistillConfig& cfg) {
    Tensor teacher_logits;
    if (cfg.lambda > 0.0) {
        Graph tg;
        teacher_logits =
            completion_logits(tg, teacher, reasoner_prompt(p.mapped), p.response).value();
    }
    Var student_logits = completion_logits(g, student, reasoner_prompt(p.original), p.response);
    if (cfg.lambda == 0.0) {
        // The teacher is not consulted; only the shape has to agree.
        teacher_logits = Tensor::zeros(student_logits.value().shape);
    }
    return distill_loss(student_logits, teacher_logits, p.response, cfg.lambda, cfg.tau);
}

}  // namespace

DistillStats distill_epoch(TransformerLM& student, TransformerLM& teacher,
                           std::span<const DistillPair> pairs, const DistillConfig& cfg,
                           AdamW& optimizer, std::uint64_t seed) {
    validate(cfg);
    DistillStats st;
    if (pairs.empty()) {
        return st;
    }
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    Rng rng = make_rng(seed, {fnv1a("distill-order")});
    shuffle(order.begin(), order.end(), rng);
    std::vector<Tensor*> params = optimizer.params();
    double total = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end =
            std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
        const double inv_b = 1.0 / static_cast<double>(end - start);
        optimizer.zero_grad();
        for (std::size_t k = start; k < end; ++k) {
            const DistillPair& p = pairs[order[k]];
            if (!prefix_audit(p)) {
                throw std::logic_error("distill_epoch: prefix audit failed for " + p.id);
            }
            ++st.audits_passed;
            Graph g;
            Var loss = pair_loss(g, student, teacher, p, cfg);
            g.backward(scale(loss, inv_b));
            total += loss.item();
        }
        clip_grad_norm(params, 1.0);
        optimizer.step();
        ++st.steps;
    }
    st.pairs = pairs.size();
    st.mean_loss = total / static_cast<double>(pairs.size());
    return st;
}

double distill_mean_loss(TransformerLM& student, TransformerLM& teacher,
                         std::span<const DistillPair> pairs, const DistillConfig& cfg) {
    if (pairs.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (const DistillPair& p : pairs) {
        Graph g;
        total += pair_loss(g, student, teacher, p, cfg).item();
    }
    return total / static_cast<double>(pairs.size());
}

std::string distill_jsonl(const ProblemInstance& inst, std::span<const int> mapped,
                          std::span<const int> response, const std::string& teacher_id) {
    auto j = nlohmann::ordered_json::parse(to_jsonl(inst));
    const Vocab& V = vocab();
    j["mapped_surface"] = V.decode(mapped);
    j["response"] = V.decode(response);
    j["teacher_id"] = teacher_id;
    return j.dump();
}

}  // namespace durit
