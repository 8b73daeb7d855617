#include "durit/evaluate.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace durit {

EvalResult evaluate_inputs(const TransformerLM& model, std::span<const ProblemInstance> instances,
                           const std::vector<std::vector<int>>& questions, int max_new_tokens) {
    if (instances.empty() || questions.size() != instances.size()) {
        throw std::invalid_argument("evaluate: need a nonempty, aligned evaluation set");
    }
    const DecodeConfig decode = DecodeConfig::greedy(max_new_tokens, vocab().eos());
    const auto ctx = static_cast<std::size_t>(model.config().max_context);
    Rng unused = make_rng(0, {});
    EvalResult r;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const ProblemInstance& inst = instances[i];
        EvalRow row;
        row.id = inst.id;
        row.gold = inst.canonical.answer;
        const std::vector<int> prompt = reasoner_prompt(questions[i]);
        if (prompt.size() < ctx) {
            const Completion c = sample_completion(model, prompt, decode, unused);
            row.predicted = extract_answer(c.tokens);
            row.correct = is_correct(c.tokens, inst);
        }
        correct += row.correct ? 1 : 0;
        r.rows.push_back(std::move(row));
    }
    r.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(instances.size());
    return r;
}

EvalResult evaluate_model(const TransformerLM& model, std::span<const ProblemInstance> instances,
                          int max_new_tokens) {
    std::vector<std::vector<int>> q;
    q.reserve(instances.size());
    for (const ProblemInstance& inst : instances) {
        q.push_back(inst.surface);
    }
    return evaluate_inputs(model, instances, q, max_new_tokens);
}

std::optional<double> relative_drop(double acc_orig, double acc_symb) {
    if (acc_orig == 0.0) {
        return std::nullopt;
    }
    return 100.0 * (acc_symb - acc_orig) / acc_orig;
}

RobustnessReport robustness_report(const TransformerLM& model,
                                   std::span<const ProblemInstance> test_orig,
                                   std::span<const ProblemInstance> test_perturbed,
                                   int max_new_tokens) {
    if (test_orig.size() != test_perturbed.size()) {
        throw std::invalid_argument("robustness_report: original and perturbed sets differ in size");
    }
    for (std::size_t i = 0; i < test_orig.size(); ++i) {
        if (test_perturbed[i].lineage != test_orig[i].id) {
            throw std::invalid_argument("robustness_report: " + test_perturbed[i].id +
                                        " does not derive from " + test_orig[i].id);
        }
    }
    RobustnessReport rep;
    rep.acc_orig = evaluate_model(model, test_orig, max_new_tokens).accuracy;
    rep.acc_symb = evaluate_model(model, test_perturbed, max_new_tokens).accuracy;
    rep.delta_pct = relative_drop(rep.acc_orig, rep.acc_symb);
    return rep;
}

EmbeddingReport embedding_report(TransformerLM& reasoner, std::span<const ProblemInstance> instances,
                                 const std::vector<std::vector<int>>& mapped, int k) {
    if (instances.size() != mapped.size()) {
        throw std::invalid_argument("embedding_report: mapped inputs misaligned");
    }
    std::vector<std::vector<int>> orig_in;
    std::vector<std::vector<int>> mapped_in;
    EmbeddingReport rep;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        orig_in.push_back(reasoner_prompt(instances[i].surface));
        mapped_in.push_back(reasoner_prompt(mapped[i]));
        rep.ids.push_back(instances[i].id);
    }
    const EmbeddingMatrix zo = embed_inputs(reasoner, orig_in, rep.ids);
    const EmbeddingMatrix zm = embed_inputs(reasoner, mapped_in, rep.ids);
    rep.knn_original = knn_mean_distance(zo, k);
    rep.knn_mapped = knn_mean_distance(zm, k);
    rep.pca_original = pca_project(zo.data, zo.rows, zo.dim, 2);
    rep.pca_mapped = pca_project(zm.data, zm.rows, zm.dim, 2);
    return rep;
}

std::string eval_csv(const EvalResult& r) {
    std::ostringstream os;
    os << "id,correct,predicted,gold\n";
    for (const EvalRow& row : r.rows) {
        os << row.id << ',' << (row.correct ? 1 : 0) << ',';
        if (row.predicted) {
            os << *row.predicted;
        }
        os << ',' << row.gold << '\n';
    }
    return os.str();
}

std::string pca_csv(const PcaResult& p, std::span<const std::string> ids) {
    std::ostringstream os;
    os << "id";
    for (std::size_t j = 0; j < p.dims; ++j) {
        os << ",pc" << j + 1;
    }
    os << '\n';
    char buf[40];
    for (std::size_t i = 0; i < ids.size(); ++i) {
        os << ids[i];
        for (std::size_t j = 0; j < p.dims; ++j) {
            std::snprintf(buf, sizeof buf, ",%.17g", p.coords[i * p.dims + j]);
            os << buf;
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace durit
