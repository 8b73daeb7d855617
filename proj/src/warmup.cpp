#include "durit/warmup.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace durit {

std::vector<SftExample> reasoner_sft_examples(std::span<const ProblemInstance> instances) {
    const int eos = vocab().eos();
    std::vector<SftExample> out;
    out.reserve(instances.size());
    for (const ProblemInstance& inst : instances) {
        SftExample ex;
        ex.prompt = reasoner_prompt(inst.surface);
        ex.target = reference_solution(inst.canonical);
        ex.target.push_back(eos);
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<SftExample> mapper_sft_examples(std::span<const ProblemInstance> instances,
                                            int n_templates, std::uint64_t seed) {
    if (n_templates < 1) {
        throw std::invalid_argument("mapper_sft_examples: need at least one template");
    }
    const int eos = vocab().eos();
    Rng rng = make_rng(seed, {fnv1a("mapper-warmup-templates")});
    std::vector<SftExample> out;
    out.reserve(instances.size());
    for (const ProblemInstance& inst : instances) {
        SftExample ex;
        ex.prompt = mapper_prompt(inst.surface);
        ex.target = canonical_rendering(inst.canonical);
        ex.target.push_back(eos);
        ex.template_index = static_cast<int>(uniform_int(rng, 0, n_templates - 1));
        ex.template_pos = template_position(inst.surface);
        out.push_back(std::move(ex));
    }
    return out;
}

Var sft_loss(Graph& g, TransformerLM& model, const SftExample& ex, const Codebook* cb) {
    GraphInjection inj;
    if (ex.template_index >= 0) {
        if (cb == nullptr) {
            throw std::invalid_argument("sft_loss: example needs a codebook");
        }
        inj.pos = ex.template_pos;
        // The codebook stays fixed during warm-up.
        inj.row = g.constant(Tensor::vector(cb->template_row(ex.template_index)));
    }
    Var logits = completion_logits(g, model, ex.prompt, ex.target, inj);
    return cross_entropy(logits, ex.target);
}

double sft_epoch(TransformerLM& model, std::span<const SftExample> examples, AdamW& optimizer,
                 int batch_size, std::uint64_t seed, const Codebook* cb) {
    if (examples.empty()) {
        return 0.0;
    }
    if (batch_size < 1) {
        throw std::invalid_argument("sft_epoch: batch_size must be positive");
    }
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng(seed, {fnv1a("sft-order")});
    shuffle(order.begin(), order.end(), rng);
    std::vector<Tensor*> params = optimizer.params();
    double total = 0.0;
    const auto B = static_cast<std::size_t>(batch_size);
    for (std::size_t start = 0; start < order.size(); start += B) {
        const std::size_t end = std::min(order.size(), start + B);
        const double inv_b = 1.0 / static_cast<double>(end - start);
        optimizer.zero_grad();
        for (std::size_t k = start; k < end; ++k) {
            Graph g;
            Var loss = sft_loss(g, model, examples[order[k]], cb);
            g.backward(scale(loss, inv_b));
            total += loss.item();
        }
        clip_grad_norm(params, 1.0);
        optimizer.step();
    }
    return total / static_cast<double>(examples.size());
}

}  // namespace durit
