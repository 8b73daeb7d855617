#pragma once

// Implicit template codebook: n learnable template rows injected into the
// mapper's input embedding space, n learnable query keys used to pick a
// template at inference time, and the two InfoNCE losses that train them.

#include <span>
#include <vector>

#include "durit/autodiff.hpp"
#include "durit/rng.hpp"

namespace durit {

struct Codebook {
    Tensor templates;  // n x d
    Tensor keys;       // n x d
    double tau_sim = 0.1;

    int size() const noexcept { return static_cast<int>(templates.rows()); }
    std::size_t dim() const noexcept { return templates.cols(); }
    std::vector<Tensor*> parameters() { return {&templates, &keys}; }
    std::vector<double> template_row(int i) const;
};

// Entries i.i.d. N(0, init_std^2).
Codebook init_codebook(int n, int d_model, double init_std, std::uint64_t seed,
                       double tau_sim = 0.1);

int select_template_train(const Codebook& cb, int label);
// argmax_i cos(q, k_i), lowest index on ties.
int select_template_infer(const Codebook& cb, std::span<const double> q);

// -log softmax(<x, normalize(rows_j)> / tau)[label] for a [1 x d] query x.
Var info_nce(Var x, Var rows, int label, double tau);

// Gradient reaches z and the templates.
Var template_sim_loss(Graph& g, Var z, Codebook& cb, int label);
// q is detached; only the keys receive gradient.
Var key_sim_loss(Graph& g, Var q, Codebook& cb, int label);

}  // namespace durit
