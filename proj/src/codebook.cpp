#include "durit/codebook.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace durit {

std::vector<double> Codebook::template_row(int i) const {
    const std::size_t d = dim();
    const auto r = static_cast<std::size_t>(select_template_train(*this, i));
    return {templates.data.begin() + static_cast<std::ptrdiff_t>(r * d),
            templates.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * d)};
}

Codebook init_codebook(int n, int d_model, double init_std, std::uint64_t seed, double tau_sim) {
    if (n < 1 || d_model < 1) {
        throw std::invalid_argument("init_codebook: n and d_model must be positive");
    }
    if (!(tau_sim > 0.0)) {
        throw std::invalid_argument("init_codebook: tau_sim must be positive");
    }
    Rng rng = make_rng(seed, {fnv1a("codebook-init")});
    Codebook cb;
    cb.tau_sim = tau_sim;
    const auto rows = static_cast<std::size_t>(n);
    const auto cols = static_cast<std::size_t>(d_model);
    cb.templates = Tensor::zeros({rows, cols}, true);
    cb.keys = Tensor::zeros({rows, cols}, true);
    for (double& v : cb.templates.data) {
        v = init_std * normal01(rng);
    }
    for (double& v : cb.keys.data) {
        v = init_std * normal01(rng);
    }
    return cb;
}

int select_template_train(const Codebook& cb, int label) {
    if (label < 0 || label >= cb.size()) {
        throw std::out_of_range("select_template_train: label " + std::to_string(label) +
                                " outside codebook of " + std::to_string(cb.size()));
    }
    return label;
}

int select_template_infer(const Codebook& cb, std::span<const double> q) {
    const std::size_t d = cb.dim();
    if (q.size() != d) {
        throw std::invalid_argument("select_template_infer: query width mismatch");
    }
    double qn = 0.0;
    for (double v : q) {
        qn += v * v;
    }
    qn = std::max(std::sqrt(qn), 1e-12);
    int best = 0;
    double best_cos = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < cb.size(); ++i) {
        const double* k = cb.keys.data.data() + static_cast<std::size_t>(i) * d;
        double dot = 0.0;
        double kn = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dot += q[j] * k[j];
            kn += k[j] * k[j];
        }
        const double c = dot / (qn * std::max(std::sqrt(kn), 1e-12));
        if (c > best_cos) {
            best_cos = c;
            best = i;
        }
    }
    return best;
}

Var info_nce(Var x, Var rows, int label, double tau) {
    if (!(tau > 0.0)) {
        throw std::invalid_argument("info_nce: temperature must be positive");
    }
    Var sims = matmul(x, transpose(l2_normalize(rows)));
    return cross_entropy(scale(sims, 1.0 / tau), label);
}

Var template_sim_loss(Graph& g, Var z, Codebook& cb, int label) {
    select_template_train(cb, label);
    return info_nce(reshape(z, {1, cb.dim()}), g.parameter(cb.templates), label, cb.tau_sim);
}

Var key_sim_loss(Graph& g, Var q, Codebook& cb, int label) {
    select_template_train(cb, label);
    return info_nce(reshape(detach(q), {1, cb.dim()}), g.parameter(cb.keys), label, cb.tau_sim);
}

}  // namespace durit
