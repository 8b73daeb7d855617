#include "durit/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "kernels.hpp"

namespace durit {

void validate(const ModelConfig& cfg) {
    if (cfg.vocab_size <= 0 || cfg.d_model <= 0 || cfg.n_layers <= 0 || cfg.n_heads <= 0 ||
        cfg.d_ff <= 0 || cfg.max_context <= 0) {
        throw std::invalid_argument("model config: all sizes must be positive");
    }
    if (cfg.d_model % cfg.n_heads != 0) {
        throw std::invalid_argument("model config: d_model " + std::to_string(cfg.d_model) +
                                    " not divisible by n_heads " + std::to_string(cfg.n_heads));
    }
    if (!(cfg.init_std > 0.0)) {
        throw std::invalid_argument("model config: init_std must be positive");
    }
}

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, double std, Rng& rng) {
    Tensor t = Tensor::zeros({rows, cols}, true);
    for (double& v : t.data) {
        v = std * normal01(rng);
    }
    return t;
}

Tensor filled(std::size_t n, double v) {
    Tensor t = Tensor::zeros({n}, true);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

}  // namespace

TransformerLM::TransformerLM(ModelConfig cfg, std::uint64_t seed) : cfg_{cfg} {
    validate(cfg_);
    Rng rng = make_rng(seed, {fnv1a("model-init")});
    const auto V = static_cast<std::size_t>(cfg_.vocab_size);
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const auto ff = static_cast<std::size_t>(cfg_.d_ff);
    const auto C = static_cast<std::size_t>(cfg_.max_context);
    const double s = cfg_.init_std;
    // Residual-branch outputs are scaled down by depth, GPT-2 style.
    const double s_out = s / std::sqrt(2.0 * cfg_.n_layers);

    tok_emb_ = gaussian(V, d, s, rng);
    pos_emb_ = gaussian(C, d, s, rng);
    layers_.resize(static_cast<std::size_t>(cfg_.n_layers));
    for (Layer& L : layers_) {
        L.ln1_g = filled(d, 1.0);
        L.ln1_b = filled(d, 0.0);
        L.wq = gaussian(d, d, s, rng);
        L.wk = gaussian(d, d, s, rng);
        L.wv = gaussian(d, d, s, rng);
        L.wo = gaussian(d, d, s_out, rng);
        L.ln2_g = filled(d, 1.0);
        L.ln2_b = filled(d, 0.0);
        L.w1 = gaussian(d, ff, s, rng);
        L.b1 = filled(ff, 0.0);
        L.w2 = gaussian(ff, d, s_out, rng);
        L.b2 = filled(d, 0.0);
    }
    lnf_g_ = filled(d, 1.0);
    lnf_b_ = filled(d, 0.0);
    w_out_ = gaussian(d, V, s, rng);
    b_out_ = filled(V, 0.0);
}

std::vector<std::pair<std::string, Tensor*>> TransformerLM::named_parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("tok_emb", &tok_emb_);
    out.emplace_back("pos_emb", &pos_emb_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        Layer& L = layers_[i];
        const std::string p = "layer" + std::to_string(i) + ".";
        out.emplace_back(p + "ln1_g", &L.ln1_g);
        out.emplace_back(p + "ln1_b", &L.ln1_b);
        out.emplace_back(p + "wq", &L.wq);
        out.emplace_back(p + "wk", &L.wk);
        out.emplace_back(p + "wv", &L.wv);
        out.emplace_back(p + "wo", &L.wo);
        out.emplace_back(p + "ln2_g", &L.ln2_g);
        out.emplace_back(p + "ln2_b", &L.ln2_b);
        out.emplace_back(p + "w1", &L.w1);
        out.emplace_back(p + "b1", &L.b1);
        out.emplace_back(p + "w2", &L.w2);
        out.emplace_back(p + "b2", &L.b2);
    }
    out.emplace_back("lnf_g", &lnf_g_);
    out.emplace_back("lnf_b", &lnf_b_);
    out.emplace_back("w_out", &w_out_);
    out.emplace_back("b_out", &b_out_);
    return out;
}

std::vector<Tensor*> TransformerLM::parameters() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named_parameters()) {
        out.push_back(t);
    }
    return out;
}

std::size_t TransformerLM::parameter_count() const {
    std::size_t n = tok_emb_.size() + pos_emb_.size() + lnf_g_.size() + lnf_b_.size() +
                    w_out_.size() + b_out_.size();
    for (const Layer& L : layers_) {
        n += L.ln1_g.size() + L.ln1_b.size() + L.wq.size() + L.wk.size() + L.wv.size() +
             L.wo.size() + L.ln2_g.size() + L.ln2_b.size() + L.w1.size() + L.b1.size() +
             L.w2.size() + L.b2.size();
    }
    return n;
}

void TransformerLM::check_tokens(std::span<const int> tokens) const {
    if (tokens.empty()) {
        throw std::invalid_argument("model: empty token sequence");
    }
    if (tokens.size() > static_cast<std::size_t>(cfg_.max_context)) {
        throw std::invalid_argument("model: sequence length " + std::to_string(tokens.size()) +
                                    " exceeds max_context " + std::to_string(cfg_.max_context));
    }
    for (int t : tokens) {
        if (t < 0 || t >= cfg_.vocab_size) {
            throw std::invalid_argument("model: token id " + std::to_string(t) +
                                        " outside vocabulary of " +
                                        std::to_string(cfg_.vocab_size));
        }
    }
}

Var TransformerLM::hidden(Graph& g, std::span<const int> tokens, const GraphInjection& inj) {
    check_tokens(tokens);
    const std::size_t L = tokens.size();
    Var x = embedding_lookup(g.parameter(tok_emb_), tokens);
    if (inj.pos >= 0) {
        const auto p = static_cast<std::size_t>(inj.pos);
        if (p >= L || !inj.row.valid()) {
            throw std::invalid_argument("model: injection position " + std::to_string(inj.pos) +
                                        " invalid for length " + std::to_string(L));
        }
        std::vector<Var> parts;
        if (p > 0) {
            parts.push_back(slice_rows(x, 0, p));
        }
        parts.push_back(reshape(inj.row, {1, static_cast<std::size_t>(cfg_.d_model)}));
        if (p + 1 < L) {
            parts.push_back(slice_rows(x, p + 1, L));
        }
        x = concat(parts);
    }
    x = add(x, slice_rows(g.parameter(pos_emb_), 0, L));
    const auto H = static_cast<std::size_t>(cfg_.n_heads);
    for (Layer& ly : layers_) {
        Var h = layer_norm(x, g.parameter(ly.ln1_g), g.parameter(ly.ln1_b));
        Var q = matmul(h, g.parameter(ly.wq));
        Var k = matmul(h, g.parameter(ly.wk));
        Var v = matmul(h, g.parameter(ly.wv));
        Var a = causal_attention(q, k, v, H);
        x = add(x, matmul(a, g.parameter(ly.wo)));
        Var h2 = layer_norm(x, g.parameter(ly.ln2_g), g.parameter(ly.ln2_b));
        Var f = relu(add(matmul(h2, g.parameter(ly.w1)), g.parameter(ly.b1)));
        x = add(x, add(matmul(f, g.parameter(ly.w2)), g.parameter(ly.b2)));
    }
    return layer_norm(x, g.parameter(lnf_g_), g.parameter(lnf_b_));
}

Var TransformerLM::project(Graph& g, Var h) {
    return add(matmul(h, g.parameter(w_out_)), g.parameter(b_out_));
}

Var TransformerLM::logits(Graph& g, std::span<const int> tokens, const GraphInjection& inj) {
    return project(g, hidden(g, tokens, inj));
}

// ---- incremental decoder -------------------------------------------------------

Decoder::Decoder(const TransformerLM& model) : m_{model} {
    const ModelConfig& c = m_.cfg_;
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto C = static_cast<std::size_t>(c.max_context);
    k_cache_.assign(static_cast<std::size_t>(c.n_layers), std::vector<double>(C * d));
    v_cache_.assign(static_cast<std::size_t>(c.n_layers), std::vector<double>(C * d));
    x_.resize(d);
    h_.resize(d);
    q_.resize(d);
    k_.resize(d);
    v_.resize(d);
    att_.resize(d);
    o_.resize(d);
    f_.resize(static_cast<std::size_t>(c.d_ff));
    g_.resize(d);
    logits_.resize(static_cast<std::size_t>(c.vocab_size));
}

void Decoder::reset() { len_ = 0; }

const std::vector<double>& Decoder::step(int token, const std::vector<double>* embedding) {
    const ModelConfig& c = m_.cfg_;
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto ff = static_cast<std::size_t>(c.d_ff);
    const auto V = static_cast<std::size_t>(c.vocab_size);
    if (len_ >= static_cast<std::size_t>(c.max_context)) {
        throw std::length_error("decoder: context of " + std::to_string(c.max_context) + " is full");
    }
    if (token < 0 || token >= c.vocab_size) {
        throw std::invalid_argument("decoder: token id " + std::to_string(token) + " out of range");
    }
    const std::size_t t = len_;
    const double* e = embedding != nullptr
                          ? embedding->data()
                          : m_.tok_emb_.data.data() + static_cast<std::size_t>(token) * d;
    if (embedding != nullptr && embedding->size() != d) {
        throw std::invalid_argument("decoder: injected row has wrong width");
    }
    const double* pe = m_.pos_emb_.data.data() + t * d;
    for (std::size_t j = 0; j < d; ++j) {
        x_[j] = e[j];
        x_[j] += pe[j];
    }
    double mu = 0.0;
    double rs = 0.0;
    const auto H = static_cast<std::size_t>(c.n_heads);
    for (std::size_t li = 0; li < m_.layers_.size(); ++li) {
        const TransformerLM::Layer& L = m_.layers_[li];
        kernels::layer_norm_row(x_.data(), L.ln1_g.data.data(), L.ln1_b.data.data(), h_.data(), d,
                                1e-5, mu, rs);
        double* kc = k_cache_[li].data();
        double* vc = v_cache_[li].data();
        std::fill(q_.begin(), q_.end(), 0.0);
        std::fill(kc + t * d, kc + (t + 1) * d, 0.0);
        std::fill(vc + t * d, vc + (t + 1) * d, 0.0);
        kernels::matmul_acc(h_.data(), L.wq.data.data(), q_.data(), 1, d, d);
        kernels::matmul_acc(h_.data(), L.wk.data.data(), kc + t * d, 1, d, d);
        kernels::matmul_acc(h_.data(), L.wv.data.data(), vc + t * d, 1, d, d);
        kernels::attention_row(q_.data(), kc, vc, t + 1, d, H, att_.data(), nullptr);
        std::fill(o_.begin(), o_.end(), 0.0);
        kernels::matmul_acc(att_.data(), L.wo.data.data(), o_.data(), 1, d, d);
        for (std::size_t j = 0; j < d; ++j) {
            x_[j] += o_[j];
        }
        kernels::layer_norm_row(x_.data(), L.ln2_g.data.data(), L.ln2_b.data.data(), h_.data(), d,
                                1e-5, mu, rs);
        std::fill(f_.begin(), f_.end(), 0.0);
        kernels::matmul_acc(h_.data(), L.w1.data.data(), f_.data(), 1, d, ff);
        for (std::size_t j = 0; j < ff; ++j) {
            f_[j] += L.b1.data[j];
            f_[j] = f_[j] > 0.0 ? f_[j] : 0.0;
        }
        std::fill(g_.begin(), g_.end(), 0.0);
        kernels::matmul_acc(f_.data(), L.w2.data.data(), g_.data(), 1, ff, d);
        for (std::size_t j = 0; j < d; ++j) {
            g_[j] += L.b2.data[j];
            x_[j] += g_[j];
        }
    }
    kernels::layer_norm_row(x_.data(), m_.lnf_g_.data.data(), m_.lnf_b_.data.data(), h_.data(), d,
                            1e-5, mu, rs);
    std::fill(logits_.begin(), logits_.end(), 0.0);
    kernels::matmul_acc(h_.data(), m_.w_out_.data.data(), logits_.data(), 1, d, V);
    for (std::size_t j = 0; j < V; ++j) {
        logits_[j] += m_.b_out_.data[j];
    }
    ++len_;
    return logits_;
}

// ---- sampling and scoring --------------------------------------------------------

Completion sample_completion(const TransformerLM& model, std::span<const int> prompt,
                             const DecodeConfig& cfg, Rng& rng, const Injection& inj) {
    if (prompt.empty()) {
        throw std::invalid_argument("sample_completion: empty prompt");
    }
    if (cfg.mode == DecodeConfig::Mode::temperature && !(cfg.temperature > 0.0)) {
        throw std::invalid_argument("sample_completion: temperature must be positive");
    }
    model.check_tokens(prompt);
    const auto V = static_cast<std::size_t>(model.config().vocab_size);
    const auto C = static_cast<std::size_t>(model.config().max_context);
    Decoder dec{model};
    const std::vector<double>* logits = nullptr;
    for (std::size_t i = 0; i < prompt.size(); ++i) {
        const bool inject = inj.pos >= 0 && static_cast<std::size_t>(inj.pos) == i;
        logits = &dec.step(prompt[i], inject ? inj.row : nullptr);
    }
    Completion out;
    std::vector<double> probs(V);
    for (int n = 0; n < cfg.max_new_tokens; ++n) {
        const std::vector<double>& lg = *logits;
        int next = 0;
        if (cfg.mode == DecodeConfig::Mode::greedy) {
            for (std::size_t j = 1; j < V; ++j) {
                if (lg[j] > lg[static_cast<std::size_t>(next)]) {
                    next = static_cast<int>(j);
                }
            }
        } else {
            kernels::softmax_row(lg.data(), V, cfg.temperature, probs.data());
            const double u = uniform01(rng);
            double acc = 0.0;
            next = -1;
            int last_positive = 0;
            for (std::size_t j = 0; j < V; ++j) {
                if (probs[j] > 0.0) {
                    last_positive = static_cast<int>(j);
                }
                acc += probs[j];
                if (u < acc) {
                    next = static_cast<int>(j);
                    break;
                }
            }
            if (next < 0) {
                next = last_positive;
            }
        }
        const double lse = kernels::logsumexp_row(lg.data(), V, 1.0);
        out.tokens.push_back(next);
        out.logprobs.push_back(lg[static_cast<std::size_t>(next)] / 1.0 - lse);
        if (next == cfg.stop_token) {
            return out;
        }
        if (dec.length() >= C) {
            out.truncated = true;
            return out;
        }
        logits = &dec.step(next);
    }
    out.truncated = true;
    return out;
}

std::vector<int> concat_tokens(std::span<const int> a, std::span<const int> b) {
    std::vector<int> out(a.begin(), a.end());
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

Var completion_logits(Graph& g, TransformerLM& model, std::span<const int> prompt,
                      std::span<const int> completion, const GraphInjection& inj) {
    if (prompt.empty() || completion.empty()) {
        throw std::invalid_argument("completion_logits: prompt and completion must be nonempty");
    }
    const std::vector<int> seq = concat_tokens(prompt, completion);
    // Only the last completion token is never used as an input.
    std::span<const int> inputs(seq.data(), seq.size() - 1);
    Var h = model.hidden(g, inputs, inj);
    h = slice_rows(h, prompt.size() - 1, inputs.size());
    return model.project(g, h);
}

Var completion_logprobs(Graph& g, TransformerLM& model, std::span<const int> prompt,
                        std::span<const int> completion, const GraphInjection& inj) {
    Var lg = completion_logits(g, model, prompt, completion, inj);
    return gather(log_softmax(lg), completion);
}

std::vector<double> sequence_logprob(TransformerLM& model, std::span<const int> prompt,
                                     std::span<const int> completion, const Injection& inj) {
    Graph g;
    GraphInjection gi;
    if (inj.pos >= 0) {
        gi.pos = inj.pos;
        gi.row = g.constant(Tensor::vector(*inj.row));
    }
    return completion_logprobs(g, model, prompt, completion, gi).value().data;
}

Var mean_pool_hidden(Graph& g, TransformerLM& model, std::span<const int> tokens,
                     const GraphInjection& inj) {
    return l2_normalize(mean_pool(model.hidden(g, tokens, inj)));
}

std::vector<double> mean_pool_hidden(TransformerLM& model, std::span<const int> tokens) {
    Graph g;
    return mean_pool_hidden(g, model, tokens).value().data;
}

std::vector<double> avg_word_embedding(const TransformerLM& model, std::span<const int> tokens) {
    model.check_tokens(tokens);
    const Tensor& E = model.token_embedding();
    const std::size_t d = E.cols();
    // Sort ids so the floating-point sum does not depend on token order.
    std::vector<int> ids(tokens.begin(), tokens.end());
    std::sort(ids.begin(), ids.end());
    std::vector<double> q(d, 0.0);
    for (int id : ids) {
        const double* row = E.data.data() + static_cast<std::size_t>(id) * d;
        for (std::size_t j = 0; j < d; ++j) {
            q[j] += row[j];
        }
    }
    double s = 0.0;
    for (double& v : q) {
        v /= static_cast<double>(ids.size());
        s += v * v;
    }
    const double nrm = std::max(std::sqrt(s), 1e-12);
    for (double& v : q) {
        v /= nrm;
    }
    return q;
}

}  // namespace durit
