#pragma once

// Tiny pre-LN decoder-only transformer used for both the mapper and the
// reasoner. Two forward paths exist: a graph path for training and an
// incremental KV-cached path for sampling. They share the numeric kernels
// and perform the same operations in the same order, so log-probabilities
// recorded at sampling time equal the training-time recomputation exactly.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "durit/autodiff.hpp"
#include "durit/rng.hpp"

namespace durit {

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 2;
    int d_ff = 256;
    int max_context = 160;
    double init_std = 0.02;
};

void validate(const ModelConfig& cfg);

struct DecodeConfig {
    enum class Mode { greedy, temperature };
    Mode mode = Mode::greedy;
    double temperature = 0.7;
    int max_new_tokens = 64;
    int stop_token = 0;

    static DecodeConfig greedy(int max_new, int stop) { return {Mode::greedy, 1.0, max_new, stop}; }
    static DecodeConfig sampled(double temp, int max_new, int stop) {
        return {Mode::temperature, temp, max_new, stop};
    }
};

// Replaces the input embedding at one position with a supplied row (the
// template token). pos < 0 disables it.
struct Injection {
    int pos = -1;
    const std::vector<double>* row = nullptr;
};

struct GraphInjection {
    int pos = -1;
    Var row;
};

class TransformerLM {
public:
    struct Layer {
        Tensor ln1_g, ln1_b;
        Tensor wq, wk, wv, wo;
        Tensor ln2_g, ln2_b;
        Tensor w1, b1, w2, b2;
    };

    TransformerLM() = default;
    TransformerLM(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return cfg_; }

    // Stable declaration order; used for checkpoints and optimiser state.
    std::vector<std::pair<std::string, Tensor*>> named_parameters();
    std::vector<Tensor*> parameters();
    std::size_t parameter_count() const;

    // Final-layer hidden states (after the last layer norm), [L x d].
    Var hidden(Graph& g, std::span<const int> tokens, const GraphInjection& inj = {});
    // Output logits, [L x |V|].
    Var logits(Graph& g, std::span<const int> tokens, const GraphInjection& inj = {});
    Var project(Graph& g, Var hidden);

    const Tensor& token_embedding() const noexcept { return tok_emb_; }
    Tensor& token_embedding() noexcept { return tok_emb_; }

    void check_tokens(std::span<const int> tokens) const;

private:
    friend class Decoder;

    ModelConfig cfg_;
    Tensor tok_emb_;
    Tensor pos_emb_;
    std::vector<Layer> layers_;
    Tensor lnf_g_, lnf_b_;
    Tensor w_out_, b_out_;
};

// Incremental decoding with a key/value cache. Holds a reference to the
// model, which must not change while the decoder is in use.
class Decoder {
public:
    explicit Decoder(const TransformerLM& model);

    void reset();
    // Appends one position and returns its logits row.
    const std::vector<double>& step(int token, const std::vector<double>* embedding = nullptr);
    std::size_t length() const noexcept { return len_; }

private:
    const TransformerLM& m_;
    std::size_t len_ = 0;
    std::vector<std::vector<double>> k_cache_;
    std::vector<std::vector<double>> v_cache_;
    std::vector<double> x_, h_, q_, k_, v_, att_, o_, f_, g_, logits_;
};

struct Completion {
    std::vector<int> tokens;        // includes the stop token when emitted
    std::vector<double> logprobs;   // per completion token, temperature 1
    bool truncated = false;
};

// Greedy decoding breaks ties toward the lowest token id. Temperature
// decoding draws from softmax(logits / T). Stops at the stop token, after
// max_new_tokens, or when the context is full (truncated).
Completion sample_completion(const TransformerLM& model, std::span<const int> prompt,
                             const DecodeConfig& cfg, Rng& rng, const Injection& inj = {});

// Per-token log-probabilities of completion given prompt (graph path,
// forward only).
std::vector<double> sequence_logprob(TransformerLM& model, std::span<const int> prompt,
                                     std::span<const int> completion, const Injection& inj = {});

// Graph versions over the completion positions only.
Var completion_logits(Graph& g, TransformerLM& model, std::span<const int> prompt,
                      std::span<const int> completion, const GraphInjection& inj = {});
Var completion_logprobs(Graph& g, TransformerLM& model, std::span<const int> prompt,
                        std::span<const int> completion, const GraphInjection& inj = {});

// Unit-norm mean of final hidden states.
Var mean_pool_hidden(Graph& g, TransformerLM& model, std::span<const int> tokens,
                     const GraphInjection& inj = {});
std::vector<double> mean_pool_hidden(TransformerLM& model, std::span<const int> tokens);

// Unit-norm mean of raw token-embedding rows; order invariant.
std::vector<double> avg_word_embedding(const TransformerLM& model, std::span<const int> tokens);

std::vector<int> concat_tokens(std::span<const int> a, std::span<const int> b);

}  // namespace durit
