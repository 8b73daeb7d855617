#pragma once

// Reverse-mode automatic differentiation over dense float64 tensors.
//
// A Graph is a tape: nodes are appended in creation order and backward()
// walks them in exact reverse order, so gradient accumulation is
// deterministic. Parameters live outside the graph (owned by models) and are
// bound by reference; their gradients accumulate across backward() calls
// until zero_grad() is called.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace durit {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

struct Tensor {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty means "no gradient"
    bool requires_grad = false;

    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor scalar(double v);
    static Tensor vector(std::vector<double> v);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);

    std::size_t size() const noexcept { return data.size(); }
    std::size_t rank() const noexcept { return shape.size(); }
    // Rank-1 tensors are viewed as a single row.
    std::size_t rows() const noexcept;
    std::size_t cols() const noexcept;
    bool has_grad() const noexcept { return !grad.empty(); }
    void zero_grad() { grad.clear(); }

    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
};

enum class OpKind : std::uint8_t {
    constant,
    parameter,
    detach,
    matmul,
    transpose,
    reshape,
    slice_rows,
    add,
    sub,
    mul,
    scale,
    relu,
    exp,
    clamp,
    minimum,
    embedding_lookup,
    layer_norm,
    concat,
    mean_pool,
    sum,
    mean,
    softmax,
    log_softmax,
    gather,
    cross_entropy,
    kl_divergence,
    causal_attention,
    l2_normalize,
};

const char* op_name(OpKind kind);

class Graph;

// Lightweight handle to a graph node.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
    double item() const;
    // Node gradient after backward(); empty if none flowed here.
    const std::vector<double>& grad() const;
    bool requires_grad() const;
    Graph* graph() const noexcept { return graph_; }
    std::size_t index() const noexcept { return index_; }
    bool valid() const noexcept { return graph_ != nullptr; }

private:
    friend class Graph;
    Var(Graph* g, std::size_t i) : graph_{g}, index_{i} {}
    Graph* graph_ = nullptr;
    std::size_t index_ = 0;
};

class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor t);
    // Binds an externally owned tensor. It must outlive the graph.
    Var parameter(Tensor& p);

    // Populates gradients of every reachable requires_grad tensor.
    // Node-level gradients are reset on each call; bound parameter
    // gradients accumulate.
    void backward(Var root);

    std::size_t size() const noexcept { return nodes_.size(); }
    OpKind kind(Var v) const { return nodes_.at(v.index()).kind; }
    const std::vector<std::size_t>& parents(Var v) const { return nodes_.at(v.index()).parents; }

    struct Node {
        OpKind kind = OpKind::constant;
        std::vector<std::size_t> parents;
        Tensor value;                // unused for bound parameters
        Tensor* bound = nullptr;     // parameter nodes only
        bool requires_grad = false;
        std::vector<double> grad;    // node gradient (non-parameter nodes)
        std::vector<double> cache;   // op-specific saved values
        std::vector<int> indices;    // op-specific integer data
        double a = 0.0;              // op-specific scalars
        double b = 0.0;
        std::size_t n = 0;
    };

    // Internal API used by op implementations.
    Node& node(std::size_t i) { return nodes_[i]; }
    const Node& node(std::size_t i) const { return nodes_[i]; }
    const Tensor& value_of(std::size_t i) const;
    Var push(Node node);

private:
    std::vector<double>& grad_buffer(std::size_t i);
    void propagate(std::size_t i);

    std::vector<Node> nodes_;
};

// ---- primitive ops ----------------------------------------------------------

Var matmul(Var a, Var b);                       // [m,k] x [k,n]
Var transpose(Var a);                           // rank-2
Var reshape(Var a, Shape shape);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var add(Var a, Var b);                          // same shape, or b a row vector broadcast over rows
Var sub(Var a, Var b);
Var mul(Var a, Var b);                          // elementwise, same shape
Var scale(Var a, double c);
Var relu(Var a);
Var exp(Var a);
Var clamp(Var a, double lo, double hi);
Var minimum(Var a, Var b);
Var embedding_lookup(Var table, std::span<const int> ids);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var concat(std::span<const Var> parts);         // along rows
Var mean_pool(Var x);                           // [L,d] -> [1,d]
Var sum(Var x);
Var mean(Var x);
Var softmax_with_temperature(Var logits, double tau);  // row-wise
Var log_softmax(Var logits, double tau = 1.0);         // row-wise
Var gather(Var x, std::span<const int> cols);          // picks x[i, cols[i]] -> [rows]
// Mean over rows of -log softmax(row)[target].
Var cross_entropy(Var logits, std::span<const int> targets);
Var cross_entropy(Var logits, int target);
// Mean over rows of sum_k pt (log pt - log max(ps, eps_prob)). Gradient flows
// to the student argument only.
Var kl_divergence(Var p_teacher, Var p_student);
Var causal_attention(Var q, Var k, Var v, std::size_t heads);
Var l2_normalize(Var x);                        // row-wise
Var detach(Var x);

inline constexpr double kProbFloor = 1e-12;

// ---- optimisation ------------------------------------------------------------

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.01;
    double eps = 1e-8;
};

class AdamW {
public:
    AdamW(std::vector<Tensor*> params, AdamWConfig cfg);

    // Decoupled weight decay, bias-corrected moments. Throws if a parameter
    // has no gradient.
    void step();
    void zero_grad();

    const AdamWConfig& config() const noexcept { return cfg_; }
    void set_lr(double lr) noexcept { cfg_.lr = lr; }
    std::int64_t steps() const noexcept { return t_; }
    const std::vector<Tensor*>& params() const noexcept { return params_; }

    // State access for checkpointing.
    std::vector<std::vector<double>>& first_moments() noexcept { return m_; }
    std::vector<std::vector<double>>& second_moments() noexcept { return v_; }
    void set_steps(std::int64_t t) noexcept { t_ = t; }

private:
    std::vector<Tensor*> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::int64_t t_ = 0;
};

// Scales gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping. Parameters without gradients are skipped.
double clip_grad_norm(std::span<Tensor* const> params, double max_norm);
void zero_grads(std::span<Tensor* const> params);

// ---- verification -------------------------------------------------------------

struct GradCheckOptions {
    double eps = 1e-5;
    // 0 = check every coordinate; otherwise a seeded sample per parameter.
    std::size_t max_coords_per_param = 0;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
};

// Compares analytic gradients with central differences. loss_fn must build a
// scalar loss over the given parameters in the supplied graph and be
// deterministic; a mismatch between two identical evaluations throws.
GradCheckResult finite_difference_check(const std::function<Var(Graph&)>& loss_fn,
                                        std::span<Tensor* const> params,
                                        const GradCheckOptions& opts = {});

}  // namespace durit
