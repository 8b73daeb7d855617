#include "durit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "kernels.hpp"

namespace durit {

// ---- Tensor ------------------------------------------------------------------

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) {
            os << 'x';
        }
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t s : shape) {
        n *= s;
    }
    return n;
}

void check_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > 2) {
        throw std::invalid_argument("tensor: rank must be 1 or 2, got " + shape_string(shape));
    }
    for (std::size_t s : shape) {
        if (s == 0) {
            throw std::invalid_argument("tensor: zero-sized dimension in " + shape_string(shape));
        }
    }
}

}  // namespace

Tensor::Tensor(Shape s, std::vector<double> d, bool rg)
    : shape{std::move(s)}, data{std::move(d)}, requires_grad{rg} {
    check_shape(shape);
    if (shape_size(shape) != data.size()) {
        throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_string(shape));
    }
}

Tensor Tensor::zeros(Shape s, bool rg) {
    const std::size_t n = shape_size(s);
    return Tensor{std::move(s), std::vector<double>(n, 0.0), rg};
}

Tensor Tensor::scalar(double v) { return Tensor{{1}, {v}}; }

Tensor Tensor::vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor{{n}, std::move(v)};
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor{{rows, cols}, std::move(v)};
}

std::size_t Tensor::rows() const noexcept { return shape.size() == 2 ? shape[0] : 1; }

std::size_t Tensor::cols() const noexcept { return shape.empty() ? 0 : shape.back(); }

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::constant: return "constant";
        case OpKind::parameter: return "parameter";
        case OpKind::detach: return "detach";
        case OpKind::matmul: return "matmul";
        case OpKind::transpose: return "transpose";
        case OpKind::reshape: return "reshape";
        case OpKind::slice_rows: return "slice_rows";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::relu: return "relu";
        case OpKind::exp: return "exp";
        case OpKind::clamp: return "clamp";
        case OpKind::minimum: return "minimum";
        case OpKind::embedding_lookup: return "embedding_lookup";
        case OpKind::layer_norm: return "layer_norm";
        case OpKind::concat: return "concat";
        case OpKind::mean_pool: return "mean_pool";
        case OpKind::sum: return "sum";
        case OpKind::mean: return "mean";
        case OpKind::softmax: return "softmax";
        case OpKind::log_softmax: return "log_softmax";
        case OpKind::gather: return "gather";
        case OpKind::cross_entropy: return "cross_entropy";
        case OpKind::kl_divergence: return "kl_divergence";
        case OpKind::causal_attention: return "causal_attention";
        case OpKind::l2_normalize: return "l2_normalize";
    }
    return "unknown";
}

// ---- Var / Graph ---------------------------------------------------------------

const Tensor& Var::value() const { return graph_->value_of(index_); }

double Var::item() const {
    const Tensor& t = value();
    if (t.size() != 1) {
        throw std::invalid_argument("item: tensor of shape " + shape_string(t.shape) +
                                    " is not a scalar");
    }
    return t.data[0];
}

const std::vector<double>& Var::grad() const {
    const Graph::Node& n = graph_->node(index_);
    return n.bound != nullptr ? n.bound->grad : n.grad;
}

bool Var::requires_grad() const { return graph_->node(index_).requires_grad; }

const Tensor& Graph::value_of(std::size_t i) const {
    const Node& n = nodes_[i];
    return n.bound != nullptr ? *n.bound : n.value;
}

Var Graph::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
}

Var Graph::constant(Tensor t) {
    Node n;
    n.kind = OpKind::constant;
    t.requires_grad = false;
    n.value = std::move(t);
    return push(std::move(n));
}

Var Graph::parameter(Tensor& p) {
    check_shape(p.shape);
    Node n;
    n.kind = OpKind::parameter;
    n.bound = &p;
    n.requires_grad = p.requires_grad;
    return push(std::move(n));
}

std::vector<double>& Graph::grad_buffer(std::size_t i) {
    Node& n = nodes_[i];
    if (n.bound != nullptr) {
        if (n.bound->grad.size() != n.bound->data.size()) {
            n.bound->grad.assign(n.bound->data.size(), 0.0);
        }
        return n.bound->grad;
    }
    if (n.grad.size() != n.value.data.size()) {
        n.grad.assign(n.value.data.size(), 0.0);
    }
    return n.grad;
}

void Graph::backward(Var root) {
    if (root.graph() != this) {
        throw std::invalid_argument("backward: root belongs to a different graph");
    }
    if (value_of(root.index()).size() != 1) {
        throw std::invalid_argument("backward: root must be scalar, got shape " +
                                    shape_string(value_of(root.index()).shape));
    }
    for (Node& n : nodes_) {
        n.grad.clear();
    }
    if (!nodes_[root.index()].requires_grad) {
        return;
    }
    grad_buffer(root.index())[0] += 1.0;
    for (std::size_t i = root.index() + 1; i-- > 0;) {
        const Node& n = nodes_[i];
        if (!n.requires_grad || n.bound != nullptr || n.grad.empty()) {
            continue;
        }
        propagate(i);
    }
}

namespace {

Graph& graph_of(Var a, const char* op) {
    if (!a.valid()) {
        throw std::invalid_argument(std::string(op) + ": invalid variable");
    }
    return *a.graph();
}

Graph& graph_of(Var a, Var b, const char* op) {
    Graph& g = graph_of(a, op);
    if (b.graph() != &g) {
        throw std::invalid_argument(std::string(op) + ": operands belong to different graphs");
    }
    return g;
}

Graph::Node make_node(Graph& g, OpKind kind, std::vector<std::size_t> parents, Tensor value) {
    Graph::Node n;
    n.kind = kind;
    n.requires_grad = false;
    for (std::size_t p : parents) {
        n.requires_grad = n.requires_grad || g.node(p).requires_grad;
    }
    n.parents = std::move(parents);
    n.value = std::move(value);
    return n;
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                                shape_string(b));
}

[[noreturn]] void shape_error(const char* op, const Shape& a) {
    throw std::invalid_argument(std::string(op) + ": unsupported shape " + shape_string(a));
}

}  // namespace

Var matmul(Var a, Var b) {
    Graph& g = graph_of(a, b, "matmul");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
        shape_error("matmul", av.shape, bv.shape);
    }
    const std::size_t m = av.rows();
    const std::size_t k = av.cols();
    const std::size_t n = bv.cols();
    Tensor out = Tensor::zeros({m, n});
    kernels::matmul_acc(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
    return g.push(make_node(g, OpKind::matmul, {a.index(), b.index()}, std::move(out)));
}

Var transpose(Var a) {
    Graph& g = graph_of(a, "transpose");
    const Tensor& av = a.value();
    if (av.rank() != 2) {
        shape_error("transpose", av.shape);
    }
    const std::size_t m = av.rows();
    const std::size_t n = av.cols();
    Tensor out = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.data[j * m + i] = av.data[i * n + j];
        }
    }
    return g.push(make_node(g, OpKind::transpose, {a.index()}, std::move(out)));
}

Var reshape(Var a, Shape shape) {
    Graph& g = graph_of(a, "reshape");
    const Tensor& av = a.value();
    check_shape(shape);
    if (shape_size(shape) != av.size()) {
        shape_error("reshape", av.shape, shape);
    }
    Tensor out{std::move(shape), av.data};
    return g.push(make_node(g, OpKind::reshape, {a.index()}, std::move(out)));
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    Graph& g = graph_of(a, "slice_rows");
    const Tensor& av = a.value();
    if (av.rank() != 2 || begin >= end || end > av.rows()) {
        throw std::invalid_argument("slice_rows: range [" + std::to_string(begin) + ", " +
                                    std::to_string(end) + ") invalid for shape " +
                                    shape_string(av.shape));
    }
    const std::size_t c = av.cols();
    Tensor out{{end - begin, c},
               std::vector<double>(av.data.begin() + static_cast<std::ptrdiff_t>(begin * c),
                                   av.data.begin() + static_cast<std::ptrdiff_t>(end * c))};
    Graph::Node n = make_node(g, OpKind::slice_rows, {a.index()}, std::move(out));
    n.n = begin;
    return g.push(std::move(n));
}

namespace {

// 0 = same shape, 1 = b broadcast as a row over a's rows.
int broadcast_mode(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape == b.shape) {
        return 0;
    }
    if (b.size() == a.cols() && (b.rank() == 1 || b.rows() == 1) && a.rank() == 2) {
        return 1;
    }
    shape_error(op, a.shape, b.shape);
}

Var add_sub(Var a, Var b, double sign, OpKind kind, const char* name) {
    Graph& g = graph_of(a, b, name);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const int mode = broadcast_mode(av, bv, name);
    Tensor out{av.shape, av.data};
    if (mode == 0) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            out.data[i] += sign * bv.data[i];
        }
    } else {
        const std::size_t c = av.cols();
        for (std::size_t r = 0; r < av.rows(); ++r) {
            for (std::size_t j = 0; j < c; ++j) {
                out.data[r * c + j] += sign * bv.data[j];
            }
        }
    }
    Graph::Node n = make_node(g, kind, {a.index(), b.index()}, std::move(out));
    n.n = static_cast<std::size_t>(mode);
    return g.push(std::move(n));
}

}  // namespace

Var add(Var a, Var b) { return add_sub(a, b, 1.0, OpKind::add, "add"); }

Var sub(Var a, Var b) { return add_sub(a, b, -1.0, OpKind::sub, "sub"); }

Var mul(Var a, Var b) {
    Graph& g = graph_of(a, b, "mul");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.shape != bv.shape) {
        shape_error("mul", av.shape, bv.shape);
    }
    Tensor out{av.shape, av.data};
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] *= bv.data[i];
    }
    return g.push(make_node(g, OpKind::mul, {a.index(), b.index()}, std::move(out)));
}

Var scale(Var a, double c) {
    Graph& g = graph_of(a, "scale");
    const Tensor& av = a.value();
    Tensor out{av.shape, av.data};
    for (double& x : out.data) {
        x *= c;
    }
    Graph::Node n = make_node(g, OpKind::scale, {a.index()}, std::move(out));
    n.a = c;
    return g.push(std::move(n));
}

Var relu(Var a) {
    Graph& g = graph_of(a, "relu");
    const Tensor& av = a.value();
    Tensor out{av.shape, av.data};
    for (double& x : out.data) {
        x = x > 0.0 ? x : 0.0;
    }
    return g.push(make_node(g, OpKind::relu, {a.index()}, std::move(out)));
}

Var exp(Var a) {
    Graph& g = graph_of(a, "exp");
    const Tensor& av = a.value();
    Tensor out{av.shape, av.data};
    for (double& x : out.data) {
        x = std::exp(x);
    }
    return g.push(make_node(g, OpKind::exp, {a.index()}, std::move(out)));
}

Var clamp(Var a, double lo, double hi) {
    Graph& g = graph_of(a, "clamp");
    if (!(lo <= hi)) {
        throw std::invalid_argument("clamp: lo must not exceed hi");
    }
    const Tensor& av = a.value();
    Tensor out{av.shape, av.data};
    for (double& x : out.data) {
        x = std::clamp(x, lo, hi);
    }
    Graph::Node n = make_node(g, OpKind::clamp, {a.index()}, std::move(out));
    n.a = lo;
    n.b = hi;
    return g.push(std::move(n));
}

Var minimum(Var a, Var b) {
    Graph& g = graph_of(a, b, "minimum");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.shape != bv.shape) {
        shape_error("minimum", av.shape, bv.shape);
    }
    Tensor out{av.shape, av.data};
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] = std::min(av.data[i], bv.data[i]);
    }
    return g.push(make_node(g, OpKind::minimum, {a.index(), b.index()}, std::move(out)));
}

Var embedding_lookup(Var table, std::span<const int> ids) {
    Graph& g = graph_of(table, "embedding_lookup");
    const Tensor& tv = table.value();
    if (tv.rank() != 2 || ids.empty()) {
        throw std::invalid_argument("embedding_lookup: need a rank-2 table and nonempty ids, got " +
                                    shape_string(tv.shape));
    }
    const std::size_t d = tv.cols();
    Tensor out = Tensor::zeros({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= tv.rows()) {
            throw std::invalid_argument("embedding_lookup: id " + std::to_string(id) +
                                        " out of range for table " + shape_string(tv.shape));
        }
        std::copy_n(tv.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(id) * d),
                    d, out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    Graph::Node n = make_node(g, OpKind::embedding_lookup, {table.index()}, std::move(out));
    n.indices.assign(ids.begin(), ids.end());
    return g.push(std::move(n));
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    Graph& g = graph_of(x, gain, "layer_norm");
    graph_of(x, bias, "layer_norm");
    const Tensor& xv = x.value();
    const Tensor& gv = gain.value();
    const Tensor& bv = bias.value();
    const std::size_t d = xv.cols();
    if (gv.size() != d || bv.size() != d) {
        shape_error("layer_norm", xv.shape, gv.shape);
    }
    const std::size_t rows = xv.rows();
    Tensor out = Tensor::zeros(xv.shape);
    std::vector<double> cache(2 * rows);
    for (std::size_t r = 0; r < rows; ++r) {
        kernels::layer_norm_row(xv.data.data() + r * d, gv.data.data(), bv.data.data(),
                                out.data.data() + r * d, d, eps, cache[2 * r], cache[2 * r + 1]);
    }
    Graph::Node n =
        make_node(g, OpKind::layer_norm, {x.index(), gain.index(), bias.index()}, std::move(out));
    n.cache = std::move(cache);
    return g.push(std::move(n));
}

Var concat(std::span<const Var> parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat: no inputs");
    }
    Graph& g = graph_of(parts[0], "concat");
    const std::size_t c = parts[0].value().cols();
    std::size_t rows = 0;
    std::vector<std::size_t> parents;
    for (const Var& p : parts) {
        graph_of(parts[0], p, "concat");
        const Tensor& pv = p.value();
        if (pv.cols() != c) {
            shape_error("concat", parts[0].value().shape, pv.shape);
        }
        rows += pv.rows();
        parents.push_back(p.index());
    }
    Tensor out = Tensor::zeros({rows, c});
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Tensor& pv = p.value();
        std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += pv.size();
    }
    return g.push(make_node(g, OpKind::concat, std::move(parents), std::move(out)));
}

Var mean_pool(Var x) {
    Graph& g = graph_of(x, "mean_pool");
    const Tensor& xv = x.value();
    const std::size_t rows = xv.rows();
    const std::size_t d = xv.cols();
    Tensor out = Tensor::zeros({1, d});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            out.data[j] += xv.data[r * d + j];
        }
    }
    for (double& v : out.data) {
        v /= static_cast<double>(rows);
    }
    return g.push(make_node(g, OpKind::mean_pool, {x.index()}, std::move(out)));
}

Var sum(Var x) {
    Graph& g = graph_of(x, "sum");
    double s = 0.0;
    for (double v : x.value().data) {
        s += v;
    }
    return g.push(make_node(g, OpKind::sum, {x.index()}, Tensor::scalar(s)));
}

Var mean(Var x) {
    Graph& g = graph_of(x, "mean");
    double s = 0.0;
    for (double v : x.value().data) {
        s += v;
    }
    s /= static_cast<double>(x.value().size());
    return g.push(make_node(g, OpKind::mean, {x.index()}, Tensor::scalar(s)));
}

Var softmax_with_temperature(Var logits, double tau) {
    Graph& g = graph_of(logits, "softmax_with_temperature");
    if (!(tau > 0.0)) {
        throw std::invalid_argument("softmax_with_temperature: temperature must be positive");
    }
    const Tensor& xv = logits.value();
    Tensor out = Tensor::zeros(xv.shape);
    const std::size_t c = xv.cols();
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        kernels::softmax_row(xv.data.data() + r * c, c, tau, out.data.data() + r * c);
    }
    Graph::Node n = make_node(g, OpKind::softmax, {logits.index()}, std::move(out));
    n.a = tau;
    return g.push(std::move(n));
}

Var log_softmax(Var logits, double tau) {
    Graph& g = graph_of(logits, "log_softmax");
    if (!(tau > 0.0)) {
        throw std::invalid_argument("log_softmax: temperature must be positive");
    }
    const Tensor& xv = logits.value();
    Tensor out = Tensor::zeros(xv.shape);
    const std::size_t c = xv.cols();
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        const double* x = xv.data.data() + r * c;
        const double lse = kernels::logsumexp_row(x, c, tau);
        for (std::size_t j = 0; j < c; ++j) {
            out.data[r * c + j] = x[j] / tau - lse;
        }
    }
    Graph::Node n = make_node(g, OpKind::log_softmax, {logits.index()}, std::move(out));
    n.a = tau;
    return g.push(std::move(n));
}

Var gather(Var x, std::span<const int> cols) {
    Graph& g = graph_of(x, "gather");
    const Tensor& xv = x.value();
    if (cols.size() != xv.rows()) {
        throw std::invalid_argument("gather: " + std::to_string(cols.size()) +
                                    " indices for shape " + shape_string(xv.shape));
    }
    const std::size_t c = xv.cols();
    Tensor out = Tensor::zeros({cols.size()});
    for (std::size_t r = 0; r < cols.size(); ++r) {
        if (cols[r] < 0 || static_cast<std::size_t>(cols[r]) >= c) {
            throw std::invalid_argument("gather: index " + std::to_string(cols[r]) +
                                        " out of range for shape " + shape_string(xv.shape));
        }
        out.data[r] = xv.data[r * c + static_cast<std::size_t>(cols[r])];
    }
    Graph::Node n = make_node(g, OpKind::gather, {x.index()}, std::move(out));
    n.indices.assign(cols.begin(), cols.end());
    return g.push(std::move(n));
}

Var cross_entropy(Var logits, std::span<const int> targets) {
    Graph& g = graph_of(logits, "cross_entropy");
    const Tensor& xv = logits.value();
    const std::size_t rows = xv.rows();
    const std::size_t c = xv.cols();
    if (targets.size() != rows) {
        throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                    " targets for logits " + shape_string(xv.shape));
    }
    std::vector<double> probs(rows * c);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const int t = targets[r];
        if (t < 0 || static_cast<std::size_t>(t) >= c) {
            throw std::invalid_argument("cross_entropy: target " + std::to_string(t) +
                                        " out of range for " + std::to_string(c) + " classes");
        }
        const double* x = xv.data.data() + r * c;
        kernels::softmax_row(x, c, 1.0, probs.data() + r * c);
        // lse - x[t] cancels badly once the row saturates; split off the max term
        // so the common case (target is the argmax) keeps full relative precision.
        const std::size_t k = static_cast<std::size_t>(std::max_element(x, x + c) - x);
        double rest = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            if (j != k) {
                rest += std::exp(x[j] - x[k]);
            }
        }
        total += (x[k] - x[t]) + std::log1p(rest);
    }
    Graph::Node n = make_node(g, OpKind::cross_entropy, {logits.index()},
                              Tensor::scalar(total / static_cast<double>(rows)));
    n.indices.assign(targets.begin(), targets.end());
    n.cache = std::move(probs);
    return g.push(std::move(n));
}

Var cross_entropy(Var logits, int target) {
    const int t[1] = {target};
    return cross_entropy(logits, std::span<const int>(t, 1));
}

Var kl_divergence(Var p_teacher, Var p_student) {
    Graph& g = graph_of(p_teacher, p_student, "kl_divergence");
    const Tensor& pt = p_teacher.value();
    const Tensor& ps = p_student.value();
    if (pt.size() != ps.size() || pt.cols() != ps.cols()) {
        shape_error("kl_divergence", pt.shape, ps.shape);
    }
    const std::size_t rows = pt.rows();
    double total = 0.0;
    for (std::size_t i = 0; i < pt.size(); ++i) {
        const double t = pt.data[i];
        if (t > 0.0) {
            total += t * (std::log(t) - std::log(std::max(ps.data[i], kProbFloor)));
        }
    }
    Graph::Node n = make_node(g, OpKind::kl_divergence, {p_teacher.index(), p_student.index()},
                              Tensor::scalar(total / static_cast<double>(rows)));
    n.requires_grad = g.node(p_student.index()).requires_grad;
    return g.push(std::move(n));
}

Var causal_attention(Var q, Var k, Var v, std::size_t heads) {
    Graph& g = graph_of(q, k, "causal_attention");
    graph_of(q, v, "causal_attention");
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    if (qv.shape != kv.shape || qv.shape != vv.shape || qv.rank() != 2 || heads == 0 ||
        qv.cols() % heads != 0) {
        throw std::invalid_argument("causal_attention: incompatible shapes " +
                                    shape_string(qv.shape) + ", " + shape_string(kv.shape) + ", " +
                                    shape_string(vv.shape) + " with " + std::to_string(heads) +
                                    " heads");
    }
    const std::size_t len = qv.rows();
    const std::size_t d = qv.cols();
    Tensor out = Tensor::zeros({len, d});
    std::vector<double> probs(len * heads * len, 0.0);
    for (std::size_t i = 0; i < len; ++i) {
        kernels::attention_row(qv.data.data() + i * d, kv.data.data(), vv.data.data(), i + 1, d,
                               heads, out.data.data() + i * d, probs.data() + i * heads * len);
    }
    Graph::Node n =
        make_node(g, OpKind::causal_attention, {q.index(), k.index(), v.index()}, std::move(out));
    n.cache = std::move(probs);
    n.n = heads;
    return g.push(std::move(n));
}

Var l2_normalize(Var x) {
    Graph& g = graph_of(x, "l2_normalize");
    const Tensor& xv = x.value();
    const std::size_t c = xv.cols();
    Tensor out{xv.shape, xv.data};
    std::vector<double> norms(xv.rows());
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            s += xv.data[r * c + j] * xv.data[r * c + j];
        }
        const double nrm = std::max(std::sqrt(s), 1e-12);
        norms[r] = nrm;
        for (std::size_t j = 0; j < c; ++j) {
            out.data[r * c + j] /= nrm;
        }
    }
    Graph::Node n = make_node(g, OpKind::l2_normalize, {x.index()}, std::move(out));
    n.cache = std::move(norms);
    return g.push(std::move(n));
}

Var detach(Var x) {
    Graph& g = graph_of(x, "detach");
    Graph::Node n;
    n.kind = OpKind::detach;
    n.value = x.value();
    n.value.grad.clear();
    n.value.requires_grad = false;
    n.requires_grad = false;
    return g.push(std::move(n));
}

// ---- backward rules -------------------------------------------------------------

void Graph::propagate(std::size_t i) {
    // grad_buffer() only touches parents (lower indices) and the node vector
    // never reallocates during backward, so these references stay valid.
    const std::vector<double>& gy = nodes_[i].grad;
    const Node& n = nodes_[i];
    auto needs = [&](std::size_t p) { return nodes_[p].requires_grad; };

    switch (n.kind) {
        case OpKind::constant:
        case OpKind::parameter:
        case OpKind::detach:
            return;

        case OpKind::matmul: {
            const Tensor& a = value_of(n.parents[0]);
            const Tensor& b = value_of(n.parents[1]);
            const std::size_t m = a.rows();
            const std::size_t k = a.cols();
            const std::size_t c = b.cols();
            if (needs(n.parents[0])) {
                std::vector<double>& ga = grad_buffer(n.parents[0]);
                for (std::size_t r = 0; r < m; ++r) {
                    const double* gr = gy.data() + r * c;
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const double* br = b.data.data() + kk * c;
                        double s = 0.0;
                        for (std::size_t j = 0; j < c; ++j) {
                            s += gr[j] * br[j];
                        }
                        ga[r * k + kk] += s;
                    }
                }
            }
            if (needs(n.parents[1])) {
                std::vector<double>& gb = grad_buffer(n.parents[1]);
                for (std::size_t r = 0; r < m; ++r) {
                    const double* gr = gy.data() + r * c;
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const double av = a.data[r * k + kk];
                        if (av == 0.0) {
                            continue;
                        }
                        double* gbr = gb.data() + kk * c;
                        for (std::size_t j = 0; j < c; ++j) {
                            gbr[j] += av * gr[j];
                        }
                    }
                }
            }
            return;
        }

        case OpKind::transpose: {
            if (!needs(n.parents[0])) {
                return;
            }
            const std::size_t rows = n.value.rows();  // = input cols
            const std::size_t cols = n.value.cols();  // = input rows
            std::vector<double>& ga = grad_buffer(n.parents[0]);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    ga[c * rows + r] += gy[r * cols + c];
                }
            }
            return;
        }

        case OpKind::reshape: {
            if (!needs(n.parents[0])) {
                return;
            }
            std::vector<double>& ga = grad_buffer(n.parents[0]);
            for (std::size_t j = 0; j < gy.size(); ++j) {
                ga[j] += gy[j];
            }
            return;
        }

        case OpKind::slice_rows: {
            if (!needs(n.parents[0])) {
                return;
            }
            std::vector<double>& ga = grad_buffer(n.parents[0]);
            const std::size_t off = n.n * n.value.cols();
            for (std::size_t j = 0; j < gy.size(); ++j) {
                ga[off + j] += gy[j];
            }
            return;
        }

        case OpKind::add:
        case OpKind::sub: {
            const double sign = n.kind == OpKind::add ? 1.0 : -1.0;
            if (needs(n.parents[0])) {
                std::vector<double>& ga = grad_buffer(n.parents[0]);
                for (std::size_t j = 0; j < gy.size(); ++j) {
                    ga[j] += gy[j];
                }
            }
            if (needs(n.parents[1])) {
                std::vector<double>& gb = grad_buffer(n.parents[1]);
                if (n.n == 0) {
                    for (std::size_t j = 0; j < gy.size(); ++j) {
                        gb[j] += sign * gy[j];
                    }
                } else {
                    const std::size_t c = n.value.cols();
                    for (std::size_t r = 0; r < n.value.rows(); ++r) {
                        for (std::size_t j = 0; j < c; ++j) {
                            gb[j] += sign * gy[r * c + j];
                        }
                    }
                }
            }
            return;
        }

        case OpKind::mul: {
            const Tensor& a = value_of(n.parents[0]);
            const Tensor& b = value_of(n.parents[1]);
            if (needs(n.parents[0])) {
                std::vector<double>& ga = grad_buffer(n.parents[0]);
                for (std::size_t j = 0; j < gy.size(); ++j) {
                    ga[j] += gy[j] * b.data[j];
                }
            }
            if (needs(n.parents[1])) {
                std::vector<double>& gb = grad_buffer(n.parents[1]);
                for (std::size_t j = 0; j < gy.size(); ++j) {
                    gb[j] += gy[j] * a.data[j];
                }
            }
            return;
        }

        case OpKind::scale: {
            if (!needs(n.parents[0])) {
                return;
            }
            std::vector<double>& ga = grad_buffer(n.parents[0]);
            for (std::size_t j = 0; j < gy.size(); ++j) {
                ga[j] += n.a * gy[j];
            }
            return;
        }

        case OpKind::relu: {
            if (!needs(n.parents[0])) {
                return;
            }
            std::vector<double>& ga = grad_buffer(n.parents[0]);
            for (std::size_t j = 0; j < gy.size(); ++j) {
                if (n.value.data[j] > 0.0) {
                    ga[j] += gy[j];
                }
            }
            return;
        }

        case OpKind::exp: {
            if (!needs(n.parents[0])) {
                return;
            }
            std::vector<double>& ga = grad_buffer(n.parents[0]);
            for (std::size_t j = 0; j < gy.size(); ++j) {
                ga[j] += gy[j] * n.value.data[j];
            }
            return;
        }

        case OpKind::clamp: {
            if (!needs(n.parents[0])) {
                return;
            }
            const Tensor& a = value_of(n.parents[0]);
            std::vector<double>& ga = grad_buffer(n.parents[0]);
            for (std::size_t j = 0; j < gy.size(); ++j) {
                if (a.data[j] >= n.a && a.data[j] <= n.b) {
                    ga[j] += gy[j];
                }
            }
            return;
        }

        case OpKind::minimum: {
            const Tensor& a = value_of(n.parents[0]);
            const Tensor& b = value_of(n.parents[1]);
            const bool na = needs(n.parents[0]);
            const bool nb = needs(n.parents[1]);
            for (std::size_t j = 0; j < gy.size(); ++j) {
                if (a.data[j] <= b.data[j]) {
                    if (na) {
                        grad_buffer(n.parents[0])[j] += gy[j];
                    }
                } else if (nb) {
                    grad_buffer(n.parents[1])[j] += gy[j];
                }
            }
            return;
        }

        case OpKind::embedding_lookup: {
            if (!needs(n.parents[0])) {
                return;
            }
            std::vector<double>& gt = grad_buffer(n.parents[0]);
            const std::size_t d = n.value.cols();
            for (std::size_t r = 0; r < n.indices.size(); ++r) {
                double* dst = gt.data() + static_cast<std::size_t>(n.indices[r]) * d;
                const double* src = gy.data() + r * d;
                for (std::size_t j = 0; j < d; ++j) {
                    dst[j] += src[j];
                }
            }
            return;
        }

        case OpKind::layer_norm: {
            const Tensor& x = value_of(n.parents[0]);
            const Tensor& gain = value_of(n.parents[1]);
            const std::size_t d = x.cols();
            const std::size_t rows = x.rows();
            const bool nx = needs(n.parents[0]);
            const bool ng = needs(n.parents[1]);
            const bool nb = needs(n.parents[2]);
            std::vector<double> xhat(d);
            std::vector<double> dxhat(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const double mu = n.cache[2 * r];
                const double rstd = n.cache[2 * r + 1];
                const double* xr = x.data.data() + r * d;
                const double* gr = gy.data() + r * d;
                double mean_dxhat = 0.0;
                double mean_dxhat_xhat = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    xhat[j] = (xr[j] - mu) * rstd;
                    dxhat[j] = gr[j] * gain.data[j];
                    mean_dxhat += dxhat[j];
                    mean_dxhat_xhat += dxhat[j] * xhat[j];
                }
                mean_dxhat /= static_cast<double>(d);
                mean_dxhat_xhat /= static_cast<double>(d);
                if (ng) {
                    std::vector<double>& gg = grad_buffer(n.parents[1]);
                    for (std::size_t j = 0; j < d; ++j) {
                        gg[j] += gr[j] * xhat[j];
                    }
                }
                if (nb) {
                    std::vector<double>& gb = grad_buffer(n.parents[2]);
                    for (std::size_t j = 0; j < d; ++j) {
                        gb[j] += gr[j];
                    }
                }
                if (nx) {
                    std::vector<double>& gx = grad_buffer(n.parents[0]);
                    for (std::size_t j = 0; j < d; ++j) {
                        gx[r * d + j] += rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
            }
            return;
        }

        case OpKind::concat: {
            std::size_t off = 0;
            for (std::size_t p : n.parents) {
                const std::size_t sz = value_of(p).size();
                if (needs(p)) {
                    std::vector<double>& gp = grad_buffer(p);
                    for (std::size_t j = 0; j < sz; ++j) {
                        gp[j] += gy[off + j];
                    }
                }
                off += sz;
            }
            return;
        }

        case OpKind::mean_pool: {
            if (!needs(n.parents[0])) {
                return;
            }
            const Tensor& x = value_of(n.parents[0]);
            const std::size_t d = x.cols();
            const double inv = 1.0 / static_cast<double>(x.rows());
            std::vector<double>& gx = grad_buffer(n.parents[0]);
            for (std::size_t r = 0; r < x.rows(); ++r) {
                for (std::size_t j = 0; j < d; ++j) {
                    gx[r * d + j] += gy[j] * inv;
                }
            }
            return;
        }

        case OpKind::sum:
        case OpKind::mean: {
            if (!needs(n.parents[0])) {
                return;
            }
            std::vector<double>& gx = grad_buffer(n.parents[0]);
            const double s =
                n.kind == OpKind::sum ? gy[0] : gy[0] / static_cast<double>(gx.size());
            for (double& v : gx) {
                v += s;
            }
            return;
        }

        case OpKind::softmax: {
            if (!needs(n.parents[0])) {
                return;
            }
            std::vector<double>& gx = grad_buffer(n.parents[0]);
            const std::size_t c = n.value.cols();
            const double inv_tau = 1.0 / n.a;
            for (std::size_t r = 0; r < n.value.rows(); ++r) {
                const double* y = n.value.data.data() + r * c;
                const double* gr = gy.data() + r * c;
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    dot += gr[j] * y[j];
                }
                for (std::size_t j = 0; j < c; ++j) {
                    gx[r * c + j] += inv_tau * y[j] * (gr[j] - dot);
                }
            }
            return;
        }

        case OpKind::log_softmax: {
            if (!needs(n.parents[0])) {
                return;
            }
            std::vector<double>& gx = grad_buffer(n.parents[0]);
            const std::size_t c = n.value.cols();
            const double inv_tau = 1.0 / n.a;
            for (std::size_t r = 0; r < n.value.rows(); ++r) {
                const double* y = n.value.data.data() + r * c;
                const double* gr = gy.data() + r * c;
                double total = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    total += gr[j];
                }
                for (std::size_t j = 0; j < c; ++j) {
                    gx[r * c + j] += inv_tau * (gr[j] - std::exp(y[j]) * total);
                }
            }
            return;
        }

        case OpKind::gather: {
            if (!needs(n.parents[0])) {
                return;
            }
            std::vector<double>& gx = grad_buffer(n.parents[0]);
            const std::size_t c = value_of(n.parents[0]).cols();
            for (std::size_t r = 0; r < n.indices.size(); ++r) {
                gx[r * c + static_cast<std::size_t>(n.indices[r])] += gy[r];
            }
            return;
        }

        case OpKind::cross_entropy: {
            if (!needs(n.parents[0])) {
                return;
            }
            std::vector<double>& gx = grad_buffer(n.parents[0]);
            const std::size_t rows = n.indices.size();
            const std::size_t c = gx.size() / rows;
            const double s = gy[0] / static_cast<double>(rows);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < c; ++j) {
                    gx[r * c + j] += s * n.cache[r * c + j];
                }
                gx[r * c + static_cast<std::size_t>(n.indices[r])] -= s;
            }
            return;
        }

        case OpKind::kl_divergence: {
            const std::size_t ps_idx = n.parents[1];
            if (!needs(ps_idx)) {
                return;
            }
            const Tensor& pt = value_of(n.parents[0]);
            const Tensor& ps = value_of(ps_idx);
            std::vector<double>& gs = grad_buffer(ps_idx);
            const double s = gy[0] / static_cast<double>(pt.rows());
            for (std::size_t j = 0; j < pt.size(); ++j) {
                if (pt.data[j] > 0.0 && ps.data[j] > kProbFloor) {
                    gs[j] -= s * pt.data[j] / ps.data[j];
                }
            }
            return;
        }

        case OpKind::causal_attention: {
            const Tensor& q = value_of(n.parents[0]);
            const Tensor& k = value_of(n.parents[1]);
            const Tensor& v = value_of(n.parents[2]);
            const std::size_t len = q.rows();
            const std::size_t d = q.cols();
            const std::size_t heads = n.n;
            const std::size_t dh = d / heads;
            const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
            const bool nq = needs(n.parents[0]);
            const bool nk = needs(n.parents[1]);
            const bool nv = needs(n.parents[2]);
            std::vector<double> dummy;
            std::vector<double>& gq = nq ? grad_buffer(n.parents[0]) : dummy;
            std::vector<double>& gk = nk ? grad_buffer(n.parents[1]) : dummy;
            std::vector<double>& gv = nv ? grad_buffer(n.parents[2]) : dummy;
            std::vector<double> ds(len);
            for (std::size_t i = 0; i < len; ++i) {
                const std::size_t nkeys = i + 1;
                const double* go = gy.data() + i * d;
                for (std::size_t h = 0; h < heads; ++h) {
                    const double* p = n.cache.data() + i * heads * len + h * nkeys;
                    const std::size_t off = h * dh;
                    double sdp = 0.0;
                    for (std::size_t j = 0; j < nkeys; ++j) {
                        const double* vr = v.data.data() + j * d + off;
                        double dp = 0.0;
                        for (std::size_t t = 0; t < dh; ++t) {
                            dp += go[off + t] * vr[t];
                        }
                        ds[j] = dp;
                        sdp += p[j] * dp;
                    }
                    for (std::size_t j = 0; j < nkeys; ++j) {
                        const double dsj = p[j] * (ds[j] - sdp) * sc;
                        if (nv) {
                            double* gvr = gv.data() + j * d + off;
                            for (std::size_t t = 0; t < dh; ++t) {
                                gvr[t] += p[j] * go[off + t];
                            }
                        }
                        if (nq) {
                            const double* kr = k.data.data() + j * d + off;
                            double* gqr = gq.data() + i * d + off;
                            for (std::size_t t = 0; t < dh; ++t) {
                                gqr[t] += dsj * kr[t];
                            }
                        }
                        if (nk) {
                            const double* qr = q.data.data() + i * d + off;
                            double* gkr = gk.data() + j * d + off;
                            for (std::size_t t = 0; t < dh; ++t) {
                                gkr[t] += dsj * qr[t];
                            }
                        }
                    }
                }
            }
            return;
        }

        case OpKind::l2_normalize: {
            if (!needs(n.parents[0])) {
                return;
            }
            std::vector<double>& gx = grad_buffer(n.parents[0]);
            const std::size_t c = n.value.cols();
            for (std::size_t r = 0; r < n.value.rows(); ++r) {
                const double* y = n.value.data.data() + r * c;
                const double* gr = gy.data() + r * c;
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    dot += y[j] * gr[j];
                }
                const double inv = 1.0 / n.cache[r];
                for (std::size_t j = 0; j < c; ++j) {
                    gx[r * c + j] += (gr[j] - y[j] * dot) * inv;
                }
            }
            return;
        }
    }
}

// ---- optimiser -----------------------------------------------------------------

AdamW::AdamW(std::vector<Tensor*> params, AdamWConfig cfg) : params_{std::move(params)}, cfg_{cfg} {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Tensor* p : params_) {
        m_.emplace_back(p->size(), 0.0);
        v_.emplace_back(p->size(), 0.0);
    }
}

void AdamW::step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i]->grad.size() != params_[i]->data.size()) {
            throw std::logic_error("adamw: parameter " + std::to_string(i) + " has no gradient");
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = *params_[i];
        std::vector<double>& m = m_[i];
        std::vector<double>& v = v_[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double g = p.grad[j];
            p.data[j] -= cfg_.lr * cfg_.weight_decay * p.data[j];
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p.data[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

void AdamW::zero_grad() { zero_grads(params_); }

double clip_grad_norm(std::span<Tensor* const> params, double max_norm) {
    double sq = 0.0;
    for (const Tensor* p : params) {
        for (double g : p->grad) {
            sq += g * g;
        }
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (Tensor* p : params) {
            for (double& g : p->grad) {
                g *= s;
            }
        }
    }
    return norm;
}

void zero_grads(std::span<Tensor* const> params) {
    for (Tensor* p : params) {
        p->grad.assign(p->data.size(), 0.0);
    }
}

// ---- finite differences ----------------------------------------------------------

GradCheckResult finite_difference_check(const std::function<Var(Graph&)>& loss_fn,
                                        std::span<Tensor* const> params,
                                        const GradCheckOptions& opts) {
    if (opts.eps < 1e-6 || opts.eps > 1e-3) {
        throw std::invalid_argument("finite_difference_check: eps must lie in [1e-6, 1e-3]");
    }
    auto evaluate = [&]() {
        Graph g;
        return loss_fn(g).item();
    };
    const double f0 = evaluate();
    const double f1 = evaluate();
    if (f0 != f1) {
        throw std::runtime_error("finite_difference_check: loss function is not deterministic");
    }

    for (Tensor* p : params) {
        p->grad.assign(p->data.size(), 0.0);
    }
    {
        Graph g;
        Var loss = loss_fn(g);
        g.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (Tensor* p : params) {
        analytic.push_back(p->grad);
    }

    std::mt19937_64 rng{opts.seed};
    GradCheckResult result;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = *params[pi];
        std::vector<std::size_t> coords(p.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (opts.max_coords_per_param != 0 && coords.size() > opts.max_coords_per_param) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(opts.max_coords_per_param);
            std::sort(coords.begin(), coords.end());
        }
        for (std::size_t j : coords) {
            const double w = p.data[j];
            p.data[j] = w + opts.eps;
            const double fp = evaluate();
            p.data[j] = w - opts.eps;
            const double fm = evaluate();
            p.data[j] = w;
            const double numeric = (fp - fm) / (2.0 * opts.eps);
            const double a = analytic[pi][j];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
            ++result.coords_checked;
        }
    }
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        params[pi]->grad = std::move(analytic[pi]);
    }
    return result;
}

}  // namespace durit
