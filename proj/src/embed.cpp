#include "durit/embed.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <Eigen/Dense>

namespace durit {

void EmbeddingMatrix::append(std::string id, std::span<const double> v) {
    if (rows == 0) {
        dim = v.size();
    } else if (v.size() != dim) {
        throw std::invalid_argument("embedding matrix: row width " + std::to_string(v.size()) +
                                    " differs from " + std::to_string(dim));
    }
    data.insert(data.end(), v.begin(), v.end());
    ids.push_back(std::move(id));
    ++rows;
}

EmbeddingMatrix embed_dataset(TransformerLM& model, std::span<const ProblemInstance> instances) {
    if (instances.empty()) {
        throw std::invalid_argument("embed_dataset: no instances");
    }
    EmbeddingMatrix z;
    for (const ProblemInstance& inst : instances) {
        const std::vector<int> text = clustering_text(inst);
        z.append(inst.id, mean_pool_hidden(model, text));
    }
    return z;
}

EmbeddingMatrix embed_inputs(TransformerLM& model, const std::vector<std::vector<int>>& inputs,
                             const std::vector<std::string>& ids) {
    if (inputs.empty() || inputs.size() != ids.size()) {
        throw std::invalid_argument("embed_inputs: inputs and ids must be nonempty and aligned");
    }
    EmbeddingMatrix z;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        z.append(ids[i], mean_pool_hidden(model, inputs[i]));
    }
    return z;
}

namespace {

double dot(const double* a, const double* b, std::size_t d) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        s += a[j] * b[j];
    }
    return s;
}

double sq_dist(const double* a, const double* b, std::size_t d) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        const double t = a[j] - b[j];
        s += t * t;
    }
    return s;
}

void normalize(double* v, std::size_t d) {
    const double n = std::sqrt(dot(v, v, d));
    if (n > 1e-12) {
        for (std::size_t j = 0; j < d; ++j) {
            v[j] /= n;
        }
    }
}

}  // namespace

ClusterAssignment cluster(const EmbeddingMatrix& z, int n, Rng& rng, int max_iter) {
    const std::size_t m = z.rows;
    const std::size_t d = z.dim;
    if (n < 1 || static_cast<std::size_t>(n) > m) {
        throw std::invalid_argument("cluster: n = " + std::to_string(n) + " invalid for " +
                                    std::to_string(m) + " points");
    }
    const auto k = static_cast<std::size_t>(n);
    ClusterAssignment out;
    out.centroids.assign(k * d, 0.0);

    // k-means++ seeding with D^2 weights.
    std::vector<char> chosen(m, 0);
    std::vector<double> d2(m, std::numeric_limits<double>::infinity());
    std::size_t first = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(m) - 1));
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t pick = first;
        if (c > 0) {
            double total = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                total += chosen[i] ? 0.0 : d2[i];
            }
            if (total > 0.0) {
                const double u = uniform01(rng) * total;
                double acc = 0.0;
                pick = m;
                std::size_t last = m;
                for (std::size_t i = 0; i < m; ++i) {
                    if (chosen[i] || d2[i] <= 0.0) {
                        continue;
                    }
                    last = i;
                    acc += d2[i];
                    if (u < acc) {
                        pick = i;
                        break;
                    }
                }
                if (pick == m) {
                    pick = last;
                }
            } else {
                pick = 0;
                while (chosen[pick]) {
                    ++pick;
                }
            }
        }
        chosen[pick] = 1;
        std::copy_n(z.row(pick), d, out.centroids.begin() + static_cast<std::ptrdiff_t>(c * d));
        normalize(out.centroids.data() + c * d, d);
        for (std::size_t i = 0; i < m; ++i) {
            d2[i] = std::min(d2[i], sq_dist(z.row(i), out.centroids.data() + c * d, d));
        }
    }

    out.labels.assign(m, -1);
    std::vector<double> sim(m, 0.0);
    for (int it = 0; it < max_iter; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < m; ++i) {
            int best = 0;
            double best_sim = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                const double s = dot(z.row(i), out.centroids.data() + c * d, d);
                if (s > best_sim) {
                    best_sim = s;
                    best = static_cast<int>(c);
                }
            }
            sim[i] = best_sim;
            if (out.labels[i] != best) {
                out.labels[i] = best;
                changed = true;
            }
        }
        // Repair empty clusters.
        std::vector<std::size_t> counts(k, 0);
        for (int l : out.labels) {
            ++counts[static_cast<std::size_t>(l)];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] != 0) {
                continue;
            }
            const auto largest = static_cast<int>(
                std::max_element(counts.begin(), counts.end()) - counts.begin());
            std::size_t far = m;
            for (std::size_t i = 0; i < m; ++i) {
                if (out.labels[i] == largest && (far == m || sim[i] < sim[far])) {
                    far = i;
                }
            }
            out.labels[far] = static_cast<int>(c);
            sim[far] = 1.0;
            --counts[static_cast<std::size_t>(largest)];
            counts[c] = 1;
            changed = true;
        }
        std::fill(out.centroids.begin(), out.centroids.end(), 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            double* cen = out.centroids.data() + static_cast<std::size_t>(out.labels[i]) * d;
            const double* r = z.row(i);
            for (std::size_t j = 0; j < d; ++j) {
                cen[j] += r[j];
            }
        }
        for (std::size_t c = 0; c < k; ++c) {
            normalize(out.centroids.data() + c * d, d);
        }
        double obj = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            obj += sq_dist(z.row(i), out.centroids.data() + static_cast<std::size_t>(out.labels[i]) * d, d);
        }
        out.objective.push_back(obj);
        out.iterations = it + 1;
        if (!changed) {
            break;
        }
    }
    return out;
}

double knn_mean_distance(const EmbeddingMatrix& z, int k) {
    const std::size_t m = z.rows;
    if (k < 1 || static_cast<std::size_t>(k) >= m) {
        throw std::invalid_argument("knn_mean_distance: k = " + std::to_string(k) +
                                    " requires k < m = " + std::to_string(m));
    }
    const auto kk = static_cast<std::size_t>(k);
    std::vector<std::pair<double, std::size_t>> dist;
    dist.reserve(m - 1);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        dist.clear();
        for (std::size_t j = 0; j < m; ++j) {
            if (j != i) {
                dist.emplace_back(std::sqrt(sq_dist(z.row(i), z.row(j), z.dim)), j);
            }
        }
        std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk), dist.end());
        double s = 0.0;
        for (std::size_t t = 0; t < kk; ++t) {
            s += dist[t].first;
        }
        total += s / static_cast<double>(kk);
    }
    return total / static_cast<double>(m);
}

PcaResult pca_project(std::span<const double> h, std::size_t rows, std::size_t dim,
                      std::size_t dims) {
    if (rows < 2) {
        throw std::invalid_argument("pca_project: need at least 2 rows, got " + std::to_string(rows));
    }
    if (h.size() != rows * dim || dims < 1 || dims > dim) {
        throw std::invalid_argument("pca_project: inconsistent sizes");
    }
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> x(h.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const Mat xc = x.rowwise() - mu;
    const Eigen::MatrixXd cov = (xc.transpose() * xc) / static_cast<double>(rows - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) {
        throw std::runtime_error("pca_project: eigendecomposition failed");
    }
    // Eigen returns ascending eigenvalues.
    const Eigen::VectorXd vals = eig.eigenvalues();
    const Eigen::MatrixXd vecs = eig.eigenvectors();
    double total = 0.0;
    for (Eigen::Index i = 0; i < vals.size(); ++i) {
        total += std::max(vals(i), 0.0);
    }
    PcaResult out;
    out.dims = dims;
    out.mean.assign(mu.data(), mu.data() + dim);
    out.components.assign(dims * dim, 0.0);
    out.explained.assign(dims, 0.0);
    for (std::size_t c = 0; c < dims; ++c) {
        const Eigen::Index col = static_cast<Eigen::Index>(dim - 1 - c);
        Eigen::VectorXd v = vecs.col(col);
        Eigen::Index arg = 0;
        for (Eigen::Index j = 1; j < v.size(); ++j) {
            if (std::abs(v(j)) > std::abs(v(arg))) {
                arg = j;
            }
        }
        if (v(arg) < 0.0) {
            v = -v;
        }
        for (std::size_t j = 0; j < dim; ++j) {
            out.components[c * dim + j] = v(static_cast<Eigen::Index>(j));
        }
        out.explained[c] = total > 0.0 ? std::max(vals(col), 0.0) / total : 0.0;
    }
    out.coords.assign(rows * dims, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t c = 0; c < dims; ++c) {
            double s = 0.0;
            for (std::size_t j = 0; j < dim; ++j) {
                s += xc(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) *
                     out.components[c * dim + j];
            }
            out.coords[i * dims + c] = s;
        }
    }
    return out;
}

}  // namespace durit
