#pragma once

// Embedding extraction, spherical k-means for template assignment, and the
// geometric diagnostics (mean k-NN distance, PCA projection).

#include <span>
#include <string>
#include <vector>

#include "durit/corpus.hpp"
#include "durit/model.hpp"
#include "durit/rng.hpp"

namespace durit {

struct EmbeddingMatrix {
    std::size_t rows = 0;
    std::size_t dim = 0;
    std::vector<double> data;  // row-major rows x dim
    std::vector<std::string> ids;

    const double* row(std::size_t i) const { return data.data() + i * dim; }
    void append(std::string id, std::span<const double> v);
};

// Row i is the unit-norm mean-pooled hidden state of instance i's
// clustering text.
EmbeddingMatrix embed_dataset(TransformerLM& model, std::span<const ProblemInstance> instances);

// Row i is the model's mean-pooled hidden state for the given inputs.
EmbeddingMatrix embed_inputs(TransformerLM& model, const std::vector<std::vector<int>>& inputs,
                             const std::vector<std::string>& ids);

struct ClusterAssignment {
    std::vector<int> labels;
    std::vector<double> centroids;  // n x dim, unit norm
    int iterations = 0;
    std::vector<double> objective;  // per Lloyd iteration, sum of squared distances
};

// k-means++ seeding then Lloyd iterations on the unit sphere (cosine
// assignment, normalised mean centroids). Stops when no label changes or
// after max_iter iterations. Empty clusters take the point of the largest
// cluster that is farthest from its centroid.
ClusterAssignment cluster(const EmbeddingMatrix& z, int n, Rng& rng, int max_iter = 100);

// Mean over rows of the average Euclidean distance to that row's k nearest
// other rows; ties broken by row index.
double knn_mean_distance(const EmbeddingMatrix& z, int k);

struct PcaResult {
    std::size_t dims = 0;
    std::vector<double> coords;      // rows x dims
    std::vector<double> explained;   // variance ratio per component, nonincreasing
    std::vector<double> components;  // dims x dim, unit rows
    std::vector<double> mean;        // dim
};

PcaResult pca_project(std::span<const double> h, std::size_t rows, std::size_t dim,
                      std::size_t dims = 2);

}  // namespace durit
