#pragma once

// Numeric kernels shared by the graph ops and the graph-free inference path.
// Both paths call the same out-of-line functions so a token's logits are
// bitwise identical whether computed during training or during sampling.

#include <cstddef>

namespace durit::kernels {

// C[m,n] += A[m,k] * B[k,n], row by row.
void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n);

// y = (x - mean) * rstd * gain + bias for one row; returns mean and rstd.
void layer_norm_row(const double* x, const double* gain, const double* bias, double* y,
                    std::size_t d, double eps, double& mean, double& rstd);

// One query row against n_keys cached key/value rows (stride d). Writes the
// attention output row and, if probs is non-null, heads * n_keys weights.
void attention_row(const double* q, const double* keys, const double* values,
                   std::size_t n_keys, std::size_t d, std::size_t heads, double* out,
                   double* probs);

// y = softmax(x / tau); returns log-sum-exp of x / tau.
double softmax_row(const double* x, std::size_t n, double tau, double* y);

// Log-sum-exp of x / tau without materialising the distribution.
double logsumexp_row(const double* x, std::size_t n, double tau);

}  // namespace durit::kernels
