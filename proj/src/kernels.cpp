#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace durit::kernels {

void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) {
                continue;
            }
            const double* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

void layer_norm_row(const double* x, const double* gain, const double* bias, double* y,
                    std::size_t d, double eps, double& mean, double& rstd) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        mu += x[j];
    }
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        const double c = x[j] - mu;
        var += c * c;
    }
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
        y[j] = (x[j] - mu) * r * gain[j] + bias[j];
    }
    mean = mu;
    rstd = r;
}

void attention_row(const double* q, const double* keys, const double* values,
                   std::size_t n_keys, std::size_t d, std::size_t heads, double* out,
                   double* probs) {
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    constexpr std::size_t kStack = 512;
    double stack_buf[kStack];
    std::vector<double> heap_buf;
    double* scratch = stack_buf;
    if (probs == nullptr && n_keys > kStack) {
        heap_buf.resize(n_keys);
        scratch = heap_buf.data();
    }
    for (std::size_t h = 0; h < heads; ++h) {
        double* p = probs != nullptr ? probs + h * n_keys : scratch;
        const std::size_t off = h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n_keys; ++j) {
            const double* kr = keys + j * d + off;
            double s = 0.0;
            for (std::size_t t = 0; t < dh; ++t) {
                s += q[off + t] * kr[t];
            }
            s *= inv_sqrt;
            p[j] = s;
            mx = std::max(mx, s);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n_keys; ++j) {
            p[j] = std::exp(p[j] - mx);
            z += p[j];
        }
        const double inv_z = 1.0 / z;
        for (std::size_t t = 0; t < dh; ++t) {
            out[off + t] = 0.0;
        }
        for (std::size_t j = 0; j < n_keys; ++j) {
            p[j] *= inv_z;
            const double* vr = values + j * d + off;
            const double pj = p[j];
            for (std::size_t t = 0; t < dh; ++t) {
                out[off + t] += pj * vr[t];
            }
        }
    }
}

double softmax_row(const double* x, std::size_t n, double tau, double* y) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
        mx = std::max(mx, x[j] / tau);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] / tau - mx);
        z += y[j];
    }
    const double inv_z = 1.0 / z;
    for (std::size_t j = 0; j < n; ++j) {
        y[j] *= inv_z;
    }
    return mx + std::log(z);
}

double logsumexp_row(const double* x, std::size_t n, double tau) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
        mx = std::max(mx, x[j] / tau);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        z += std::exp(x[j] / tau - mx);
    }
    return mx + std::log(z);
}

}  // namespace durit::kernels
