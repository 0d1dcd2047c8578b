#pragma once

#include <cstddef>

// Row-level numeric kernels shared by the taped engine and the incremental
// decoder. Every output element of matmul is accumulated from zero in
// ascending inner-index order with fused multiply-add, so computing a subset
// of rows (one decode step) gives bit-identical results to the full matrix.
namespace memlab::kernels {

/// c[n x m] = a[n x k] * b[k x m], row-major, c overwritten.
void matmul(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
            std::size_t m);

/// Dot product with the same accumulation order as one matmul element.
double dot(const double* a, const double* b, std::size_t k);

/// Numerically stable softmax over one row.
void softmax_row(const double* in, double* out, std::size_t len);

/// log(sum(exp(x))) over one row.
double log_sum_exp(const double* x, std::size_t len);

/// y = gain * (x - mean) / sqrt(var + eps) + offset. Returns 1/sqrt(var + eps)
/// and writes the normalized row (before gain/offset) to xhat when non-null.
double layer_norm_row(const double* x, const double* gain, const double* offset, double* y,
                      double* xhat, std::size_t d, double eps);

/// tanh-approximation GELU and its derivative.
double gelu(double x);
double gelu_derivative(double x);

inline constexpr double kLayerNormEps = 1e-5;

}  // namespace memlab::kernels
