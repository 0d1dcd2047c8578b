#include "memlab/kernels.hpp"

#include <algorithm>
#include <cmath>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace memlab::kernels {
namespace {

template <std::size_t RI, std::size_t RJ>
inline void matmul_block(const double* a, const double* b, double* c, std::size_t k,
                         std::size_t m, std::size_t i0, std::size_t j0) {
  double acc[RI][RJ] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * m + j0;
    for (std::size_t ii = 0; ii < RI; ++ii) {
      const double av = a[(i0 + ii) * k + p];
      for (std::size_t jj = 0; jj < RJ; ++jj) acc[ii][jj] = std::fma(av, brow[jj], acc[ii][jj]);
    }
  }
  for (std::size_t ii = 0; ii < RI; ++ii)
    for (std::size_t jj = 0; jj < RJ; ++jj) c[(i0 + ii) * m + j0 + jj] = acc[ii][jj];
}

#if defined(__AVX512F__)
// Same per-element arithmetic as matmul_block (fma is exactly rounded), so
// the vector and scalar paths agree bit for bit.
template <std::size_t RI>
inline void matmul_block_simd(const double* a, const double* b, double* c, std::size_t k,
                              std::size_t m, std::size_t i0, std::size_t j0) {
  __m512d acc0[RI];
  __m512d acc1[RI];
  for (std::size_t ii = 0; ii < RI; ++ii) {
    acc0[ii] = _mm512_setzero_pd();
    acc1[ii] = _mm512_setzero_pd();
  }
  for (std::size_t p = 0; p < k; ++p) {
    const __m512d b0 = _mm512_loadu_pd(b + p * m + j0);
    const __m512d b1 = _mm512_loadu_pd(b + p * m + j0 + 8);
    for (std::size_t ii = 0; ii < RI; ++ii) {
      const __m512d av = _mm512_set1_pd(a[(i0 + ii) * k + p]);
      acc0[ii] = _mm512_fmadd_pd(av, b0, acc0[ii]);
      acc1[ii] = _mm512_fmadd_pd(av, b1, acc1[ii]);
    }
  }
  for (std::size_t ii = 0; ii < RI; ++ii) {
    _mm512_storeu_pd(c + (i0 + ii) * m + j0, acc0[ii]);
    _mm512_storeu_pd(c + (i0 + ii) * m + j0 + 8, acc1[ii]);
  }
}
#endif

template <std::size_t RJ>
inline void matmul_cols(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
                        std::size_t m, std::size_t j0) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) matmul_block<4, RJ>(a, b, c, k, m, i, j0);
  for (; i < n; ++i) matmul_block<1, RJ>(a, b, c, k, m, i, j0);
}

constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;

}  // namespace

// Column panels outermost so a k x 16 slice of b stays in cache while every
// row block of a streams past it.
void matmul(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
            std::size_t m) {
  std::size_t j = 0;
#if defined(__AVX512F__)
  for (; j + 16 <= m; j += 16) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) matmul_block_simd<4>(a, b, c, k, m, i, j);
    for (; i < n; ++i) matmul_block_simd<1>(a, b, c, k, m, i, j);
  }
#else
  for (; j + 16 <= m; j += 16) matmul_cols<16>(a, b, c, n, k, m, j);
#endif
  for (; j + 4 <= m; j += 4) matmul_cols<4>(a, b, c, n, k, m, j);
  for (; j < m; ++j) matmul_cols<1>(a, b, c, n, k, m, j);
}

double dot(const double* a, const double* b, std::size_t k) {
  double acc = 0.0;
  for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[p], b[p], acc);
  return acc;
}

void softmax_row(const double* in, double* out, std::size_t len) {
  const double mx = *std::max_element(in, in + len);
  double total = 0.0;
  for (std::size_t j = 0; j < len; ++j) {
    out[j] = std::exp(in[j] - mx);
    total += out[j];
  }
  const double inv = 1.0 / total;
  for (std::size_t j = 0; j < len; ++j) out[j] *= inv;
}

double log_sum_exp(const double* x, std::size_t len) {
  const double mx = *std::max_element(x, x + len);
  double total = 0.0;
  for (std::size_t j = 0; j < len; ++j) total += std::exp(x[j] - mx);
  return mx + std::log(total);
}

double layer_norm_row(const double* x, const double* gain, const double* offset, double* y,
                      double* xhat, std::size_t d, double eps) {
  double mean = 0.0;
  for (std::size_t j = 0; j < d; ++j) mean += x[j];
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double c = x[j] - mean;
    var += c * c;
  }
  var /= static_cast<double>(d);
  const double rstd = 1.0 / std::sqrt(var + eps);
  for (std::size_t j = 0; j < d; ++j) {
    const double h = (x[j] - mean) * rstd;
    if (xhat) xhat[j] = h;
    y[j] = h * gain[j] + offset[j];
  }
  return rstd;
}

double gelu(double x) {
  const double inner = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(inner));
}

double gelu_derivative(double x) {
  const double inner = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
  const double t = std::tanh(inner);
  const double dinner = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
}

}  // namespace memlab::kernels
