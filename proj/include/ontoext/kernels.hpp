#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

// Row-major dense kernels used by the encoder. All loops run in a fixed order
// so results are bit-reproducible.
namespace ontoext::kernels {

// C[m x n] (+)= A[m x k] * B[k x n]
template <typename S>
void matmul(std::span<const S> a, std::span<const S> b, std::span<S> c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate = false) {
  if (!accumulate) std::fill(c.begin(), c.end(), S(0));
  for (std::size_t i = 0; i < m; ++i) {
    S* ci = c.data() + i * n;
    const S* ai = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = ai[p];
      if (av == S(0)) continue;
      const S* bp = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <typename S>
void matmul_nt(std::span<const S> a, std::span<const S> b, std::span<S> c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate = false) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* ai = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const S* bj = b.data() + j * k;
      S acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      if (accumulate) {
        c[i * n + j] += acc;
      } else {
        c[i * n + j] = acc;
      }
    }
  }
}

// C[m x n] (+)= A[k x m]^T * B[k x n]
template <typename S>
void matmul_tn(std::span<const S> a, std::span<const S> b, std::span<S> c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate = true) {
  if (!accumulate) std::fill(c.begin(), c.end(), S(0));
  for (std::size_t p = 0; p < k; ++p) {
    const S* ap = a.data() + p * m;
    const S* bp = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const S av = ap[i];
      if (av == S(0)) continue;
      S* ci = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// out[r] += bias for every row r.
template <typename S>
void add_row_bias(std::span<S> x, std::span<const S> bias, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) x[r * cols + j] += bias[j];
}

// grad_bias += column sums of dy.
template <typename S>
void accumulate_column_sums(std::span<const S> dy, std::span<S> grad_bias, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) grad_bias[j] += dy[r * cols + j];
}

inline constexpr double kInvSqrt2 = 0.70710678118654752440084436210485;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;
inline constexpr double kSqrt2OverPi = 0.79788456080286535587989211986876;

template <typename S>
S gelu_exact(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(kInvSqrt2)));
}

template <typename S>
S gelu_exact_grad(S x) {
  return S(0.5) * (S(1) + std::erf(x * S(kInvSqrt2))) + x * S(kInvSqrt2Pi) * std::exp(S(-0.5) * x * x);
}

template <typename S>
S gelu_tanh(S x) {
  const S inner = S(kSqrt2OverPi) * (x + S(0.044715) * x * x * x);
  return S(0.5) * x * (S(1) + std::tanh(inner));
}

template <typename S>
S gelu_tanh_grad(S x) {
  const S inner = S(kSqrt2OverPi) * (x + S(0.044715) * x * x * x);
  const S t = std::tanh(inner);
  const S dinner = S(kSqrt2OverPi) * (S(1) + S(3 * 0.044715) * x * x);
  return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * dinner;
}

// Numerically stable log(1 + exp(x)).
template <typename S>
S softplus(S x) {
  return x > S(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename S>
S sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

// Binary cross-entropy on a logit: -[y log s(z) + (1-y) log(1-s(z))].
template <typename S>
S bce_with_logit(S z, S y) {
  return softplus(z) - y * z;
}

}  // namespace ontoext::kernels
