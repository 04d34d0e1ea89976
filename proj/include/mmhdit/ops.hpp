#pragma once

#include <span>
#include <vector>

#include "mmhdit/tensor.hpp"

// Differentiable tensor operations. Binary element-wise ops broadcast with
// numpy rules; every op raises DimensionError on incompatible shapes.
namespace mmh {

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <class T> Tensor<T> add_scalar(const Tensor<T>& a, T value);
template <class T> Tensor<T> silu(const Tensor<T>& a);
template <class T> Tensor<T> square(const Tensor<T>& a);

/// Sum / mean over all elements; the result has shape [].
template <class T> Tensor<T> sum(const Tensor<T>& a);
template <class T> Tensor<T> mean(const Tensor<T>& a);

/// Batched matrix product a[..., m, k] x b[..., k, n] with broadcast batch extents.
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Same buffer, new shape (numel must agree).
template <class T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);

template <class T> Tensor<T> softmax_lastdim(const Tensor<T>& x);

/// x / sqrt(mean(x^2) + eps) over the last axis.
template <class T> Tensor<T> rms_normalize(const Tensor<T>& x, T eps);

/// Concatenates along axis 0; trailing extents must agree.
template <class T> Tensor<T> concat_rows(std::span<const Tensor<T>> parts);

/// out[i] = a[index[i]] along axis 0; the backward pass scatter-adds.
template <class T> Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::int64_t> index);

/// Columns [begin, begin + count) of the last axis.
template <class T> Tensor<T> slice_last(const Tensor<T>& a, std::int64_t begin, std::int64_t count);

/// mean((a - b)^2)
template <class T> Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

template <class T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

/// Row-major GEMM, C = alpha * op(A) op(B) + beta * C (BLAS-backed).
template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha, const T* a,
          std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c, std::int64_t ldc);

}  // namespace mmh
