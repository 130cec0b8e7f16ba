// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>

#include "moemarket/tensor.hpp"

namespace moemarket {

// Eager (tape-free) kernels. The autodiff layer records these with backward rules.

Tensor matmul(const Tensor& a, const Tensor& b);

// Numerically stable: subtracts the maximum before exponentiating.
Tensor softmax(const Tensor& v);
void softmax_inplace(std::span<double> v);

// -log softmax(logits)[target].
double cross_entropy(const Tensor& logits, std::size_t target);
double cross_entropy(std::span<const double> logits, std::size_t target);

namespace kernels {

// out (+)= op(a) * op(b) for row-major buffers. Dimensions are of the
// logical product: out is m x n, the reduction runs over k.
void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);
// a is stored k x m.
void gemm_tn(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);
// b is stored n x k.
void gemm_nt(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);

}  // namespace kernels

}  // namespace moemarket
