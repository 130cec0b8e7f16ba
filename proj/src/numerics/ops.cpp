// SPDX-License-Identifier: Apache-2.0
#include "moemarket/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

#include "moemarket/errors.hpp"

namespace moemarket {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

}  // namespace

namespace kernels {

void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
             N = static_cast<Eigen::Index>(n);
  MutMap o(out, M, N);
  if (accumulate) {
    o.noalias() += ConstMap(a, M, K) * ConstMap(b, K, N);
  } else {
    o.noalias() = ConstMap(a, M, K) * ConstMap(b, K, N);
  }
}

void gemm_tn(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
             N = static_cast<Eigen::Index>(n);
  MutMap o(out, M, N);
  if (accumulate) {
    o.noalias() += ConstMap(a, K, M).transpose() * ConstMap(b, K, N);
  } else {
    o.noalias() = ConstMap(a, K, M).transpose() * ConstMap(b, K, N);
  }
}

void gemm_nt(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
             N = static_cast<Eigen::Index>(n);
  MutMap o(out, M, N);
  if (accumulate) {
    o.noalias() += ConstMap(a, M, K) * ConstMap(b, N, K).transpose();
  } else {
    o.noalias() = ConstMap(a, M, K) * ConstMap(b, N, K).transpose();
  }
}

}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ConfigError("matmul dimension mismatch: " + a.shape_string() + " x " +
                      b.shape_string());
  }
  Tensor out({a.rows(), b.cols()});
  kernels::gemm_nn(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols(), false);
  return out;
}

void softmax_inplace(std::span<double> v) {
  if (v.empty()) throw ConfigError("softmax of an empty vector");
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : v) x /= sum;
}

Tensor softmax(const Tensor& v) {
  Tensor out = v;
  softmax_inplace(out.values());
  return out;
}

double cross_entropy(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) {
    throw ConfigError("cross_entropy target " + std::to_string(target) + " out of range for " +
                      std::to_string(logits.size()) + " classes");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double x : logits) sum += std::exp(x - mx);
  // log-sum-exp minus the target logit; clamp the rounding residue at perfect
  // prediction. NaN must pass through so divergence is detected.
  const double loss = std::log(sum) + mx - logits[target];
  return loss < 0.0 ? 0.0 : loss;
}

double cross_entropy(const Tensor& logits, std::size_t target) {
  return cross_entropy(logits.values(), target);
}

}  // namespace moemarket
