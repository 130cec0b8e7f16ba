// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "moemarket/autodiff.hpp"
#include "moemarket/tensor.hpp"

namespace moemarket {

struct AdamHyper {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

// Per-parameter-group moments. No weight decay.
struct AdamState {
  Tensor m;
  Tensor v;
  std::int64_t step = 0;

  AdamState() = default;
  explicit AdamState(const Tensor& like) : m(Tensor::zeros_like(like)), v(Tensor::zeros_like(like)) {}
};

// One bias-corrected Adam update. Returns false (and leaves both params and
// state untouched) when every gradient entry is zero.
bool adam_step(Tensor& params, const Tensor& grads, AdamState& state, const AdamHyper& hp);

inline bool adam_step(Parameter& p, AdamState& state, const AdamHyper& hp) {
  return adam_step(p.value, p.grad, state, hp);
}

}  // namespace moemarket
