// SPDX-License-Identifier: Apache-2.0
#include "moemarket/adam.hpp"

#include <cmath>

#include "moemarket/errors.hpp"

namespace moemarket {

bool adam_step(Tensor& params, const Tensor& grads, AdamState& state, const AdamHyper& hp) {
  if (!params.same_shape(grads)) {
    throw ConfigError("adam_step shape mismatch: params " + params.shape_string() + ", grads " +
                      grads.shape_string());
  }
  if (state.m.empty() && !params.empty()) state = AdamState(params);
  if (!state.m.same_shape(params) || !state.v.same_shape(params)) {
    throw ConfigError("adam_step moment shape mismatch for params " + params.shape_string());
  }
  // Dormant groups keep weights and moments bit-identical.
  if (grads.all_zero()) return false;

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hp.beta1, t);
  const double c2 = 1.0 - std::pow(hp.beta2, t);
  double* p = params.data();
  double* m = state.m.data();
  double* v = state.v.data();
  const double* g = grads.data();
  for (std::size_t i = 0, n = params.size(); i < n; ++i) {
    m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
    v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    p[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
  }
  return true;
}

}  // namespace moemarket
