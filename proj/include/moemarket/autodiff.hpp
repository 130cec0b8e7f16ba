// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moemarket/tensor.hpp"

namespace moemarket {

// A trainable tensor. `grad` accumulates across every tape use until zeroed.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros_like(value)) {}
  void zero_grad() { grad = Tensor::zeros_like(value); }
};

// Handle to a node on a Tape.
struct Var {
  long id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in execution order, so walking the
// tape backward is a reverse topological order. A tape built with
// record_grad == false only evaluates values.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(bool record_grad = true) : record_grad_(record_grad) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Borrows the parameter; gradients accumulate straight into `p.grad`.
  Var parameter(Parameter& p);
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);

  const Tensor& value(Var v) const;
  // Gradient buffer for v, zero-initialised on first access.
  Tensor& grad(Var v);
  bool requires_grad(Var v) const;
  bool recording() const { return record_grad_; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(root)/d(root) = 1 and replays the tape in reverse.
  void backward(Var root);

 private:
  struct Node {
    Tensor value;
    Parameter* param = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  const Node& node(Var v) const;
  Node& node(Var v);

  bool record_grad_;
  std::deque<Node> nodes_;
};

// Differentiable operations. All inputs must live on `t`.
namespace ad {

Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var sum(Tape& t, Var a);
// x[m x n] + bias[n] broadcast over rows.
Var add_bias(Tape& t, Var x, Var bias);
// tanh-approximated GELU.
Var gelu(Tape& t, Var x);
Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5);
// Rows of `table` selected by `ids`.
Var embedding(Tape& t, Var table, std::span<const std::size_t> ids);
// Multi-head causal self-attention over `batch` sequences of `seq` tokens.
// qkv is [batch*seq x 3*d] laid out as [q | k | v]; result is [batch*seq x d].
Var causal_attention(Tape& t, Var qkv, std::size_t batch, std::size_t seq, std::size_t heads);
Var gather_rows(Tape& t, Var x, std::span<const std::size_t> rows);
// Flat element gather into a rank-1 result.
Var gather_entries(Tape& t, Var x, std::span<const std::size_t> flat_index);
// x[r x n] with row i multiplied by w[i].
Var scale_rows(Tape& t, Var x, Var w);
// Builds a [rows x cols] tensor by adding each part's rows at the given row indices.
Var scatter_rows(Tape& t, std::size_t rows, std::size_t cols,
                 const std::vector<std::pair<Var, std::vector<std::size_t>>>& parts);
// Concatenates rank-1 columns [d] into a [d x n] matrix.
Var stack_columns(Tape& t, const std::vector<Var>& columns);
// For each row i, softmax restricted to the k columns selected[i*k .. i*k+k).
// Logits outside the selection receive exactly zero gradient.
Var selected_softmax(Tape& t, Var logits, std::span<const std::size_t> selected, std::size_t k);
// Mean cross-entropy over rows. Per-row losses are written to `per_row` when non-null.
Var cross_entropy_mean(Tape& t, Var logits, std::span<const std::size_t> targets,
                       std::vector<double>* per_row = nullptr);

}  // namespace ad

}  // namespace moemarket
