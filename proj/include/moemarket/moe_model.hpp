// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "moemarket/adam.hpp"
#include "moemarket/autodiff.hpp"
#include "moemarket/rng.hpp"
#include "moemarket/tensor.hpp"

namespace moemarket {

inline constexpr std::size_t kSlotsPerLayer = 8;
inline constexpr std::size_t kMaxTopK = 2;

struct ModelDims {
  std::size_t vocab = 0;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t context = 128;
  std::size_t n_layers = 2;
  std::size_t top_k = 2;
  // Initial experts are this multiple of d_model wide.
  std::size_t initial_width_multiplier = 2;
  double init_std = 0.02;

  void validate() const;
};

// Weights of one expert MLP: d_model -> width -> d_model with GELU.
struct ExpertParams {
  Parameter w1, b1, w2, b2;
  std::array<AdamState, 4> adam;

  std::array<Parameter*, 4> all() { return {&w1, &b1, &w2, &b2}; }
  std::array<const Parameter*, 4> all() const { return {&w1, &b1, &w2, &b2}; }
};

struct ExpertSlot {
  std::int64_t expert_id = -1;
  std::size_t layer = 0;
  std::size_t width = 0;
  ExpertParams params;
  long birth_step = 0;
  long age_market_steps = 0;

  std::uint64_t param_hash() const;
};

// Gating matrix of one layer stored as one column per slot, so that a
// replaced slot's column can be reset and skipped by the optimizer on its own.
struct RouterState {
  std::vector<Parameter> columns;
  std::vector<AdamState> adam;

  std::size_t slots() const { return columns.size(); }
  std::uint64_t column_hash(std::size_t slot) const;
};

struct RouteResult {
  std::array<double, kSlotsPerLayer> probs{};
  std::array<std::size_t, kMaxTopK> topk{};
  std::size_t k = 0;
  double margin = 0.0;
};

// Softmax over gating logits, top-k by probability (ties to the lowest
// slot index), margin = top1 - top2 probability.
RouteResult route_from_logits(std::span<const double> logits, std::size_t k);
RouteResult route(std::span<const double> token_repr, const RouterState& router, std::size_t k);

struct RoutingRecord {
  std::size_t layer = 0;
  std::size_t token = 0;  // row index in the flattened batch
  std::size_t k = 0;
  std::array<std::size_t, kMaxTopK> selected{};
  std::array<double, kMaxTopK> gates{};
  std::array<double, kSlotsPerLayer> probs{};
  double margin = 0.0;
  double loss = 0.0;  // final per-token cross-entropy, filled after the forward pass
};

// 2 * d_model * width + width + d_model.
std::size_t expert_param_count(std::size_t width, std::size_t d_model);

ExpertSlot make_expert(std::int64_t id, std::size_t layer, std::size_t width, std::size_t d_model,
                       double init_std, long birth_step, Rng& rng);

struct MoeLayer {
  std::vector<ExpertSlot> pool;  // always kSlotsPerLayer
  RouterState router;
};

// Top-k MoE combine over the rows of x. Appends one record per row.
Var moe_layer_forward(Tape& tape, Var x, MoeLayer& layer, std::size_t layer_index, std::size_t k,
                      std::vector<RoutingRecord>& records);

// Eager convenience wrapper: evaluates the layer on a value tensor.
Tensor moe_layer_forward(const Tensor& x, MoeLayer& layer, std::size_t k,
                         std::vector<RoutingRecord>& records);

struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> inputs;   // batch_size * seq_len, row-major
  std::vector<std::size_t> targets;  // inputs shifted by one
};

struct StepResult {
  double mean_loss = 0.0;
  std::vector<double> token_losses;
  std::vector<RoutingRecord> records;
};

// Character-level transformer: embeddings, n_layers x (pre-norm attention +
// pre-norm MoE, both residual), final norm and projection.
class MoeTransformer {
 public:
  MoeTransformer(const ModelDims& dims, Rng& init_rng);

  const ModelDims& dims() const { return dims_; }
  std::vector<MoeLayer>& layers() { return layers_; }
  const std::vector<MoeLayer>& layers() const { return layers_; }
  std::int64_t next_expert_id() const { return next_id_; }

  Var forward(Tape& tape, std::span<const std::size_t> tokens, std::size_t batch, std::size_t seq,
              std::vector<RoutingRecord>* records);

  // Logits [batch*seq x vocab] without recording gradients.
  Tensor logits(std::span<const std::size_t> tokens, std::size_t batch, std::size_t seq,
                std::vector<RoutingRecord>* records = nullptr);

  // Mean cross-entropy on a batch, no update.
  double evaluate(const Batch& batch);

  // Forward, backward and one Adam update. Parameter groups whose gradient is
  // entirely zero are not touched. Throws DivergenceError on a non-finite loss.
  StepResult train_step(const Batch& batch, const AdamHyper& hp, long step = 0);

  // Puts a newborn expert into (layer, slot) and resets that router column.
  const ExpertSlot& replace_slot(std::size_t layer, std::size_t slot, std::size_t width,
                                 long birth_step, Rng& rng);

  std::vector<Parameter*> parameters();

 private:
  struct Block {
    Parameter ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b;
  };
  struct Shared {
    Parameter tok_emb, pos_emb, lnf_g, lnf_b, w_out, b_out;
  };

  std::vector<Parameter*> shared_parameters();

  ModelDims dims_;
  Shared shared_;
  std::vector<Block> blocks_;
  std::vector<MoeLayer> layers_;
  std::vector<AdamState> shared_adam_;
  std::int64_t next_id_ = 0;
};

}  // namespace moemarket
