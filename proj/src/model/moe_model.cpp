// SPDX-License-Identifier: Apache-2.0
#include "moemarket/moe_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moemarket/errors.hpp"
#include "moemarket/ops.hpp"

namespace moemarket {
namespace {

Tensor random_tensor(std::vector<std::size_t> shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal(stddev);
  return t;
}

void zero_grad(Parameter& p) {
  if (p.grad.same_shape(p.value)) {
    p.grad.fill(0.0);
  } else {
    p.zero_grad();
  }
}

}  // namespace

void ModelDims::validate() const {
  if (vocab == 0) throw ConfigError("vocab must be positive");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model must be a positive multiple of n_heads");
  }
  if (context == 0) throw ConfigError("context must be positive");
  if (n_layers == 0) throw ConfigError("n_layers must be positive");
  if (top_k < 1 || top_k > kMaxTopK) throw ConfigError("top_k must be 1 or 2");
  if (initial_width_multiplier == 0) throw ConfigError("initial_width_multiplier must be positive");
  if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
}

std::uint64_t ExpertSlot::param_hash() const {
  std::uint64_t h = bit_hash({});
  for (const Parameter* p : params.all()) h = bit_hash(p->value.values(), h);
  return h;
}

std::uint64_t RouterState::column_hash(std::size_t slot) const {
  return bit_hash(columns.at(slot).value.values());
}

RouteResult route_from_logits(std::span<const double> logits, std::size_t k) {
  if (logits.size() != kSlotsPerLayer) {
    throw ConfigError("router expects " + std::to_string(kSlotsPerLayer) + " logits, got " +
                      std::to_string(logits.size()));
  }
  if (k < 1 || k > kMaxTopK) throw ConfigError("top-k must be 1 or 2");
  RouteResult r;
  std::copy(logits.begin(), logits.end(), r.probs.begin());
  softmax_inplace(r.probs);
  std::array<std::size_t, kSlotsPerLayer> order{};
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return r.probs[a] > r.probs[b]; });
  r.k = k;
  for (std::size_t j = 0; j < k; ++j) r.topk[j] = order[j];
  r.margin = std::clamp(r.probs[order[0]] - r.probs[order[1]], 0.0, 1.0);
  return r;
}

RouteResult route(std::span<const double> token_repr, const RouterState& router, std::size_t k) {
  if (router.slots() != kSlotsPerLayer) throw ConfigError("router must have 8 slots");
  std::array<double, kSlotsPerLayer> logits{};
  for (std::size_t j = 0; j < kSlotsPerLayer; ++j) {
    const Tensor& col = router.columns[j].value;
    if (col.size() != token_repr.size()) throw ConfigError("router column width mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < col.size(); ++i) s += token_repr[i] * col[i];
    logits[j] = s;
  }
  return route_from_logits(logits, k);
}

std::size_t expert_param_count(std::size_t width, std::size_t d_model) {
  return 2 * d_model * width + width + d_model;
}

ExpertSlot make_expert(std::int64_t id, std::size_t layer, std::size_t width, std::size_t d_model,
                       double init_std, long birth_step, Rng& rng) {
  if (width == 0) throw ConfigError("expert width must be positive");
  ExpertSlot e;
  e.expert_id = id;
  e.layer = layer;
  e.width = width;
  e.birth_step = birth_step;
  e.age_market_steps = 0;
  e.params.w1 = Parameter("w1", random_tensor({d_model, width}, init_std, rng));
  e.params.b1 = Parameter("b1", Tensor({width}));
  e.params.w2 = Parameter("w2", random_tensor({width, d_model}, init_std, rng));
  e.params.b2 = Parameter("b2", Tensor({d_model}));
  return e;
}

Var moe_layer_forward(Tape& tape, Var x, MoeLayer& layer, std::size_t layer_index, std::size_t k,
                      std::vector<RoutingRecord>& records) {
  if (layer.pool.size() != kSlotsPerLayer || layer.router.slots() != kSlotsPerLayer) {
    throw ConfigError("MoE layer must hold exactly 8 expert slots");
  }
  const std::size_t rows = tape.value(x).rows();
  const std::size_t d = tape.value(x).cols();

  std::vector<Var> cols;
  cols.reserve(kSlotsPerLayer);
  for (Parameter& c : layer.router.columns) cols.push_back(tape.parameter(c));
  const Var gate_logits = ad::matmul(tape, x, ad::stack_columns(tape, cols));

  std::vector<std::size_t> selected(rows * k);
  std::array<std::vector<std::size_t>, kSlotsPerLayer> expert_rows;
  std::array<std::vector<std::size_t>, kSlotsPerLayer> gate_pos;
  const std::size_t first_record = records.size();
  {
    const Tensor& lv = tape.value(gate_logits);
    for (std::size_t r = 0; r < rows; ++r) {
      const RouteResult rr = route_from_logits(lv.row(r), k);
      RoutingRecord rec;
      rec.layer = layer_index;
      rec.token = r;
      rec.k = k;
      rec.probs = rr.probs;
      rec.margin = rr.margin;
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t slot = rr.topk[j];
        rec.selected[j] = slot;
        selected[r * k + j] = slot;
        expert_rows[slot].push_back(r);
        gate_pos[slot].push_back(r * k + j);
      }
      records.push_back(rec);
    }
  }
  const Var gates = ad::selected_softmax(tape, gate_logits, selected, k);
  {
    const Tensor& gv = tape.value(gates);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < k; ++j) records[first_record + r].gates[j] = gv.at(r, j);
    }
  }

  std::vector<std::pair<Var, std::vector<std::size_t>>> parts;
  for (std::size_t e = 0; e < kSlotsPerLayer; ++e) {
    if (expert_rows[e].empty()) continue;  // unrouted experts stay off the tape
    ExpertParams& p = layer.pool[e].params;
    const Var xe = ad::gather_rows(tape, x, expert_rows[e]);
    Var h = ad::add_bias(tape, ad::matmul(tape, xe, tape.parameter(p.w1)), tape.parameter(p.b1));
    h = ad::gelu(tape, h);
    const Var o = ad::add_bias(tape, ad::matmul(tape, h, tape.parameter(p.w2)), tape.parameter(p.b2));
    const Var ge = ad::gather_entries(tape, gates, gate_pos[e]);
    parts.emplace_back(ad::scale_rows(tape, o, ge), expert_rows[e]);
  }
  return ad::scatter_rows(tape, rows, d, parts);
}

Tensor moe_layer_forward(const Tensor& x, MoeLayer& layer, std::size_t k,
                         std::vector<RoutingRecord>& records) {
  Tape tape(false);
  const Var xv = tape.constant(x);
  const Var y = moe_layer_forward(tape, xv, layer, 0, k, records);
  return tape.value(y);
}

// ---------------------------------------------------------------------------

MoeTransformer::MoeTransformer(const ModelDims& dims, Rng& rng) : dims_(dims) {
  dims_.validate();
  const std::size_t d = dims_.d_model;
  const double sd = dims_.init_std;
  shared_.tok_emb = Parameter("tok_emb", random_tensor({dims_.vocab, d}, sd, rng));
  shared_.pos_emb = Parameter("pos_emb", random_tensor({dims_.context, d}, sd, rng));
  for (std::size_t l = 0; l < dims_.n_layers; ++l) {
    Block b;
    b.ln1_g = Parameter("ln1_g", Tensor({d}, 1.0));
    b.ln1_b = Parameter("ln1_b", Tensor({d}));
    b.w_qkv = Parameter("w_qkv", random_tensor({d, 3 * d}, sd, rng));
    b.b_qkv = Parameter("b_qkv", Tensor({3 * d}));
    b.w_o = Parameter("w_o", random_tensor({d, d}, sd, rng));
    b.b_o = Parameter("b_o", Tensor({d}));
    b.ln2_g = Parameter("ln2_g", Tensor({d}, 1.0));
    b.ln2_b = Parameter("ln2_b", Tensor({d}));
    blocks_.push_back(std::move(b));

    MoeLayer layer;
    for (std::size_t s = 0; s < kSlotsPerLayer; ++s) {
      layer.pool.push_back(make_expert(next_id_++, l, dims_.initial_width_multiplier * d, d, sd, 0, rng));
      layer.router.columns.emplace_back("router", random_tensor({d}, sd, rng));
      layer.router.adam.emplace_back();
    }
    layers_.push_back(std::move(layer));
  }
  shared_.lnf_g = Parameter("lnf_g", Tensor({d}, 1.0));
  shared_.lnf_b = Parameter("lnf_b", Tensor({d}));
  shared_.w_out = Parameter("w_out", random_tensor({d, dims_.vocab}, sd, rng));
  shared_.b_out = Parameter("b_out", Tensor({dims_.vocab}));
  shared_adam_.resize(shared_parameters().size());
}

std::vector<Parameter*> MoeTransformer::shared_parameters() {
  std::vector<Parameter*> out{&shared_.tok_emb, &shared_.pos_emb};
  for (Block& b : blocks_) {
    for (Parameter* p : {&b.ln1_g, &b.ln1_b, &b.w_qkv, &b.b_qkv, &b.w_o, &b.b_o, &b.ln2_g, &b.ln2_b}) {
      out.push_back(p);
    }
  }
  for (Parameter* p : {&shared_.lnf_g, &shared_.lnf_b, &shared_.w_out, &shared_.b_out}) out.push_back(p);
  return out;
}

std::vector<Parameter*> MoeTransformer::parameters() {
  std::vector<Parameter*> out = shared_parameters();
  for (MoeLayer& layer : layers_) {
    for (Parameter& c : layer.router.columns) out.push_back(&c);
    for (ExpertSlot& e : layer.pool) {
      for (Parameter* p : e.params.all()) out.push_back(p);
    }
  }
  return out;
}

Var MoeTransformer::forward(Tape& tape, std::span<const std::size_t> tokens, std::size_t batch,
                            std::size_t seq, std::vector<RoutingRecord>* records) {
  if (seq == 0 || seq > dims_.context) {
    throw ConfigError("sequence length " + std::to_string(seq) + " exceeds context " +
                      std::to_string(dims_.context));
  }
  if (tokens.size() != batch * seq) throw ConfigError("token count does not match batch shape");
  for (std::size_t tok : tokens) {
    if (tok >= dims_.vocab) {
      throw ConfigError("token " + std::to_string(tok) + " outside vocabulary of " +
                        std::to_string(dims_.vocab));
    }
  }
  std::vector<std::size_t> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % seq;

  std::vector<RoutingRecord> scratch;
  std::vector<RoutingRecord>& recs = records ? *records : scratch;

  Var h = ad::add(tape, ad::embedding(tape, tape.parameter(shared_.tok_emb), tokens),
                  ad::embedding(tape, tape.parameter(shared_.pos_emb), positions));
  for (std::size_t l = 0; l < dims_.n_layers; ++l) {
    Block& b = blocks_[l];
    const Var a = ad::layer_norm(tape, h, tape.parameter(b.ln1_g), tape.parameter(b.ln1_b));
    const Var qkv = ad::add_bias(tape, ad::matmul(tape, a, tape.parameter(b.w_qkv)), tape.parameter(b.b_qkv));
    const Var att = ad::causal_attention(tape, qkv, batch, seq, dims_.n_heads);
    h = ad::add(tape, h, ad::add_bias(tape, ad::matmul(tape, att, tape.parameter(b.w_o)), tape.parameter(b.b_o)));
    const Var m = ad::layer_norm(tape, h, tape.parameter(b.ln2_g), tape.parameter(b.ln2_b));
    h = ad::add(tape, h, moe_layer_forward(tape, m, layers_[l], l, dims_.top_k, recs));
  }
  const Var f = ad::layer_norm(tape, h, tape.parameter(shared_.lnf_g), tape.parameter(shared_.lnf_b));
  return ad::add_bias(tape, ad::matmul(tape, f, tape.parameter(shared_.w_out)), tape.parameter(shared_.b_out));
}

Tensor MoeTransformer::logits(std::span<const std::size_t> tokens, std::size_t batch, std::size_t seq,
                              std::vector<RoutingRecord>* records) {
  Tape tape(false);
  const Var out = forward(tape, tokens, batch, seq, records);
  return tape.value(out);
}

double MoeTransformer::evaluate(const Batch& batch) {
  Tape tape(false);
  const Var out = forward(tape, batch.inputs, batch.batch_size, batch.seq_len, nullptr);
  const Var loss = ad::cross_entropy_mean(tape, out, batch.targets);
  return tape.value(loss)[0];
}

StepResult MoeTransformer::train_step(const Batch& batch, const AdamHyper& hp, long step) {
  for (Parameter* p : parameters()) zero_grad(*p);
  StepResult result;
  Tape tape(true);
  const Var out = forward(tape, batch.inputs, batch.batch_size, batch.seq_len, &result.records);
  const Var loss = ad::cross_entropy_mean(tape, out, batch.targets, &result.token_losses);
  result.mean_loss = tape.value(loss)[0];
  if (!std::isfinite(result.mean_loss)) {
    throw DivergenceError("non-finite training loss at step " + std::to_string(step), step);
  }
  tape.backward(loss);

  std::vector<Parameter*> shared = shared_parameters();
  for (std::size_t i = 0; i < shared.size(); ++i) adam_step(*shared[i], shared_adam_[i], hp);
  for (MoeLayer& layer : layers_) {
    for (std::size_t s = 0; s < kSlotsPerLayer; ++s) {
      adam_step(layer.router.columns[s], layer.router.adam[s], hp);
      ExpertParams& ep = layer.pool[s].params;
      auto ps = ep.all();
      for (std::size_t i = 0; i < ps.size(); ++i) adam_step(*ps[i], ep.adam[i], hp);
    }
  }
  for (RoutingRecord& r : result.records) r.loss = result.token_losses[r.token];
  return result;
}

const ExpertSlot& MoeTransformer::replace_slot(std::size_t layer, std::size_t slot, std::size_t width,
                                               long birth_step, Rng& rng) {
  MoeLayer& l = layers_.at(layer);
  if (slot >= l.pool.size()) throw ConfigError("slot index out of range");
  const std::size_t d = dims_.d_model;
  l.pool[slot] = make_expert(next_id_++, layer, width, d, dims_.init_std, birth_step, rng);
  l.router.columns[slot] = Parameter("router", random_tensor({d}, dims_.init_std, rng));
  l.router.adam[slot] = AdamState();
  return l.pool[slot];
}

}  // namespace moemarket
