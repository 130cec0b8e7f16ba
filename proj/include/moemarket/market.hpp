// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moemarket/moe_model.hpp"
#include "moemarket/rng.hpp"

namespace moemarket {

enum class FitnessMode { A, B, C };

std::string to_string(FitnessMode m);
FitnessMode parse_fitness_mode(const std::string& s);

inline constexpr double kExclusivityMargin = 0.1;
inline constexpr double kQualityCap = 1e6;

struct MarketConfig {
  FitnessMode fitness_mode = FitnessMode::A;
  long grace_steps = 0;        // market evaluations; 0 disables
  long market_interval = 10;   // training steps between evaluations
  long warmup_steps = 500;
  double replacement_sigma = 1.0;
  std::vector<std::size_t> newborn_width_multipliers{1, 2, 3};  // times d_model

  void validate() const;
};

// Per-slot accumulators for one market interval.
struct ExpertStats {
  std::int64_t expert_id = -1;
  double sum_token_loss = 0.0;  // each selection contributes loss / k
  double tokens_processed = 0.0;  // each selection contributes 1 / k
  double exclusive_count = 0.0;
};

struct LayerStats {
  std::array<ExpertStats, kSlotsPerLayer> slots{};
  double total_tokens = 0.0;

  void reset(const MoeLayer& layer);
};

// Per-slot derived quantities at decision time.
struct SlotFitness {
  double quality = 0.0;
  double demand = 0.0;
  double exclusivity = 0.0;
  double flops = 0.0;
  double raw = 0.0;
  double grace = 1.0;
  double effective = 0.0;
};

// Adds one training batch's routing to the per-layer accumulators.
void accumulate(std::span<const RoutingRecord> records, std::vector<LayerStats>& stats);

// tokens / sum_token_loss, 0 for no tokens, capped at kQualityCap.
double quality(double sum_token_loss, double tokens);
double flops_cost(double params, double tokens_processed);
double fitness(FitnessMode mode, double q, double d, double e, double flops, double flops_norm);
double grace_factor(long age_market_steps, long grace_steps);

// Worst slot if its value is strictly below mean - sigma * stddev
// (population stddev over all eight); ties go to the lowest index.
std::optional<std::size_t> replacement_check(std::span<const double> effective_fitness,
                                             double replacement_sigma = 1.0);
// Same threshold over all values, but only slots marked eligible can be chosen.
std::optional<std::size_t> replacement_check(std::span<const double> effective_fitness,
                                             std::span<const bool> eligible,
                                             double replacement_sigma = 1.0);

// Mean FLOPs over slots that processed tokens; 1 when none did.
double flops_normalizer(std::span<const double> flops);

std::array<SlotFitness, kSlotsPerLayer> score_layer(const LayerStats& stats, const MoeLayer& layer,
                                                    std::size_t d_model, const MarketConfig& cfg);

// Newborns stay out of the replacement pool until their ramp completes.
bool replacement_eligible(long age_market_steps, long grace_steps);

// Recomputes a logged decision from the fitness snapshot and slot ages.
std::optional<std::size_t> replay_decision(std::span<const double> effective_fitness,
                                           std::span<const long> ages, const MarketConfig& cfg);

enum class EventKind { EvaluationKept, ExpertReplaced, ExpertSpawned, DomainShift };
std::string to_string(EventKind k);
EventKind parse_event_kind(const std::string& s);

struct MarketEvent {
  long step = 0;
  std::optional<std::size_t> layer;
  EventKind kind = EventKind::EvaluationKept;
  std::optional<std::int64_t> expert_id;
  std::optional<std::int64_t> replacement_id;
  std::optional<std::array<double, kSlotsPerLayer>> fitness;
};

struct CensusExpert {
  std::int64_t id = -1;
  std::size_t width = 0;
  long age = 0;
  // Instrumentation, not serialized.
  std::uint64_t param_hash = 0;
  std::uint64_t router_hash = 0;
  double tokens = 0.0;
};

struct CensusEntry {
  long step = 0;
  std::size_t layer = 0;
  std::vector<CensusExpert> experts;
};

// Periodic scoring, grace, replacement and spawning for every MoE layer.
class Market {
 public:
  Market(MarketConfig cfg, const MoeTransformer& model);

  const MarketConfig& config() const { return cfg_; }
  const std::vector<LayerStats>& stats() const { return stats_; }

  void accumulate(std::span<const RoutingRecord> records);

  // Call when step is a positive multiple of market_interval. Appends events
  // and a decision-time census, replaces at most one expert per layer,
  // then ages every slot (newborns included) by one and resets the interval
  // statistics.
  void evaluate(long step, MoeTransformer& model, Rng& rng, std::vector<MarketEvent>& events,
                std::vector<CensusEntry>* census = nullptr);

 private:
  MarketConfig cfg_;
  std::vector<LayerStats> stats_;
};

}  // namespace moemarket
