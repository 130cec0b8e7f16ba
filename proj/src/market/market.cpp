// SPDX-License-Identifier: Apache-2.0
#include "moemarket/market.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "moemarket/errors.hpp"

namespace moemarket {

std::string to_string(FitnessMode m) {
  switch (m) {
    case FitnessMode::A: return "A";
    case FitnessMode::B: return "B";
    case FitnessMode::C: return "C";
  }
  return "?";
}

FitnessMode parse_fitness_mode(const std::string& s) {
  if (s == "A") return FitnessMode::A;
  if (s == "B") return FitnessMode::B;
  if (s == "C") return FitnessMode::C;
  throw ConfigError("unknown fitness mode '" + s + "' (expected A, B or C)");
}

std::string to_string(EventKind k) {
  switch (k) {
    case EventKind::EvaluationKept: return "evaluation_kept";
    case EventKind::ExpertReplaced: return "expert_replaced";
    case EventKind::ExpertSpawned: return "expert_spawned";
    case EventKind::DomainShift: return "domain_shift";
  }
  return "?";
}

EventKind parse_event_kind(const std::string& s) {
  if (s == "evaluation_kept") return EventKind::EvaluationKept;
  if (s == "expert_replaced") return EventKind::ExpertReplaced;
  if (s == "expert_spawned") return EventKind::ExpertSpawned;
  if (s == "domain_shift") return EventKind::DomainShift;
  throw ConfigError("unknown event kind '" + s + "'");
}

void MarketConfig::validate() const {
  if (market_interval < 1) throw ConfigError("market_interval must be >= 1");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (grace_steps < 0) throw ConfigError("grace_steps must be >= 0");
  if (!(replacement_sigma >= 0.0)) throw ConfigError("replacement_sigma must be >= 0");
  if (newborn_width_multipliers.empty()) throw ConfigError("newborn_width_multipliers is empty");
  for (std::size_t m : newborn_width_multipliers) {
    if (m == 0) throw ConfigError("newborn width multiplier must be positive");
  }
}

void LayerStats::reset(const MoeLayer& layer) {
  for (std::size_t s = 0; s < kSlotsPerLayer; ++s) {
    slots[s] = ExpertStats{};
    slots[s].expert_id = layer.pool[s].expert_id;
  }
  total_tokens = 0.0;
}

void accumulate(std::span<const RoutingRecord> records, std::vector<LayerStats>& stats) {
  for (const RoutingRecord& r : records) {
    LayerStats& ls = stats.at(r.layer);
    const double w = 1.0 / static_cast<double>(r.k);
    for (std::size_t j = 0; j < r.k; ++j) {
      ExpertStats& es = ls.slots[r.selected[j]];
      es.sum_token_loss += r.loss * w;
      es.tokens_processed += w;
    }
    if (r.margin > kExclusivityMargin) ls.slots[r.selected[0]].exclusive_count += 1.0;
    ls.total_tokens += 1.0;
  }
}

double quality(double sum_token_loss, double tokens) {
  if (tokens <= 0.0) return 0.0;
  if (sum_token_loss <= 0.0) return kQualityCap;
  return std::min(kQualityCap, tokens / sum_token_loss);
}

double flops_cost(double params, double tokens_processed) { return 2.0 * params * tokens_processed; }

double fitness(FitnessMode mode, double q, double d, double e, double flops, double flops_norm) {
  switch (mode) {
    case FitnessMode::A: return q * d;
    case FitnessMode::B: return q * d / (1.0 + flops / flops_norm);
    case FitnessMode::C: return q * d * e / (1.0 + flops / flops_norm);
  }
  return 0.0;
}

double grace_factor(long age_market_steps, long grace_steps) {
  if (grace_steps <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(age_market_steps) / static_cast<double>(grace_steps));
}

bool replacement_eligible(long age_market_steps, long grace_steps) {
  return grace_factor(age_market_steps, grace_steps) >= 1.0;
}

std::optional<std::size_t> replacement_check(std::span<const double> values,
                                             std::span<const bool> eligible, double sigma_mult) {
  if (values.size() != eligible.size() || values.empty()) {
    throw ConfigError("replacement_check needs one eligibility flag per value");
  }
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  const double sigma = std::sqrt(var / n);
  if (sigma == 0.0) return std::nullopt;

  std::optional<std::size_t> worst;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!eligible[i]) continue;
    if (!worst || values[i] < values[*worst]) worst = i;
  }
  if (worst && values[*worst] < mean - sigma_mult * sigma) return worst;
  return std::nullopt;
}

std::optional<std::size_t> replacement_check(std::span<const double> values, double sigma_mult) {
  const auto flags = std::make_unique<bool[]>(values.size());
  std::fill_n(flags.get(), values.size(), true);
  return replacement_check(values, std::span<const bool>(flags.get(), values.size()), sigma_mult);
}

double flops_normalizer(std::span<const double> flops) {
  double sum = 0.0;
  std::size_t n = 0;
  for (double f : flops) {
    if (f > 0.0) {
      sum += f;
      ++n;
    }
  }
  return n == 0 ? 1.0 : sum / static_cast<double>(n);
}

std::array<SlotFitness, kSlotsPerLayer> score_layer(const LayerStats& stats, const MoeLayer& layer,
                                                    std::size_t d_model, const MarketConfig& cfg) {
  std::array<SlotFitness, kSlotsPerLayer> out{};
  std::array<double, kSlotsPerLayer> flops{};
  for (std::size_t s = 0; s < kSlotsPerLayer; ++s) {
    const ExpertStats& es = stats.slots[s];
    const double params = static_cast<double>(expert_param_count(layer.pool[s].width, d_model));
    out[s].quality = quality(es.sum_token_loss, es.tokens_processed);
    out[s].demand = stats.total_tokens > 0.0 ? es.tokens_processed / stats.total_tokens : 0.0;
    out[s].exclusivity = stats.total_tokens > 0.0 ? es.exclusive_count / stats.total_tokens : 0.0;
    out[s].flops = flops_cost(params, es.tokens_processed);
    flops[s] = out[s].flops;
  }
  const double norm = flops_normalizer(flops);
  for (std::size_t s = 0; s < kSlotsPerLayer; ++s) {
    SlotFitness& f = out[s];
    f.raw = fitness(cfg.fitness_mode, f.quality, f.demand, f.exclusivity, f.flops, norm);
    f.grace = grace_factor(layer.pool[s].age_market_steps, cfg.grace_steps);
    f.effective = f.raw * f.grace;
  }
  return out;
}

std::optional<std::size_t> replay_decision(std::span<const double> effective_fitness,
                                           std::span<const long> ages, const MarketConfig& cfg) {
  if (ages.size() != effective_fitness.size()) throw ConfigError("replay: age count mismatch");
  std::array<bool, kSlotsPerLayer> eligible{};
  for (std::size_t s = 0; s < ages.size() && s < kSlotsPerLayer; ++s) {
    eligible[s] = replacement_eligible(ages[s], cfg.grace_steps);
  }
  return replacement_check(effective_fitness, std::span<const bool>(eligible.data(), ages.size()),
                           cfg.replacement_sigma);
}

// ---------------------------------------------------------------------------

Market::Market(MarketConfig cfg, const MoeTransformer& model) : cfg_(std::move(cfg)) {
  cfg_.validate();
  stats_.resize(model.layers().size());
  for (std::size_t l = 0; l < stats_.size(); ++l) stats_[l].reset(model.layers()[l]);
}

void Market::accumulate(std::span<const RoutingRecord> records) { moemarket::accumulate(records, stats_); }

void Market::evaluate(long step, MoeTransformer& model, Rng& rng, std::vector<MarketEvent>& events,
                      std::vector<CensusEntry>* census) {
  const std::size_t d_model = model.dims().d_model;
  auto& layers = model.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    MoeLayer& layer = layers[l];
    if (census) {
      CensusEntry entry{step, l, {}};
      for (std::size_t s = 0; s < kSlotsPerLayer; ++s) {
        const ExpertSlot& e = layer.pool[s];
        entry.experts.push_back({e.expert_id, e.width, e.age_market_steps, e.param_hash(),
                                 layer.router.column_hash(s), stats_[l].slots[s].tokens_processed});
      }
      census->push_back(std::move(entry));
    }

    if (step > cfg_.warmup_steps) {
      const auto scores = score_layer(stats_[l], layer, d_model, cfg_);
      std::array<double, kSlotsPerLayer> eff{};
      std::array<long, kSlotsPerLayer> ages{};
      for (std::size_t s = 0; s < kSlotsPerLayer; ++s) {
        eff[s] = scores[s].effective;
        ages[s] = layer.pool[s].age_market_steps;
      }
      const auto victim = replay_decision(eff, ages, cfg_);
      if (victim) {
        const std::int64_t dead = layer.pool[*victim].expert_id;
        const std::size_t mult =
            cfg_.newborn_width_multipliers[rng.below(cfg_.newborn_width_multipliers.size())];
        const ExpertSlot& born = model.replace_slot(l, *victim, mult * d_model, step, rng);
        events.push_back({step, l, EventKind::ExpertReplaced, dead, born.expert_id, eff});
        events.push_back({step, l, EventKind::ExpertSpawned, born.expert_id, std::nullopt, eff});
      } else {
        const auto worst = static_cast<std::size_t>(std::min_element(eff.begin(), eff.end()) - eff.begin());
        events.push_back({step, l, EventKind::EvaluationKept, layer.pool[worst].expert_id, std::nullopt, eff});
      }
    }
    for (ExpertSlot& e : layer.pool) e.age_market_steps += 1;
    stats_[l].reset(layer);
  }
}

}  // namespace moemarket
