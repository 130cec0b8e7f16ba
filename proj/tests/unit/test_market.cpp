// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "market_oracle.hpp"
#include "moemarket/errors.hpp"
#include "moemarket/market.hpp"
#include "moemarket/rng.hpp"

using namespace moemarket;

namespace {

RoutingRecord record(std::size_t layer, std::size_t k, std::size_t first, std::size_t second, double margin,
                     double loss) {
  RoutingRecord r;
  r.layer = layer;
  r.k = k;
  r.selected[0] = first;
  r.selected[1] = second;
  r.margin = margin;
  r.loss = loss;
  return r;
}

ModelDims tiny_dims() {
  ModelDims d;
  d.vocab = 5;
  d.d_model = 4;
  d.n_heads = 1;
  d.context = 4;
  d.n_layers = 2;
  return d;
}

// Routes `per_slot` tokens with loss 1 to every slot except `starved`.
std::vector<RoutingRecord> starve(std::size_t layer, std::size_t starved, int per_slot) {
  std::vector<RoutingRecord> recs;
  for (std::size_t s = 0; s < kSlotsPerLayer; ++s) {
    if (s == starved) continue;
    for (int i = 0; i < per_slot; ++i) recs.push_back(record(layer, 1, s, 0, 0.5, 1.0));
  }
  return recs;
}

}  // namespace

TEST_CASE("accumulate: top-2 split and exclusivity") {
  std::vector<LayerStats> stats(1);
  std::vector<RoutingRecord> recs(10, record(0, 2, 0, 1, 0.5, 2.0));
  accumulate(recs, stats);
  const LayerStats& ls = stats[0];
  CHECK(ls.total_tokens == 10.0);
  CHECK(ls.slots[0].tokens_processed / ls.total_tokens == doctest::Approx(0.5));
  CHECK(ls.slots[1].tokens_processed / ls.total_tokens == doctest::Approx(0.5));
  for (std::size_t s = 2; s < kSlotsPerLayer; ++s) CHECK(ls.slots[s].tokens_processed == 0.0);
  CHECK(ls.slots[0].exclusive_count == 10.0);
  CHECK(ls.slots[1].exclusive_count == 0.0);
  // Loss is split with the same 1/k weight, so the mean per token is intact.
  CHECK(ls.slots[0].sum_token_loss / ls.slots[0].tokens_processed == doctest::Approx(2.0));
}

TEST_CASE("accumulate: margin exactly at the threshold is not exclusive") {
  std::vector<LayerStats> stats(1);
  const std::vector<RoutingRecord> recs{record(0, 2, 3, 4, 0.1, 1.0), record(0, 2, 3, 4, 0.1000001, 1.0)};
  accumulate(recs, stats);
  CHECK(stats[0].slots[3].exclusive_count == 1.0);
}

TEST_CASE("accumulate: demand sums to one") {
  Rng rng = Rng::stream(11, 1);
  std::vector<LayerStats> stats(2);
  std::vector<RoutingRecord> recs;
  for (int i = 0; i < 257; ++i) {
    const std::size_t a = rng.below(8);
    const std::size_t b = (a + 1 + rng.below(7)) % 8;
    recs.push_back(record(rng.below(2), 1 + rng.below(2), a, b, rng.uniform(), rng.uniform()));
  }
  accumulate(recs, stats);
  for (const LayerStats& ls : stats) {
    double sum = 0.0;
    for (const ExpertStats& e : ls.slots) sum += e.tokens_processed;
    CHECK(std::abs(sum / ls.total_tokens - 1.0) <= 1e-9);
  }
}

TEST_CASE("quality examples") {
  CHECK(quality(10.0, 10.0) == 1.0);
  CHECK(quality(20.0, 10.0) == 0.5);
  CHECK(quality(0.0, 0.0) == 0.0);
  CHECK(quality(5.0, 0.0) == 0.0);
  CHECK(quality(0.0, 3.0) == kQualityCap);
  CHECK(quality(1e-12, 3.0) == kQualityCap);
}

TEST_CASE("flops_cost examples") {
  CHECK(flops_cost(10.0, 0.0) == 0.0);
  CHECK(flops_cost(10.0, 3.0) == 60.0);
  const double narrow = flops_cost(static_cast<double>(expert_param_count(8, 4)), 5.0);
  const double wide = flops_cost(static_cast<double>(expert_param_count(16, 4)), 5.0);
  CHECK(wide > narrow);
}

TEST_CASE("fitness examples") {
  CHECK(fitness(FitnessMode::A, 2.0, 0.1, 0.0, 5.0, 5.0) == doctest::Approx(0.2));
  CHECK(fitness(FitnessMode::B, 2.0, 0.1, 0.0, 5.0, 5.0) == doctest::Approx(0.1));
  CHECK(fitness(FitnessMode::C, 2.0, 0.1, 0.0, 5.0, 5.0) == 0.0);
  CHECK(fitness(FitnessMode::C, 2.0, 0.1, 0.5, 0.0, 1.0) == doctest::Approx(0.1));
}

TEST_CASE("grace examples and monotonicity") {
  CHECK(grace_factor(0, 50) == 0.0);
  CHECK(grace_factor(25, 50) == 0.5);
  CHECK(grace_factor(50, 50) == 1.0);
  CHECK(grace_factor(500, 50) == 1.0);
  CHECK(grace_factor(0, 0) == 1.0);
  double prev = -1.0;
  for (long age = 0; age < 120; ++age) {
    const double g = grace_factor(age, 50);
    CHECK(g >= prev);
    CHECK((age < 50 ? !replacement_eligible(age, 50) : replacement_eligible(age, 50)));
    prev = g;
  }
}

TEST_CASE("replacement examples") {
  const std::array<double, 8> flat{1, 1, 1, 1, 1, 1, 1, 1};
  CHECK_FALSE(replacement_check(flat).has_value());
  const std::array<double, 8> zero_low{0, 1, 1, 1, 1, 1, 1, 1};
  CHECK(replacement_check(zero_low) == std::optional<std::size_t>(0));
  const std::array<double, 8> mild{0.8, 1, 1, 1, 1, 1, 1, 1};
  const std::vector<double> mild_v(mild.begin(), mild.end());
  CHECK(replacement_check(mild) == oracle::replace(mild_v));
  CHECK(replacement_check(mild) == std::optional<std::size_t>(0));
  // Ties go to the lowest index.
  const std::array<double, 8> tie{1, 1, 0, 1, 0, 1, 1, 1};
  CHECK(replacement_check(tie) == std::optional<std::size_t>(2));
  // Compact distribution: nobody crosses mean - sigma.
  const std::array<double, 8> compact{1, 2, 1, 2, 1, 2, 1, 2};
  CHECK_FALSE(replacement_check(compact).has_value());
}

TEST_CASE("replacement eligibility restricts the victim, not the statistics") {
  const std::array<double, 8> v{0, 1, 1, 1, 1, 1, 0.2, 1};
  std::array<bool, 8> eligible{};
  eligible.fill(true);
  eligible[0] = false;
  CHECK(replacement_check(v, eligible) == std::optional<std::size_t>(6));
  eligible[6] = false;
  CHECK_FALSE(replacement_check(v, eligible).has_value());
  const std::array<bool, 3> wrong{};
  CHECK_THROWS_AS(replacement_check(v, wrong), ConfigError);
}

TEST_CASE("replacement is invariant under uniform rescaling") {
  Rng rng = Rng::stream(5, 2);
  for (int t = 0; t < 200; ++t) {
    std::array<double, 8> v{};
    for (double& x : v) x = rng.uniform();
    const auto base = replacement_check(v);
    for (double c : {1e-6, 0.5, 3.0, 1e6}) {
      std::array<double, 8> w = v;
      for (double& x : w) x *= c;
      CHECK(replacement_check(w) == base);
    }
  }
}

TEST_CASE("mode B equals mode A when no FLOPs were spent") {
  const std::array<double, 8> flops{};
  const double norm = flops_normalizer(flops);
  CHECK(norm == 1.0);
  Rng rng = Rng::stream(6, 2);
  for (int t = 0; t < 100; ++t) {
    const double q = rng.uniform() * 4.0, d = rng.uniform();
    CHECK(fitness(FitnessMode::B, q, d, 0.3, 0.0, norm) == fitness(FitnessMode::A, q, d, 0.3, 0.0, norm));
  }
}

TEST_CASE("modes B and C are scale-consistent in FLOPs") {
  Rng rng = Rng::stream(7, 2);
  for (int t = 0; t < 100; ++t) {
    const double q = rng.uniform() * 4.0, d = rng.uniform(), e = rng.uniform();
    const double f = rng.uniform() * 1e6, n = 1.0 + rng.uniform() * 1e6;
    for (FitnessMode m : {FitnessMode::B, FitnessMode::C}) {
      const double a = fitness(m, q, d, e, f, n);
      const double b = fitness(m, q, d, e, f * 7.5, n * 7.5);
      CHECK(std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(a)));
    }
  }
}

TEST_CASE("flops normalizer ignores idle slots") {
  const std::array<double, 4> f{0.0, 10.0, 0.0, 30.0};
  CHECK(flops_normalizer(f) == 20.0);
}

TEST_CASE("pure functions agree with the brute-force oracle") {
  Rng rng = Rng::stream(8, 2);
  for (int t = 0; t < 300; ++t) {
    const double loss = rng.uniform() * 50.0, tokens = std::floor(rng.uniform() * 40.0);
    CHECK(std::abs(quality(loss, tokens) - oracle::quality(loss, tokens)) <= 1e-12);
    const double p = std::floor(rng.uniform() * 1e5);
    CHECK(flops_cost(p, tokens) == oracle::flops(p, tokens));
    const double q = rng.uniform() * 3.0, d = rng.uniform(), e = rng.uniform();
    const double f = rng.uniform() * 1e6, n = 1.0 + rng.uniform() * 1e6;
    const FitnessMode modes[] = {FitnessMode::A, FitnessMode::B, FitnessMode::C};
    for (int m = 0; m < 3; ++m) {
      CHECK(std::abs(fitness(modes[m], q, d, e, f, n) - oracle::fitness(m, q, d, e, f, n)) <= 1e-12);
    }
    const long age = static_cast<long>(rng.below(120)), grace = static_cast<long>(rng.below(80));
    CHECK(grace_factor(age, grace) == oracle::grace(age, grace));
    std::vector<double> v(8);
    for (double& x : v) x = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
    CHECK(replacement_check(std::span<const double>(v)) == oracle::replace(v));
  }
}

TEST_CASE("replay_decision mirrors eligibility by age") {
  MarketConfig cfg;
  cfg.grace_steps = 50;
  const std::array<double, 8> eff{0, 1, 1, 1, 1, 1, 1, 1};
  std::array<long, 8> ages{};
  ages.fill(60);
  CHECK(replay_decision(eff, ages, cfg) == std::optional<std::size_t>(0));
  ages[0] = 3;
  CHECK_FALSE(replay_decision(eff, ages, cfg).has_value());
  cfg.grace_steps = 0;
  CHECK(replay_decision(eff, ages, cfg) == std::optional<std::size_t>(0));
}

TEST_CASE("market evaluation: warmup emits nothing but still ages") {
  Rng rng = Rng::stream(1, 1);
  MoeTransformer model(tiny_dims(), rng);
  Market market(MarketConfig{}, model);
  std::vector<MarketEvent> events;
  for (std::size_t l = 0; l < 2; ++l) market.accumulate(starve(l, 7, 5));
  market.evaluate(490, model, rng, events);
  CHECK(events.empty());
  CHECK(model.layers()[0].pool[3].age_market_steps == 1);
  CHECK(market.stats()[0].total_tokens == 0.0);
  market.evaluate(500, model, rng, events);
  CHECK(events.empty());
}

TEST_CASE("market evaluation: starved expert is replaced and paired with a spawn") {
  Rng rng = Rng::stream(2, 1);
  MoeTransformer model(tiny_dims(), rng);
  Market market(MarketConfig{}, model);
  const std::int64_t victim_id = model.layers()[1].pool[7].expert_id;
  for (std::size_t l = 0; l < 2; ++l) market.accumulate(starve(l, 7, 5));
  std::vector<MarketEvent> events;
  std::vector<CensusEntry> census;
  market.evaluate(510, model, rng, events, &census);
  REQUIRE(events.size() == 4);
  for (std::size_t l = 0; l < 2; ++l) {
    const MarketEvent& dead = events[2 * l];
    const MarketEvent& born = events[2 * l + 1];
    CHECK(dead.kind == EventKind::ExpertReplaced);
    CHECK(born.kind == EventKind::ExpertSpawned);
    CHECK(dead.layer == std::optional<std::size_t>(l));
    CHECK(born.layer == dead.layer);
    CHECK(born.expert_id == dead.replacement_id);
    REQUIRE(dead.fitness.has_value());
    CHECK((*dead.fitness)[7] == 0.0);
  }
  CHECK(events[0].replacement_id == std::optional<std::int64_t>(16));
  CHECK(events[2].replacement_id == std::optional<std::int64_t>(17));
  CHECK(events[2].expert_id == std::optional<std::int64_t>(victim_id));
  // Census is taken before the decision.
  REQUIRE(census.size() == 2);
  CHECK(census[1].experts[7].id == victim_id);
  CHECK(census[1].experts[7].tokens == 0.0);
  // Newborns age along with everyone else.
  CHECK(model.layers()[0].pool[7].age_market_steps == 1);
  const std::size_t w = model.layers()[0].pool[7].width;
  CHECK((w == 4 || w == 8 || w == 12));
}

TEST_CASE("market evaluation: uniform usage keeps everyone") {
  Rng rng = Rng::stream(3, 1);
  MoeTransformer model(tiny_dims(), rng);
  MarketConfig cfg;
  cfg.fitness_mode = FitnessMode::B;
  Market market(cfg, model);
  for (std::size_t l = 0; l < 2; ++l) {
    std::vector<RoutingRecord> recs;
    for (std::size_t s = 0; s < kSlotsPerLayer; ++s) {
      for (int i = 0; i < 3; ++i) recs.push_back(record(l, 1, s, 0, 0.5, 1.0));
    }
    market.accumulate(recs);
  }
  std::vector<MarketEvent> events;
  market.evaluate(600, model, rng, events);
  REQUIRE(events.size() == 2);
  for (const MarketEvent& e : events) CHECK(e.kind == EventKind::EvaluationKept);
}

TEST_CASE("market evaluation: grace shields young experts") {
  Rng rng = Rng::stream(4, 1);
  MoeTransformer model(tiny_dims(), rng);
  MarketConfig cfg;
  cfg.grace_steps = 50;
  Market market(cfg, model);
  for (MoeLayer& layer : model.layers()) {
    for (ExpertSlot& e : layer.pool) e.age_market_steps = 60;
    layer.pool[7].age_market_steps = 10;
  }
  for (std::size_t l = 0; l < 2; ++l) market.accumulate(starve(l, 7, 5));
  std::vector<MarketEvent> events;
  market.evaluate(700, model, rng, events);
  REQUIRE(events.size() == 2);
  for (const MarketEvent& e : events) CHECK(e.kind == EventKind::EvaluationKept);
}

TEST_CASE("market config validation") {
  MarketConfig cfg;
  cfg.market_interval = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = MarketConfig{};
  cfg.grace_steps = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = MarketConfig{};
  cfg.newborn_width_multipliers.clear();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_fitness_mode("C") == FitnessMode::C);
  CHECK_THROWS_AS(parse_fitness_mode("D"), ConfigError);
  CHECK(parse_event_kind(to_string(EventKind::ExpertSpawned)) == EventKind::ExpertSpawned);
}
