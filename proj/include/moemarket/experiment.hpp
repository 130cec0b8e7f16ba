// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "moemarket/config.hpp"
#include "moemarket/market.hpp"

namespace moemarket {

struct LossPoint {
  long step = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  std::string domain;
};

struct RunArtifacts {
  RunConfig config;
  std::vector<MarketEvent> events;
  std::vector<LossPoint> loss;
  std::vector<CensusEntry> census;
  bool valid = true;
  std::string failure;  // set when the run aborted
  long failed_step = -1;
};

struct RunHooks {
  // Called after every training step with (step, train loss).
  std::function<void(long, double)> on_step;
};

// Trains for config.total_steps steps (numbered 0..total_steps-1). At each
// step: switch domain per the schedule, record eval loss every eval.interval
// steps, train, and run a market evaluation when step is a positive
// multiple of the market interval. A non-finite loss stops the run and
// returns the partial artifacts with valid == false.
RunArtifacts run_experiment(const RunConfig& config, const RunHooks& hooks = {});

// File names inside a run directory.
inline constexpr const char* kEventsFile = "events.jsonl";
inline constexpr const char* kLossFile = "loss.csv";
inline constexpr const char* kCensusFile = "census.jsonl";
inline constexpr const char* kConfigFile = "resolved-config.json";
inline constexpr const char* kInvalidMarker = "INVALID";

std::string event_to_json_line(const MarketEvent& e);
MarketEvent event_from_json_line(const std::string& line);

void write_artifacts(const RunArtifacts& a, const std::string& dir);
// Throws ConfigError on missing or malformed files.
RunArtifacts read_artifacts(const std::string& dir);

}  // namespace moemarket
