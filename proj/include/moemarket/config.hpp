// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "moemarket/adam.hpp"
#include "moemarket/data.hpp"
#include "moemarket/market.hpp"
#include "moemarket/moe_model.hpp"

namespace moemarket {

struct DomainSource {
  std::string name;
  std::string source = "synthetic";  // "synthetic" or "file"
  std::string generator = "prose_like";
  std::uint64_t seed = 0;
  std::size_t length = 0;
  std::string path;
};

struct EvalSettings {
  long interval = 50;
  std::size_t batches = 4;
  std::size_t smoothing_window = 3;
  std::size_t steady_state_points = 10;
  double recovery_factor = 1.05;
};

// Everything that determines a run. Vocabulary size is derived from the
// domains at run time and is not part of the file.
struct RunConfig {
  std::string name = "custom";
  std::uint64_t seed = 0;
  long total_steps = 4000;
  MarketConfig market;
  ModelDims model;
  std::size_t batch_size = 16;
  AdamHyper optimizer;
  std::vector<DomainSource> domains;
  ShiftSchedule schedule;
  EvalSettings eval;

  void validate() const;
};

nlohmann::ordered_json config_to_json(const RunConfig& cfg);
// Rejects unknown keys at every level.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::string& path);
void save_config(const RunConfig& cfg, const std::string& path);

// Applies "dotted.key=value" to a config document. The value is parsed as
// JSON when possible and as a plain string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

const std::vector<std::string>& preset_names();
// Throws ConfigError listing valid names on an unknown preset.
RunConfig preset(const std::string& name);

std::vector<Domain> load_domains(const RunConfig& cfg);

}  // namespace moemarket
