// SPDX-License-Identifier: Apache-2.0
#include "moemarket/experiment.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "moemarket/errors.hpp"

namespace moemarket {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

enum StreamLabel : std::uint64_t { kInitStream = 1, kDataStream = 2, kMarketStream = 3, kEvalStream = 4 };

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + p.string() + "'");
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("missing artifact '" + p.string() + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

}  // namespace

RunArtifacts run_experiment(const RunConfig& config, const RunHooks& hooks) {
  config.validate();
  RunArtifacts art;
  art.config = config;

  const std::vector<Domain> domains = load_domains(config);
  const Vocab vocab = Vocab::build(domains);
  std::map<std::string, EncodedDomain> encoded;
  for (const Domain& d : domains) encoded.emplace(d.name, encode_domain(d, vocab, config.model.context));

  ModelDims dims = config.model;
  dims.vocab = vocab.size();
  Rng init_rng = Rng::stream(config.seed, kInitStream);
  Rng data_rng = Rng::stream(config.seed, kDataStream);
  Rng market_rng = Rng::stream(config.seed, kMarketStream);
  Rng eval_rng = Rng::stream(config.seed, kEvalStream);

  MoeTransformer model(dims, init_rng);
  Market market(config.market, model);

  // Fixed held-out batches per domain so eval points are comparable over time.
  std::map<std::string, std::vector<Batch>> eval_batches;
  for (const DomainSource& ds : config.domains) {
    auto& v = eval_batches[ds.name];
    for (std::size_t i = 0; i < config.eval.batches; ++i) {
      v.push_back(sample_batch(encoded.at(ds.name).heldout, eval_rng, config.model.context, config.batch_size));
    }
  }

  std::string current = config.schedule.initial();
  for (long step = 0; step < config.total_steps; ++step) {
    const std::string& dom = config.schedule.active(step);
    if (dom != current) {
      art.events.push_back({step, std::nullopt, EventKind::DomainShift, std::nullopt, std::nullopt, std::nullopt});
      current = dom;
    }
    const Batch batch = sample_batch(encoded.at(dom).train, data_rng, config.model.context, config.batch_size);
    const bool eval_now = step % config.eval.interval == 0;
    double eval_loss = 0.0;
    if (eval_now) {
      for (const Batch& eb : eval_batches.at(dom)) eval_loss += model.evaluate(eb);
      eval_loss /= static_cast<double>(config.eval.batches);
    }
    StepResult result;
    try {
      result = model.train_step(batch, config.optimizer, step);
    } catch (const DivergenceError& e) {
      art.valid = false;
      art.failure = e.what();
      art.failed_step = step;
      return art;
    }
    if (eval_now) art.loss.push_back({step, result.mean_loss, eval_loss, dom});
    if (hooks.on_step) hooks.on_step(step, result.mean_loss);

    market.accumulate(result.records);
    if (step > 0 && step % config.market.market_interval == 0) {
      market.evaluate(step, model, market_rng, art.events, &art.census);
    }
  }
  return art;
}

// ---------------------------------------------------------------------------

std::string event_to_json_line(const MarketEvent& e) {
  ordered_json j;
  j["step"] = e.step;
  j["layer"] = e.layer ? json(*e.layer) : json(nullptr);
  j["kind"] = to_string(e.kind);
  j["expert_id"] = e.expert_id ? json(*e.expert_id) : json(nullptr);
  j["replacement_id"] = e.replacement_id ? json(*e.replacement_id) : json(nullptr);
  j["fitness"] = e.fitness ? json(*e.fitness) : json(nullptr);
  return j.dump();
}

MarketEvent event_from_json_line(const std::string& line) {
  try {
    const json j = json::parse(line);
    static const std::set<std::string> kKeys{"step", "layer", "kind", "expert_id", "replacement_id", "fitness"};
    for (const auto& [k, v] : j.items()) {
      if (!kKeys.count(k)) throw ConfigError("event has unknown field '" + k + "'");
    }
    MarketEvent e;
    e.step = j.at("step").get<long>();
    if (!j.at("layer").is_null()) e.layer = j.at("layer").get<std::size_t>();
    e.kind = parse_event_kind(j.at("kind").get<std::string>());
    if (!j.at("expert_id").is_null()) e.expert_id = j.at("expert_id").get<std::int64_t>();
    if (!j.at("replacement_id").is_null()) e.replacement_id = j.at("replacement_id").get<std::int64_t>();
    if (!j.at("fitness").is_null()) {
      const auto v = j.at("fitness").get<std::vector<double>>();
      if (v.size() != kSlotsPerLayer) throw ConfigError("fitness snapshot must have 8 entries");
      std::array<double, kSlotsPerLayer> f{};
      std::copy(v.begin(), v.end(), f.begin());
      e.fitness = f;
    }
    return e;
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("malformed event line: ") + ex.what());
  }
}

void write_artifacts(const RunArtifacts& a, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory '" + dir + "': " + ec.message());
  const fs::path root(dir);

  {
    auto out = open_out(root / kEventsFile);
    for (const MarketEvent& e : a.events) out << event_to_json_line(e) << "\n";
  }
  {
    auto out = open_out(root / kLossFile);
    out << "step,train_loss,eval_loss,domain\n";
    for (const LossPoint& p : a.loss) {
      out << p.step << "," << format_double(p.train_loss) << "," << format_double(p.eval_loss) << "," << p.domain
          << "\n";
    }
  }
  {
    auto out = open_out(root / kCensusFile);
    for (const CensusEntry& c : a.census) {
      ordered_json j;
      j["step"] = c.step;
      j["layer"] = c.layer;
      ordered_json experts = ordered_json::array();
      for (const CensusExpert& e : c.experts) experts.push_back({{"id", e.id}, {"width", e.width}, {"age", e.age}});
      j["experts"] = experts;
      out << j.dump() << "\n";
    }
  }
  save_config(a.config, (root / kConfigFile).string());
  const fs::path marker = root / kInvalidMarker;
  if (!a.valid) {
    auto out = open_out(marker);
    out << "step " << a.failed_step << ": " << a.failure << "\n";
  } else {
    fs::remove(marker, ec);
  }
}

RunArtifacts read_artifacts(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  RunArtifacts a;
  a.config = load_config((root / kConfigFile).string());
  for (const std::string& line : read_lines(root / kEventsFile)) a.events.push_back(event_from_json_line(line));

  const auto loss_lines = read_lines(root / kLossFile);
  if (loss_lines.empty() || loss_lines.front() != "step,train_loss,eval_loss,domain") {
    throw ConfigError("loss.csv has a missing or unexpected header");
  }
  for (std::size_t i = 1; i < loss_lines.size(); ++i) {
    std::stringstream ss(loss_lines[i]);
    std::string step, train, eval, domain;
    if (!std::getline(ss, step, ',') || !std::getline(ss, train, ',') || !std::getline(ss, eval, ',') ||
        !std::getline(ss, domain)) {
      throw ConfigError("loss.csv line " + std::to_string(i + 1) + " is malformed");
    }
    try {
      a.loss.push_back({std::stol(step), std::stod(train), std::stod(eval), domain});
    } catch (const std::exception&) {
      throw ConfigError("loss.csv line " + std::to_string(i + 1) + " has a bad number");
    }
  }

  for (const std::string& line : read_lines(root / kCensusFile)) {
    try {
      const json j = json::parse(line);
      CensusEntry c;
      c.step = j.at("step").get<long>();
      c.layer = j.at("layer").get<std::size_t>();
      for (const json& e : j.at("experts")) {
        CensusExpert ce;
        ce.id = e.at("id").get<std::int64_t>();
        ce.width = e.at("width").get<std::size_t>();
        ce.age = e.at("age").get<long>();
        c.experts.push_back(ce);
      }
      a.census.push_back(std::move(c));
    } catch (const json::exception& ex) {
      throw ConfigError(std::string("malformed census line: ") + ex.what());
    }
  }

  std::ifstream marker(root / kInvalidMarker);
  if (marker) {
    a.valid = false;
    std::getline(marker, a.failure);
  }
  return a;
}

}  // namespace moemarket
