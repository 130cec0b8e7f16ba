// SPDX-License-Identifier: Apache-2.0
#include "moemarket/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "moemarket/errors.hpp"

namespace moemarket {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Reads the members of one JSON object and rejects any key nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

DomainSource synthetic(std::string name, const std::string& generator, std::uint64_t seed) {
  DomainSource d;
  d.name = std::move(name);
  d.source = "synthetic";
  d.generator = generator;
  d.seed = seed;
  d.length = 200000;
  return d;
}

}  // namespace

void RunConfig::validate() const {
  market.validate();
  if (total_steps < 1) throw ConfigError("total_steps must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (model.d_model == 0 || model.n_heads == 0 || model.d_model % model.n_heads != 0) {
    throw ConfigError("model.d_model must be a positive multiple of model.n_heads");
  }
  if (model.top_k < 1 || model.top_k > kMaxTopK) throw ConfigError("model.top_k must be 1 or 2");
  if (model.context < 1 || model.n_layers < 1) throw ConfigError("model.context and model.n_layers must be positive");
  if (!(optimizer.lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
  if (domains.empty()) throw ConfigError("at least one domain is required");
  std::vector<std::string> names;
  for (const DomainSource& d : domains) {
    if (d.name.empty()) throw ConfigError("domain name must not be empty");
    if (std::find(names.begin(), names.end(), d.name) != names.end()) {
      throw ConfigError("duplicate domain name '" + d.name + "'");
    }
    names.push_back(d.name);
    if (d.source == "synthetic") {
      parse_synthetic_kind(d.generator);
      if (d.length < kMinSyntheticLength) throw ConfigError("synthetic domain '" + d.name + "' is too short");
    } else if (d.source == "file") {
      if (d.path.empty()) throw ConfigError("file domain '" + d.name + "' needs a path");
    } else {
      throw ConfigError("domain source must be 'synthetic' or 'file', got '" + d.source + "'");
    }
  }
  schedule.validate(names);
  if (eval.interval < 1 || eval.batches < 1 || eval.smoothing_window < 1 || eval.steady_state_points < 1) {
    throw ConfigError("eval settings must be positive");
  }
  if (!(eval.recovery_factor > 0.0)) throw ConfigError("eval.recovery_factor must be positive");
}

ordered_json config_to_json(const RunConfig& c) {
  ordered_json j;
  j["name"] = c.name;
  j["seed"] = c.seed;
  j["total_steps"] = c.total_steps;
  j["market"] = {{"fitness_mode", to_string(c.market.fitness_mode)},
                 {"grace_steps", c.market.grace_steps},
                 {"market_interval", c.market.market_interval},
                 {"warmup_steps", c.market.warmup_steps},
                 {"replacement_sigma", c.market.replacement_sigma},
                 {"newborn_width_multipliers", c.market.newborn_width_multipliers}};
  j["model"] = {{"d_model", c.model.d_model},
                {"n_heads", c.model.n_heads},
                {"context", c.model.context},
                {"n_layers", c.model.n_layers},
                {"top_k", c.model.top_k},
                {"initial_width_multiplier", c.model.initial_width_multiplier},
                {"init_std", c.model.init_std},
                {"batch_size", c.batch_size}};
  j["optimizer"] = {{"lr", c.optimizer.lr},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps}};
  ordered_json domains = ordered_json::array();
  for (const DomainSource& d : c.domains) {
    ordered_json dj;
    dj["name"] = d.name;
    dj["source"] = d.source;
    if (d.source == "synthetic") {
      dj["generator"] = d.generator;
      dj["seed"] = d.seed;
      dj["length"] = d.length;
    } else {
      dj["path"] = d.path;
    }
    domains.push_back(dj);
  }
  j["domains"] = domains;
  ordered_json shifts = ordered_json::array();
  for (const DomainShift& s : c.schedule.shifts()) shifts.push_back({{"step", s.step}, {"domain", s.domain}});
  j["schedule"] = {{"initial", c.schedule.initial()}, {"shifts", shifts}};
  j["eval"] = {{"interval", c.eval.interval},
               {"batches", c.eval.batches},
               {"smoothing_window", c.eval.smoothing_window},
               {"steady_state_points", c.eval.steady_state_points},
               {"recovery_factor", c.eval.recovery_factor}};
  return j;
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  ObjectReader top(j, "config");
  top.read("name", c.name);
  top.read("seed", c.seed);
  top.read("total_steps", c.total_steps);

  if (const json* m = top.child("market")) {
    ObjectReader r(*m, "market");
    std::string mode = to_string(c.market.fitness_mode);
    r.read("fitness_mode", mode);
    c.market.fitness_mode = parse_fitness_mode(mode);
    r.read("grace_steps", c.market.grace_steps);
    r.read("market_interval", c.market.market_interval);
    r.read("warmup_steps", c.market.warmup_steps);
    r.read("replacement_sigma", c.market.replacement_sigma);
    r.read("newborn_width_multipliers", c.market.newborn_width_multipliers);
    r.finish();
  }
  if (const json* m = top.child("model")) {
    ObjectReader r(*m, "model");
    r.read("d_model", c.model.d_model);
    r.read("n_heads", c.model.n_heads);
    r.read("context", c.model.context);
    r.read("n_layers", c.model.n_layers);
    r.read("top_k", c.model.top_k);
    r.read("initial_width_multiplier", c.model.initial_width_multiplier);
    r.read("init_std", c.model.init_std);
    r.read("batch_size", c.batch_size);
    r.finish();
  }
  if (const json* o = top.child("optimizer")) {
    ObjectReader r(*o, "optimizer");
    r.read("lr", c.optimizer.lr);
    r.read("beta1", c.optimizer.beta1);
    r.read("beta2", c.optimizer.beta2);
    r.read("eps", c.optimizer.eps);
    r.finish();
  }
  if (const json* ds = top.child("domains")) {
    if (!ds->is_array()) throw ConfigError("domains: expected an array");
    for (std::size_t i = 0; i < ds->size(); ++i) {
      ObjectReader r((*ds)[i], "domains[" + std::to_string(i) + "]");
      DomainSource d;
      r.read("name", d.name);
      r.read("source", d.source);
      r.read("generator", d.generator);
      r.read("seed", d.seed);
      r.read("length", d.length);
      r.read("path", d.path);
      r.finish();
      c.domains.push_back(std::move(d));
    }
  }
  if (const json* s = top.child("schedule")) {
    ObjectReader r(*s, "schedule");
    std::string initial;
    r.read("initial", initial);
    std::vector<DomainShift> shifts;
    if (const json* sh = r.child("shifts")) {
      if (!sh->is_array()) throw ConfigError("schedule.shifts: expected an array");
      for (std::size_t i = 0; i < sh->size(); ++i) {
        ObjectReader sr((*sh)[i], "schedule.shifts[" + std::to_string(i) + "]");
        DomainShift ds;
        sr.read("step", ds.step);
        sr.read("domain", ds.domain);
        sr.finish();
        shifts.push_back(std::move(ds));
      }
    }
    r.finish();
    c.schedule = ShiftSchedule(std::move(initial), std::move(shifts));
  }
  if (const json* e = top.child("eval")) {
    ObjectReader r(*e, "eval");
    r.read("interval", c.eval.interval);
    r.read("batches", c.eval.batches);
    r.read("smoothing_window", c.eval.smoothing_window);
    r.read("steady_state_points", c.eval.steady_state_points);
    r.read("recovery_factor", c.eval.recovery_factor);
    r.finish();
  }
  top.finish();
  c.validate();
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void save_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << config_to_json(cfg).dump(2) << "\n";
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' must look like key.path=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override key '" + key + "' does not name an object member");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"A2", "B2", "C2", "B2b", "C2b", "B2c", "C2c"};
  return names;
}

RunConfig preset(const std::string& name) {
  const auto& names = preset_names();
  if (std::find(names.begin(), names.end(), name) == names.end()) {
    std::string list;
    for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "'; valid presets: " + list);
  }
  RunConfig c;
  c.name = name;
  c.market.fitness_mode = parse_fitness_mode(name.substr(0, 1));
  const bool round_trip = name.size() == 3 && name[2] == 'c';
  const bool grace = name.size() == 3;  // the b- and c-variants
  c.market.grace_steps = grace ? 50 : 0;
  c.market.market_interval = 10;
  c.market.warmup_steps = 500;
  c.market.replacement_sigma = 1.0;
  c.total_steps = round_trip ? 4000 : 3000;
  c.domains = {synthetic("data_char", "prose_like", 11), synthetic("data_code", "code_like", 12)};
  std::vector<DomainShift> shifts{{1500, "data_code"}};
  if (round_trip) shifts.push_back({3000, "data_char"});
  c.schedule = ShiftSchedule("data_char", std::move(shifts));
  c.validate();
  return c;
}

std::vector<Domain> load_domains(const RunConfig& cfg) {
  std::vector<Domain> out;
  for (const DomainSource& d : cfg.domains) {
    if (d.source == "file") {
      out.push_back(load_domain_file(d.name, d.path));
    } else {
      out.push_back(generate_synthetic_domain(parse_synthetic_kind(d.generator), d.seed, d.length, d.name));
    }
  }
  return out;
}

}  // namespace moemarket
