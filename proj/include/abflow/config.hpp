#pragma once

// Run configuration. The file format is flat `key = value` lines with `#`
// comments; every key has a default and unknown keys are rejected.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "abflow/dataio.hpp"
#include "abflow/denoiser.hpp"
#include "abflow/digest.hpp"
#include "abflow/optim.hpp"
#include "abflow/reward.hpp"
#include "abflow/schedules.hpp"
#include "abflow/tabular.hpp"
#include "abflow/toydata.hpp"

namespace abflow {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainSettings {
  int warm_steps = 2000;  ///< diffusion-only phase, w forced to 0
  int tb_steps = 200;     ///< phase with the balance term added
  int batch = 4;
  int log_every = 1;
  int checkpoint_every = 500;  ///< 0 keeps only the final checkpoint
  BalanceObjective objective = BalanceObjective::trajectory;
  /// Trajectories used to set log_Z when the TB phase starts; 0 keeps the
  /// learned value.
  int log_z_calibration = 32;
};

struct RunConfig {
  std::uint64_t seed = 0;
  int T = 100;
  ScheduleSpec type_schedule{ScheduleKind::linear, 1e-4, 0.1};
  ScheduleSpec pos_schedule{ScheduleKind::linear, 1e-4, 0.1};
  ScheduleSpec ori_schedule{ScheduleKind::linear, 1e-4, 0.1};
  ArchConfig arch;
  double pos_scale = 10.0;  ///< angstrom per model-frame unit
  OptimizerConfig optim;
  TrainSettings train;
  double w = 5e-6;
  double alpha = 0.1;
  EnergyModel energy = default_energy_model();
  std::string dataset;
  std::string rewards;
  std::string region = "H3";
  int n_samples = 8;
  bool eval_align = false;
  ToyDataConfig toy;
  TabularSpec tabular;

  ScheduleSet schedules() const { return make_schedule_set(T, type_schedule, pos_schedule, ori_schedule); }
};

namespace detail {

inline std::string fmt_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

template <class T>
T parse_number(const std::string& s, const std::string& key) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("invalid value '" + s + "' for " + key);
  return v;
}

inline std::string fmt_list(const std::vector<double>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + fmt_double(xs[i]);
  return out;
}

inline std::vector<double> parse_list(const std::string& s, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<double>(item, key));
  return out;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError("invalid value '" + s + "' for " + key + " (expected true or false)");
}

struct ConfigKey {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class F>
ConfigKey int_field(std::string name, F field) {
  return {name, [field](const RunConfig& c) { return std::to_string(field(c)); },
          [field, name](RunConfig& c, const std::string& v) { field(c) = parse_number<int>(v, name); }};
}
template <class F>
ConfigKey double_field(std::string name, F field) {
  return {name, [field](const RunConfig& c) { return fmt_double(field(c)); },
          [field, name](RunConfig& c, const std::string& v) { field(c) = parse_number<double>(v, name); }};
}
template <class F>
ConfigKey string_field(std::string name, F field) {
  return {name, [field](const RunConfig& c) { return field(c); },
          [field](RunConfig& c, const std::string& v) { field(c) = v; }};
}

inline void add_schedule_keys(std::vector<ConfigKey>& keys, const std::string& ch, ScheduleSpec RunConfig::*spec) {
  keys.push_back({"schedule." + ch + ".kind", [spec](const RunConfig& c) { return std::string(to_string((c.*spec).kind)); },
                  [spec](RunConfig& c, const std::string& v) {
                    try {
                      (c.*spec).kind = parse_schedule_kind(v);
                    } catch (const std::invalid_argument& e) {
                      throw ConfigError(e.what());
                    }
                  }});
  keys.push_back(double_field("schedule." + ch + ".beta_min", [spec](auto& c) -> auto& { return (c.*spec).beta_min; }));
  keys.push_back(double_field("schedule." + ch + ".beta_max", [spec](auto& c) -> auto& { return (c.*spec).beta_max; }));
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back({"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>(v, "seed"); }});
    k.push_back(int_field("T", [](auto& c) -> auto& { return c.T; }));
    add_schedule_keys(k, "type", &RunConfig::type_schedule);
    add_schedule_keys(k, "pos", &RunConfig::pos_schedule);
    add_schedule_keys(k, "ori", &RunConfig::ori_schedule);
    k.push_back(int_field("arch.hidden", [](auto& c) -> auto& { return c.arch.hidden; }));
    k.push_back(int_field("arch.knn", [](auto& c) -> auto& { return c.arch.knn; }));
    k.push_back(int_field("arch.time_dim", [](auto& c) -> auto& { return c.arch.time_dim; }));
    k.push_back(double_field("arch.pos_scale", [](auto& c) -> auto& { return c.pos_scale; }));
    k.push_back({"optim.kind", [](const RunConfig& c) { return std::string(to_string(c.optim.kind)); },
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.optim.kind = parse_optimizer_kind(v);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(e.what());
                   }
                 }});
    k.push_back(double_field("optim.lr", [](auto& c) -> auto& { return c.optim.lr; }));
    k.push_back(double_field("optim.beta1", [](auto& c) -> auto& { return c.optim.beta1; }));
    k.push_back(double_field("optim.beta2", [](auto& c) -> auto& { return c.optim.beta2; }));
    k.push_back(double_field("optim.eps", [](auto& c) -> auto& { return c.optim.eps; }));
    k.push_back(double_field("optim.clip_norm", [](auto& c) -> auto& { return c.optim.clip_norm; }));
    k.push_back(int_field("train.warm_steps", [](auto& c) -> auto& { return c.train.warm_steps; }));
    k.push_back(int_field("train.tb_steps", [](auto& c) -> auto& { return c.train.tb_steps; }));
    k.push_back(int_field("train.batch", [](auto& c) -> auto& { return c.train.batch; }));
    k.push_back(int_field("train.log_every", [](auto& c) -> auto& { return c.train.log_every; }));
    k.push_back(int_field("train.checkpoint_every", [](auto& c) -> auto& { return c.train.checkpoint_every; }));
    k.push_back(int_field("train.log_z_calibration", [](auto& c) -> auto& { return c.train.log_z_calibration; }));
    k.push_back({"train.objective",
                 [](const RunConfig& c) {
                   return std::string(c.train.objective == BalanceObjective::trajectory ? "tb" : "db");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "tb")
                     c.train.objective = BalanceObjective::trajectory;
                   else if (v == "db")
                     c.train.objective = BalanceObjective::detailed;
                   else
                     throw ConfigError("invalid value '" + v + "' for train.objective (expected tb or db)");
                 }});
    k.push_back(double_field("loss.w", [](auto& c) -> auto& { return c.w; }));
    k.push_back(double_field("reward.alpha", [](auto& c) -> auto& { return c.alpha; }));
    k.push_back(double_field("energy.well_depth", [](auto& c) -> auto& { return c.energy.well_depth; }));
    k.push_back(double_field("energy.contact_radius", [](auto& c) -> auto& { return c.energy.contact_radius; }));
    k.push_back(double_field("energy.clash_radius", [](auto& c) -> auto& { return c.energy.clash_radius; }));
    k.push_back(double_field("energy.clash_weight", [](auto& c) -> auto& { return c.energy.clash_weight; }));
    k.push_back(string_field("data.dataset", [](auto& c) -> auto& { return c.dataset; }));
    k.push_back(string_field("data.rewards", [](auto& c) -> auto& { return c.rewards; }));
    k.push_back(string_field("data.region", [](auto& c) -> auto& { return c.region; }));
    k.push_back(int_field("sample.n", [](auto& c) -> auto& { return c.n_samples; }));
    k.push_back({"eval.align", [](const RunConfig& c) { return std::string(c.eval_align ? "true" : "false"); },
                 [](RunConfig& c, const std::string& v) { c.eval_align = parse_bool(v, "eval.align"); }});
    k.push_back(int_field("toy.complexes", [](auto& c) -> auto& { return c.toy.complexes; }));
    k.push_back(int_field("toy.antigen_size", [](auto& c) -> auto& { return c.toy.antigen_size; }));
    k.push_back(double_field("toy.antigen_radius", [](auto& c) -> auto& { return c.toy.antigen_radius; }));
    k.push_back(int_field("toy.framework", [](auto& c) -> auto& { return c.toy.framework; }));
    k.push_back(int_field("toy.cdr_min", [](auto& c) -> auto& { return c.toy.cdr_min; }));
    k.push_back(int_field("toy.cdr_max", [](auto& c) -> auto& { return c.toy.cdr_max; }));
    k.push_back(double_field("toy.standoff", [](auto& c) -> auto& { return c.toy.standoff; }));
    k.push_back(double_field("toy.contact_min", [](auto& c) -> auto& { return c.toy.contact_min; }));
    k.push_back(double_field("toy.contact_max", [](auto& c) -> auto& { return c.toy.contact_max; }));
    k.push_back(double_field("toy.hydrophobic_max", [](auto& c) -> auto& { return c.toy.hydrophobic_max; }));
    k.push_back(int_field("tabular.m", [](auto& c) -> auto& { return c.tabular.m; }));
    k.push_back(int_field("tabular.K", [](auto& c) -> auto& { return c.tabular.K; }));
    k.push_back(int_field("tabular.T", [](auto& c) -> auto& { return c.tabular.T; }));
    k.push_back({"tabular.rewards", [](const RunConfig& c) { return fmt_list(c.tabular.rewards); },
                 [](RunConfig& c, const std::string& v) { c.tabular.rewards = parse_list(v, "tabular.rewards"); }});
    k.push_back({"tabular.betas", [](const RunConfig& c) { return fmt_list(c.tabular.betas); },
                 [](RunConfig& c, const std::string& v) { c.tabular.betas = parse_list(v, "tabular.betas"); }});
    k.push_back({"tabular.objective",
                 [](const RunConfig& c) {
                   return std::string(c.tabular.objective == BalanceObjective::trajectory ? "tb" : "db");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "tb")
                     c.tabular.objective = BalanceObjective::trajectory;
                   else if (v == "db")
                     c.tabular.objective = BalanceObjective::detailed;
                   else
                     throw ConfigError("invalid value '" + v + "' for tabular.objective (expected tb or db)");
                 }});
    k.push_back(int_field("tabular.steps", [](auto& c) -> auto& { return c.tabular.steps; }));
    k.push_back(int_field("tabular.batch", [](auto& c) -> auto& { return c.tabular.batch; }));
    k.push_back(double_field("tabular.lr", [](auto& c) -> auto& { return c.tabular.lr; }));
    return k;
  }();
  return keys;
}

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Applies `key = value` to cfg; unknown keys are errors.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys())
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Checks ranges that do not depend on the filesystem.
inline void validate_config(const RunConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (c.T < 1) fail("T must be >= 1");
  try {
    c.arch.validate();
    c.schedules();
    c.energy.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  if (!(c.pos_scale > 0.0)) fail("arch.pos_scale must be positive");
  if (!(c.optim.lr > 0.0)) fail("optim.lr must be positive");
  if (!(c.optim.clip_norm >= 0.0)) fail("optim.clip_norm must be >= 0");
  if (c.train.warm_steps < 0 || c.train.tb_steps < 0) fail("step counts must be >= 0");
  if (c.train.batch < 1) fail("train.batch must be >= 1");
  if (c.train.log_every < 1) fail("train.log_every must be >= 1");
  if (c.train.checkpoint_every < 0) fail("train.checkpoint_every must be >= 0");
  if (c.train.log_z_calibration < 0) fail("train.log_z_calibration must be >= 0");
  if (!(c.w >= 0.0)) fail("loss.w must be >= 0");
  if (!(c.alpha > 0.0)) fail("reward.alpha must be positive");
  if (std::find(region_tags().begin(), region_tags().end(), c.region) == region_tags().end())
    fail("data.region '" + c.region + "' is not a region tag");
  if (c.n_samples < 1) fail("sample.n must be >= 1");
  try {
    c.toy.validate();
    c.tabular.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

/// Checks that the paths a command reads exist.
inline void require_paths(const RunConfig& c, bool dataset, bool rewards) {
  auto check = [](const std::string& key, const std::string& p) {
    if (p.empty()) throw ConfigError(key + " is not set");
    if (!std::filesystem::exists(p)) throw ConfigError(key + " '" + p + "' does not exist");
  };
  if (dataset) check("data.dataset", c.dataset);
  if (rewards) check("data.rewards", c.rewards);
}

inline RunConfig parse_config_text(const std::string& text, RunConfig cfg = {}) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    try {
      set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  try {
    return parse_config_text(read_file(path));
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
}

/// Every key with its effective value, in a fixed order.
inline std::string serialize_config(const RunConfig& c) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.name + " = " + k.get(c) + "\n";
  return out;
}

inline std::string config_digest(const RunConfig& c) {
  Fnv1a h;
  h.update(serialize_config(c));
  return h.hex();
}

}  // namespace abflow
