#pragma once

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cimsim/adc.hpp"
#include "cimsim/calib.hpp"
#include "cimsim/crossbar.hpp"
#include "cimsim/device.hpp"
#include "cimsim/tasks.hpp"

namespace cimsim {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Text format
//
//   # comment
//   [section]
//   key = value
//
// Every key has a declared type (see the schema in ExperimentConfig); values
// are checked against it and unknown keys are rejected.

using ConfigEntries = std::map<std::string, std::string>;  // "section.key" -> raw value

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline ConfigEntries parse_config_text(const std::string& text) {
  ConfigEntries out;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3)
        throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside any section");
    const std::string key = section + "." + trim(line.substr(0, eq));
    if (out.count(key)) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key " + key);
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || errno == ERANGE || !std::isfinite(x))
    throw ConfigError(key + ": expected a real number, got '" + v + "'");
  return x;
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0' || errno == ERANGE)
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return x;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  if (v.empty() || v.front() == '-') throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (*end != '\0' || errno == ERANGE) throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<std::string> parse_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// ---------------------------------------------------------------------------

inline const std::vector<std::string>& known_stages() {
  static const std::vector<std::string> s = {"build", "characterize", "calibrate", "extract", "train",
                                             "inject", "evaluate", "drift"};
  return s;
}

enum class TaskKind { kGridWorld, kSupervised };

struct ExperimentConfig {
  // [experiment]
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string output_dir = "out";
  std::vector<std::string> pipeline;
  TuningScope scope = TuningScope::kModule;
  int threads = 1;
  int modules = 10;
  double p_lrs = 0.5;
  // [device], [drift], [adc], [xfer]
  CellDistParams device{};
  DriftParams drift{};
  AdcParams adc{};
  TransferParams xfer{};
  // [calib]
  int tune_vectors = 256;
  int extract_vectors = 256;
  bool intercept = false;
  int residual_bins = 41;
  bool include_ideal_reference = true;
  // [network]
  TaskKind task = TaskKind::kGridWorld;
  int w_bits = 4;
  int a_bits = 8;
  std::string dataset = "data/digits.cimd";
  std::string weights;  // empty: train in the pipeline
  // [train]
  DqnConfig dqn{};
  SupervisedConfig supervised{};
  // [eval]
  std::int64_t missions = 10000;
  std::int64_t samples = 0;
  // [drift_run]
  int drift_events = 10;
  std::int64_t drift_cycles = 50000;
  double drift_v_bl = 1.3;

  void validate() const {
    if (!seed_set) throw ConfigError("experiment.seed is required (or set CIM_SEED)");
    for (const auto& s : pipeline)
      if (std::find(known_stages().begin(), known_stages().end(), s) == known_stages().end())
        throw ConfigError("experiment.pipeline: unknown stage '" + s + "'");
    if (threads < 0) throw ConfigError("experiment.threads must be >= 0");
    if (modules < 1) throw ConfigError("experiment.modules must be >= 1");
    if (!(p_lrs >= 0.0 && p_lrs <= 1.0)) throw ConfigError("experiment.p_lrs must be in [0, 1]");
    if (tune_vectors < 1 || extract_vectors < kGroupSize)
      throw ConfigError("calib: tune_vectors must be >= 1 and extract_vectors >= 9");
    if (residual_bins < 1) throw ConfigError("calib.residual_bins must be >= 1");
    if (w_bits < 1 || w_bits > 16 || a_bits < 1 || a_bits > 16)
      throw ConfigError("network: bit-widths must be in [1, 16]");
    if (missions < 1) throw ConfigError("eval.missions must be >= 1");
    if (drift_events < 0 || drift_cycles < 0 || drift_v_bl < 0.0)
      throw ConfigError("drift_run: events, cycles and v_bl must be >= 0");
    try {
      device.validate();
      drift.validate();
      adc.ref.validate();
      xfer.validate();
      dqn.grid.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (adc.sigma_static < 0.0 || adc.sigma_dynamic < 0.0) throw ConfigError("adc sigmas must be >= 0");
  }
};

/// Applies typed entries onto the defaults. `seed_override` (CIM_SEED or
/// --seed) wins over experiment.seed.
inline ExperimentConfig config_from_entries(const ConfigEntries& entries,
                                            std::optional<std::uint64_t> seed_override = std::nullopt) {
  ExperimentConfig c;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  auto real = [](double& dst) -> Setter { return [&dst](const auto& k, const auto& v) { dst = parse_real(k, v); }; };
  auto integer = [](auto& dst) -> Setter {
    return [&dst](const auto& k, const auto& v) {
      dst = static_cast<std::remove_reference_t<decltype(dst)>>(parse_int(k, v));
    };
  };
  auto boolean = [](bool& dst) -> Setter { return [&dst](const auto& k, const auto& v) { dst = parse_bool(k, v); }; };
  auto text = [](std::string& dst) -> Setter { return [&dst](const auto&, const auto& v) { dst = v; }; };

  const std::map<std::string, Setter> schema = {
      {"experiment.seed", [&](const auto& k, const auto& v) { c.seed = parse_u64(k, v); c.seed_set = true; }},
      {"experiment.output_dir", text(c.output_dir)},
      {"experiment.pipeline", [&](const auto&, const auto& v) { c.pipeline = parse_list(v); }},
      {"experiment.scope",
       [&](const auto& k, const auto& v) {
         try {
           c.scope = parse_scope(v);
         } catch (const std::exception&) {
           throw ConfigError(k + ": expected global, module or adc");
         }
       }},
      {"experiment.threads", integer(c.threads)},
      {"experiment.modules", integer(c.modules)},
      {"experiment.p_lrs", real(c.p_lrs)},
      {"device.g_lrs_mu", real(c.device.g_lrs_mu)},
      {"device.g_lrs_sigma", real(c.device.g_lrs_sigma)},
      {"device.g_hrs_mu", real(c.device.g_hrs_mu)},
      {"device.g_hrs_sigma", real(c.device.g_hrs_sigma)},
      {"drift.alpha_hrs", real(c.drift.alpha_hrs)},
      {"drift.beta_lrs", real(c.drift.beta_lrs)},
      {"drift.v_ref_bl", real(c.drift.v_ref_bl)},
      {"drift.gamma_v", real(c.drift.gamma_v)},
      {"drift.seconds_per_cycle", real(c.drift.seconds_per_cycle)},
      {"adc.offset", real(c.adc.ref.offset)},
      {"adc.step", real(c.adc.ref.step)},
      {"adc.v_blt", real(c.adc.ref.v_blt)},
      {"adc.sigma_static", real(c.adc.sigma_static)},
      {"adc.sigma_dynamic", real(c.adc.sigma_dynamic)},
      {"xfer.v_read", real(c.xfer.v_read)},
      {"xfer.g_half", real(c.xfer.g_half)},
      {"calib.tune_vectors", integer(c.tune_vectors)},
      {"calib.extract_vectors", integer(c.extract_vectors)},
      {"calib.intercept", boolean(c.intercept)},
      {"calib.residual_bins", integer(c.residual_bins)},
      {"calib.include_ideal_reference", boolean(c.include_ideal_reference)},
      {"network.task",
       [&](const auto& k, const auto& v) {
         if (v == "gridworld") c.task = TaskKind::kGridWorld;
         else if (v == "supervised") c.task = TaskKind::kSupervised;
         else throw ConfigError(k + ": expected gridworld or supervised");
       }},
      {"network.w_bits", integer(c.w_bits)},
      {"network.a_bits", integer(c.a_bits)},
      {"network.dataset", text(c.dataset)},
      {"network.weights", text(c.weights)},
      {"gridworld.n", integer(c.dqn.grid.n)},
      {"gridworld.holes", integer(c.dqn.grid.holes)},
      {"gridworld.max_steps", integer(c.dqn.grid.max_steps)},
      {"train.hidden", integer(c.dqn.hidden)},
      {"train.steps", integer(c.dqn.max_steps)},
      {"train.gamma", real(c.dqn.gamma)},
      {"train.lr", real(c.dqn.lr)},
      {"train.batch", integer(c.dqn.batch)},
      {"train.qat_bits", integer(c.dqn.qat_bits)},
      {"train.qat_max_bits", integer(c.dqn.qat_max_bits)},
      {"train.weight_clip", real(c.dqn.weight_clip)},
      {"train.target_win", real(c.dqn.target_win)},
      {"train.epochs", integer(c.supervised.epochs)},
      {"train.supervised_lr", real(c.supervised.lr)},
      {"eval.missions", integer(c.missions)},
      {"eval.samples", integer(c.samples)},
      {"drift_run.events", integer(c.drift_events)},
      {"drift_run.cycles", integer(c.drift_cycles)},
      {"drift_run.v_bl", real(c.drift_v_bl)},
  };
  for (const auto& [k, v] : entries) {
    const auto it = schema.find(k);
    if (it == schema.end()) throw ConfigError("unknown key " + k);
    it->second(k, v);
  }
  if (seed_override) {
    c.seed = *seed_override;
    c.seed_set = true;
  }
  return c;
}

/// CIM_SEED, when set, overrides the configured seed.
inline std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("CIM_SEED");
  if (!s) return std::nullopt;
  return parse_u64("CIM_SEED", s);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Canonical text of the effective configuration: every schema key in a
/// fixed order. Its digest identifies the run.
inline std::string canonical_config(const ExperimentConfig& c) {
  std::ostringstream o;
  o.precision(17);
  auto kv = [&](const char* k, const auto& v) { o << k << " = " << v << "\n"; };
  std::string stages;
  for (const auto& s : c.pipeline) stages += (stages.empty() ? "" : ",") + s;
  kv("experiment.seed", c.seed);
  kv("experiment.output_dir", c.output_dir);
  kv("experiment.pipeline", stages);
  kv("experiment.scope", to_string(c.scope));
  kv("experiment.modules", c.modules);
  kv("experiment.p_lrs", c.p_lrs);
  kv("device.g_lrs_mu", c.device.g_lrs_mu);
  kv("device.g_lrs_sigma", c.device.g_lrs_sigma);
  kv("device.g_hrs_mu", c.device.g_hrs_mu);
  kv("device.g_hrs_sigma", c.device.g_hrs_sigma);
  kv("drift.alpha_hrs", c.drift.alpha_hrs);
  kv("drift.beta_lrs", c.drift.beta_lrs);
  kv("drift.v_ref_bl", c.drift.v_ref_bl);
  kv("drift.gamma_v", c.drift.gamma_v);
  kv("drift.seconds_per_cycle", c.drift.seconds_per_cycle);
  kv("adc.offset", c.adc.ref.offset);
  kv("adc.step", c.adc.ref.step);
  kv("adc.v_blt", c.adc.ref.v_blt);
  kv("adc.sigma_static", c.adc.sigma_static);
  kv("adc.sigma_dynamic", c.adc.sigma_dynamic);
  kv("xfer.v_read", c.xfer.v_read);
  kv("xfer.g_half", c.xfer.g_half);
  kv("calib.tune_vectors", c.tune_vectors);
  kv("calib.extract_vectors", c.extract_vectors);
  kv("calib.intercept", c.intercept ? "true" : "false");
  kv("calib.residual_bins", c.residual_bins);
  kv("calib.include_ideal_reference", c.include_ideal_reference ? "true" : "false");
  kv("network.task", c.task == TaskKind::kGridWorld ? "gridworld" : "supervised");
  kv("network.w_bits", c.w_bits);
  kv("network.a_bits", c.a_bits);
  kv("network.dataset", c.dataset);
  kv("network.weights", c.weights);
  kv("gridworld.n", c.dqn.grid.n);
  kv("gridworld.holes", c.dqn.grid.holes);
  kv("gridworld.max_steps", c.dqn.grid.max_steps);
  kv("train.hidden", c.dqn.hidden);
  kv("train.steps", c.dqn.max_steps);
  kv("train.gamma", c.dqn.gamma);
  kv("train.lr", c.dqn.lr);
  kv("train.batch", c.dqn.batch);
  kv("train.qat_bits", c.dqn.qat_bits);
  kv("train.qat_max_bits", c.dqn.qat_max_bits);
  kv("train.weight_clip", c.dqn.weight_clip);
  kv("train.target_win", c.dqn.target_win);
  kv("train.epochs", c.supervised.epochs);
  kv("train.supervised_lr", c.supervised.lr);
  kv("eval.missions", c.missions);
  kv("eval.samples", c.samples);
  kv("drift_run.events", c.drift_events);
  kv("drift_run.cycles", c.drift_cycles);
  kv("drift_run.v_bl", c.drift_v_bl);
  return o.str();
}

inline ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override) {
  auto c = config_from_entries(parse_config_text(read_text_file(path)), seed_override ? seed_override : env_seed());
  c.validate();
  return c;
}

}  // namespace cimsim
