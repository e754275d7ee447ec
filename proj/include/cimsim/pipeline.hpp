#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cimsim/calib.hpp"
#include "cimsim/config.hpp"
#include "cimsim/crossbar.hpp"
#include "cimsim/effbits.hpp"
#include "cimsim/formats.hpp"
#include "cimsim/nnsim.hpp"
#include "cimsim/parallel.hpp"
#include "cimsim/plotdata.hpp"
#include "cimsim/snapshot.hpp"
#include "cimsim/tasks.hpp"

namespace cimsim {

inline constexpr const char* kToolVersion = "cimsim 0.1.0";

class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ArtifactDigest {
  std::string path;  // relative to the output directory
  std::string sha256;
  std::uint64_t bytes = 0;
};

struct StageRecord {
  std::string name;
  std::vector<ArtifactDigest> inputs;
  std::vector<ArtifactDigest> outputs;
  double seconds = 0.0;
  nlohmann::json summary = nlohmann::json::object();
};

struct RunManifest {
  std::string config_sha256;
  std::string tool_version = kToolVersion;
  std::uint64_t seed = 0;
  std::vector<StageRecord> stages;
  bool ok = true;
  std::string failed_stage;
  std::string error;

  const StageRecord* stage(const std::string& name) const {
    for (const auto& s : stages)
      if (s.name == name) return &s;
    return nullptr;
  }
};

inline nlohmann::json to_json(const ArtifactDigest& a) {
  return {{"path", a.path}, {"sha256", a.sha256}, {"bytes", a.bytes}};
}

inline nlohmann::json to_json(const RunManifest& m) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : m.stages) {
    nlohmann::json in = nlohmann::json::array();
    nlohmann::json out = nlohmann::json::array();
    for (const auto& a : s.inputs) in.push_back(to_json(a));
    for (const auto& a : s.outputs) out.push_back(to_json(a));
    stages.push_back({{"name", s.name}, {"inputs", in}, {"outputs", out}, {"seconds", s.seconds},
                      {"summary", s.summary}});
  }
  return {{"config_sha256", m.config_sha256}, {"tool_version", m.tool_version}, {"seed", m.seed},
          {"stages", stages}, {"status", m.ok ? "ok" : "failed"}, {"failed_stage", m.failed_stage},
          {"error", m.error}};
}

/// Recomputes every recorded output digest; returns the paths that differ.
inline std::vector<std::string> verify_manifest(const RunManifest& m, const std::filesystem::path& dir) {
  std::vector<std::string> bad;
  for (const auto& s : m.stages)
    for (const auto& a : s.outputs) {
      const auto p = dir / a.path;
      if (!std::filesystem::exists(p) || sha256_file(p.string()) != a.sha256) bad.push_back(a.path);
    }
  return bad;
}

/// The virtual chip: module m takes its bit pattern from build substream
/// (m, 0) and its cell and comparator samples from (m, 1).
inline std::vector<CrossbarModule> build_chip(const ExperimentConfig& c) {
  const Stream rng = stage_stream(c.seed, StreamKey::kBuild);
  std::vector<CrossbarModule> mods;
  for (int m = 0; m < c.modules; ++m) {
    const auto pattern = BitPattern::random(rng.substream(static_cast<std::uint64_t>(m), 0), c.p_lrs);
    mods.push_back(build_module(c.device, pattern, c.adc, c.xfer, rng.substream(static_cast<std::uint64_t>(m), 1)));
  }
  return mods;
}

/// Everything the stages exchange. Missing inputs are loaded from the
/// output directory, so single stages can run against an earlier run.
class Workspace {
 public:
  Workspace(ExperimentConfig cfg, std::filesystem::path dir) : cfg_(std::move(cfg)), dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  const ExperimentConfig& config() const { return cfg_; }
  ExperimentConfig& config() { return cfg_; }
  const std::filesystem::path& dir() const { return dir_; }

  Stream stream(StreamKey key) const { return stage_stream(cfg_.seed, key); }

  // -- artifacts -------------------------------------------------------------

  ArtifactDigest write(const std::string& name, const std::string& bytes) {
    write_binary((dir_ / name).string(), bytes);
    return {name, sha256_hex(bytes), bytes.size()};
  }
  ArtifactDigest write_json(const std::string& name, const nlohmann::json& j) { return write(name, j.dump(1) + "\n"); }

  ArtifactDigest digest_of(const std::string& name) const {
    const auto bytes = read_binary((dir_ / name).string());
    return {name, sha256_hex(bytes), bytes.size()};
  }

  nlohmann::json read_json(const std::string& name, StageRecord& rec) const {
    const auto p = dir_ / name;
    if (!std::filesystem::exists(p)) throw StageError("missing input artifact " + p.string());
    rec.inputs.push_back(digest_of(name));
    return nlohmann::json::parse(read_binary(p.string()));
  }

  // -- state -----------------------------------------------------------------

  /// Builds the chip and writes modules.json as an output of `rec`.
  std::vector<CrossbarModule>& build_modules(StageRecord& rec) {
    modules_ = build_chip(cfg_);
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& m : *modules_) arr.push_back(to_json(m));
    rec.outputs.push_back(write_json("modules.json", {{"kind", "modules"}, {"modules", arr}}));
    return *modules_;
  }

  /// The chip of this run; built on first use when no modules.json exists.
  std::vector<CrossbarModule>& modules(StageRecord& rec) {
    if (!modules_) {
      if (!std::filesystem::exists(dir_ / "modules.json")) return build_modules(rec);
      const auto j = read_json("modules.json", rec);
      modules_.emplace();
      for (const auto& m : j.at("modules")) modules_->push_back(module_from_json(m));
    }
    return *modules_;
  }
  ScopedTuning& tuning(StageRecord& rec) {
    if (!tuning_) {
      const auto j = read_json("tuning.json", rec);
      tuning_ = ScopedTuning{tuning_from_json(j.at("global")), tuning_from_json(j.at("module")),
                             tuning_from_json(j.at("adc"))};
    }
    return *tuning_;
  }
  std::vector<NoiseProfile>& profiles(StageRecord& rec) {
    if (!profiles_) {
      const auto j = read_json("profiles.json", rec);
      profiles_.emplace();
      for (const auto& p : j.at("profiles")) profiles_->push_back(profile_from_json(p));
    }
    return *profiles_;
  }
  FloatNetwork& weights(StageRecord& rec) {
    if (!weights_) {
      const std::string path = cfg_.weights.empty() ? (dir_ / "weights.cimw").string() : cfg_.weights;
      if (!std::filesystem::exists(path)) throw StageError("missing weights " + path);
      weights_ = load_network(path, network_arch());
      if (cfg_.weights.empty()) rec.inputs.push_back(digest_of("weights.cimw"));
    }
    return *weights_;
  }
  MappedNetwork& mapped(StageRecord& rec) {
    if (!mapped_) {
      const auto meta = read_json("mapped.json", rec);
      rec.inputs.push_back(digest_of("mapped.bin"));
      mapped_ = restore({meta, read_binary((dir_ / "mapped.bin").string())});
    }
    return *mapped_;
  }
  const Dataset& dataset() {
    if (!dataset_) dataset_ = load_dataset(cfg_.dataset);
    return *dataset_;
  }

  NetworkArch network_arch() {
    if (cfg_.task == TaskKind::kGridWorld) return NetworkArch::mlp(kObservationSize, cfg_.dqn.hidden, kActions);
    return supervised_arch(dataset(), cfg_.supervised);
  }

  std::vector<std::vector<float>> calibration_inputs() {
    if (cfg_.task == TaskKind::kGridWorld) return calibration_observations(cfg_.dqn.grid, cfg_.seed);
    return calibration_images(dataset());
  }

  std::optional<std::vector<CrossbarModule>> modules_;
  std::optional<ScopedTuning> tuning_;
  std::optional<std::vector<NoiseProfile>> profiles_;
  std::optional<FloatNetwork> weights_;
  std::optional<MappedNetwork> mapped_;
  std::optional<Dataset> dataset_;

 private:
  ExperimentConfig cfg_;
  std::filesystem::path dir_;
};

// ---------------------------------------------------------------------------
// Stages

inline ReferenceGrid pipeline_grid(const ExperimentConfig& c) {
  ReferenceGrid grid = ReferenceGrid::standard(c.adc.ref);
  if (c.include_ideal_reference) {
    try {
      grid.include(ideal_reference(c.device, c.xfer, c.adc.ref.v_blt));
    } catch (const std::exception&) {
      // no separating ladder exists for these device parameters
    }
  }
  return grid;
}

inline DriftContext drift_context(Workspace& ws, StageRecord& rec) {
  const auto& c = ws.config();
  DriftContext ctx;
  ctx.tuning = ws.tuning(rec).at(c.scope);
  ctx.drift = c.drift;
  ctx.scope = c.scope;
  ctx.n_vectors = c.extract_vectors;
  ctx.residual_bins = c.residual_bins;
  ctx.fit.intercept = c.intercept;
  ctx.extract_rng = ws.stream(StreamKey::kExtract);
  ctx.inject_seed = c.seed;
  return ctx;
}

inline void stage_build(Workspace& ws, StageRecord& rec) {
  ws.modules_.reset();
  rec.summary = {{"modules", ws.build_modules(rec).size()}};
}

inline void stage_characterize(Workspace& ws, StageRecord& rec) {
  const auto& c = ws.config();
  const auto& mods = ws.modules(rec);
  const Stream rng = ws.stream(StreamKey::kCharacterize);
  ResponseCounts total;
  std::array<std::uint64_t, kGoldenValues> golden{};
  for (std::size_t m = 0; m < mods.size(); ++m) {
    const auto ch = characterize(mods[m], c.tune_vectors, rng.substream(m), true);
    total += ch.counts;
    const auto h = golden_histogram(ch.trace);
    for (int g = 0; g < kGoldenValues; ++g) golden[g] += h[g];
  }
  rec.outputs.push_back(ws.write_json("counts.json", counts_artifact(total, golden)));
  rec.outputs.push_back(ws.write("heatmap.csv", heatmap_csv(total)));
  rec.outputs.push_back(ws.write("golden_histogram.csv", golden_histogram_csv(golden)));
  const BinMap map = absolute_binning(total);
  rec.summary = {{"reads", total.total()}, {"default_score", score_config(total, map)}};
}

inline void stage_calibrate(Workspace& ws, StageRecord& rec) {
  const auto& c = ws.config();
  const auto& mods = ws.modules(rec);
  TuningOptions opt;
  opt.default_config = c.adc.ref;
  const ReferenceGrid grid = pipeline_grid(c);
  ScopedTuning t = tune_all_scopes(mods, grid, c.tune_vectors, ws.stream(StreamKey::kCalibrate), opt);
  rec.outputs.push_back(ws.write_json(
      "tuning.json",
      {{"kind", "tuning"}, {"global", to_json(t.global)}, {"module", to_json(t.module)}, {"adc", to_json(t.adc)}}));
  const TuningResult& r = t.at(c.scope);
  // Response counts under the tuned references.
  std::vector<CrossbarModule> tuned = mods;
  apply_tuning(tuned, r);
  ResponseCounts total;
  const Stream rng = ws.stream(StreamKey::kCalibrate).substream(0xC0u);
  for (std::size_t m = 0; m < tuned.size(); ++m) total += characterize(tuned[m], c.tune_vectors, rng.substream(m), false).counts;
  rec.outputs.push_back(ws.write("tuned_heatmap.csv", heatmap_csv(total)));
  rec.summary = {{"scope", to_string(c.scope)},
                 {"grid_size", grid.size()},
                 {"score", r.total_score()},
                 {"default_score", r.total_default_score()},
                 {"mean_abs_error", r.mean_abs_error()},
                 {"default_mean_abs_error", r.default_mean_abs_error()},
                 {"global_score", t.global.total_score()},
                 {"module_score", t.module.total_score()},
                 {"adc_score", t.adc.total_score()}};
  ws.tuning_ = std::move(t);
}

inline void stage_extract(Workspace& ws, StageRecord& rec) {
  const auto& c = ws.config();
  const auto& mods = ws.modules(rec);
  const DriftContext ctx = drift_context(ws, rec);
  const auto fitted = extract_effective_bits(mods, ctx.tuning, ctx.n_vectors, ctx.extract_rng, ctx.fit);
  auto profiles = eb_statistics(fitted, c.scope, c.residual_bins);
  rec.outputs.push_back(ws.write_json("profiles.json", profiles_artifact(profiles, c.scope)));
  const EbMap map = eb_map(fitted, 0);
  rec.outputs.push_back(ws.write_json("ebmap.json", ebmap_artifact(map, 0)));
  rec.outputs.push_back(ws.write("ebmap.csv", ebmap_csv(map)));
  rec.outputs.push_back(ws.write("residual_histogram.csv", residual_histogram_csv(profiles.front().residual)));
  double mu0 = 0.0, mu1 = 0.0;
  for (const auto& p : profiles) {
    mu0 += p.mu0;
    mu1 += p.mu1;
  }
  rec.summary = {{"profiles", profiles.size()},
                 {"mean_mu0", mu0 / static_cast<double>(profiles.size())},
                 {"mean_mu1", mu1 / static_cast<double>(profiles.size())}};
  ws.profiles_ = std::move(profiles);
}

inline void stage_train(Workspace& ws, StageRecord& rec) {
  const auto& c = ws.config();
  if (!c.weights.empty()) {
    ws.weights(rec);
    rec.summary = {{"loaded", c.weights}};
    return;
  }
  FloatNetwork net;
  if (c.task == TaskKind::kGridWorld) {
    const TrainReport tr = train_policy(c.dqn, c.seed);
    net = tr.net;
    rec.summary = {{"task", "gridworld"}, {"validation_win_rate", tr.win_rate}, {"steps", tr.steps},
                   {"reached_target", tr.reached}};
  } else {
    net = train_supervised(ws.dataset(), c.supervised, c.seed);
    rec.summary = {{"task", "supervised"},
                   {"float_test_accuracy", eval_supervised(classifier(net), ws.dataset(), c.samples, c.seed)}};
  }
  std::ostringstream bytes;
  write_cimw(bytes, network_tensors(net));
  rec.outputs.push_back(ws.write("weights.cimw", bytes.str()));
  ws.weights_ = std::move(net);
}

inline QuantizedNetwork quantized_network(Workspace& ws, StageRecord& rec) {
  const auto& c = ws.config();
  const FloatNetwork& net = ws.weights(rec);
  return quantize_network(net, calibrate_quant(net, ws.calibration_inputs(), c.w_bits, c.a_bits));
}

inline void stage_inject(Workspace& ws, StageRecord& rec) {
  const auto& c = ws.config();
  const QuantizedNetwork q = quantized_network(ws, rec);
  MappedNetwork net = inject_static(map_network(q, ws.profiles(rec), c.seed), c.seed);
  const auto snap = snapshot(net);
  rec.outputs.push_back(ws.write_json("mapped.json", snap.meta));
  rec.outputs.push_back(ws.write("mapped.bin", snap.sidecar));
  std::size_t groups = 0;
  for (const auto& l : net.layers) groups += static_cast<std::size_t>(l.physical_groups());
  rec.summary = {{"physical_groups", groups}, {"profiles", net.profiles.size()}};
  ws.mapped_ = std::move(net);
}

/// Task metric of a mapped network: win rate or top-1 accuracy.
inline double task_metric(Workspace& ws, const MappedNetwork& net, nlohmann::json* report = nullptr) {
  const auto& c = ws.config();
  if (c.task == TaskKind::kGridWorld) {
    const EvalReport r = evaluate_policy(noisy_policy(net), c.dqn.grid, c.missions, c.seed);
    if (report) *report = to_json(r);
    return r.win_rate;
  }
  const double acc = eval_supervised(classifier(net), ws.dataset(), c.samples, c.seed);
  if (report) *report = {{"accuracy", acc}, {"seed", c.seed}};
  return acc;
}

inline void stage_evaluate(Workspace& ws, StageRecord& rec) {
  const auto& c = ws.config();
  const MappedNetwork& net = ws.mapped(rec);
  nlohmann::json noisy;
  task_metric(ws, net, &noisy);
  nlohmann::json clean;
  std::string csv;
  if (c.task == TaskKind::kGridWorld) {
    const EvalReport r = evaluate_policy(quantized_policy(net.qnet), c.dqn.grid, c.missions, c.seed);
    clean = to_json(r);
    csv = "config,win_rate,mean_steps,n_missions\n";
    csv += "quantized," + csv_number(r.win_rate) + "," + csv_number(r.mean_steps) + "," + std::to_string(r.n_missions) + "\n";
    csv += "noisy," + csv_number(noisy["win_rate"].get<double>()) + "," + csv_number(noisy["mean_steps"].get<double>()) +
           "," + std::to_string(noisy["n_missions"].get<std::int64_t>()) + "\n";
  } else {
    const double acc = eval_supervised(classifier(net.qnet), ws.dataset(), c.samples, c.seed);
    clean = {{"accuracy", acc}, {"seed", c.seed}};
    csv = "config,accuracy\nquantized," + csv_number(acc) + "\nnoisy," + csv_number(noisy["accuracy"].get<double>()) + "\n";
  }
  const nlohmann::json report = {{"kind", "evaluation"}, {"scope", to_string(c.scope)}, {"quantized", clean}, {"noisy", noisy}};
  rec.outputs.push_back(ws.write_json("report.json", report));
  rec.outputs.push_back(ws.write("report.csv", csv));
  rec.summary = report;
}

inline void stage_drift(Workspace& ws, StageRecord& rec) {
  const auto& c = ws.config();
  std::vector<CrossbarModule> mods = ws.modules(rec);
  for (auto& m : mods) m.track_stress = true;
  const DriftContext ctx = drift_context(ws, rec);
  MappedNetwork net = ws.mapped(rec);
  auto mean_mu = [](const std::vector<NoiseProfile>& ps, int bit) {
    double s = 0.0;
    for (const auto& p : ps) s += p.mu(bit);
    return s / static_cast<double>(ps.size());
  };
  std::vector<TrajectoryPoint> pts;
  pts.push_back({0, mean_mu(net.profiles, 0), mean_mu(net.profiles, 1), task_metric(ws, net)});
  const StressEvent ev{c.drift_v_bl, 1.1, c.drift_cycles};
  for (int e = 1; e <= c.drift_events; ++e) {
    net = apply_drift_to_network(net, mods, {ev}, ctx);
    pts.push_back({static_cast<std::int64_t>(e) * c.drift_cycles, mean_mu(net.profiles, 0), mean_mu(net.profiles, 1),
                   task_metric(ws, net)});
  }
  rec.outputs.push_back(ws.write_json("drift.json", trajectory_artifact(pts)));
  rec.outputs.push_back(ws.write("trajectory.csv", trajectory_csv(pts)));
  rec.summary = {{"events", c.drift_events}, {"final_mu0", pts.back().mu0}, {"final_accuracy", pts.back().accuracy}};
}

using StageFn = void (*)(Workspace&, StageRecord&);

inline StageFn stage_function(const std::string& name) {
  if (name == "build") return stage_build;
  if (name == "characterize") return stage_characterize;
  if (name == "calibrate") return stage_calibrate;
  if (name == "extract") return stage_extract;
  if (name == "train") return stage_train;
  if (name == "inject") return stage_inject;
  if (name == "evaluate") return stage_evaluate;
  if (name == "drift") return stage_drift;
  throw ConfigError("unknown stage '" + name + "'");
}

/// Runs the stages in order and writes manifest.json. A failing stage stops
/// the run; the manifest then records the completed stages and the error.
inline RunManifest run_stages(Workspace& ws, const std::vector<std::string>& stages) {
  const auto& c = ws.config();
  for (const auto& s : stages) stage_function(s);
  set_thread_count(static_cast<unsigned>(c.threads));
  RunManifest m;
  m.config_sha256 = sha256_hex(canonical_config(c));
  m.seed = c.seed;
  for (const auto& name : stages) {
    StageRecord rec;
    rec.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      stage_function(name)(ws, rec);
    } catch (const std::exception& e) {
      m.ok = false;
      m.failed_stage = name;
      m.error = e.what();
      break;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    m.stages.push_back(std::move(rec));
  }
  ws.write_json("manifest.json", to_json(m));
  return m;
}

inline RunManifest run_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  Workspace ws(cfg, cfg.output_dir);
  return run_stages(ws, cfg.pipeline);
}

}  // namespace cimsim
