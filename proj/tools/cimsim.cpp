#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cimsim/config.hpp"
#include "cimsim/pipeline.hpp"
#include "cimsim/plotdata.hpp"

namespace {

using namespace cimsim;

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int threads = -1;
};

struct Overrides {
  std::string scope;
  int vectors = 0;
  int events = -1;
  std::int64_t cycles = -1;
  double v_bl = -1.0;
  std::int64_t missions = 0;
  std::int64_t samples = -1;
  std::string weights;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "experiment config file");
  sub->add_option("--seed", c.seed, "master seed (overrides CIM_SEED and experiment.seed)");
  sub->add_option("--out", c.out, "output directory (overrides experiment.output_dir)");
  sub->add_option("--threads", c.threads, "worker threads, 0 = all cores");
}

ExperimentConfig resolve(const Common& c, const Overrides& o, std::optional<TaskKind> task) {
  const std::optional<std::uint64_t> seed = c.seed ? c.seed : env_seed();
  ExperimentConfig cfg =
      config_from_entries(c.config.empty() ? ConfigEntries{} : parse_config_text(read_text_file(c.config)), seed);
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (c.threads >= 0) cfg.threads = c.threads;
  if (task) cfg.task = *task;
  if (!o.scope.empty()) {
    try {
      cfg.scope = parse_scope(o.scope);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("--scope: ") + e.what());
    }
  }
  if (o.events >= 0) cfg.drift_events = o.events;
  if (o.cycles >= 0) cfg.drift_cycles = o.cycles;
  if (o.v_bl >= 0.0) cfg.drift_v_bl = o.v_bl;
  if (o.missions > 0) cfg.missions = o.missions;
  if (o.samples >= 0) cfg.samples = o.samples;
  if (!o.weights.empty()) cfg.weights = o.weights;
  cfg.validate();
  return cfg;
}

void print_manifest(const RunManifest& m) {
  for (const auto& s : m.stages) {
    std::printf("%-13s %8.2fs  %s\n", s.name.c_str(), s.seconds, s.summary.dump().c_str());
  }
  if (!m.ok) std::fprintf(stderr, "stage '%s' failed: %s\n", m.failed_stage.c_str(), m.error.c_str());
}

int run(const ExperimentConfig& cfg, const std::vector<std::string>& stages) {
  Workspace ws(cfg, cfg.output_dir);
  const RunManifest m = run_stages(ws, stages);
  print_manifest(m);
  return m.ok ? 0 : kExitStage;
}

/// Parses "0.1,0.2,..." into floats.
std::vector<float> parse_vector(const std::string& s) {
  std::vector<float> out;
  for (const auto& item : parse_list(s)) out.push_back(static_cast<float>(parse_real("--input", item)));
  return out;
}

int forward_command(const ExperimentConfig& cfg, const std::string& input) {
  Workspace ws(cfg, cfg.output_dir);
  StageRecord rec;
  const MappedNetwork& net = ws.mapped(rec);
  std::vector<float> x;
  if (!input.empty()) {
    x = parse_vector(input);
  } else if (cfg.task == TaskKind::kGridWorld) {
    const auto o = observe(family_mission(cfg.dqn.grid, cfg.seed, MissionFamily::kTest, 0));
    x.assign(o.begin(), o.end());
  } else {
    const Dataset& d = ws.dataset();
    x = d.image(split_dataset(d).test.front(), pixel_max(d));
  }
  if (static_cast<int>(x.size()) != net.qnet.arch.input_size())
    throw ConfigError("--input: expected " + std::to_string(net.qnet.arch.input_size()) + " values");
  const auto noisy = noisy_forward(net, x, stage_stream(cfg.seed, StreamKey::kForward));
  const auto clean = quantized_forward(net.qnet, x);
  const nlohmann::json j = {{"noisy", noisy},
                            {"quantized", clean},
                            {"noisy_argmax", argmax(std::span<const double>(noisy))},
                            {"quantized_argmax", argmax(std::span<const double>(clean))}};
  std::cout << j.dump(1) << "\n";
  return 0;
}

int emit_command(const std::string& kind, const std::string& artifact, const std::string& output) {
  const PlotKind k = parse_plot_kind(kind);
  const auto j = nlohmann::json::parse(read_binary(artifact));
  const std::string csv = emit_plotdata(j, k);
  if (output.empty())
    std::cout << csv;
  else
    write_binary(output, csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RRAM compute-in-memory noise simulator"};
  app.require_subcommand(1);
  Common common;
  Overrides ov;
  std::string input, plot_kind, artifact, plot_out;

  auto* characterize = app.add_subcommand("characterize", "build the chip and record response counts");
  auto* calibrate = app.add_subcommand("calibrate", "tune ADC references at every scope");
  auto* extract = app.add_subcommand("extract-eb", "fit effective bits and noise profiles");
  auto* inject = app.add_subcommand("inject", "quantize, map and inject noise into the trained network");
  auto* forward = app.add_subcommand("forward", "one noisy forward pass of the mapped network");
  auto* drift = app.add_subcommand("drift-run", "stress, re-extract and re-evaluate over a drift schedule");
  auto* train_gw = app.add_subcommand("train-gridworld", "train the GridWorld policy");
  auto* eval_gw = app.add_subcommand("eval-gridworld", "evaluate the mapped GridWorld policy");
  auto* eval_sup = app.add_subcommand("eval-supervised", "evaluate the mapped classifier");
  auto* pipeline = app.add_subcommand("pipeline", "run experiment.pipeline end to end");
  auto* emit = app.add_subcommand("emit-plot", "convert an artifact to plot CSV");

  for (auto* s : {characterize, calibrate, extract, inject, forward, drift, train_gw, eval_gw, eval_sup, pipeline})
    add_common(s, common);
  for (auto* s : {calibrate, extract}) s->add_option("--scope", ov.scope, "global, module or adc");
  calibrate->add_option("--vectors", ov.vectors, "input vectors per group");
  extract->add_option("--vectors", ov.vectors, "input vectors per group (256 or 512)")
      ->check(CLI::IsMember({256, 512}));
  for (auto* s : {inject, drift, eval_gw, eval_sup, forward}) s->add_option("--weights", ov.weights, "CIMW weights file");
  forward->add_option("--input", input, "comma-separated input vector (default: first test item)");
  drift->add_option("--events", ov.events, "stress events");
  drift->add_option("--cycles", ov.cycles, "cycles per event");
  drift->add_option("--v-bl", ov.v_bl, "bitline stress voltage");
  for (auto* s : {drift, eval_gw}) s->add_option("--missions", ov.missions, "GridWorld test missions");
  for (auto* s : {drift, eval_sup}) s->add_option("--samples", ov.samples, "noisy test samples (0: one pass)");
  emit->add_option("--kind", plot_kind, "heatmap, histogram, trajectory or ebmap")->required();
  emit->add_option("--artifact", artifact, "artifact JSON")->required();
  emit->add_option("--output", plot_out, "CSV path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (emit->parsed()) return emit_command(plot_kind, artifact, plot_out);

    std::optional<TaskKind> task;
    if (train_gw->parsed() || eval_gw->parsed()) task = TaskKind::kGridWorld;
    if (eval_sup->parsed()) task = TaskKind::kSupervised;
    ExperimentConfig cfg = resolve(common, ov, task);
    if (ov.vectors > 0) {
      if (calibrate->parsed()) cfg.tune_vectors = ov.vectors;
      if (extract->parsed()) cfg.extract_vectors = ov.vectors;
    }
    set_thread_count(static_cast<unsigned>(cfg.threads));

    if (characterize->parsed()) return run(cfg, {"characterize"});
    if (calibrate->parsed()) return run(cfg, {"calibrate"});
    if (extract->parsed()) return run(cfg, {"extract"});
    if (inject->parsed()) return run(cfg, {"inject"});
    if (drift->parsed()) return run(cfg, {"drift"});
    if (train_gw->parsed()) return run(cfg, {"train"});
    if (eval_gw->parsed() || eval_sup->parsed()) return run(cfg, {"evaluate"});
    if (forward->parsed()) return forward_command(cfg, input);
    if (pipeline->parsed()) {
      Workspace ws(cfg, cfg.output_dir);
      const RunManifest m = run_stages(ws, cfg.pipeline);
      print_manifest(m);
      std::printf("manifest: %s\n", (ws.dir() / "manifest.json").string().c_str());
      return m.ok ? 0 : kExitStage;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitStage;
  }
  return 0;
}
