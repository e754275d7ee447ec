#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cimsim/formats.hpp"
#include "cimsim/model.hpp"
#include "cimsim/nnsim.hpp"
#include "cimsim/parallel.hpp"
#include "cimsim/rng.hpp"

namespace cimsim {

// ---------------------------------------------------------------------------
// GridWorld

enum class Action : int { kUp = 0, kRight = 1, kDown = 2, kLeft = 3 };
inline constexpr int kActions = 4;
inline constexpr int kObservationSize = 8;

struct Pos {
  int r = 0;
  int c = 0;
  bool operator==(const Pos&) const = default;
};

inline Pos moved(Pos p, Action a) {
  switch (a) {
    case Action::kUp: return {p.r - 1, p.c};
    case Action::kRight: return {p.r, p.c + 1};
    case Action::kDown: return {p.r + 1, p.c};
    case Action::kLeft: return {p.r, p.c - 1};
  }
  return p;
}

struct GridConfig {
  int n = 5;
  int holes = 3;
  int max_steps = 0;  // 0 means 4 n^2

  int step_cap() const { return max_steps > 0 ? max_steps : 4 * n * n; }
  void validate() const {
    if (n < 3) throw std::invalid_argument("gridworld: n must be >= 3");
    if (holes < 0 || holes > n * n - 2) throw std::invalid_argument("gridworld: too many holes");
    if (max_steps < 0) throw std::invalid_argument("gridworld: max_steps must be >= 0");
  }
};

struct GridWorld {
  int n = 5;
  Pos agent;
  Pos goal;
  std::vector<Pos> holes;
  int max_steps = 100;
  int steps = 0;
  bool done = false;
  bool won = false;

  bool inside(Pos p) const { return p.r >= 0 && p.r < n && p.c >= 0 && p.c < n; }
  bool is_hole(Pos p) const { return std::find(holes.begin(), holes.end(), p) != holes.end(); }
};

struct StepResult {
  double reward = 0.0;
  bool done = false;
};

inline StepResult gridworld_step(GridWorld& env, Action a) {
  if (env.done) throw std::logic_error("gridworld_step: episode already finished");
  const Pos next = moved(env.agent, a);
  if (env.inside(next)) env.agent = next;
  ++env.steps;
  StepResult res{-0.01, false};
  if (env.agent == env.goal) {
    res = {1.0, true};
    env.won = true;
  } else if (env.is_hole(env.agent)) {
    res = {-1.0, true};
  }
  if (env.steps >= env.max_steps) res.done = true;
  env.done = res.done;
  return res;
}

/// Four collision flags (hole or wall one step N, E, S, W), then the goal
/// offset split into its N, E, S, W components, each in [0, 1].
inline std::array<float, kObservationSize> observe(const GridWorld& env) {
  std::array<float, kObservationSize> o{};
  for (int a = 0; a < kActions; ++a) {
    const Pos p = moved(env.agent, static_cast<Action>(a));
    o[a] = (!env.inside(p) || env.is_hole(p)) ? 1.0f : 0.0f;
  }
  const float span = static_cast<float>(env.n - 1);
  const int dr = env.goal.r - env.agent.r;
  const int dc = env.goal.c - env.agent.c;
  o[4] = std::max(-dr, 0) / span;
  o[5] = std::max(dc, 0) / span;
  o[6] = std::max(dr, 0) / span;
  o[7] = std::max(-dc, 0) / span;
  return o;
}

inline bool goal_reachable(const GridWorld& env) {
  std::vector<char> seen(env.n * env.n, 0);
  std::vector<Pos> stack{env.agent};
  seen[env.agent.r * env.n + env.agent.c] = 1;
  while (!stack.empty()) {
    const Pos p = stack.back();
    stack.pop_back();
    if (p == env.goal) return true;
    for (int a = 0; a < kActions; ++a) {
      const Pos q = moved(p, static_cast<Action>(a));
      if (!env.inside(q) || env.is_hole(q) || seen[q.r * env.n + q.c]) continue;
      seen[q.r * env.n + q.c] = 1;
      stack.push_back(q);
    }
  }
  return false;
}

/// Random layout: distinct goal, holes and start, redrawn until the goal can
/// be reached without crossing a hole.
inline GridWorld make_mission(const GridConfig& cfg, Stream rng) {
  cfg.validate();
  const int cells = cfg.n * cfg.n;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<int> order(cells);
    std::iota(order.begin(), order.end(), 0);
    for (int i = 0; i < cfg.holes + 2; ++i)
      std::swap(order[i], order[i + static_cast<int>(rng.below(static_cast<std::uint64_t>(cells - i)))]);
    GridWorld env;
    env.n = cfg.n;
    env.max_steps = cfg.step_cap();
    env.goal = {order[0] / cfg.n, order[0] % cfg.n};
    env.agent = {order[1] / cfg.n, order[1] % cfg.n};
    for (int h = 0; h < cfg.holes; ++h) env.holes.push_back({order[2 + h] / cfg.n, order[2 + h] % cfg.n});
    if (goal_reachable(env)) return env;
  }
  throw std::runtime_error("make_mission: no solvable layout found");
}

/// Mission families. Training, validation and test layouts come from
/// disjoint substreams of the seed.
enum class MissionFamily : std::uint64_t { kTrain = 1, kValidation = 2, kTest = 3 };

inline GridWorld family_mission(const GridConfig& cfg, std::uint64_t seed, MissionFamily fam, std::uint64_t i) {
  return make_mission(cfg, Stream(seed).substream(static_cast<std::uint64_t>(StreamKey::kDataset),
                                                  static_cast<std::uint64_t>(fam), i));
}

struct EvalReport {
  double win_rate = 0.0;
  double mean_steps = 0.0;
  std::int64_t n_missions = 0;
  std::int64_t wins = 0;
  std::uint64_t seed = 0;

  /// Binomial standard error of the win rate.
  double stderr_win() const {
    return n_missions ? std::sqrt(win_rate * (1.0 - win_rate) / static_cast<double>(n_missions)) : 0.0;
  }
  bool operator==(const EvalReport&) const = default;
};

inline nlohmann::json to_json(const EvalReport& r) {
  return {{"win_rate", r.win_rate}, {"mean_steps", r.mean_steps}, {"n_missions", r.n_missions},
          {"wins", r.wins}, {"seed", r.seed}};
}

/// Q-values for an observation. `noise` is unique to (mission, step).
using PolicyFn = std::function<std::vector<double>(std::span<const float>, const Stream& noise)>;

inline PolicyFn float_policy(const FloatNetwork& net) {
  return [&net](std::span<const float> x, const Stream&) {
    const auto y = forward(net, x);
    return std::vector<double>(y.begin(), y.end());
  };
}
inline PolicyFn quantized_policy(const QuantizedNetwork& q) {
  return [&q](std::span<const float> x, const Stream&) { return quantized_forward(q, x); };
}
inline PolicyFn noisy_policy(const MappedNetwork& net) {
  return [&net](std::span<const float> x, const Stream& noise) { return noisy_forward(net, x, noise); };
}

/// Greedy rollouts over test missions 0..n-1 of the seed's family. Mission i
/// uses noise substream (i, step).
inline EvalReport evaluate_policy(const PolicyFn& policy, const GridConfig& cfg, std::int64_t n_missions,
                                  std::uint64_t seed, MissionFamily fam = MissionFamily::kTest) {
  if (n_missions < 1) throw std::invalid_argument("evaluate_policy: need at least one mission");
  std::vector<int> steps(n_missions);
  std::vector<char> won(n_missions);
  const Stream noise = stage_stream(seed, StreamKey::kEvaluate);
  parallel_for(static_cast<std::size_t>(n_missions), [&](std::size_t i) {
    GridWorld env = family_mission(cfg, seed, fam, i);
    const Stream mission_noise = noise.substream(i);
    while (!env.done) {
      const auto obs = observe(env);
      const auto q = policy(obs, mission_noise.substream(static_cast<std::uint64_t>(env.steps)));
      gridworld_step(env, static_cast<Action>(argmax(std::span<const double>(q))));
    }
    steps[i] = env.steps;
    won[i] = env.won;
  });
  EvalReport r;
  r.n_missions = n_missions;
  r.seed = seed;
  r.wins = std::count(won.begin(), won.end(), 1);
  r.win_rate = static_cast<double>(r.wins) / static_cast<double>(n_missions);
  r.mean_steps = std::accumulate(steps.begin(), steps.end(), 0.0) / static_cast<double>(n_missions);
  return r;
}

struct DqnConfig {
  GridConfig grid;
  int hidden = 64;
  std::int64_t max_steps = 200000;
  int batch = 64;
  double gamma = 0.9;
  double lr = 1e-3;
  int replay = 50000;
  int warmup = 1000;
  int target_sync = 500;
  double eps_start = 1.0;
  double eps_end = 0.05;
  std::int64_t eps_decay_steps = 66666;
  int eval_every = 10000;
  int eval_missions = 1000;
  double target_win = 0.95;
  double weight_clip = 1.0;
  /// When > 0, forward passes use weights quantized to this many bits and
  /// gradients flow straight through to the real-valued weights. Validation
  /// then scores the integer policy at (qat_bits, qat_act_bits).
  int qat_bits = 4;
  int qat_act_bits = 8;
  /// When above qat_bits, successive updates cycle through the widths
  /// qat_bits..qat_max_bits so the policy holds up at all of them.
  int qat_max_bits = 8;
};

/// Observations of the first n training missions, for activation scales.
inline std::vector<std::vector<float>> calibration_observations(const GridConfig& grid, std::uint64_t seed,
                                                                int n = 500) {
  std::vector<std::vector<float>> out;
  for (int i = 0; i < n; ++i) {
    const auto o = observe(family_mission(grid, seed, MissionFamily::kTrain, static_cast<std::uint64_t>(i)));
    out.emplace_back(o.begin(), o.end());
  }
  return out;
}

struct TrainReport {
  FloatNetwork net;
  std::int64_t steps = 0;
  double win_rate = 0.0;  // validation win rate of the returned weights
  bool reached = false;
};

/// DQN with an epsilon-greedy behaviour policy, uniform replay, a periodically
/// synced target network and a Huber loss. Returns the best validated weights;
/// stops early once the validation win rate reaches target_win.
inline TrainReport train_policy(const DqnConfig& cfg, std::uint64_t seed) {
  cfg.grid.validate();
  if (cfg.batch < 1 || cfg.replay < cfg.batch || cfg.hidden < 1 || cfg.max_steps < 0 || cfg.target_sync < 1 ||
      cfg.eval_every < 1 || cfg.qat_bits < 0)
    throw std::invalid_argument("train_policy: invalid hyperparameters");
  const Stream root = stage_stream(seed, StreamKey::kTrain);
  FloatNetwork net = FloatNetwork::init(NetworkArch::mlp(kObservationSize, cfg.hidden, kActions), root.substream(0));
  const int widths = cfg.qat_bits > 0 ? std::max(1, cfg.qat_max_bits - cfg.qat_bits + 1) : 1;
  std::int64_t updates = 0;
  auto view_of = [&](const FloatNetwork& n) {
    return cfg.qat_bits > 0 ? fake_quantize(n, cfg.qat_bits + static_cast<int>(updates % widths)) : n;
  };
  FloatNetwork view = view_of(net);
  FloatNetwork target = view;
  Adam opt;
  opt.lr = cfg.lr;
  opt.clip = cfg.weight_clip;
  Gradients grads(net);
  Stream act_rng = root.substream(1);
  Stream replay_rng = root.substream(2);

  struct Transition {
    std::array<float, kObservationSize> s, s2;
    int a;
    float r;
    bool done;
  };
  std::vector<Transition> replay;
  replay.reserve(cfg.replay);
  std::size_t replay_next = 0;

  const auto calib = cfg.qat_bits > 0 ? calibration_observations(cfg.grid, seed) : std::vector<std::vector<float>>{};
  auto validate = [&](const FloatNetwork& n) {
    if (cfg.qat_bits == 0)
      return evaluate_policy(float_policy(n), cfg.grid, cfg.eval_missions, seed, MissionFamily::kValidation).win_rate;
    const auto q = quantize_network(n, calibrate_quant(n, calib, cfg.qat_bits, cfg.qat_act_bits));
    return evaluate_policy(quantized_policy(q), cfg.grid, cfg.eval_missions, seed, MissionFamily::kValidation).win_rate;
  };

  TrainReport best;
  best.net = net;
  best.win_rate = cfg.max_steps == 0 ? validate(net) : -1.0;
  std::uint64_t episode = 0;
  GridWorld env = family_mission(cfg.grid, seed, MissionFamily::kTrain, episode);
  Tape tape;
  std::vector<float> dout(kActions);

  for (std::int64_t t = 1; t <= cfg.max_steps; ++t) {
    const double frac = std::min(1.0, static_cast<double>(t) / static_cast<double>(std::max<std::int64_t>(cfg.eps_decay_steps, 1)));
    const double eps = cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac;
    const auto s = observe(env);
    int a;
    if (act_rng.uniform() < eps) {
      a = static_cast<int>(act_rng.below(kActions));
    } else {
      const auto q = forward(view, s);
      a = static_cast<int>(argmax(std::span<const float>(q)));
    }
    const StepResult step = gridworld_step(env, static_cast<Action>(a));
    const bool terminal = step.done && (env.won || env.is_hole(env.agent));
    Transition tr{s, observe(env), a, static_cast<float>(step.reward), terminal};
    if (replay.size() < static_cast<std::size_t>(cfg.replay)) replay.push_back(tr);
    else replay[replay_next] = tr;
    replay_next = (replay_next + 1) % static_cast<std::size_t>(cfg.replay);
    if (step.done) env = family_mission(cfg.grid, seed, MissionFamily::kTrain, ++episode);

    if (static_cast<int>(replay.size()) >= std::max(cfg.warmup, cfg.batch)) {
      grads.zero();
      for (int b = 0; b < cfg.batch; ++b) {
        const Transition& x = replay[replay_rng.below(replay.size())];
        double y = x.r;
        if (!x.done) {
          const auto q2 = forward(target, x.s2);
          y += cfg.gamma * *std::max_element(q2.begin(), q2.end());
        }
        forward(view, x.s, tape);
        const double err = tape.acts.back()[x.a] - y;
        std::fill(dout.begin(), dout.end(), 0.0f);
        dout[x.a] = static_cast<float>(std::clamp(err, -1.0, 1.0));
        backward(view, tape, dout, grads);
      }
      opt.step(net, grads, 1.0 / cfg.batch);
      ++updates;
      view = view_of(net);
    }
    if (t % cfg.target_sync == 0) target = view;
    if (t % cfg.eval_every == 0 || t == cfg.max_steps) {
      const double w = validate(net);
      if (w > best.win_rate) {
        best.net = net;
        best.win_rate = w;
        best.steps = t;
      }
      if (w >= cfg.target_win) break;
    }
  }
  best.reached = best.win_rate >= cfg.target_win;
  return best;
}

// ---------------------------------------------------------------------------
// Supervised classification

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Every fifth item (index % 5 == 0) is held out for testing.
inline DatasetSplit split_dataset(const Dataset& d) {
  DatasetSplit s;
  for (std::size_t i = 0; i < d.size(); ++i) (i % 5 == 0 ? s.test : s.train).push_back(i);
  return s;
}

inline float pixel_max(const Dataset& d) {
  const auto it = std::max_element(d.pixels.begin(), d.pixels.end());
  return it == d.pixels.end() || *it == 0 ? 1.0f : static_cast<float>(*it);
}

struct SupervisedConfig {
  int epochs = 20;
  int batch = 32;
  double lr = 2e-3;
  int c1 = 8;
  int c2 = 16;
  int hidden = 32;
  double weight_clip = 1.0;
};

inline NetworkArch supervised_arch(const Dataset& d, const SupervisedConfig& cfg) {
  if (d.height < 5 || d.width < 5) throw std::invalid_argument("supervised: images must be at least 5x5");
  return NetworkArch::small_cnn(static_cast<int>(d.height), static_cast<int>(d.width),
                                static_cast<int>(d.channels), static_cast<int>(d.n_classes), cfg.c1, cfg.c2,
                                cfg.hidden);
}

/// Softmax cross-entropy with Adam over shuffled mini-batches.
inline FloatNetwork train_supervised(const Dataset& d, const SupervisedConfig& cfg, std::uint64_t seed) {
  const Stream root = stage_stream(seed, StreamKey::kTrain);
  FloatNetwork net = FloatNetwork::init(supervised_arch(d, cfg), root.substream(0));
  const auto split = split_dataset(d);
  const float scale = pixel_max(d);
  Adam opt;
  opt.lr = cfg.lr;
  opt.clip = cfg.weight_clip;
  Gradients grads(net);
  Tape tape;
  std::vector<float> dout(d.n_classes);
  std::vector<std::size_t> order = split.train;
  for (int e = 0; e < cfg.epochs; ++e) {
    Stream shuffle = root.substream(1, static_cast<std::uint64_t>(e));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      grads.zero();
      for (std::size_t k = start; k < end; ++k) {
        forward(net, d.image(order[k], scale), tape);
        const auto& z = tape.acts.back();
        const float zmax = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (std::size_t c = 0; c < z.size(); ++c) sum += std::exp(z[c] - zmax);
        for (std::size_t c = 0; c < z.size(); ++c)
          dout[c] = static_cast<float>(std::exp(z[c] - zmax) / sum) - (c == d.labels[order[k]] ? 1.0f : 0.0f);
        backward(net, tape, dout, grads);
      }
      opt.step(net, grads, 1.0 / static_cast<double>(end - start));
    }
  }
  return net;
}

/// Calibration inputs for activation scales: the training images.
inline std::vector<std::vector<float>> calibration_images(const Dataset& d, std::size_t limit = 256) {
  const auto split = split_dataset(d);
  const float scale = pixel_max(d);
  std::vector<std::vector<float>> out;
  for (std::size_t k = 0; k < split.train.size() && k < limit; ++k) out.push_back(d.image(split.train[k], scale));
  return out;
}

using ClassifierFn = std::function<std::vector<double>(std::span<const float>, const Stream& noise)>;

inline ClassifierFn classifier(const MappedNetwork& net) { return noisy_policy(net); }
inline ClassifierFn classifier(const QuantizedNetwork& q) { return quantized_policy(q); }
inline ClassifierFn classifier(const FloatNetwork& f) { return float_policy(f); }

/// Top-1 accuracy over n_samples noisy reads of the test split (one pass when
/// n_samples <= 0). Sample k reads test item k mod |test| with noise
/// substream k, so larger counts repeat items under fresh noise.
inline double eval_supervised(const ClassifierFn& model, const Dataset& d, std::int64_t n_samples,
                              std::uint64_t seed) {
  const auto split = split_dataset(d);
  if (split.test.empty()) throw std::invalid_argument("eval_supervised: no test items");
  const std::size_t n = n_samples <= 0 ? split.test.size() : static_cast<std::size_t>(n_samples);
  const float scale = pixel_max(d);
  const Stream noise = stage_stream(seed, StreamKey::kEvaluate);
  std::vector<char> hit(n, 0);
  parallel_for(n, [&](std::size_t k) {
    const std::size_t item = split.test[k % split.test.size()];
    const auto y = model(d.image(item, scale), noise.substream(k));
    hit[k] = argmax(std::span<const double>(y)) == d.labels[item];
  });
  return static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(n);
}

}  // namespace cimsim
