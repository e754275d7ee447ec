#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "cimsim/tasks.hpp"

using namespace cimsim;

namespace {

GridWorld corridor() {
  GridWorld env;
  env.n = 3;
  env.agent = {0, 0};
  env.goal = {0, 2};
  env.holes = {{1, 1}};
  env.max_steps = 10;
  return env;
}

// Oracle policy: breadth-first shortest path, ignoring the network.
std::vector<double> bfs_policy(const GridWorld& env) {
  std::vector<int> dist(env.n * env.n, -1);
  std::vector<Pos> q{env.goal};
  dist[env.goal.r * env.n + env.goal.c] = 0;
  for (std::size_t i = 0; i < q.size(); ++i)
    for (int a = 0; a < kActions; ++a) {
      const Pos p = moved(q[i], static_cast<Action>(a));
      if (!env.inside(p) || env.is_hole(p) || dist[p.r * env.n + p.c] >= 0) continue;
      dist[p.r * env.n + p.c] = dist[q[i].r * env.n + q[i].c] + 1;
      q.push_back(p);
    }
  std::vector<double> out(kActions, -1e9);
  for (int a = 0; a < kActions; ++a) {
    const Pos p = moved(env.agent, static_cast<Action>(a));
    if (env.inside(p) && !env.is_hole(p) && dist[p.r * env.n + p.c] >= 0) out[a] = -dist[p.r * env.n + p.c];
  }
  return out;
}

Dataset toy_dataset() {
  Dataset d;
  d.height = 6;
  d.width = 6;
  d.channels = 1;
  d.n_classes = 2;
  Stream rng(1);
  for (int i = 0; i < 100; ++i) {
    const int label = i % 2;
    d.labels.push_back(static_cast<std::uint16_t>(label));
    for (int p = 0; p < 36; ++p) {
      const bool left = p % 6 < 3;
      d.pixels.push_back(static_cast<std::uint8_t>((left == (label == 0) ? 200 : 20) + rng.below(30)));
    }
  }
  return d;
}

}  // namespace

TEST(GridWorldEnv, StepsRewardsAndWalls) {
  GridWorld env = corridor();
  auto r = gridworld_step(env, Action::kUp);
  EXPECT_EQ(env.agent, (Pos{0, 0}));
  EXPECT_DOUBLE_EQ(r.reward, -0.01);
  r = gridworld_step(env, Action::kRight);
  EXPECT_FALSE(r.done);
  r = gridworld_step(env, Action::kRight);
  EXPECT_TRUE(r.done);
  EXPECT_TRUE(env.won);
  EXPECT_DOUBLE_EQ(r.reward, 1.0);
  EXPECT_THROW(gridworld_step(env, Action::kLeft), std::logic_error);

  GridWorld hole = corridor();
  hole.agent = {1, 0};
  r = gridworld_step(hole, Action::kRight);
  EXPECT_TRUE(r.done);
  EXPECT_FALSE(hole.won);
  EXPECT_DOUBLE_EQ(r.reward, -1.0);

  GridWorld capped = corridor();
  capped.max_steps = 2;
  gridworld_step(capped, Action::kUp);
  EXPECT_TRUE(gridworld_step(capped, Action::kUp).done);
  EXPECT_FALSE(capped.won);
}

TEST(GridWorldEnv, Observation) {
  const auto o = observe(corridor());
  EXPECT_EQ(o[0], 1.0f);  // wall north
  EXPECT_EQ(o[1], 0.0f);
  EXPECT_EQ(o[2], 0.0f);
  EXPECT_EQ(o[3], 1.0f);  // wall west
  EXPECT_EQ(o[5], 1.0f);  // goal two columns east of a 3-wide grid
  EXPECT_EQ(o[4] + o[6] + o[7], 0.0f);
}

TEST(Missions, SolvableDistinctAndReplayable) {
  const GridConfig cfg;
  std::set<std::vector<int>> layouts;
  for (std::uint64_t i = 0; i < 300; ++i) {
    const GridWorld env = family_mission(cfg, 7, MissionFamily::kTest, i);
    EXPECT_TRUE(goal_reachable(env));
    EXPECT_FALSE(env.agent == env.goal);
    EXPECT_EQ(env.holes.size(), 3u);
    for (const auto& h : env.holes) EXPECT_FALSE(h == env.agent || h == env.goal);
    EXPECT_EQ(env.max_steps, 100);
    const GridWorld again = family_mission(cfg, 7, MissionFamily::kTest, i);
    EXPECT_EQ(again.agent, env.agent);
    EXPECT_EQ(again.holes, env.holes);
    std::vector<int> key{env.agent.r, env.agent.c, env.goal.r, env.goal.c};
    for (const auto& h : env.holes) key.insert(key.end(), {h.r, h.c});
    layouts.insert(key);
  }
  EXPECT_GT(layouts.size(), 250u);
  const GridWorld a = family_mission(cfg, 7, MissionFamily::kTrain, 0);
  const GridWorld b = family_mission(cfg, 7, MissionFamily::kTest, 0);
  EXPECT_FALSE(a.agent == b.agent && a.goal == b.goal && a.holes == b.holes);
  EXPECT_THROW((GridConfig{2, 0, 0}).validate(), std::invalid_argument);
}

TEST(Evaluate, ShortestPathPolicyAlwaysWins) {
  const GridConfig cfg;
  // Observations do not identify the layout, so the oracle replays it.
  std::int64_t wins = 0;
  for (std::uint64_t i = 0; i < 200; ++i) {
    GridWorld env = family_mission(cfg, 3, MissionFamily::kTest, i);
    while (!env.done) gridworld_step(env, static_cast<Action>(argmax(std::span<const double>(bfs_policy(env)))));
    wins += env.won;
  }
  EXPECT_EQ(wins, 200);

  const PolicyFn always_up = [](std::span<const float>, const Stream&) { return std::vector<double>{1, 0, 0, 0}; };
  const auto r = evaluate_policy(always_up, cfg, 200, 3);
  EXPECT_EQ(r.n_missions, 200);
  EXPECT_LT(r.win_rate, 0.5);
  EXPECT_EQ(r, evaluate_policy(always_up, cfg, 200, 3));
  EXPECT_THROW(evaluate_policy(always_up, cfg, 0, 3), std::invalid_argument);
}

TEST(Evaluate, GreedyObservationPolicyBeatsChance) {
  // Move toward the goal along any free axis; a simple reactive baseline.
  const PolicyFn greedy = [](std::span<const float> o, const Stream&) {
    std::vector<double> q(kActions);
    for (int a = 0; a < kActions; ++a) q[a] = o[4 + a] - 2.0 * o[a];
    return q;
  };
  const auto r = evaluate_policy(greedy, GridConfig{}, 500, 9);
  EXPECT_GT(r.win_rate, 0.5);
  EXPECT_LE(r.stderr_win(), 0.5 / std::sqrt(500.0) + 1e-12);
}

TEST(Training, ShortRunIsDeterministic) {
  DqnConfig cfg;
  cfg.max_steps = 3000;
  cfg.hidden = 16;
  cfg.eval_every = 1500;
  cfg.eval_missions = 50;
  const auto a = train_policy(cfg, 4);
  const auto b = train_policy(cfg, 4);
  EXPECT_EQ(a.net.weights, b.net.weights);
  EXPECT_EQ(a.win_rate, b.win_rate);
  for (const auto& w : a.net.weights)
    for (float v : w) EXPECT_LE(std::abs(v), cfg.weight_clip + 1e-6);
}

TEST(Supervised, SplitAndToyTraining) {
  const Dataset d = toy_dataset();
  const auto s = split_dataset(d);
  EXPECT_EQ(s.test.size(), 20u);
  EXPECT_EQ(s.train.size(), 80u);
  for (auto i : s.test) EXPECT_EQ(i % 5, 0u);

  SupervisedConfig cfg;
  cfg.epochs = 30;
  cfg.batch = 8;
  cfg.c1 = 2;
  cfg.c2 = 4;
  cfg.hidden = 8;
  const auto net = train_supervised(d, cfg, 1);
  EXPECT_GE(eval_supervised(classifier(net), d, 0, 1), 0.95);

  // More samples than test items cycle through the split.
  const ClassifierFn first_class = [](std::span<const float>, const Stream&) { return std::vector<double>{1, 0}; };
  EXPECT_DOUBLE_EQ(eval_supervised(first_class, d, 0, 1), 0.5);
  EXPECT_DOUBLE_EQ(eval_supervised(first_class, d, 40, 1), 0.5);
  EXPECT_DOUBLE_EQ(eval_supervised(first_class, d, 3, 1), 2.0 / 3.0);
}
