#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "cimsim/model.hpp"

using namespace cimsim;

namespace {

std::vector<float> random_input(Stream& rng, int n) {
  std::vector<float> x(n);
  for (auto& v : x) v = static_cast<float>(rng.uniform());
  return x;
}

// Loss = 0.5 * sum(out^2), so dL/dout = out.
double loss(const FloatNetwork& net, const std::vector<float>& x) {
  const auto y = forward(net, x);
  double s = 0.0;
  for (float v : y) s += 0.5 * v * v;
  return s;
}

void gradient_check(FloatNetwork net, std::uint64_t seed) {
  Stream rng(seed);
  for (auto& b : net.biases)
    for (auto& v : b) v = static_cast<float>(0.1 * rng.uniform());
  const auto x = random_input(rng, net.arch.input_size());
  Tape t;
  forward(net, x, t);
  Gradients g(net);
  backward(net, t, t.acts.back(), g);
  const double h = 1e-2;
  for (std::size_t l = 0; l < net.weights.size(); ++l)
    for (std::size_t i = 0; i < net.weights[l].size(); i += 7) {
      FloatNetwork p = net, m = net;
      p.weights[l][i] += static_cast<float>(h);
      m.weights[l][i] -= static_cast<float>(h);
      const double numeric = (loss(p, x) - loss(m, x)) / (2 * h);
      EXPECT_NEAR(g.dw[l][i], numeric, 2e-2 * std::max(1.0, std::abs(numeric))) << "layer " << l << " w " << i;
    }
}

}  // namespace

TEST(Arch, ShapesChain) {
  const auto cnn = NetworkArch::small_cnn(8, 8, 1, 10);
  EXPECT_EQ(cnn.input_size(), 64);
  EXPECT_EQ(cnn.output_size(), 10);
  EXPECT_EQ(cnn.layers[0].positions(), 36);
  EXPECT_EQ(cnn.layers[1].fan_in(), 72);
  EXPECT_EQ(cnn.layers[2].fan_in(), 16 * 4 * 4);
  NetworkArch bad = NetworkArch::mlp(4, 3, 2);
  bad.layers[1].in_channels = 5;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Arch, ConvPatchMatchesDirectIndexing) {
  const LayerShape s{"c", LayerKind::kConv2d, 2, 5, 4, 3, 3, false};
  std::vector<float> in(s.input_size());
  for (std::size_t i = 0; i < in.size(); ++i) in[i] = static_cast<float>(i);
  std::vector<float> patch(s.fan_in());
  for (int pos = 0; pos < s.positions(); ++pos) {
    s.patch(std::span<const float>(in), pos, std::span<float>(patch));
    const int oy = pos / s.out_w(), ox = pos % s.out_w();
    int k = 0;
    for (int c = 0; c < 2; ++c)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx, ++k) {
          const int src = (c * 5 + oy + ky) * 4 + ox + kx;
          EXPECT_EQ(patch[k], in[src]);
          EXPECT_EQ(s.patch_source(pos, k), src);
        }
  }
}

TEST(Forward, DenseByHand) {
  FloatNetwork n = FloatNetwork::init(NetworkArch::mlp(2, 2, 1), Stream(1));
  n.weights = {{1, -1, 2, 0.5f}, {1, -3}};
  n.biases = {{0, -10}, {0.25f}};
  const auto y = forward(n, std::vector<float>{3, 1});
  // hidden = relu(2, 6.5 - 10) = (2, 0)
  EXPECT_FLOAT_EQ(y[0], 2.25f);
}

TEST(Backward, MlpMatchesFiniteDifferences) {
  gradient_check(FloatNetwork::init(NetworkArch::mlp(6, 5, 3), Stream(3)), 4);
}

TEST(Backward, CnnMatchesFiniteDifferences) {
  gradient_check(FloatNetwork::init(NetworkArch::small_cnn(6, 6, 1, 3, 2, 3, 4), Stream(5)), 6);
}

TEST(AdamTest, ClipsWeightsOnly) {
  FloatNetwork n = FloatNetwork::init(NetworkArch::mlp(2, 2, 1), Stream(1));
  Gradients g(n);
  for (auto& v : g.dw) std::fill(v.begin(), v.end(), -1.0f);
  for (auto& v : g.db) std::fill(v.begin(), v.end(), -1.0f);
  Adam opt;
  opt.lr = 0.5;
  opt.clip = 0.6;
  for (int i = 0; i < 20; ++i) opt.step(n, g);
  for (const auto& w : n.weights)
    for (float v : w) EXPECT_LE(std::abs(v), 0.6f + 1e-6f);
  EXPECT_GT(n.biases[0][0], 0.6f);
}

TEST(Argmax, FirstMaximum) {
  const std::vector<double> v{0.1, 3.0, 3.0, -1.0};
  EXPECT_EQ(argmax(std::span<const double>(v)), 1u);
}
