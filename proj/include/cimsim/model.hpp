#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cimsim/rng.hpp"

namespace cimsim {

enum class LayerKind { kDense, kConv2d };

/// One layer of a feed-forward network. Tensors are channel-major (CHW).
/// A dense layer flattens whatever arrives; a conv layer is a valid-padding,
/// stride-1 square convolution lowered to one dot product per output pixel.
struct LayerShape {
  std::string name;
  LayerKind kind = LayerKind::kDense;
  int in_channels = 0;
  int in_h = 1;
  int in_w = 1;
  int out_channels = 0;
  int kernel = 1;
  bool relu = false;

  int out_h() const { return kind == LayerKind::kConv2d ? in_h - kernel + 1 : 1; }
  int out_w() const { return kind == LayerKind::kConv2d ? in_w - kernel + 1 : 1; }
  int positions() const { return out_h() * out_w(); }
  int fan_in() const {
    return kind == LayerKind::kConv2d ? in_channels * kernel * kernel : in_channels * in_h * in_w;
  }
  int input_size() const { return in_channels * in_h * in_w; }
  int output_size() const { return out_channels * positions(); }

  void validate() const {
    if (in_channels < 1 || in_h < 1 || in_w < 1 || out_channels < 1)
      throw std::invalid_argument("layer " + name + ": dimensions must be positive");
    if (kind == LayerKind::kConv2d && (kernel < 1 || kernel > in_h || kernel > in_w))
      throw std::invalid_argument("layer " + name + ": kernel does not fit the input");
  }

  /// Gathers the fan_in inputs feeding output pixel `pos` (im2col row).
  template <typename T, typename U>
  void patch(std::span<const T> input, int pos, std::span<U> out) const {
    if (kind == LayerKind::kDense) {
      for (int i = 0; i < fan_in(); ++i) out[i] = static_cast<U>(input[i]);
      return;
    }
    const int oy = pos / out_w();
    const int ox = pos % out_w();
    int k = 0;
    for (int c = 0; c < in_channels; ++c)
      for (int ky = 0; ky < kernel; ++ky)
        for (int kx = 0; kx < kernel; ++kx)
          out[k++] = static_cast<U>(input[(c * in_h + oy + ky) * in_w + ox + kx]);
  }

  /// Input index of patch element k at output pixel pos.
  int patch_source(int pos, int k) const {
    if (kind == LayerKind::kDense) return k;
    const int c = k / (kernel * kernel);
    const int ky = (k / kernel) % kernel;
    const int kx = k % kernel;
    return (c * in_h + pos / out_w() + ky) * in_w + pos % out_w() + kx;
  }
};

struct NetworkArch {
  std::vector<LayerShape> layers;

  int input_size() const { return layers.front().input_size(); }
  int output_size() const { return layers.back().output_size(); }

  void validate() const {
    if (layers.empty()) throw std::invalid_argument("network: no layers");
    for (const auto& l : layers) l.validate();
    for (std::size_t i = 1; i < layers.size(); ++i)
      if (layers[i].input_size() != layers[i - 1].output_size())
        throw std::invalid_argument("network: layer " + layers[i].name +
                                    " input does not match the previous output");
  }

  static NetworkArch mlp(int inputs, int hidden, int outputs) {
    NetworkArch a;
    a.layers.push_back({"fc1", LayerKind::kDense, inputs, 1, 1, hidden, 1, true});
    a.layers.push_back({"fc2", LayerKind::kDense, hidden, 1, 1, outputs, 1, false});
    a.validate();
    return a;
  }

  /// Two 3x3 convolutions followed by two fully connected layers.
  static NetworkArch small_cnn(int h, int w, int channels, int classes, int c1 = 8, int c2 = 16,
                               int hidden = 32) {
    NetworkArch a;
    a.layers.push_back({"conv1", LayerKind::kConv2d, channels, h, w, c1, 3, true});
    a.layers.push_back({"conv2", LayerKind::kConv2d, c1, h - 2, w - 2, c2, 3, true});
    a.layers.push_back({"fc1", LayerKind::kDense, c2, h - 4, w - 4, hidden, 1, true});
    a.layers.push_back({"fc2", LayerKind::kDense, hidden, 1, 1, classes, 1, false});
    a.validate();
    return a;
  }
};

/// Real-valued network. weights[l] is out_channels x fan_in, row-major.
struct FloatNetwork {
  NetworkArch arch;
  std::vector<std::vector<float>> weights;
  std::vector<std::vector<float>> biases;

  /// He-uniform initialization.
  static FloatNetwork init(const NetworkArch& arch, Stream rng) {
    arch.validate();
    FloatNetwork n;
    n.arch = arch;
    for (std::size_t l = 0; l < arch.layers.size(); ++l) {
      const auto& s = arch.layers[l];
      const double bound = std::sqrt(6.0 / s.fan_in());
      Stream r = rng.substream(l);
      std::vector<float> w(static_cast<std::size_t>(s.out_channels) * s.fan_in());
      for (auto& x : w) x = static_cast<float>((2.0 * r.uniform() - 1.0) * bound);
      n.weights.push_back(std::move(w));
      n.biases.emplace_back(s.out_channels, 0.0f);
    }
    return n;
  }

  void validate() const {
    arch.validate();
    if (weights.size() != arch.layers.size() || biases.size() != arch.layers.size())
      throw std::invalid_argument("network: parameter count does not match the architecture");
    for (std::size_t l = 0; l < arch.layers.size(); ++l) {
      const auto& s = arch.layers[l];
      if (weights[l].size() != static_cast<std::size_t>(s.out_channels) * s.fan_in() ||
          biases[l].size() != static_cast<std::size_t>(s.out_channels))
        throw std::invalid_argument("network: layer " + s.name + " has the wrong parameter shape");
    }
  }
};

/// Activations of every layer boundary; acts[0] is the input.
struct Tape {
  std::vector<std::vector<float>> acts;
};

inline void layer_forward(const LayerShape& s, const std::vector<float>& w, const std::vector<float>& b,
                          std::span<const float> in, std::vector<float>& out) {
  const int fan = s.fan_in();
  const int pos_n = s.positions();
  out.assign(s.output_size(), 0.0f);
  std::vector<float> patch(fan);
  for (int p = 0; p < pos_n; ++p) {
    s.patch(in, p, std::span<float>(patch));
    for (int o = 0; o < s.out_channels; ++o) {
      const float* wr = w.data() + static_cast<std::size_t>(o) * fan;
      float acc = b[o];
      for (int i = 0; i < fan; ++i) acc += wr[i] * patch[i];
      out[o * pos_n + p] = s.relu ? std::max(acc, 0.0f) : acc;
    }
  }
}

inline void forward(const FloatNetwork& net, std::span<const float> x, Tape& tape) {
  if (static_cast<int>(x.size()) != net.arch.input_size())
    throw std::invalid_argument("forward: input size mismatch");
  tape.acts.resize(net.arch.layers.size() + 1);
  tape.acts[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < net.arch.layers.size(); ++l)
    layer_forward(net.arch.layers[l], net.weights[l], net.biases[l], tape.acts[l], tape.acts[l + 1]);
}

inline std::vector<float> forward(const FloatNetwork& net, std::span<const float> x) {
  Tape t;
  forward(net, x, t);
  return t.acts.back();
}

struct Gradients {
  std::vector<std::vector<float>> dw;
  std::vector<std::vector<float>> db;

  explicit Gradients(const FloatNetwork& net) {
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      dw.emplace_back(net.weights[l].size(), 0.0f);
      db.emplace_back(net.biases[l].size(), 0.0f);
    }
  }
  void zero() {
    for (auto& v : dw) std::fill(v.begin(), v.end(), 0.0f);
    for (auto& v : db) std::fill(v.begin(), v.end(), 0.0f);
  }
};

/// Accumulates parameter gradients given dL/d(output) for one sample.
inline void backward(const FloatNetwork& net, const Tape& tape, std::span<const float> dout,
                     Gradients& g) {
  std::vector<float> upstream(dout.begin(), dout.end());
  std::vector<float> down;
  std::vector<float> patch;
  for (std::size_t li = net.arch.layers.size(); li-- > 0;) {
    const auto& s = net.arch.layers[li];
    const auto& out = tape.acts[li + 1];
    const auto& in = tape.acts[li];
    const int fan = s.fan_in();
    const int pos_n = s.positions();
    if (s.relu)
      for (std::size_t i = 0; i < upstream.size(); ++i)
        if (out[i] <= 0.0f) upstream[i] = 0.0f;
    down.assign(in.size(), 0.0f);
    patch.resize(fan);
    for (int p = 0; p < pos_n; ++p) {
      s.patch(std::span<const float>(in), p, std::span<float>(patch));
      for (int o = 0; o < s.out_channels; ++o) {
        const float d = upstream[o * pos_n + p];
        if (d == 0.0f) continue;
        g.db[li][o] += d;
        float* gw = g.dw[li].data() + static_cast<std::size_t>(o) * fan;
        const float* wr = net.weights[li].data() + static_cast<std::size_t>(o) * fan;
        for (int i = 0; i < fan; ++i) {
          gw[i] += d * patch[i];
          if (li > 0) down[s.patch_source(p, i)] += d * wr[i];
        }
      }
    }
    upstream.swap(down);
  }
}

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Weights (not biases) are clipped to [-clip, clip] after each step; 0 disables.
  double clip = 0.0;
  std::int64_t t = 0;
  std::vector<std::vector<double>> m, v;

  void step(FloatNetwork& net, const Gradients& g, double scale = 1.0) {
    std::vector<std::vector<float>*> params;
    std::vector<const std::vector<float>*> grads;
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      params.push_back(&net.weights[l]);
      grads.push_back(&g.dw[l]);
      params.push_back(&net.biases[l]);
      grads.push_back(&g.db[l]);
    }
    if (m.empty())
      for (auto* p : params) {
        m.emplace_back(p->size(), 0.0);
        v.emplace_back(p->size(), 0.0);
      }
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = *params[k];
      const auto& gr = *grads[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = gr[i] * scale;
        m[k][i] = beta1 * m[k][i] + (1.0 - beta1) * gi;
        v[k][i] = beta2 * v[k][i] + (1.0 - beta2) * gi * gi;
        p[i] -= static_cast<float>(lr * (m[k][i] / c1) / (std::sqrt(v[k][i] / c2) + eps));
        if (clip > 0.0 && k % 2 == 0) p[i] = std::clamp(p[i], static_cast<float>(-clip), static_cast<float>(clip));
      }
    }
  }
};

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}
inline std::size_t argmax(std::span<const float> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace cimsim
