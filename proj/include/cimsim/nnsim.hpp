#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cimsim/calib.hpp"
#include "cimsim/effbits.hpp"
#include "cimsim/model.hpp"
#include "cimsim/parallel.hpp"
#include "cimsim/rng.hpp"

namespace cimsim {

/// Smallest power of two >= x (1 for x <= 0).
inline double pow2_ceil(double x) {
  if (!(x > 0.0)) return 1.0;
  return std::exp2(std::ceil(std::log2(x)));
}

/// Symmetric uniform quantization with power-of-two per-layer scales.
/// layer_scales[l] bounds the weights of layer l; act_scales[l] bounds the
/// (non-negative) activations entering layer l.
struct QuantSpec {
  int w_bits = 4;
  int a_bits = 8;
  std::vector<double> layer_scales;
  std::vector<double> act_scales;

  std::int64_t weight_offset() const { return std::int64_t{1} << (w_bits - 1); }
  std::int64_t act_levels() const { return std::int64_t{1} << a_bits; }

  void validate(std::size_t layers) const {
    if (w_bits < 1 || w_bits > 16) throw std::invalid_argument("quant: w_bits must be in [1, 16]");
    if (a_bits < 1 || a_bits > 16) throw std::invalid_argument("quant: a_bits must be in [1, 16]");
    if (layer_scales.size() != layers || act_scales.size() != layers)
      throw std::invalid_argument("quant: one weight and one activation scale per layer");
    for (double s : layer_scales)
      if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("quant: scales must be > 0");
    for (double s : act_scales)
      if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("quant: scales must be > 0");
  }
};

/// Offset-binary codes: q = clamp(round(w / scale * 2^(b-1)), -2^(b-1), 2^(b-1) - 1),
/// stored as q + 2^(b-1).
inline std::vector<std::uint32_t> quantize_weights(std::span<const float> w, int w_bits, double scale) {
  if (w_bits < 1 || w_bits > 16) throw std::invalid_argument("quantize_weights: bad bit-width");
  if (!(scale > 0.0)) throw std::invalid_argument("quantize_weights: scale must be > 0");
  const double half = static_cast<double>(std::int64_t{1} << (w_bits - 1));
  std::vector<std::uint32_t> codes(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!std::isfinite(w[i])) throw std::invalid_argument("quantize_weights: non-finite weight");
    const double q = std::clamp(std::nearbyint(w[i] / scale * half), -half, half - 1.0);
    codes[i] = static_cast<std::uint32_t>(q + half);
  }
  return codes;
}

inline double dequantize_weight(std::uint32_t code, int w_bits, double scale) {
  const std::int64_t half = std::int64_t{1} << (w_bits - 1);
  return static_cast<double>(static_cast<std::int64_t>(code) - half) * scale /
         static_cast<double>(half);
}

/// Unsigned activation code: clamp(round(x / scale * 2^a), 0, 2^a - 1).
inline std::int64_t quantize_activation(double x, int a_bits, double scale) {
  const double levels = static_cast<double>(std::int64_t{1} << a_bits);
  if (std::isnan(x)) throw std::invalid_argument("quantize_activation: NaN activation");
  return static_cast<std::int64_t>(std::clamp(std::nearbyint(x / scale * levels), 0.0, levels - 1.0));
}

/// Chooses power-of-two scales from the weights and from the activations the
/// float network produces on the calibration inputs.
inline QuantSpec calibrate_quant(const FloatNetwork& net, std::span<const std::vector<float>> inputs,
                                 int w_bits, int a_bits) {
  net.validate();
  QuantSpec q;
  q.w_bits = w_bits;
  q.a_bits = a_bits;
  std::vector<double> amax(net.arch.layers.size(), 0.0);
  Tape t;
  for (const auto& x : inputs) {
    forward(net, x, t);
    for (std::size_t l = 0; l < amax.size(); ++l)
      for (float v : t.acts[l]) amax[l] = std::max(amax[l], static_cast<double>(v));
  }
  for (std::size_t l = 0; l < net.arch.layers.size(); ++l) {
    double wmax = 0.0;
    for (float v : net.weights[l]) wmax = std::max(wmax, std::abs(static_cast<double>(v)));
    q.layer_scales.push_back(pow2_ceil(wmax));
    q.act_scales.push_back(pow2_ceil(amax[l]));
  }
  q.validate(net.arch.layers.size());
  return q;
}

/// Copy of the network whose weights are replaced by their quantized values
/// (power-of-two scale per layer). Used for straight-through training.
inline FloatNetwork fake_quantize(const FloatNetwork& net, int w_bits) {
  FloatNetwork q = net;
  for (auto& w : q.weights) {
    double wmax = 0.0;
    for (float v : w) wmax = std::max(wmax, std::abs(static_cast<double>(v)));
    const double scale = pow2_ceil(wmax);
    const auto codes = quantize_weights(w, w_bits, scale);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(dequantize_weight(codes[i], w_bits, scale));
  }
  return q;
}

struct QuantizedNetwork {
  NetworkArch arch;
  QuantSpec quant;
  std::vector<std::vector<std::uint32_t>> codes;  // per layer, out x fan_in
  std::vector<std::vector<double>> biases;        // applied digitally

  /// Real value of one accumulator unit of layer l.
  double unit(std::size_t l) const {
    return quant.layer_scales[l] / static_cast<double>(quant.weight_offset()) *
           quant.act_scales[l] / static_cast<double>(quant.act_levels());
  }
};

inline QuantizedNetwork quantize_network(const FloatNetwork& net, const QuantSpec& spec) {
  net.validate();
  spec.validate(net.arch.layers.size());
  QuantizedNetwork q;
  q.arch = net.arch;
  q.quant = spec;
  for (std::size_t l = 0; l < net.arch.layers.size(); ++l) {
    q.codes.push_back(quantize_weights(net.weights[l], spec.w_bits, spec.layer_scales[l]));
    q.biases.emplace_back(net.biases[l].begin(), net.biases[l].end());
  }
  return q;
}

/// Integer codes of the activations entering layer l.
inline std::vector<std::int64_t> quantize_inputs(const QuantizedNetwork& q, std::size_t l,
                                                 std::span<const double> x) {
  std::vector<std::int64_t> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = quantize_activation(x[i], q.quant.a_bits, q.quant.act_scales[l]);
  return out;
}

inline double finish_output(const QuantizedNetwork& q, std::size_t l, int o, std::int64_t acc) {
  const double y = static_cast<double>(acc) * q.unit(l) + q.biases[l][o];
  return q.arch.layers[l].relu ? std::max(y, 0.0) : y;
}

/// Clean integer inference: exact signed-integer dot products per layer.
inline std::vector<double> quantized_forward(const QuantizedNetwork& q, std::span<const float> input) {
  if (static_cast<int>(input.size()) != q.arch.input_size())
    throw std::invalid_argument("quantized_forward: input size mismatch");
  std::vector<double> x(input.begin(), input.end());
  const std::int64_t off = q.quant.weight_offset();
  for (std::size_t l = 0; l < q.arch.layers.size(); ++l) {
    const auto& s = q.arch.layers[l];
    const auto xq = quantize_inputs(q, l, x);
    const int fan = s.fan_in();
    std::vector<std::int64_t> patch(fan);
    std::vector<double> y(s.output_size());
    for (int p = 0; p < s.positions(); ++p) {
      s.patch(std::span<const std::int64_t>(xq), p, std::span<std::int64_t>(patch));
      for (int o = 0; o < s.out_channels; ++o) {
        const std::uint32_t* c = q.codes[l].data() + static_cast<std::size_t>(o) * fan;
        std::int64_t acc = 0;
        for (int i = 0; i < fan; ++i) acc += (static_cast<std::int64_t>(c[i]) - off) * patch[i];
        y[o * s.positions() + p] = finish_output(q, l, o, acc);
      }
    }
    x.swap(y);
  }
  return x;
}

/// A layer laid out on acc-9 groups. Physical group k = (column * planes +
/// plane) * groups + group holds weight rows [9 * group, 9 * group + 9) of
/// one output column, bit `plane` of their offset-binary codes.
struct MappedLayer {
  int rows = 0;     // fan_in
  int columns = 0;  // output channels
  int groups = 0;   // ceil(rows / 9)
  int planes = 0;   // w_bits
  std::vector<std::uint8_t> bits;         // physical group k, cell i at k * 9 + i
  std::vector<double> eb;                 // effective value of each cell
  std::vector<std::uint32_t> assignment;  // profile index per physical group

  int physical_groups() const { return columns * planes * groups; }
  int group_index(int column, int plane, int group) const {
    return (column * planes + plane) * groups + group;
  }
};

struct MappedNetwork {
  QuantizedNetwork qnet;
  std::vector<MappedLayer> layers;
  std::vector<NoiseProfile> profiles;
  std::uint64_t rng_seed = 0;
};

inline void validate_profiles(std::span<const NoiseProfile> profiles) {
  if (profiles.empty()) throw std::invalid_argument("map_network: no noise profiles");
  for (const auto& p : profiles) {
    if (!std::isfinite(p.mu0) || !std::isfinite(p.mu1) || !(p.sigma0 >= 0.0) || !(p.sigma1 >= 0.0))
      throw std::invalid_argument("map_network: profile " + p.scope + " has invalid statistics");
    if (p.residual.sample_count() == 0)
      throw std::invalid_argument("map_network: profile " + p.scope + " has no residual samples");
  }
}

/// Lays every layer onto acc-9 groups and assigns profiles round-robin from
/// a seeded starting unit. Cells start at their exact bit values.
inline MappedNetwork map_network(const QuantizedNetwork& q, std::vector<NoiseProfile> profiles,
                                 std::uint64_t seed) {
  validate_profiles(profiles);
  q.arch.validate();
  q.quant.validate(q.arch.layers.size());
  MappedNetwork net;
  net.qnet = q;
  net.rng_seed = seed;
  Stream rng = Stream(seed).substream(static_cast<std::uint64_t>(StreamKey::kMapping));
  std::uint64_t next = rng.below(profiles.size());
  for (std::size_t l = 0; l < q.arch.layers.size(); ++l) {
    const auto& s = q.arch.layers[l];
    MappedLayer ml;
    ml.rows = s.fan_in();
    ml.columns = s.out_channels;
    ml.groups = (ml.rows + kGroupSize - 1) / kGroupSize;
    ml.planes = q.quant.w_bits;
    const int k_total = ml.physical_groups();
    ml.bits.assign(static_cast<std::size_t>(k_total) * kGroupSize, 0);
    ml.assignment.resize(k_total);
    for (int c = 0; c < ml.columns; ++c)
      for (int p = 0; p < ml.planes; ++p)
        for (int g = 0; g < ml.groups; ++g) {
          const int k = ml.group_index(c, p, g);
          for (int i = 0; i < kGroupSize; ++i) {
            const int row = g * kGroupSize + i;
            if (row >= ml.rows) break;
            const std::uint32_t code = q.codes[l][static_cast<std::size_t>(c) * ml.rows + row];
            ml.bits[static_cast<std::size_t>(k) * kGroupSize + i] = (code >> p) & 1u;
          }
        }
    for (int k = 0; k < k_total; ++k) {
      ml.assignment[k] = static_cast<std::uint32_t>(next);
      next = (next + 1) % profiles.size();
    }
    ml.eb.assign(ml.bits.begin(), ml.bits.end());
    net.layers.push_back(std::move(ml));
  }
  net.profiles = std::move(profiles);
  return net;
}

/// Integer codes recovered from the bit planes (before injection).
inline std::vector<std::uint32_t> reconstruct_codes(const MappedLayer& ml) {
  std::vector<std::uint32_t> codes(static_cast<std::size_t>(ml.columns) * ml.rows, 0);
  for (int c = 0; c < ml.columns; ++c)
    for (int p = 0; p < ml.planes; ++p)
      for (int g = 0; g < ml.groups; ++g)
        for (int i = 0; i < kGroupSize; ++i) {
          const int row = g * kGroupSize + i;
          if (row >= ml.rows) break;
          if (ml.bits[static_cast<std::size_t>(ml.group_index(c, p, g)) * kGroupSize + i])
            codes[static_cast<std::size_t>(c) * ml.rows + row] |= 1u << p;
        }
  return codes;
}

/// Replaces every cell with a draw from N(mu_b, sigma_b) of its group's
/// profile. Physical group k of layer l draws from substream (l, k).
inline MappedNetwork inject_static(MappedNetwork net, std::uint64_t seed) {
  const Stream root = Stream(seed).substream(static_cast<std::uint64_t>(StreamKey::kInject));
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    MappedLayer& ml = net.layers[l];
    parallel_for(static_cast<std::size_t>(ml.physical_groups()), [&](std::size_t k) {
      const NoiseProfile& prof = net.profiles.at(ml.assignment[k]);
      Stream s = root.substream(l, k);
      std::normal_distribution<double> n(0.0, 1.0);
      for (int i = 0; i < kGroupSize; ++i) {
        const std::size_t cell = k * kGroupSize + i;
        const int b = ml.bits[cell];
        const double sigma = prof.sigma(b);
        ml.eb[cell] = sigma == 0.0 ? prof.mu(b) : prof.mu(b) + sigma * n(s);
      }
    });
  }
  return net;
}

/// Bit-serial analog inference on the mapped network.
///
/// For each activation plane q, weight plane p and group g, one read returns
/// clamp(round(sum of eb over active rows + residual), 0, 9). Reads are
/// recombined as sum_q 2^q sum_p 2^p sum_g partial, then the offset-binary
/// term 2^(w-1) * sum(x) is subtracted. Residuals for output pixel `pos`,
/// column c of layer l come from rng.substream(l, pos, c).
inline std::vector<double> noisy_forward(const MappedNetwork& net, std::span<const float> input,
                                         const Stream& rng) {
  const QuantizedNetwork& q = net.qnet;
  if (static_cast<int>(input.size()) != q.arch.input_size())
    throw std::invalid_argument("noisy_forward: input size mismatch");
  std::vector<double> x(input.begin(), input.end());
  const std::int64_t off = q.quant.weight_offset();
  const int a_bits = q.quant.a_bits;
  for (std::size_t l = 0; l < q.arch.layers.size(); ++l) {
    const auto& s = q.arch.layers[l];
    const MappedLayer& ml = net.layers[l];
    const auto xq = quantize_inputs(q, l, x);
    std::vector<std::int64_t> patch(ml.rows);
    // masks[q * groups + g]: active rows of group g in activation plane q
    std::vector<std::uint16_t> masks(static_cast<std::size_t>(a_bits) * ml.groups);
    std::vector<double> y(s.output_size());
    for (int pos = 0; pos < s.positions(); ++pos) {
      s.patch(std::span<const std::int64_t>(xq), pos, std::span<std::int64_t>(patch));
      std::int64_t xsum = 0;
      std::fill(masks.begin(), masks.end(), 0);
      for (int r = 0; r < ml.rows; ++r) {
        xsum += patch[r];
        for (int b = 0; b < a_bits; ++b)
          if ((patch[r] >> b) & 1)
            masks[static_cast<std::size_t>(b) * ml.groups + r / kGroupSize] |=
                static_cast<std::uint16_t>(1u << (r % kGroupSize));
      }
      for (int c = 0; c < ml.columns; ++c) {
        Stream s_eps = rng.substream(l, static_cast<std::uint64_t>(pos), static_cast<std::uint64_t>(c));
        std::int64_t acc = 0;
        for (int b = 0; b < a_bits; ++b) {
          std::int64_t plane_acc = 0;
          for (int p = 0; p < ml.planes; ++p) {
            std::int64_t partials = 0;
            for (int g = 0; g < ml.groups; ++g) {
              const int k = ml.group_index(c, p, g);
              const double* eb = ml.eb.data() + static_cast<std::size_t>(k) * kGroupSize;
              const std::uint16_t mask = masks[static_cast<std::size_t>(b) * ml.groups + g];
              double raw = 0.0;
              for (int i = 0; i < kGroupSize; ++i)
                if ((mask >> i) & 1u) raw += eb[i];
              raw += net.profiles[ml.assignment[k]].residual.draw(s_eps);
              partials += std::clamp<std::int64_t>(std::llround(raw), 0, kGroupSize);
            }
            plane_acc += partials << p;
          }
          acc += plane_acc << b;
        }
        acc -= off * xsum;
        y[c * s.positions() + pos] = finish_output(q, l, c, acc);
      }
    }
    x.swap(y);
  }
  return x;
}

/// What re-extraction after stress needs: the tuned references stay fixed
/// (the chip is not re-calibrated), cells are re-characterized and re-fitted.
struct DriftContext {
  TuningResult tuning;
  DriftParams drift;
  TuningScope scope = TuningScope::kModule;
  int n_vectors = 256;
  int residual_bins = 41;
  EffBitOptions fit;
  Stream extract_rng;
  std::uint64_t inject_seed = 0;
};

/// Profiles of the modules in their current state.
inline std::vector<NoiseProfile> extract_profiles(std::span<const CrossbarModule> modules,
                                                  const DriftContext& ctx) {
  const auto fitted = extract_effective_bits(modules, ctx.tuning, ctx.n_vectors, ctx.extract_rng, ctx.fit);
  return eb_statistics(fitted, ctx.scope, ctx.residual_bins);
}

/// Stresses every backing cell by the schedule, re-extracts profiles and
/// re-injects them. The group-to-profile assignment is kept.
inline MappedNetwork apply_drift_to_network(const MappedNetwork& net, std::vector<CrossbarModule>& modules,
                                            const std::vector<StressEvent>& schedule,
                                            const DriftContext& ctx) {
  std::int64_t total = 0;
  for (const auto& ev : schedule) {
    if (ev.cycles < 0) throw std::invalid_argument("apply_drift_to_network: negative cycle count");
    total += ev.cycles;
  }
  if (total == 0) return net;
  for (const auto& ev : schedule)
    for (auto& m : modules) stress_module(m, ev, ctx.drift);
  auto profiles = extract_profiles(modules, ctx);
  if (profiles.size() != net.profiles.size())
    throw std::invalid_argument("apply_drift_to_network: modules do not back the network's profiles");
  MappedNetwork out = net;
  out.profiles = std::move(profiles);
  for (auto& ml : out.layers) ml.eb.assign(ml.bits.begin(), ml.bits.end());
  return inject_static(std::move(out), ctx.inject_seed);
}

}  // namespace cimsim
