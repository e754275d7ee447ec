#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cimsim/model.hpp"

namespace cimsim {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

static_assert(std::endian::native == std::endian::little, "containers assume a little-endian host");

inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u16(std::ostream& os, std::uint16_t v) { os.write(reinterpret_cast<const char*>(&v), 2); }

template <typename T>
T get(std::istream& is, const char* what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError(std::string("truncated ") + what);
  return v;
}

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char m[4];
  if (!is.read(m, 4) || std::memcmp(m, magic, 4) != 0)
    throw FormatError(std::string("bad magic, expected ") + magic);
}

}  // namespace io

// ---------------------------------------------------------------------------
// CIMW weights: "CIMW", u32 version, u32 tensor count, then per tensor
// u32 name length, name bytes, u32 rank, rank x u32 dims, f32 data (row-major).

inline constexpr std::uint32_t kCimwVersion = 1;

struct Tensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> data;
};

inline void write_cimw(std::ostream& os, const std::vector<Tensor>& tensors) {
  os.write("CIMW", 4);
  io::put_u32(os, kCimwVersion);
  io::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    std::size_t n = 1;
    for (auto d : t.shape) n *= d;
    if (n != t.data.size()) throw FormatError("tensor " + t.name + ": shape does not match data");
    io::put_u32(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    io::put_u32(os, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) io::put_u32(os, d);
    os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(n * sizeof(float)));
  }
  if (!os) throw FormatError("write_cimw: stream error");
}

inline std::vector<Tensor> read_cimw(std::istream& is) {
  io::expect_magic(is, "CIMW");
  const auto version = io::get<std::uint32_t>(is, "version");
  if (version != kCimwVersion) throw FormatError("CIMW: unsupported version " + std::to_string(version));
  const auto count = io::get<std::uint32_t>(is, "tensor count");
  std::vector<Tensor> out(count);
  for (auto& t : out) {
    const auto len = io::get<std::uint32_t>(is, "name length");
    if (len > 4096) throw FormatError("CIMW: implausible name length");
    t.name.resize(len);
    if (!is.read(t.name.data(), len)) throw FormatError("truncated name");
    const auto rank = io::get<std::uint32_t>(is, "rank");
    if (rank > 8) throw FormatError("CIMW: implausible rank");
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(io::get<std::uint32_t>(is, "dim"));
      n *= t.shape.back();
    }
    if (n > (std::size_t{1} << 28)) throw FormatError("CIMW: tensor too large");
    t.data.resize(n);
    if (!is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n * sizeof(float))))
      throw FormatError("truncated tensor " + t.name);
  }
  return out;
}

/// "<layer>.weight" is [out, fan_in] for dense and [out, in, k, k] for conv;
/// "<layer>.bias" is [out].
inline std::vector<Tensor> network_tensors(const FloatNetwork& net) {
  net.validate();
  std::vector<Tensor> ts;
  for (std::size_t l = 0; l < net.arch.layers.size(); ++l) {
    const auto& s = net.arch.layers[l];
    Tensor w{s.name + ".weight", {}, net.weights[l]};
    if (s.kind == LayerKind::kConv2d)
      w.shape = {static_cast<std::uint32_t>(s.out_channels), static_cast<std::uint32_t>(s.in_channels),
                 static_cast<std::uint32_t>(s.kernel), static_cast<std::uint32_t>(s.kernel)};
    else
      w.shape = {static_cast<std::uint32_t>(s.out_channels), static_cast<std::uint32_t>(s.fan_in())};
    ts.push_back(std::move(w));
    ts.push_back({s.name + ".bias", {static_cast<std::uint32_t>(s.out_channels)}, net.biases[l]});
  }
  return ts;
}

inline FloatNetwork network_from_tensors(const NetworkArch& arch, const std::vector<Tensor>& ts) {
  arch.validate();
  FloatNetwork net;
  net.arch = arch;
  auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& t : ts)
      if (t.name == name) return t;
    throw FormatError("CIMW: missing tensor " + name);
  };
  for (const auto& s : arch.layers) {
    const Tensor& w = find(s.name + ".weight");
    const Tensor& b = find(s.name + ".bias");
    if (w.data.size() != static_cast<std::size_t>(s.out_channels) * s.fan_in() || w.shape.empty() ||
        w.shape[0] != static_cast<std::uint32_t>(s.out_channels))
      throw FormatError("CIMW: tensor " + w.name + " does not match the architecture");
    if (b.data.size() != static_cast<std::size_t>(s.out_channels))
      throw FormatError("CIMW: tensor " + b.name + " does not match the architecture");
    net.weights.push_back(w.data);
    net.biases.push_back(b.data);
  }
  return net;
}

inline void save_network(const std::string& path, const FloatNetwork& net) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path);
  write_cimw(os, network_tensors(net));
}

inline FloatNetwork load_network(const std::string& path, const NetworkArch& arch) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return network_from_tensors(arch, read_cimw(is));
}

// ---------------------------------------------------------------------------
// CIMD images: "CIMD", u32 version, u32 n_items, u32 height, u32 width,
// u32 channels, u32 n_classes, then per item u16 label and h*w*c u8 pixels
// (row-major, channel-last within a pixel).

inline constexpr std::uint32_t kCimdVersion = 1;

struct Dataset {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::uint32_t n_classes = 0;
  std::vector<std::uint16_t> labels;
  std::vector<std::uint8_t> pixels;  // n_items * height * width * channels

  std::size_t size() const { return labels.size(); }
  std::size_t item_size() const { return static_cast<std::size_t>(height) * width * channels; }

  /// Pixels of item i scaled to [0, 1] by `max_value`, in CHW order.
  std::vector<float> image(std::size_t i, float max_value = 255.0f) const {
    const std::size_t hw = static_cast<std::size_t>(height) * width;
    std::vector<float> out(item_size());
    const std::uint8_t* px = pixels.data() + i * item_size();
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t c = 0; c < channels; ++c) out[c * hw + p] = px[p * channels + c] / max_value;
    return out;
  }
};

inline void write_cimd(std::ostream& os, const Dataset& d) {
  if (d.pixels.size() != d.size() * d.item_size()) throw FormatError("CIMD: pixel count mismatch");
  os.write("CIMD", 4);
  for (std::uint32_t v : {kCimdVersion, static_cast<std::uint32_t>(d.size()), d.height, d.width,
                          d.channels, d.n_classes})
    io::put_u32(os, v);
  for (std::size_t i = 0; i < d.size(); ++i) {
    io::put_u16(os, d.labels[i]);
    os.write(reinterpret_cast<const char*>(d.pixels.data() + i * d.item_size()),
             static_cast<std::streamsize>(d.item_size()));
  }
  if (!os) throw FormatError("write_cimd: stream error");
}

inline Dataset read_cimd(std::istream& is) {
  io::expect_magic(is, "CIMD");
  const auto version = io::get<std::uint32_t>(is, "version");
  if (version != kCimdVersion) throw FormatError("CIMD: unsupported version " + std::to_string(version));
  Dataset d;
  const auto n = io::get<std::uint32_t>(is, "n_items");
  d.height = io::get<std::uint32_t>(is, "height");
  d.width = io::get<std::uint32_t>(is, "width");
  d.channels = io::get<std::uint32_t>(is, "channels");
  d.n_classes = io::get<std::uint32_t>(is, "n_classes");
  if (d.item_size() == 0 || d.item_size() > (1u << 24) || d.n_classes == 0)
    throw FormatError("CIMD: implausible header");
  d.labels.resize(n);
  d.pixels.resize(static_cast<std::size_t>(n) * d.item_size());
  for (std::uint32_t i = 0; i < n; ++i) {
    d.labels[i] = io::get<std::uint16_t>(is, "label");
    if (d.labels[i] >= d.n_classes) throw FormatError("CIMD: label out of range");
    if (!is.read(reinterpret_cast<char*>(d.pixels.data() + static_cast<std::size_t>(i) * d.item_size()),
                 static_cast<std::streamsize>(d.item_size())))
      throw FormatError("truncated pixels");
  }
  return d;
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_cimd(is);
}

}  // namespace cimsim
