#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "cimsim/effbits.hpp"
#include "cimsim/formats.hpp"
#include "cimsim/nnsim.hpp"

namespace cimsim {

inline std::string sha256_hex(const void* data, std::size_t n) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(data, n, md, &len, EVP_sha256(), nullptr)) throw std::runtime_error("sha256 failed");
  std::ostringstream o;
  for (unsigned int i = 0; i < len; ++i) o << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return o.str();
}

inline std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

inline std::string read_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_binary(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !out.write(bytes.data(), static_cast<std::streamsize>(bytes.size())))
    throw FormatError("cannot write " + path);
}

inline std::string sha256_file(const std::string& path) { return sha256_hex(read_binary(path)); }

// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const LayerShape& s) {
  return {{"name", s.name},
          {"kind", s.kind == LayerKind::kConv2d ? "conv2d" : "dense"},
          {"in_channels", s.in_channels},
          {"in_h", s.in_h},
          {"in_w", s.in_w},
          {"out_channels", s.out_channels},
          {"kernel", s.kernel},
          {"relu", s.relu}};
}

inline LayerShape layer_from_json(const nlohmann::json& j) {
  LayerShape s;
  s.name = j.at("name").get<std::string>();
  const auto kind = j.at("kind").get<std::string>();
  if (kind != "conv2d" && kind != "dense") throw FormatError("layer " + s.name + ": unknown kind " + kind);
  s.kind = kind == "conv2d" ? LayerKind::kConv2d : LayerKind::kDense;
  s.in_channels = j.at("in_channels").get<int>();
  s.in_h = j.at("in_h").get<int>();
  s.in_w = j.at("in_w").get<int>();
  s.out_channels = j.at("out_channels").get<int>();
  s.kernel = j.at("kernel").get<int>();
  s.relu = j.at("relu").get<bool>();
  return s;
}

inline nlohmann::json to_json(const NetworkArch& a) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : a.layers) layers.push_back(to_json(l));
  return layers;
}

inline NetworkArch arch_from_json(const nlohmann::json& j) {
  NetworkArch a;
  for (const auto& l : j) a.layers.push_back(layer_from_json(l));
  a.validate();
  return a;
}

inline nlohmann::json to_json(const QuantSpec& q) {
  return {{"w_bits", q.w_bits}, {"a_bits", q.a_bits}, {"layer_scales", q.layer_scales}, {"act_scales", q.act_scales}};
}

inline QuantSpec quant_from_json(const nlohmann::json& j) {
  QuantSpec q;
  q.w_bits = j.at("w_bits").get<int>();
  q.a_bits = j.at("a_bits").get<int>();
  q.layer_scales = j.at("layer_scales").get<std::vector<double>>();
  q.act_scales = j.at("act_scales").get<std::vector<double>>();
  return q;
}

namespace detail {

template <typename T>
void append(std::string& out, const std::vector<T>& v) {
  const auto* p = reinterpret_cast<const char*>(v.data());
  out.append(p, p + v.size() * sizeof(T));
}

template <typename T>
void take(const std::string& in, std::size_t& pos, std::vector<T>& v, std::size_t n) {
  if (pos + n * sizeof(T) > in.size()) throw FormatError("mapped network sidecar is truncated");
  v.resize(n);
  std::memcpy(v.data(), in.data() + pos, n * sizeof(T));
  pos += n * sizeof(T);
}

}  // namespace detail

/// Mapped network snapshot: the JSON carries the structure, quantization,
/// profiles and the digest of the binary sidecar; the sidecar holds, per
/// layer, codes (u32), biases (f64), bits (u8), assignment (u32) and
/// eb (f64), little-endian.
struct MappedSnapshot {
  nlohmann::json meta;
  std::string sidecar;
};

inline MappedSnapshot snapshot(const MappedNetwork& net) {
  MappedSnapshot s;
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& ml = net.layers[l];
    layers.push_back({{"rows", ml.rows}, {"columns", ml.columns}, {"groups", ml.groups}, {"planes", ml.planes}});
    detail::append(s.sidecar, net.qnet.codes[l]);
    detail::append(s.sidecar, net.qnet.biases[l]);
    detail::append(s.sidecar, ml.bits);
    detail::append(s.sidecar, ml.assignment);
    detail::append(s.sidecar, ml.eb);
  }
  nlohmann::json profiles = nlohmann::json::array();
  for (const auto& p : net.profiles) profiles.push_back(to_json(p));
  s.meta = {{"kind", "mapped_network"},
            {"version", 1},
            {"arch", to_json(net.qnet.arch)},
            {"quant", to_json(net.qnet.quant)},
            {"rng_seed", net.rng_seed},
            {"layers", layers},
            {"profiles", profiles},
            {"sidecar_sha256", sha256_hex(s.sidecar)}};
  return s;
}

inline MappedNetwork restore(const MappedSnapshot& s) {
  const auto& j = s.meta;
  if (j.value("kind", "") != "mapped_network" || j.value("version", 0) != 1)
    throw FormatError("not a version-1 mapped network snapshot");
  if (sha256_hex(s.sidecar) != j.at("sidecar_sha256").get<std::string>())
    throw FormatError("mapped network sidecar digest mismatch");
  MappedNetwork net;
  net.qnet.arch = arch_from_json(j.at("arch"));
  net.qnet.quant = quant_from_json(j.at("quant"));
  net.qnet.quant.validate(net.qnet.arch.layers.size());
  net.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  for (const auto& p : j.at("profiles")) net.profiles.push_back(profile_from_json(p));
  std::size_t pos = 0;
  const auto& jl = j.at("layers");
  if (jl.size() != net.qnet.arch.layers.size()) throw FormatError("mapped network: layer count mismatch");
  for (std::size_t l = 0; l < jl.size(); ++l) {
    const auto& shape = net.qnet.arch.layers[l];
    MappedLayer ml;
    ml.rows = jl[l].at("rows").get<int>();
    ml.columns = jl[l].at("columns").get<int>();
    ml.groups = jl[l].at("groups").get<int>();
    ml.planes = jl[l].at("planes").get<int>();
    if (ml.rows != shape.fan_in() || ml.columns != shape.out_channels ||
        ml.groups != (ml.rows + kGroupSize - 1) / kGroupSize || ml.planes != net.qnet.quant.w_bits)
      throw FormatError("mapped network: layer " + shape.name + " geometry mismatch");
    const std::size_t k = static_cast<std::size_t>(ml.physical_groups());
    std::vector<std::uint32_t> codes;
    std::vector<double> biases;
    detail::take(s.sidecar, pos, codes, static_cast<std::size_t>(ml.rows) * ml.columns);
    detail::take(s.sidecar, pos, biases, static_cast<std::size_t>(ml.columns));
    detail::take(s.sidecar, pos, ml.bits, k * kGroupSize);
    detail::take(s.sidecar, pos, ml.assignment, k);
    detail::take(s.sidecar, pos, ml.eb, k * kGroupSize);
    for (auto a : ml.assignment)
      if (a >= net.profiles.size()) throw FormatError("mapped network: assignment refers to a missing profile");
    net.qnet.codes.push_back(std::move(codes));
    net.qnet.biases.push_back(std::move(biases));
    net.layers.push_back(std::move(ml));
  }
  if (pos != s.sidecar.size()) throw FormatError("mapped network sidecar has trailing bytes");
  return net;
}

}  // namespace cimsim
