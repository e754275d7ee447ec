#pragma once

#include <cstdint>
#include <limits>

namespace cimsim {

/// Stafford variant 13 finalizer (the splitmix64 output function).
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Counter-based random stream.
///
/// A stream is identified by a 64-bit id derived from the master seed and a
/// key path (stage, module, group, trial, ...). Substreams are derived from
/// the id only, never from how many numbers were already drawn, so a
/// computation that keys its randomness by index produces the same values
/// whether it runs serially or fanned out over threads.
///
/// Satisfies UniformRandomBitGenerator, so std distributions can draw from it.
class Stream {
 public:
  using result_type = std::uint64_t;

  Stream() : Stream(0) {}
  explicit Stream(std::uint64_t seed) : id_(mix64(seed + kGolden)), state_(id_) {}

  Stream substream(std::uint64_t key) const {
    Stream s;
    s.id_ = mix64(id_ ^ mix64(key + kGolden) ^ kSubstreamSalt);
    s.state_ = s.id_;
    return s;
  }

  template <typename... Keys>
  Stream substream(std::uint64_t key, std::uint64_t next, Keys... rest) const {
    return substream(key).substream(next, static_cast<std::uint64_t>(rest)...);
  }

  std::uint64_t id() const { return id_; }

  result_type operator()() {
    state_ += kGolden;
    return mix64(state_);
  }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Lemire's multiply-shift; the bias for n << 2^64 is negligible here.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>((*this)()) * n) >> 64);
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
  static constexpr std::uint64_t kSubstreamSalt = 0x632be59bd9b4e019ULL;

  std::uint64_t id_;
  std::uint64_t state_;
};

/// Stage keys used when deriving substreams from the master seed.
enum class StreamKey : std::uint64_t {
  kBuild = 1,
  kCharacterize = 2,
  kCalibrate = 3,
  kExtract = 4,
  kMapping = 5,
  kInject = 6,
  kForward = 7,
  kTrain = 8,
  kEvaluate = 9,
  kDrift = 10,
  kDataset = 11,
};

inline Stream stage_stream(std::uint64_t seed, StreamKey key) {
  return Stream(seed).substream(static_cast<std::uint64_t>(key));
}

}  // namespace cimsim
