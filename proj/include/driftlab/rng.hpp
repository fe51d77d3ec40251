#pragma once

// Seeded randomness for all simulations. Every stream is derived by hashing
// (master_seed, stream_id, index, ...) so that path i is a pure function of
// its identifiers: regeneration is bit-identical and independent of thread
// count or generation order. Normal variates are produced in-repo (Box-Muller
// over xoshiro256++) rather than via <random> distributions, whose output is
// implementation-defined.

#include <array>
#include <cmath>
#include <cstdint>

namespace driftlab {

inline std::uint64_t splitmix64_next(std::uint64_t& x) {
  x += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Order-sensitive combine with full avalanche.
inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL);
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t substream_seed(std::uint64_t master, std::uint64_t stream,
                                    std::uint64_t index) {
  return hash_combine(hash_combine(master, stream), index);
}

inline std::uint64_t substream_seed(std::uint64_t master, std::uint64_t stream,
                                    std::uint64_t index, std::uint64_t sub) {
  return hash_combine(substream_seed(master, stream, index), sub);
}

// xoshiro256++ (Blackman/Vigna). State seeded through splitmix64.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& w : state_) w = splitmix64_next(x);
    if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; pairs are cached per stream.
  double next_gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - next_unit();  // (0, 1]
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  static std::uint64_t rotl(std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
  }

  std::array<std::uint64_t, 4> state_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Stream ids used by the library. Experiments derive further substreams.
namespace streams {
inline constexpr std::uint64_t outer = 0x01;
inline constexpr std::uint64_t continuation = 0x02;
inline constexpr std::uint64_t ensemble = 0x03;
inline constexpr std::uint64_t comparison = 0x04;
}  // namespace streams

}  // namespace driftlab
