#pragma once

#include <cstdint>
#include <vector>

namespace crate {

// Deterministic generator with a documented algorithm so results are
// reproducible across platforms and standard-library versions:
//
//   * the 64-bit seed is expanded into 256 bits of state with SplitMix64
//     (Steele/Lea/Flood finalizer, constant 0x9E3779B97F4A7C15),
//   * raw draws come from xoshiro256++ (Blackman/Vigna 2019):
//     result = rotl(s0 + s3, 23) + s0, followed by the xor/shift update,
//   * uniforms take the top 53 bits: (x >> 11) * 2^-53,
//   * normals use Box-Muller on two uniforms, returning the cosine branch
//     first and caching the sine branch for the next call.
//
// std::mt19937 plus std::normal_distribution is avoided on purpose: the
// distribution adaptors are implementation-defined, which would break the
// bit-for-bit reproducibility contract.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  // Standard normal.
  double normal();
  // Uniform integer in [0, n). n must be positive. Uses rejection sampling
  // so the distribution is exact and the draw count depends only on the
  // stream, never on platform arithmetic.
  std::size_t uniform_index(std::size_t n);

  // Independent child stream for worker `id`, derived by hashing (seed, id)
  // through SplitMix64. Streams with distinct ids never share state, so
  // sharded work stays reproducible regardless of scheduling.
  Rng stream(std::uint64_t id) const;

  // Fisher-Yates shuffle driven by this generator.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_[4];
  std::uint64_t seed_;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace crate
