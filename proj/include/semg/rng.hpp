#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>

namespace semg {

/// SplitMix64 step. Used both to expand a 64-bit seed into xoshiro state and
/// to mix seed-derivation tags.
constexpr std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Derives an independent child seed from a master seed and a list of tags
/// (subject id, setting index, ...). The derivation folds each tag into a
/// SplitMix64 chain:  s0 = master;  s_{i+1} = splitmix64(s_i ^ tag_i).
std::uint64_t derive_seed(std::uint64_t master,
                          std::initializer_list<std::uint64_t> tags) noexcept;

/// xoshiro256** 1.0 (Blackman & Vigna). Portable, integer-only state
/// transitions so sequences are identical across platforms and compilers.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed) noexcept;

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return ~result_type{0}; }

  result_type operator()() noexcept { return next(); }
  result_type next() noexcept;

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [0, n). n must be > 0. Unbiased (rejection sampling).
  std::uint64_t below(std::uint64_t n) noexcept;

  /// Standard normal via the Box-Muller transform (one value per call).
  double normal() noexcept;

 private:
  std::array<std::uint64_t, 4> s_{};
};

}  // namespace semg
