#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace ldgm {

/// Mix a seed, a stream label and an index into a 64-bit engine seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label, std::uint64_t index = 0);

/// Seeded random stream. Distribution code is local so sequences do not
/// depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t engine_seed) : engine_(engine_seed) {}
  Rng(std::uint64_t seed, std::string_view label) : engine_(derive_seed(seed, label)) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }
  /// Index drawn proportionally to `weights` (need not be normalized).
  int categorical(std::span<const double> weights);
  /// Child stream; does not advance this one.
  Rng fork(std::string_view label, std::uint64_t index = 0) const;

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Rng seeded_rng(std::uint64_t seed, std::string_view stream_label) {
  return Rng(seed, stream_label);
}

}  // namespace ldgm
