#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>

namespace mdlab {

// xoshiro256** with splitmix64 seeding. Hand-rolled so that every stream is
// bit-identical across platforms and standard-library versions; std::
// distributions are not portable.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& word : state_) word = splitmix64(x);
  }

  uint64_t next() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform double in [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Rejection-free modulo bias is negligible for
  // the small n used here, but we reject anyway to keep draws exact.
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_int: n must be > 0");
    const uint64_t threshold = (0 - n) % n;
    for (;;) {
      const uint64_t r = next();
      if (r >= threshold) return r % n;
    }
  }

  // Uniform integer in the inclusive range {lo, ..., hi}.
  int64_t uniform_in(int64_t lo, int64_t hi) {
    if (lo > hi) throw std::invalid_argument("uniform_in: empty range");
    return lo + static_cast<int64_t>(uniform_int(static_cast<uint64_t>(hi - lo + 1)));
  }

  // Draws an index proportional to the nonnegative weights. `total` must be
  // the exact sum of `weights`. CDF scan in index order keeps draws
  // reproducible.
  size_t categorical(std::span<const double> weights, double total) {
    if (!(total > 0.0)) throw std::invalid_argument("categorical: total weight must be > 0");
    const double r = uniform() * total;
    double acc = 0.0;
    size_t last_nonzero = 0;
    for (size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] <= 0.0) continue;
      acc += weights[i];
      last_nonzero = i;
      if (r < acc) return i;
    }
    return last_nonzero;  // guards against round-off at the top of the CDF
  }

  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<uint64_t, 4> state_;
};

// Seed derivation for multi-run jobs: run_seed = mix_seed(base_seed, index).
// Documented mixing function (splitmix64 over the xor of base and index) so
// that permuting execution order never changes any run's stream.
inline uint64_t mix_seed(uint64_t base, uint64_t index) {
  uint64_t x = base ^ (0x510e527fade682d1ULL + index * 0x9e3779b97f4a7c15ULL);
  return Rng::splitmix64(x);
}

}  // namespace mdlab
