#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace msl {

// Counter-based deterministic generator (splitmix64). Every random quantity
// in the project is derived from an explicit 64-bit seed through this class,
// so any artifact can be rebuilt from the seeds in its manifest.
//
//   state_{n+1} = state_n + 0x9e3779b97f4a7c15
//   output_n    = fmix64(state_{n+1})
//
// split(key) forks a statistically independent stream from the current state
// without advancing it. normal() feeds two uniforms through Box-Muller and
// discards the sibling deviate, keeping the stream position a pure function
// of the call count.
class Rng {
 public:
  static constexpr uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

  explicit Rng(uint64_t seed) : state_(seed) {}

  static uint64_t fmix64(uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }

  // Order-sensitive combine of two seeds into a fresh stream key.
  static uint64_t mix(uint64_t a, uint64_t b) {
    return fmix64(a + kGamma + fmix64(b + kGamma));
  }
  static uint64_t mix(uint64_t a, uint64_t b, uint64_t c) {
    return mix(mix(a, b), c);
  }

  uint64_t next_u64() {
    state_ += kGamma;
    return fmix64(state_);
  }

  Rng split(uint64_t key) const { return Rng(mix(state_, key)); }

  // Uniform double in (0, 1]; never returns 0 so log() stays finite.
  double uniform() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  // Inclusive on both ends. Modulo bias is ~span/2^64, irrelevant here.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (lo > hi) throw std::invalid_argument("Rng::uniform_int: lo > hi");
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() <= p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j =
          static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::vector<int64_t> permutation(int64_t n) {
    std::vector<int64_t> p(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
    shuffle(p);
    return p;
  }

 private:
  static constexpr double kPi = 3.14159265358979323846;
  uint64_t state_;
};

}  // namespace msl
