// Deterministic random number generation. One SplitMix64 stream per
// consumer, forked by name from a parent seed, so adding a new draw site
// never perturbs existing streams.
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace dmg {

namespace detail {
inline uint64_t splitmix_step(uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}
}  // namespace detail

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t s = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
  return detail::splitmix_step(s);
}

class Rng {
public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return detail::splitmix_step(state_); }

  // Child stream tied to (this stream's seed, tag); does not consume from
  // the parent sequence.
  Rng fork(std::string_view tag) const { return Rng(mix_seed(state_, detail::fnv1a(tag))); }
  Rng fork(uint64_t tag) const { return Rng(mix_seed(state_, tag)); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(static_cast<uint64_t>(
                    (static_cast<unsigned __int128>(next_u64()) * span) >> 64));
  }

  // Standard normal via Box-Muller (cosine branch only, so draws stay one
  // uniform pair per sample and replay identically).
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double exponential() { return -std::log(1.0 - uniform()); }

  // Gamma(k, 1) for integer k as a sum of exponentials. Small k only; the
  // speckle model uses k = looks.
  double gamma_int(int k) {
    double acc = 0.0;
    for (int i = 0; i < k; ++i) acc += exponential();
    return acc;
  }

  // Draws index i with probability weights[i] / sum(weights).
  int pick_weighted(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double r = uniform() * total;
    double acc = 0.0;
    for (size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (r < acc) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = uniform_int(0, i);
      std::swap(v[i], v[static_cast<size_t>(j)]);
    }
  }

private:
  uint64_t state_;
};

}  // namespace dmg
