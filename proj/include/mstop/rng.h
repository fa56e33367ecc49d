#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

namespace mstop {

// SplitMix64 finalizer; used to derive independent stream seeds from a
// root seed plus stream identifiers.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> ids) {
  std::uint64_t s = mix64(root);
  for (auto id : ids) s = mix64(s ^ mix64(id + 0x632be59bd9b4e019ULL));
  return s;
}

// mt19937_64 with platform-independent uniform draws (std distributions
// are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::size_t below(std::size_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % n);
  }

  // Index drawn proportionally to non-negative weights; the weights need
  // not be normalized. Returns weights.size() when every weight is zero.
  std::size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) return weights.size();
    const double u = uniform() * total;
    double acc = 0.0;
    std::size_t last_positive = weights.size();
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] <= 0.0) continue;
      acc += weights[i];
      last_positive = i;
      if (u < acc) return i;
    }
    return last_positive;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mstop
