#pragma once

#include <cmath>
#include <cstdint>
#include <span>

namespace mergelane::rng {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// splitmix64 finalizer (Steele/Lea/Flood). Full avalanche, cheap, portable.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ull;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBull;
  x ^= x >> 31;
  return x;
}

constexpr std::uint64_t combine(std::uint64_t seed, std::uint64_t value) {
  return mix64(seed ^ (mix64(value + kGolden) + (seed << 6) + (seed >> 2)));
}

constexpr double to_u01(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;  // [0, 1)
}

// Sequential stream. Used where draw order is inherently sequential
// (inter-arrival gaps); everything else uses stateless per-key draws so
// that consuming one stream can never shift another.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ += kGolden;
    return mix64(state_);
  }

  double u01() { return to_u01(next()); }

 private:
  std::uint64_t state_;
};

// Stateless keyed draws: u01_at(stream, k...) is a pure function of its
// arguments. Replays and cross-policy runs stay aligned by construction.
inline double u01_at(std::uint64_t stream, std::uint64_t a) {
  return to_u01(combine(stream, a));
}

inline double u01_at(std::uint64_t stream, std::uint64_t a, std::uint64_t b) {
  return to_u01(combine(combine(stream, a), b));
}

// Inverse-CDF exponential; u in [0,1), rate > 0.
inline double exponential(double u, double rate) {
  return -std::log1p(-u) / rate;
}

// Inverse-CDF draw from a small pmf; returns an index in [0, pmf.size()).
inline std::size_t pick_discrete(double u, std::span<const double> pmf) {
  double cum = 0.0;
  for (std::size_t i = 0; i + 1 < pmf.size(); ++i) {
    cum += pmf[i];
    if (u < cum) return i;
  }
  return pmf.empty() ? 0 : pmf.size() - 1;
}

// Named substreams derived from one per-replicate seed. Changing how one
// purpose consumes randomness never perturbs the others.
struct Streams {
  std::uint64_t arrivals = 0;
  std::uint64_t vehicle_class = 0;
  std::uint64_t passengers = 0;
  std::uint64_t imperfection = 0;
  std::uint64_t access = 0;
  std::uint64_t violation = 0;

  static Streams derive(std::uint64_t master_seed, std::uint64_t replicate) {
    const std::uint64_t run_seed = combine(mix64(master_seed + kGolden), replicate);
    Streams s;
    s.arrivals = combine(run_seed, 1);
    s.vehicle_class = combine(run_seed, 2);
    s.passengers = combine(run_seed, 3);
    s.imperfection = combine(run_seed, 4);
    s.access = combine(run_seed, 5);
    s.violation = combine(run_seed, 6);
    return s;
  }
};

}  // namespace mergelane::rng
