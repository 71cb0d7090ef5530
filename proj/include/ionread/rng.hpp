#pragma once
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string_view>

namespace ionread::rng {

inline constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ull;

/// SplitMix64 finalizer (stateless bit mix).
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Counter-seeded xoshiro256** stream with the sampling primitives the
/// simulator needs. All draws are fully determined by the construction key,
/// independent of platform and thread schedule.
class Stream {
 public:
  explicit Stream(std::uint64_t key) {
    std::uint64_t sm = key;
    for (auto& w : s_) {
      sm += kGoldenGamma;
      w = mix64(sm);
    }
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = kGoldenGamma;
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n), Lemire's multiply-shift (n > 0).
  std::uint32_t next_below(std::uint32_t n) {
    return static_cast<std::uint32_t>(
        (static_cast<unsigned __int128>(next_u64() >> 32) * n) >> 32);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Exponential with the given mean (= 1/rate).
  double exponential(double mean) { return -mean * std::log1p(-uniform()); }

  /// Standard normal, Marsaglia polar method (one value per call).
  double normal() {
    for (;;) {
      const double u = 2.0 * uniform() - 1.0;
      const double v = 2.0 * uniform() - 1.0;
      const double s = u * u + v * v;
      if (s > 0.0 && s < 1.0) return u * std::sqrt(-2.0 * std::log(s) / s);
    }
  }

  /// Poisson variate. Large means are split into chunks; the sum of
  /// independent Poissons is Poisson, so the law is exact at any mean.
  long poisson(double mean) {
    if (!(mean >= 0.0)) throw std::invalid_argument("poisson: mean must be >= 0");
    long n = 0;
    while (mean > kChunk) {
      n += poisson_small(kChunk);
      mean -= kChunk;
    }
    return n + poisson_small(mean);
  }

  /// Gamma(shape, scale) for integer shape >= 1.
  double gamma_integer(long shape, double scale) {
    if (shape < 1) throw std::invalid_argument("gamma_integer: shape must be >= 1");
    if (shape <= 16) {
      double acc = 0.0;
      for (long i = 0; i < shape; ++i) acc += exponential(1.0);
      return acc * scale;
    }
    // Marsaglia-Tsang squeeze for large shapes.
    const double d = static_cast<double>(shape) - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      const double x = normal();
      const double t = 1.0 + c * x;
      if (t <= 0.0) continue;
      const double v = t * t * t;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v * scale;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v)))
        return d * v * scale;
    }
  }

 private:
  static constexpr double kChunk = 60.0;

  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  long poisson_small(double mean) {
    const double limit = std::exp(-mean);
    long k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform();
    } while (p > limit);
    return k - 1;
  }

  std::uint64_t s_[4];
};

/// Derive a stream for (seed, index, purpose). Streams for distinct triples
/// are statistically independent and carry no sequential dependence, so
/// trials can be generated in any order or in parallel.
inline Stream stream_for(std::uint64_t seed, std::uint64_t index,
                         std::string_view purpose) {
  std::uint64_t key = mix64(seed + kGoldenGamma);
  key = mix64(key ^ mix64(index * kGoldenGamma + 0x6A09E667F3BCC909ull));
  key = mix64(key ^ fnv1a(purpose));
  return Stream(key);
}

}  // namespace ionread::rng
