#pragma once

// Seeded random streams. Every Monte-Carlo routine splits its work into
// fixed-size chunks; chunk c draws from Rng(derive_seed(seed, c)), so output
// depends on (seed, chunk size) and never on thread count or scheduling.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace fblcrd {

/// SplitMix64 finalizer.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits. Avoids std::uniform_real_distribution
  /// whose output is implementation-defined.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Uniform on (0, 1).
  double uniform_open() {
    double u;
    do {
      u = uniform();
    } while (u == 0.0);
    return u;
  }

  /// Standard normal by the Marsaglia polar method.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  double exponential() { return -std::log(uniform_open()); }

  /// Index drawn from the cumulative table `cdf` (last entry ~ 1).
  std::size_t categorical(std::span<const double> cdf) {
    const double u = uniform() * cdf.back();
    std::size_t lo = 0;
    std::size_t hi = cdf.size() - 1;
    while (lo < hi) {
      const std::size_t mid = (lo + hi) / 2;
      if (u < cdf[mid]) {
        hi = mid;
      } else {
        lo = mid + 1;
      }
    }
    return lo;
  }

  /// Flat Dirichlet(1, ..., 1) draw.
  std::vector<double> dirichlet_flat(std::size_t k) {
    std::vector<double> w(k);
    double total = 0.0;
    for (auto& x : w) {
      x = exponential();
      total += x;
    }
    for (auto& x : w) x /= total;
    return w;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline std::vector<double> cumulative(std::span<const double> pmf) {
  std::vector<double> cdf(pmf.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < pmf.size(); ++i) {
    acc += pmf[i];
    cdf[i] = acc;
  }
  return cdf;
}

}  // namespace fblcrd
