#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace amortda {

// Deterministic, portable PRNG. xoshiro256++ core with splitmix64 seeding;
// gaussians via Box-Muller. The standard library distributions are
// implementation-defined, which would break bit-reproducibility of datasets
// and checkpoints across toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed) : root_(seed) {
    uint64_t x = seed;
    for (auto& s : s_) s = splitmix64(x);
  }

  // Independent stream labelled by up to three indices. Streams are derived
  // from the root seed, not the evolving state, so derivation order does not
  // matter and streams are stable regardless of thread scheduling.
  Rng stream(uint64_t a, uint64_t b = 0, uint64_t c = 0) const {
    uint64_t x = root_;
    uint64_t h = splitmix64(x);
    x = h ^ (a + 0x9e3779b97f4a7c15ULL);
    h = splitmix64(x);
    x = h ^ (b + 0x9e3779b97f4a7c15ULL);
    h = splitmix64(x);
    x = h ^ (c + 0x9e3779b97f4a7c15ULL);
    return Rng(splitmix64(x));
  }

  uint64_t root_seed() const { return root_; }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0,1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  void fill_normal(double* out, int n, double mean = 0.0, double stddev = 1.0) {
    for (int i = 0; i < n; ++i) out[i] = normal(mean, stddev);
  }

  /// Uniform random permutation (Fisher-Yates).
  void permutation(int n, std::vector<int>& out) {
    out.resize(n);
    for (int i = 0; i < n; ++i) out[i] = i;
    for (int i = n - 1; i > 0; --i) std::swap(out[i], out[uniform_int(i + 1)]);
  }

  /// Uniform random derangement (no fixed points), by rejection. n >= 2.
  void derangement(int n, std::vector<int>& out) {
    for (;;) {
      permutation(n, out);
      bool ok = true;
      for (int i = 0; i < n; ++i)
        if (out[i] == i) {
          ok = false;
          break;
        }
      if (ok) return;
    }
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t root_;
  uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace amortda
