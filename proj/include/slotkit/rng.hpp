#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace slotkit {

/// Deterministic random source. Wraps std::mt19937_64 but implements its own
/// uniform/normal/integer transforms, since the std distribution sequences
/// are implementation-defined and would break cross-platform reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller. No cached spare: keeps the serialized
  /// state equal to the engine state.
  double normal() {
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0,1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  /// Uniform integer in [0, n). Rejection sampling, bias-free.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) return 0;
    std::uint64_t rem = std::uint64_t(-1) % n;
    std::uint64_t lim = std::uint64_t(-1) - rem;  // multiples of n fit in [0, lim)
    std::uint64_t u;
    do {
      u = next_u64();
    } while (u >= lim);
    return u % n;
  }

  std::string save_state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void restore_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
  }

  /// Derives an independent stream seed, e.g. per scene or per eval pass.
  static std::uint64_t derive(std::uint64_t master, std::uint64_t stream,
                              std::uint64_t index = 0) {
    std::uint64_t x = master;
    x = mix(x ^ (0x9e3779b97f4a7c15ULL + stream));
    x = mix(x ^ (0xbf58476d1ce4e5b9ULL * (index + 1)));
    return x;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {  // splitmix64 finalizer
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace slotkit
