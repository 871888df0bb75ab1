#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace tally {

// Deterministic random source. The engine (mt19937_64) is fully specified by
// the standard; every distribution below is derived from the raw stream by
// hand so that sequences are bit-identical across platforms and standard
// library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) {
      throw std::invalid_argument("Rng::uniform_index: empty range");
    }
    const std::uint64_t span = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t x = engine_();
    while (x >= limit) {
      x = engine_();
    }
    return static_cast<std::size_t>(x % span);
  }

  // Standard normal, Box-Muller without a cached spare so the full generator
  // state is exactly the engine state (matters for checkpoint round-trips).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) {
      u1 = uniform();
    }
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Gamma(alpha, 1), Marsaglia-Tsang squeeze; alpha < 1 is boosted through
  // Gamma(alpha + 1) * U^(1/alpha).
  double gamma(double alpha) {
    if (alpha <= 0.0) {
      throw std::invalid_argument("Rng::gamma: alpha must be positive");
    }
    if (alpha < 1.0) {
      const double u = uniform();
      return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      while (v <= 0.0) {
        x = normal();
        v = 1.0 + c * x;
      }
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) {
        return d * v;
      }
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) {
        return d * v;
      }
    }
  }

  // Beta(a, b) as G_a / (G_a + G_b).
  double beta(double a, double b) {
    const double g1 = gamma(a);
    const double g2 = gamma(b);
    const double s = g1 + g2;
    if (s <= 0.0) {
      return 0.5;  // both gammas underflowed; split the tie
    }
    return g1 / s;
  }

  // Engine state as text; mt19937_64 stream operators are standard-specified.
  std::string state_string() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state_string(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (!is) {
      throw std::runtime_error("Rng::set_state_string: malformed state");
    }
  }

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace tally
