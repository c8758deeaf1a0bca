#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lossforge/tensor.hpp"

namespace lossforge {

// All randomness flows from a single root seed through named sub-streams
// (e.g. "data", "init", "batches", "augment"). Enabling one consumer never
// perturbs another, and reruns with the same root seed are bit-identical.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}

  static std::uint64_t substream_seed(std::uint64_t root, const std::string& name) {
    // FNV-1a over the name, mixed with the root via splitmix64.
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : name) {
      h ^= c;
      h *= 1099511628211ull;
    }
    std::uint64_t z = root ^ h;
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static RngStream substream(std::uint64_t root, const std::string& name) {
    return RngStream(substream_seed(root, name));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) { return engine_() % n; }

  // Standard normal via Box-Muller (no cached second draw, so consumption
  // order is explicit and reproducible).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  std::vector<double> normal_vec(int n) {
    std::vector<double> out(static_cast<size_t>(n));
    for (auto& v : out) v = normal();
    return out;
  }

  // Uniform draw from the unit ball in R^d: normalized Gaussian direction
  // scaled by U^(1/d).
  std::vector<double> unit_ball(int d) {
    std::vector<double> v = normal_vec(d);
    double n2 = 0.0;
    for (double x : v) n2 += x * x;
    double n = std::sqrt(n2);
    if (n == 0.0) n = 1.0;
    double r = std::pow(uniform(), 1.0 / d);
    for (double& x : v) x = x / n * r;
    return v;
  }

  // In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& xs) {
    for (size_t i = xs.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(xs[i - 1], xs[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace lossforge
