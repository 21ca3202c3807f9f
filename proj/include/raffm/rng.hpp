#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "raffm/error.hpp"

namespace raffm {

// SplitMix64 finaliser; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t combine_ids(std::uint64_t a, std::uint64_t b) noexcept {
  return mix64(a ^ mix64(b + 0x632BE59BD9B4E019ULL));
}

// Counter-based stream: draw i is mix64(key + i * golden), where key is a hash
// of (seed, stream id). Only integer arithmetic is involved, so sequences are
// identical on every platform. Single owner; give each worker its own id.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), stream_id_(stream_id), key_(combine_ids(seed, stream_id)) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }
  std::uint64_t counter() const noexcept { return counter_; }

  // A child stream of the same master seed; independent of this stream's draws.
  RngStream derive(std::uint64_t sub_id) const {
    return RngStream(seed_, combine_ids(stream_id_, sub_id));
  }

  std::uint64_t next_u64() noexcept {
    return mix64(key_ + (counter_++) * 0xD1B54A32D192ED03ULL);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw ValidationError("uniform_index: empty range");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double normal() noexcept {
    // Box-Muller; 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // log of a Gamma(shape, 1) draw. Working in log space keeps tiny shapes
  // (Dirichlet alpha around 1e-2) from underflowing to zero.
  double log_gamma_draw(double shape) {
    if (!(shape > 0.0) || !std::isfinite(shape)) {
      throw ValidationError(detail::concat("log_gamma_draw: shape must be positive, got ", shape));
    }
    if (shape < 1.0) {
      const double u = 1.0 - uniform();
      return log_gamma_draw(shape + 1.0) + std::log(u) / shape;
    }
    // Marsaglia-Tsang.
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = 1.0 - uniform();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return std::log(d * v);
    }
  }

  // Dirichlet(alpha, ..., alpha) over k categories.
  std::vector<double> dirichlet(std::size_t k, double alpha) {
    std::vector<double> logs(k);
    double peak = -INFINITY;
    for (auto& l : logs) {
      l = log_gamma_draw(alpha);
      peak = std::max(peak, l);
    }
    double total = 0.0;
    for (auto& l : logs) {
      l = std::exp(l - peak);
      total += l;
    }
    for (auto& l : logs) l /= total;
    return logs;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace raffm
