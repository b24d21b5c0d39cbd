#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace minivis {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Binary mask, H rows x W cols, values in {0, 1}.
using Mask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

// Deterministic RNG wrapper. std::mt19937_64 has a pinned bit stream, but the
// standard distributions are implementation-defined, so the few draws we need
// are derived from raw 64-bit words here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return std::ldexp(static_cast<double>(engine_() >> 11), -53); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1;
    // Rejection sampling keeps the draw exactly uniform.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % span;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return lo + static_cast<int>(x % span);
  }

  // Standard normal via Box-Muller (no cached spare, keeps replay trivial).
  double normal() {
    const double u1 = std::max(uniform(), 1e-300);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<int>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// FNV-1a, used for config/manifest fingerprints and seed derivation.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = fnv1a(tag);
  h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h;
}

// Axis-aligned box, [x0, x1) x [y0, y1) in pixel coordinates.
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return std::max(0.0, x1 - x0); }
  double height() const { return std::max(0.0, y1 - y0); }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }
};

inline double box_iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double iy = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

}  // namespace minivis
