#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace fsens {

// Derives an independent seed from a master seed, a purpose label and
// optional indices (epoch, step, member, ...). Streams with different labels
// never share state, so enabling one source of randomness leaves the others
// untouched.
std::uint64_t derive_seed(std::uint64_t master, std::string_view label,
                          std::initializer_list<std::uint64_t> indices = {});

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

/// Seeded random stream with portable conversions (no reliance on the
/// standard library's distribution implementations).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  static Rng stream(std::uint64_t master, std::string_view label,
                    std::initializer_list<std::uint64_t> indices = {}) {
    return Rng(derive_seed(master, label, indices));
  }

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace fsens
