#pragma once

#include <array>
#include <cstdint>

namespace encap {

// Philox4x32-10 counter-based generator. A stream is identified by its key;
// split() derives an independent child key so initialisation order of layers
// never perturbs the numbers another layer draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : key_(seed) {}

  Rng split(std::uint64_t stream) const;

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::uint64_t key() const { return key_; }

 private:
  void refill();

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int avail_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// One Philox4x32-10 block, exposed for the known-answer test.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                        std::array<std::uint32_t, 2> key);

}  // namespace encap
