#pragma once

#include <cstdint>
#include <string>

namespace snet {

// Deterministic PRNG with explicitly-coded distributions. std::mt19937_64 is
// portable bit-for-bit, but the std distributions are not; every draw here is
// spelled out so two builds with the same seed produce identical parameters,
// datasets, and shuffles on any platform.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

    std::uint64_t next_u64();

    // Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi);
    // Inclusive integer range.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
    // Standard normal via Box-Muller (no caching, draw order is stable).
    double normal();
    double normal(double mean, double stddev);
    // Normal(0, stddev) rejected outside [lo, hi].
    double truncated_normal(double stddev, double lo, double hi);

  private:
    std::uint64_t state_;
};

// splitmix64 step; used both inside Rng and for seed derivation.
std::uint64_t mix_u64(std::uint64_t x);

// FNV-1a; lets parameter streams depend on the parameter name instead of
// declaration order.
std::uint64_t hash_name(const std::string& name);

// Combine a base seed with tags into an independent stream seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag_a, std::uint64_t tag_b);

}  // namespace snet
