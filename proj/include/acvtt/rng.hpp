#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace acvtt {

/// Seeded generator with platform-independent draws: the engine is the
/// standard-specified mt19937_64 and the distributions are implemented here
/// rather than taken from <random>, whose distributions vary by library.
class Rng {
  public:
    explicit Rng(std::uint64_t seed);
    /// Derives an independent stream from several integers (seed, stage, step, ...).
    Rng(std::initializer_list<std::uint64_t> words);

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal via Box-Muller.
    double normal();
    /// Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
    std::size_t below(std::size_t n);
    /// k distinct values from [0, n) in draw order (partial Fisher-Yates).
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  private:
    std::mt19937_64 engine_;
};

}  // namespace acvtt
